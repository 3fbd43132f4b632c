import os

import pytest
import torch

torch.set_num_threads(int(os.environ.get("WACO_THREADS", "1")))

from waco.corpus import CorpusSpec, generate_corpus, load_manifest  # noqa: E402


def small_spec(**kw) -> CorpusSpec:
    sizes = kw.pop("sizes", None) or {
        "asr_train": 40, "asr_dev": 10, "st_train": 20, "st_dev": 8, "st_test": 8, "mt_train": 60, "mt_dev": 8,
    }
    base = dict(n_source_words=20, feat_dim=8, sizes=sizes, seed=7)
    base.update(kw)
    return CorpusSpec(**base)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = small_spec()
    generate_corpus(spec, root)
    return root, spec, {s: load_manifest(root / f"{s}.tsv") for s in spec.sizes}


def finite_diff_check(fn, tensors, n_coords=6, h=1e-5, seed=0):
    """Compare autograd against central differences on a few coordinates of each tensor.

    ``fn`` maps nothing to a scalar double tensor, reading ``tensors`` in place.
    Returns the worst relative error seen. The denominator has an absolute
    floor because some gradients are exactly zero (attention key biases,
    by softmax shift invariance) and double-precision roundoff in the
    difference quotient is around 1e-9.
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        flat = t.data.view(-1)
        g = t.grad.view(-1)
        picks = torch.randperm(flat.numel(), generator=gen)[:n_coords]
        for i in picks.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(numeric - g[i].item()) / max(1e-4, abs(numeric) + abs(g[i].item()))
            worst = max(worst, err)
    return worst


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
