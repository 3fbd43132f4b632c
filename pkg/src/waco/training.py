"""Optimisation: schedule, Adam, batching, the three training stages, checkpoint averaging."""

from __future__ import annotations

import collections
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from .corpus.bpe import BpeVocab
from .data import Batch, Example, collate
from .eval.decode import DecodeConfig, beam_decode
from .eval.metrics import bleu
from .losses import ContrastiveConfig, NoAlignablePairs, loss_ft, loss_pt
from .model import WacoModel, save_checkpoint

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Non-finite loss or gradient."""


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    frame_budget_per_batch: int = 4000
    token_budget_per_batch: int = 1200
    max_steps: int = 3000
    eval_interval: int = 100
    keep_last_k: int = 10
    label_smoothing: float = 0.1
    tau: float = 0.2
    lam: float = 0.0
    pooling: str = "mean"
    layer: str = "before"
    dedup_negatives: bool = False
    clip_norm: float = 5.0
    eval_beam: int = 4
    eval_max_len: int = 40
    seed: int = 1

    def validate(self) -> None:
        errs = []
        if self.warmup_steps < 1:
            errs.append("warmup_steps must be >= 1")
        if self.keep_last_k < 1:
            errs.append("keep_last_k must be >= 1")
        if self.peak_lr <= 0:
            errs.append("peak_lr must be positive")
        if not 0 <= self.label_smoothing < 1:
            errs.append("label_smoothing must lie in [0, 1)")
        if self.tau <= 0:
            errs.append("tau must be positive")
        if errs:
            raise ValueError("; ".join(errs))

    def contrastive(self) -> ContrastiveConfig:
        c = ContrastiveConfig(self.tau, self.pooling, self.layer, self.dedup_negatives)
        c.validate()
        return c

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    return cfg.peak_lr * min(step / cfg.warmup_steps, math.sqrt(cfg.warmup_steps / step))


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    state.step += 1
    lr = lr_schedule(state.step, cfg)
    b1, b2 = cfg.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps))
    return state


def clip_grad_norm(grads: Dict[str, Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g.mul_(scale)
    return norm


# -- batching --------------------------------------------------------------------

def make_batches(lengths: Sequence[int], budget: int, seed: int, bucket: int = 100) -> List[List[int]]:
    """One epoch of index batches whose padded size (count x max length) fits ``budget``.

    Indices are shuffled by a seeded permutation, sorted by length inside
    windows of ``bucket`` items to limit padding, packed greedily, and the
    batch order is shuffled again with the same generator.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lengths)).tolist()
    batches: List[List[int]] = []
    for w in range(0, len(order), bucket):
        window = sorted(order[w:w + bucket], key=lambda i: (lengths[i], i))
        cur: List[int] = []
        cur_max = 0
        for i in window:
            new_max = max(cur_max, lengths[i])
            if cur and new_max * (len(cur) + 1) > budget:
                batches.append(cur)
                cur, new_max = [], lengths[i]
            cur.append(i)
            cur_max = new_max
        if cur:
            batches.append(cur)
    perm = rng.permutation(len(batches)).tolist()
    return [batches[i] for i in perm]


def padding_fraction(lengths: Sequence[int], batches: Sequence[Sequence[int]]) -> float:
    real = sum(lengths[i] for b in batches for i in b)
    padded = sum(len(b) * max(lengths[i] for i in b) for b in batches)
    return 1 - real / padded


# -- checkpoint averaging -----------------------------------------------------------

def average_states(states: Sequence[Dict[str, Tensor]]) -> Dict[str, Tensor]:
    if not states:
        raise ValueError("nothing to average")
    return {k: torch.stack([s[k].double() for s in states]).mean(0).to(states[0][k].dtype) for k in states[0]}


def _snapshot(model: WacoModel) -> Dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# -- training loop -----------------------------------------------------------------

@dataclass
class StageResult:
    model: WacoModel
    best_metric: float
    best_step: int
    history: List[dict]
    ring_steps: List[int]


def _fmt(x: float) -> float:
    return float(f"{x:.10g}")


def train_stage(model: WacoModel, examples: Sequence[Example], vocab: BpeVocab, cfg: TrainConfig,
                stage: str, loss_fn: Callable[[WacoModel, Batch], Tuple[Tensor, Dict[str, float]]],
                eval_fn: Callable[[WacoModel], float], higher_is_better: bool,
                out_dir: Optional[Path] = None, average_ring: bool = False,
                budget: Optional[int] = None) -> StageResult:
    """Generic step loop shared by every stage.

    Every ``eval_interval`` steps (and at the end) the dev metric is computed;
    a checkpoint is saved whenever it ties or beats the best so far. With
    ``average_ring`` the final parameters are the mean of the last
    ``keep_last_k`` saves, otherwise the best save is restored.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    lengths = [e.length for e in examples]
    budget = budget or cfg.frame_budget_per_batch
    params = {n: p for n, p in model.named_parameters()}
    state = AdamState()
    history: List[dict] = []
    ring: collections.deque = collections.deque(maxlen=cfg.keep_last_k)
    best = -math.inf if higher_is_better else math.inf
    best_step = 0
    best_state = _snapshot(model)
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")

    def evaluate(step: int) -> float:
        nonlocal best, best_step, best_state
        model.eval()
        metric = float(eval_fn(model))
        model.train()
        better = metric >= best if higher_is_better else metric <= best
        if better:
            best, best_step = metric, step
            best_state = _snapshot(model)
            ring.append((step, best_state))
            if out_dir is not None and average_ring:
                save_checkpoint(out_dir / f"ckpt_{step}.waco", model, best_state)
                kept = {s for s, _ in ring}
                for f in out_dir.glob("ckpt_*.waco"):
                    if int(f.stem.split("_")[1]) not in kept:
                        f.unlink()
        return metric

    try:
        model.train()
        step = 0
        epoch = 0
        while step < cfg.max_steps:
            for idx in make_batches(lengths, budget, cfg.seed * 100003 + epoch):
                if step >= cfg.max_steps:
                    break
                batch = collate([examples[i] for i in idx], vocab)
                try:
                    loss, terms = loss_fn(model, batch)
                except NoAlignablePairs:
                    continue
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite {stage} loss at step {step + 1}")
                model.zero_grad(set_to_none=True)
                loss.backward()
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                gnorm = clip_grad_norm(grads, cfg.clip_norm)
                adam_step(params, grads, state, cfg)
                step = state.step
                rec = {"step": step, "stage": stage, "lr": _fmt(lr_schedule(step, cfg)),
                       "loss": _fmt(loss.item()), "terms": {k: _fmt(v) for k, v in terms.items()},
                       "grad_norm": _fmt(gnorm), "seed": cfg.seed}
                if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                    rec["dev"] = _fmt(evaluate(step))
                    log.info("%s step %d loss %.4f dev %.4f", stage, step, rec["loss"], rec["dev"])
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            epoch += 1
            if epoch > 10 * cfg.max_steps:
                raise RuntimeError(f"{stage}: no trainable batches")
    finally:
        if log_fh:
            log_fh.close()

    if average_ring and ring:
        final = average_states([s for _, s in ring])
    else:
        final = best_state
    model.load_state_dict(final)
    model.eval()
    return StageResult(model, best, best_step, history, [s for s, _ in ring])


# -- stage wrappers -------------------------------------------------------------------

def dev_bleu(vocab: BpeVocab, dev: Sequence[Example], source: str, cfg: TrainConfig) -> Callable[[WacoModel], float]:
    refs = [" ".join(e.utt.translation) for e in dev]
    dcfg = DecodeConfig(beam_size=cfg.eval_beam, length_penalty_alpha=1.0, max_len=cfg.eval_max_len)

    def fn(model: WacoModel) -> float:
        return bleu(beam_decode(model, vocab, dev, source, "translation", dcfg), refs)
    return fn


def pretrain_mt(model: WacoModel, vocab: BpeVocab, train: Sequence[Example], dev: Sequence[Example],
                cfg: TrainConfig, out_dir: Optional[Path] = None) -> StageResult:
    """Train embedding + joint Transformer on text pairs; keeps the best dev-BLEU checkpoint."""
    eps = cfg.label_smoothing
    pad = vocab.pad_id

    def loss_fn(m: WacoModel, b: Batch):
        from .losses import ce_label_smooth

        logits = m.joint_forward(m.text_memory(b.src), b.src_mask, b.st_in, b.st_in != pad)
        loss = ce_label_smooth(logits, b.st_out, eps, pad)
        return loss, {"mt": loss.item()}

    return train_stage(model, train, vocab, cfg, "pretrain_mt", loss_fn, dev_bleu(vocab, dev, "text", cfg),
                       True, out_dir, budget=cfg.token_budget_per_batch)


def pretrain_crossmodal(model: WacoModel, vocab: BpeVocab, train: Sequence[Example], dev: Sequence[Example],
                        cfg: TrainConfig, method: str = "waco", out_dir: Optional[Path] = None) -> StageResult:
    """Pre-train on ASR pairs with the chosen objective; keeps the best dev-loss checkpoint."""
    ccfg = cfg.contrastive()
    dev_batches = [collate(dev[i:i + 64], vocab, with_translation=False) for i in range(0, len(dev), 64)]

    def loss_fn(m: WacoModel, b: Batch):
        return loss_pt(m, b, ccfg, method)

    @torch.no_grad()
    def eval_fn(m: WacoModel) -> float:
        vals = []
        for b in dev_batches:
            try:
                vals.append(float(loss_pt(m, b, ccfg, method)[0]))
            except NoAlignablePairs:
                pass
        return float(np.mean(vals))

    return train_stage(model, train, vocab, cfg, f"pretrain_{method}", loss_fn, eval_fn, False, out_dir)


def pretrain_waco(model, vocab, train, dev, cfg, out_dir=None) -> StageResult:
    return pretrain_crossmodal(model, vocab, train, dev, cfg, "waco", out_dir)


def finetune(model: WacoModel, vocab: BpeVocab, train: Sequence[Example], dev: Sequence[Example],
             cfg: TrainConfig, out_dir: Optional[Path] = None) -> StageResult:
    """Multi-task fine-tuning; final parameters average the last ``keep_last_k`` best-BLEU saves."""
    ccfg = cfg.contrastive()

    def loss_fn(m: WacoModel, b: Batch):
        return loss_ft(m, b, cfg.lam, cfg.label_smoothing, ccfg, vocab.pad_id)

    return train_stage(model, train, vocab, cfg, "finetune", loss_fn, dev_bleu(vocab, dev, "speech", cfg),
                       True, out_dir, average_ring=True)
