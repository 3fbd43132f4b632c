"""Readers and writers for manifests, feature files and alignment files."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

FEAT_MAGIC = b"WACOFEAT"
MANIFEST_HEADER = ("id", "features", "n_frames", "transcript", "translation")

Interval = Tuple[str, int, int]


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data."""


@dataclass
class Utterance:
    id: str
    features: Optional[np.ndarray]
    transcript: List[str]
    translation: Optional[List[str]] = None
    word_intervals: Optional[List[Interval]] = None
    features_path: str = ""

    @property
    def n_frames(self) -> int:
        return 0 if self.features is None else int(self.features.shape[0])

    def with_translation(self, words: Sequence[str]) -> "Utterance":
        return replace(self, translation=list(words))


def check_intervals(intervals: Sequence[Interval], n_frames: int, where: str = "") -> None:
    prev_end = 0
    for word, start, end in intervals:
        if not (0 <= start < end <= n_frames):
            raise CorpusError(f"{where}: interval {word!r} [{start},{end}) outside [0,{n_frames})")
        if start < prev_end:
            raise CorpusError(f"{where}: interval {word!r} overlaps or is out of order")
        prev_end = end


def write_features(path: str | Path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    if arr.ndim != 2:
        raise CorpusError("features must be a 2-d frame-major matrix")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FEAT_MAGIC:
        raise CorpusError(f"{path}: bad feature-file magic")
    if len(data) < 16:
        raise CorpusError(f"{path}: truncated header")
    n, d = struct.unpack("<II", data[8:16])
    payload = data[16:]
    if len(payload) != 4 * n * d:
        raise CorpusError(f"{path}: payload holds {len(payload)} bytes, header says {n}x{d}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)


def write_alignment(path: str | Path, intervals: Sequence[Interval]) -> None:
    ordered = sorted(intervals, key=lambda iv: iv[1])
    Path(path).write_text("".join(f"{w}\t{s}\t{e}\n" for w, s, e in ordered), encoding="utf-8")


def load_alignment(path: str | Path, n_frames: Optional[int] = None) -> List[Interval]:
    out: List[Interval] = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}:{ln}: expected word<TAB>start<TAB>end")
        try:
            out.append((parts[0], int(parts[1]), int(parts[2])))
        except ValueError:
            raise CorpusError(f"{path}:{ln}: non-integer frame index") from None
    check_intervals(out, n_frames if n_frames is not None else max([e for _, _, e in out], default=0), str(path))
    return out


def write_manifest(path: str | Path, utts: Sequence[Utterance]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE)
        w.writerow(MANIFEST_HEADER)
        for u in sorted(utts, key=lambda u: u.id):
            trans = " ".join(u.translation) if u.translation is not None else ""
            w.writerow([u.id, u.features_path, u.n_frames, " ".join(u.transcript), trans])


def load_manifest(path: str | Path, with_alignments: bool = True) -> List[Utterance]:
    """Read a manifest and the feature (and ``<id>.align``) files it references.

    Paths in the ``features`` column are relative to the manifest's directory.
    Alignment files are looked up next to each feature file's parent
    ``align/`` directory and are optional.
    """
    path = Path(path)
    root = path.parent
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise CorpusError(f"{path}: header must be {' '.join(MANIFEST_HEADER)}")
    utts = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 5:
            raise CorpusError(f"{path}:{ln}: expected 5 columns, got {len(row)}")
        uid, fpath, n_frames, transcript, translation = row
        feats = None
        if fpath:
            fp = root / fpath
            if not fp.exists():
                raise CorpusError(f"{path}:{ln}: row {uid!r} references missing feature file {fpath}")
            feats = read_features(fp)
            if feats.shape[0] != int(n_frames):
                raise CorpusError(f"{path}:{ln}: row {uid!r} n_frames={n_frames} but file has {feats.shape[0]}")
        intervals = None
        if with_alignments and feats is not None:
            ap = root / "align" / f"{uid}.align"
            if ap.exists():
                intervals = load_alignment(ap, feats.shape[0])
        utts.append(Utterance(
            id=uid,
            features=feats,
            transcript=transcript.split(),
            translation=translation.split() if translation else None,
            word_intervals=intervals,
            features_path=fpath,
        ))
    return utts


def save_split(root: str | Path, name: str, utts: Sequence[Utterance]) -> Path:
    """Write ``<name>.tsv`` plus per-utterance feature and alignment files under ``root``."""
    root = Path(root)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    (root / "align").mkdir(parents=True, exist_ok=True)
    stored = []
    for u in utts:
        if u.features is not None:
            rel = f"feats/{u.id}.feat"
            write_features(root / rel, u.features)
            u = replace(u, features_path=rel)
        if u.word_intervals is not None:
            write_alignment(root / "align" / f"{u.id}.align", u.word_intervals)
        stored.append(u)
    out = root / f"{name}.tsv"
    write_manifest(out, stored)
    return out
