"""Hierarchical run configuration (JSON) with strict key checking and ``--set`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .corpus.synth import CorpusSpec
from .eval.decode import DecodeConfig
from .model import ModelConfig
from .training import TrainConfig

METHODS = ("waco", "const", "ctc", "base")


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _mt_defaults() -> TrainConfig:
    return TrainConfig(peak_lr=2e-3, warmup_steps=200, max_steps=1500, eval_interval=250,
                       keep_last_k=1, eval_beam=1)


def _pt_defaults() -> TrainConfig:
    return TrainConfig(peak_lr=1e-3, warmup_steps=100, max_steps=500, eval_interval=100, keep_last_k=1)


def _ft_defaults() -> TrainConfig:
    return TrainConfig(peak_lr=1e-3, warmup_steps=100, max_steps=400, eval_interval=50, keep_last_k=5,
                       frame_budget_per_batch=2000, eval_beam=1)


@dataclass
class PipelineConfig:
    method: str = "waco"
    bpe_vocab_size: int = 400
    asr_frames: Optional[int] = None
    st_size: int = 100
    dev_size: int = 100
    seqkd: bool = False


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    mt: TrainConfig = field(default_factory=_mt_defaults)
    pretrain: TrainConfig = field(default_factory=_pt_defaults)
    finetune: TrainConfig = field(default_factory=_ft_defaults)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_seed(self, seed: int) -> "RunConfig":
        c = copy.deepcopy(self)
        for tc in (c.mt, c.pretrain, c.finetune):
            tc.seed = seed
        return c


_TUPLE_FIELDS = {"frames_per_word", "silence_frames", "words_per_utterance", "word_length", "betas"}


def _coerce(name: str, value: Any, current: Any) -> Any:
    if name in _TUPLE_FIELDS:
        return tuple(value)
    if name == "downsample":
        return [tuple(x) for x in value]
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, int) and not isinstance(value, int):
        raise TypeError(f"expected an integer, got {value!r}")
    return value


def _merge(obj: Any, data: dict, prefix: str, problems: List[str]) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            problems.append(f"unknown key {path}")
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                problems.append(f"{path} must be an object")
                continue
            _merge(current, value, path + ".", problems)
            continue
        try:
            setattr(obj, key, _coerce(key, value, current))
        except (TypeError, ValueError) as e:
            problems.append(f"bad value for {path}: {e}")


def parse_override(expr: str) -> tuple:
    if "=" not in expr:
        raise ConfigError([f"override {expr!r} is not key=value"])
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(data: Optional[dict] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    """Defaults, then ``data``, then dotted ``key=value`` overrides; every problem is reported together."""
    cfg = RunConfig()
    problems: List[str] = []
    if data:
        _merge(cfg, data, "", problems)
    for expr in overrides or []:
        try:
            key, value = parse_override(expr)
        except ConfigError as e:
            problems.extend(e.problems)
            continue
        nested: Dict[str, Any] = value
        for part in reversed(key.split(".")):
            nested = {part: nested}
        _merge(cfg, nested, "", problems)
    if cfg.pipeline.method not in METHODS:
        problems.append(f"pipeline.method must be one of {METHODS}")
    for name in ("mt", "pretrain", "finetune"):
        try:
            getattr(cfg, name).validate()
            getattr(cfg, name).contrastive()
        except ValueError as e:
            problems.append(f"{name}: {e}")
    try:
        cfg.corpus.validate()
    except ValueError as e:
        problems.append(f"corpus: {e}")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: Optional[str | Path], overrides: Optional[List[str]] = None) -> RunConfig:
    data = None
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError([f"config file {path} does not exist"]) from None
        except json.JSONDecodeError as e:
            raise ConfigError([f"config file {path} is not valid JSON: {e}"]) from None
        if not isinstance(data, dict):
            raise ConfigError(["config root must be an object"])
    return build_config(data, overrides)
