"""Toy speech-translation model: speech encoder, text embedding, joint Transformer.

The joint encoder-decoder consumes either modality. Text enters through the
embedding table (scaled, plus sinusoidal positions); speech enters through a
strided convolution stack followed by self-attention blocks. The CTC head
reuses the embedding rows as its projection, with one extra learned row for
the blank.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

CKPT_MAGIC = b"WACOCKPT"


@dataclass
class ModelConfig:
    feat_dim: int = 16
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_speech_layers: int = 2
    n_joint_enc_layers: int = 2
    n_dec_layers: int = 2
    downsample: List[Tuple[int, int]] = field(default_factory=lambda: [(5, 2), (5, 2)])
    vocab_size: int = 0
    dropout: float = 0.1
    max_positions: int = 512

    def validate(self) -> None:
        errs = []
        if self.d_model % self.n_heads:
            errs.append("d_model must be divisible by n_heads")
        if any(s < 1 or k < 1 for k, s in self.downsample):
            errs.append("downsample kernels and strides must be >= 1")
        if not 0 <= self.dropout < 1:
            errs.append("dropout must lie in [0, 1)")
        if self.vocab_size < 1:
            errs.append("vocab_size must be set")
        if errs:
            raise ValueError("; ".join(errs))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["downsample"] = [list(x) for x in self.downsample]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "downsample" in d:
            d["downsample"] = [tuple(x) for x in d["downsample"]]
        return cls(**d)


class InputError(ValueError):
    pass


def sinusoid_table(n: int, d: int) -> Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    ang = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang[:, : d // 2])
    return pe


def lengths_to_mask(lengths: Tensor, max_len: int) -> Tensor:
    """Boolean ``(B, max_len)`` mask, True at real (non-pad) positions."""
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float):
        super().__init__()
        self.h = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, mem: Tensor, key_mask: Optional[Tensor], causal: bool = False) -> Tensor:
        B, L, d = x.shape
        S = mem.shape[1]
        dh = d // self.h
        q = self.q(x).view(B, L, self.h, dh).transpose(1, 2)
        k = self.k(mem).view(B, S, self.h, dh).transpose(1, 2)
        v = self.v(mem).view(B, S, self.h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(L, S, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        att = self.drop(torch.softmax(scores, dim=-1))
        return self.o((att @ v).transpose(1, 2).reshape(B, L, d))


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.att = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.att(h, h, mask))
        return x + self.drop(self.ffn(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_att = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_att = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y: Tensor, y_mask: Tensor, mem: Tensor, mem_mask: Tensor) -> Tensor:
        h = self.ln1(y)
        y = y + self.drop(self.self_att(h, h, y_mask, causal=True))
        y = y + self.drop(self.cross_att(self.ln2(y), mem, mem_mask))
        return y + self.drop(self.ffn(self.ln3(y)))


class WacoModel(nn.Module):
    """Parameters live under stable hierarchical names (``speech.*``, ``embed.*``,
    ``encoder.*``, ``decoder.*``, ``ctc.*``) which the checkpoint format uses."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        convs = []
        in_ch = cfg.feat_dim
        for k, s in cfg.downsample:
            convs.append(nn.Conv1d(in_ch, d, k, stride=s, padding=k // 2))
            in_ch = d
        self.speech = nn.ModuleDict({
            "convs": nn.ModuleList(convs),
            "layers": nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_speech_layers)),
            "norm": nn.LayerNorm(d),
        })
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.encoder = nn.ModuleDict({
            "layers": nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_joint_enc_layers)),
            "norm": nn.LayerNorm(d),
        })
        self.decoder = nn.ModuleDict({
            "layers": nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers)),
            "norm": nn.LayerNorm(d),
        })
        self.ctc = nn.ParameterDict({
            "blank": nn.Parameter(torch.zeros(d)),
            "bias": nn.Parameter(torch.zeros(cfg.vocab_size + 1)),
        })
        self.drop = nn.Dropout(cfg.dropout)
        self.register_buffer("pe", sinusoid_table(cfg.max_positions, d).float(), persistent=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        d = self.cfg.d_model
        for name, p in self.named_parameters():
            if name == "embed.weight":
                nn.init.normal_(p, 0.0, d ** -0.5)
            elif name == "ctc.blank":
                nn.init.normal_(p, 0.0, d ** -0.5)
            elif p.dim() >= 2:
                nn.init.xavier_uniform_(p)
            elif name.endswith(".bias"):
                nn.init.zeros_(p)

    # -- lengths -----------------------------------------------------------
    def enc_length(self, n_frames: int) -> int:
        n = n_frames
        for _, s in self.cfg.downsample:
            n = -(-n // s)
        return n

    def enc_lengths(self, n_frames: Tensor) -> Tensor:
        n = n_frames
        for _, s in self.cfg.downsample:
            n = torch.div(n + s - 1, s, rounding_mode="floor")
        return n

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, s in self.cfg.downsample)

    def _positions(self, n: int) -> Tensor:
        if n > self.cfg.max_positions:
            raise InputError(f"sequence length {n} exceeds max_positions={self.cfg.max_positions}")
        return self.pe[:n].to(self.embed.weight.dtype)

    # -- speech ------------------------------------------------------------
    def s_enc(self, feats: Tensor, n_frames: Tensor) -> Tuple[Tensor, Tensor]:
        """``(B, T, feat_dim)`` frames -> ``(B, S, d_model)`` states and their lengths."""
        if int(n_frames.min()) < self.total_stride:
            raise InputError(f"utterance shorter than the total stride {self.total_stride}")
        lens = n_frames
        x = feats.transpose(1, 2)
        x = x * lengths_to_mask(lens, x.shape[-1])[:, None, :].to(x.dtype)
        for conv, (_, s) in zip(self.speech["convs"], self.cfg.downsample):
            x = F.gelu(conv(x))
            lens = torch.div(lens + s - 1, s, rounding_mode="floor")
            x = x * lengths_to_mask(lens, x.shape[-1])[:, None, :].to(x.dtype)
        x = x.transpose(1, 2)
        mask = lengths_to_mask(lens, x.shape[1])
        x = self.drop(x + self._positions(x.shape[1]))
        for layer in self.speech["layers"]:
            x = layer(x, mask)
        return self.speech["norm"](x), lens

    # -- text --------------------------------------------------------------
    def t_emb(self, tokens: Tensor) -> Tensor:
        """Raw embedding rows, without scaling or positions."""
        if tokens.numel() and int(tokens.max()) >= self.cfg.vocab_size:
            raise InputError(f"token id {int(tokens.max())} out of range")
        return self.embed(tokens)

    def text_memory(self, tokens: Tensor) -> Tensor:
        x = self.t_emb(tokens) * math.sqrt(self.cfg.d_model) + self._positions(tokens.shape[1])
        return self.drop(x)

    def speech_memory(self, speech_out: Tensor) -> Tensor:
        return self.drop(speech_out + self._positions(speech_out.shape[1]))

    # -- joint Transformer -------------------------------------------------
    def joint_encode(self, memory: Tensor, mask: Tensor) -> Tensor:
        x = memory
        for layer in self.encoder["layers"]:
            x = layer(x, mask)
        return self.encoder["norm"](x)

    def decode(self, enc: Tensor, enc_mask: Tensor, dec_in: Tensor, dec_mask: Optional[Tensor] = None) -> Tensor:
        """Vocabulary logits at every decoder position (causal)."""
        if dec_mask is None:
            dec_mask = torch.ones_like(dec_in, dtype=torch.bool)
        y = self.text_memory(dec_in)
        for layer in self.decoder["layers"]:
            y = layer(y, dec_mask, enc, enc_mask)
        return self.decoder["norm"](y) @ self.embed.weight.t()

    def joint_forward(self, memory: Tensor, mem_mask: Tensor, dec_in: Tensor,
                      dec_mask: Optional[Tensor] = None) -> Tensor:
        return self.decode(self.joint_encode(memory, mem_mask), mem_mask, dec_in, dec_mask)

    # -- CTC -----------------------------------------------------------------
    def ctc_head(self, speech_out: Tensor) -> Tensor:
        """Per-frame logits over the text vocabulary plus a trailing blank."""
        w = torch.cat([self.embed.weight, self.ctc["blank"][None, :]], dim=0)
        return speech_out @ w.t() + self.ctc["bias"]


# -- checkpoints -------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def state_to_bytes(cfg: ModelConfig, state: Dict[str, Tensor]) -> bytes:
    out = bytearray(CKPT_MAGIC)
    meta = canonical_json(cfg.to_dict()).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(state))
    for name in sorted(state):
        t = state[name].detach().to("cpu", torch.float32).contiguous()
        bname = name.encode("utf-8")
        out += struct.pack("<I", len(bname)) + bname
        out += struct.pack("<I", t.dim())
        out += struct.pack(f"<{t.dim()}I", *t.shape)
        out += t.numpy().astype("<f4").tobytes()
    return bytes(out)


def save_checkpoint(path: str | Path, model: WacoModel, state: Optional[Dict[str, Tensor]] = None) -> None:
    Path(path).write_bytes(state_to_bytes(model.cfg, state if state is not None else model.state_dict()))


def read_checkpoint(path: str | Path) -> Tuple[ModelConfig, Dict[str, Tensor]]:
    import numpy as np

    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return v

    n = u32()
    cfg = ModelConfig.from_dict(json.loads(data[pos:pos + n].decode("utf-8")))
    pos += n
    state = {}
    for _ in range(u32()):
        n = u32()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rank = u32()
        dims = [u32() for _ in range(rank)]
        count = math.prod(dims)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after tensors")
    return cfg, state


def load_checkpoint(path: str | Path) -> WacoModel:
    cfg, state = read_checkpoint(path)
    model = WacoModel(cfg)
    model.load_state_dict(state)
    return model
