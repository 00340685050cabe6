"""ECG encoder, attention poolers, causal text encoder, captioning decoder and projectors."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import functional as F
from .data.synth import ECGRecord
from .data.tokenizer import EOS_ID, PAD_ID, TextReport
from .nn import (
    MLP,
    AttentionPool,
    Conv1d,
    DecoderBlock,
    Dropout,
    Embedding,
    EncoderBlock,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    RngHolder,
    _param,
)
from .tensor import Tensor, as_tensor, get_default_dtype


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    ecg_layers: int = 2
    text_enc_layers: int = 2
    text_dec_layers: int = 2
    conv_blocks: int = 2
    conv_strides: tuple = (4, 4)
    conv_kernel: int = 9
    conv_norm_groups: int = 8
    pos_conv_kernel: int = 9
    in_leads: int = 4
    caption_queries: int = 16
    beat_tokens: int = 10
    vocab_size: int = 38
    max_text_len: int = 32
    mlp_ratio: int = 4
    dropout: float = 0.1
    projector: str = "mlp"  # "mlp" or "linear"
    tau1: float = 0.25
    tau2: float = 0.1
    tau_init: float = 0.07
    tau_min: float = 1e-3
    tau_max: float = 1.0
    lambda_lm: float = 2.0
    lambda_local: float = 0.2
    losses: tuple = ("g", "lm", "local")
    lm_reduction: str = "mean"  # "mean" per token, or "sum" per report
    eq2_literal: bool = False
    train_text_encoder: bool = True
    init_seed: int = 0

    def __post_init__(self):
        self.conv_strides = tuple(int(s) for s in self.conv_strides)
        self.losses = tuple(self.losses)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.beat_tokens < 1 or self.caption_queries < 1:
            raise ValueError("beat_tokens and caption_queries must be >= 1")
        if self.tau1 <= 0 or self.tau2 <= 0 or self.tau_init <= 0:
            raise ValueError("temperatures must be positive")
        if len(self.conv_strides) != self.conv_blocks:
            raise ValueError("conv_strides needs one entry per conv block")
        if self.dim % self.conv_norm_groups:
            raise ValueError("conv_norm_groups must divide dim")
        unknown = set(self.losses) - {"g", "lm", "local"}
        if unknown or not self.losses:
            raise ValueError(f"losses must be a nonempty subset of g, lm, local; got {self.losses}")
        if self.projector not in ("mlp", "linear"):
            raise ValueError(f"unknown projector {self.projector!r}")
        if self.lm_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown lm_reduction {self.lm_reduction!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Depths and pooler sizes of the full-scale architecture (12 leads)."""
        base = dict(dim=768, heads=12, ecg_layers=8, text_enc_layers=12, text_dec_layers=6,
                    conv_blocks=4, conv_strides=(5, 4, 2, 2), conv_norm_groups=12, in_leads=12,
                    caption_queries=128, beat_tokens=10, max_text_len=128)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_strides"] = list(self.conv_strides)
        d["losses"] = list(self.losses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EmbeddingBundle:
    """Per-sample embeddings at every scale (numpy arrays)."""

    E: np.ndarray
    E_tilde: np.ndarray
    B: np.ndarray
    B_proj: np.ndarray
    S: np.ndarray
    S_proj: np.ndarray
    X_g: np.ndarray
    T_g: np.ndarray


@dataclass
class TextBatch:
    ids: np.ndarray  # (B, L) padded with PAD
    last_idx: np.ndarray  # (B,) position of EOS
    sent_avg: np.ndarray  # (B, n_max, L) row-averaging weights
    sent_mask: np.ndarray  # (B, n_max) bool
    n_sent: np.ndarray = field(default=None)


def collate_text(reports: Sequence[TextReport], max_len: int | None = None) -> TextBatch:
    lengths = [len(r.token_ids) for r in reports]
    if max_len is not None and max(lengths) > max_len:
        raise ValueError(f"report of {max(lengths)} tokens exceeds max_text_len {max_len}")
    L = max(lengths)
    n_max = max(max(r.n_sentences for r in reports), 1)
    ids = np.full((len(reports), L), PAD_ID, dtype=np.int64)
    avg = np.zeros((len(reports), n_max, L), dtype=get_default_dtype())
    mask = np.zeros((len(reports), n_max), dtype=bool)
    for i, r in enumerate(reports):
        ids[i, : len(r.token_ids)] = r.token_ids
        for l, (s, e) in enumerate(r.sentence_spans):
            if e <= s:
                raise ValueError(f"empty sentence span {(s, e)}")
            avg[i, l, s:e] = 1.0 / (e - s)
            mask[i, l] = True
    return TextBatch(ids, np.asarray(lengths) - 1, avg, mask,
                     np.asarray([r.n_sentences for r in reports]))


def collate_signals(records: Sequence[ECGRecord]) -> np.ndarray:
    """Stack records as channel-last ``(B, samples, leads)``."""
    return np.ascontiguousarray(np.stack([r.signal for r in records]).transpose(0, 2, 1)).astype(
        get_default_dtype())


def _same_length_pads(n: int, kernel: int, stride: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    right = (n // stride - 1) * stride + kernel - n - left
    return left, max(right, 0)


class ECGEncoder(Module):
    """Strided conv feature extractor, conv positional encoding, pre-norm transformer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, drop: RngHolder):
        self.strides = cfg.conv_strides
        self.convs = []
        self.norms = []
        c_in = cfg.in_leads
        for s in cfg.conv_strides:
            self.convs.append(Conv1d(c_in, cfg.dim, cfg.conv_kernel, rng, stride=s))
            self.norms.append(GroupNorm(cfg.conv_norm_groups, cfg.dim))
            c_in = cfg.dim
        self.conv_drop = Dropout(cfg.dropout, drop)
        self.pos_conv = Conv1d(cfg.dim, cfg.dim, cfg.pos_conv_kernel, rng)
        self.blocks = [EncoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.dropout, rng, drop)
                       for _ in range(cfg.ecg_layers)]
        self.ln = LayerNorm(cfg.dim)

    def min_samples(self) -> int:
        return int(np.prod(self.strides))

    def features(self, signals) -> Tensor:
        x = as_tensor(signals)
        n = x.shape[1]
        if n < self.min_samples():
            raise ValueError(f"signal of {n} samples shorter than total stride {self.min_samples()}")
        for conv, gn in zip(self.convs, self.norms):
            n = x.shape[1]
            pl, pr = _same_length_pads(n, conv.kernel, conv.stride)
            x = conv(x, pl, pr)
            if x.shape[1] > n // conv.stride:
                x = x[:, : n // conv.stride]
            x = F.gelu(gn(self.conv_drop(x)))
        return x

    def encode(self, feats: Tensor) -> Tensor:
        k = self.pos_conv.kernel
        pos = F.gelu(self.pos_conv(feats, (k - 1) // 2, k // 2))
        x = feats + pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)

    def forward(self, signals) -> Tensor:
        return self.encode(self.features(signals))


class TextEncoder(Module):
    """Token + learned position embeddings through causal pre-norm blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, drop: RngHolder):
        self.max_len = cfg.max_text_len
        self.tok = Embedding(cfg.vocab_size, cfg.dim, rng)
        self.pos = _param(rng.normal(0.0, 0.02, size=(cfg.max_text_len, cfg.dim)))
        self.blocks = [EncoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.dropout, rng, drop)
                       for _ in range(cfg.text_enc_layers)]
        self.ln = LayerNorm(cfg.dim)

    def forward(self, ids: np.ndarray) -> Tensor:
        L = ids.shape[1]
        if L > self.max_len:
            raise ValueError(f"text of length {L} exceeds max_text_len {self.max_len}")
        x = self.tok(ids) + self.pos[:L]
        mask = F.causal_mask(L, x.dtype)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln(x)


class TextDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, drop: RngHolder):
        self.max_len = cfg.max_text_len
        self.tok = Embedding(cfg.vocab_size, cfg.dim, rng)
        self.pos = _param(rng.normal(0.0, 0.02, size=(cfg.max_text_len, cfg.dim)))
        self.blocks = [DecoderBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.dropout, rng, drop)
                       for _ in range(cfg.text_dec_layers)]
        self.ln = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.vocab_size, rng)

    def forward(self, context: Tensor, prefix: np.ndarray) -> Tensor:
        L = prefix.shape[1]
        if L > self.max_len:
            raise ValueError(f"prefix of length {L} exceeds max_text_len {self.max_len}")
        x = self.tok(prefix) + self.pos[:L]
        mask = F.causal_mask(L, x.dtype)
        for blk in self.blocks:
            x = blk(x, context, mask)
        return self.head(self.ln(x))


class MultiScaleModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.init_seed, spawn_key=(11,)))
        self.drop_rng = RngHolder(cfg.init_seed)
        self.ecg = ECGEncoder(cfg, rng, self.drop_rng)
        self.caption_pool = AttentionPool(cfg.caption_queries, cfg.dim, cfg.heads, rng)
        self.beat_pool = AttentionPool(cfg.beat_tokens, cfg.dim, cfg.heads, rng)
        self.text = TextEncoder(cfg, rng, self.drop_rng)
        self.decoder = TextDecoder(cfg, rng, self.drop_rng)
        if cfg.projector == "mlp":
            self.proj_ecg = MLP(cfg.dim, cfg.dim, cfg.dim, rng)
            self.proj_text = MLP(cfg.dim, cfg.dim, cfg.dim, rng)
        else:
            self.proj_ecg = Linear(cfg.dim, cfg.dim, rng)
            self.proj_text = Linear(cfg.dim, cfg.dim, rng)
        self.log_tau = _param(np.asarray(math.log(cfg.tau_init)))

    def reseed_dropout(self, seed) -> None:
        self.drop_rng.gen = np.random.default_rng(seed)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def clamp_tau(self) -> None:
        lo, hi = math.log(self.cfg.tau_min), math.log(self.cfg.tau_max)
        self.log_tau.data = np.asarray(np.clip(self.log_tau.data, lo, hi), dtype=self.log_tau.dtype)

    # -- ECG side -------------------------------------------------------------
    def forward_ecg(self, signals) -> dict:
        E = self.ecg(signals)
        out = {"E": E}
        out["E_tilde"] = self.caption_pool(E)
        B = self.beat_pool(E)
        B_proj = self.proj_ecg(B)
        out["B"] = B
        out["B_proj"] = B_proj
        out["X_g"] = B_proj.mean(axis=1)
        return out

    # -- text side --------------------------------------------------------------
    def forward_text(self, batch: TextBatch, sentences: bool = True) -> dict:
        H = self.text(batch.ids)
        rows = np.arange(batch.ids.shape[0])
        cls = H[rows, batch.last_idx]
        out = {"H": H, "CLS": cls, "T_g": self.proj_text(cls)}
        if sentences:
            S = as_tensor(batch.sent_avg.astype(H.dtype, copy=False)) @ H
            out["S"] = S
            out["S_proj"] = self.proj_text(S)
        return out

    def caption_logits(self, E_tilde: Tensor, prefix: np.ndarray) -> Tensor:
        """Teacher-forced logits; position i predicts token i + 1."""
        return self.decoder(E_tilde, prefix)

    def embed(self, record: ECGRecord, report: TextReport) -> EmbeddingBundle:
        """All embeddings for one pair, computed without gradient tracking."""
        from .tensor import no_grad

        with no_grad():
            e = self.forward_ecg(collate_signals([record]))
            t = self.forward_text(collate_text([report], self.cfg.max_text_len))
        n = report.n_sentences
        return EmbeddingBundle(
            E=e["E"].data[0], E_tilde=e["E_tilde"].data[0], B=e["B"].data[0],
            B_proj=e["B_proj"].data[0], S=t["S"].data[0, :n], S_proj=t["S_proj"].data[0, :n],
            X_g=e["X_g"].data[0], T_g=t["T_g"].data[0],
        )

    def trainable_parameters(self) -> list[Tensor]:
        text_params = {id(p) for p in self.text.parameters()}
        return [p for p in self.parameters()
                if self.cfg.train_text_encoder or id(p) not in text_params]


class MLMHead(Module):
    """Token classifier over text-encoder states for masked-token pretraining."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(13,)))
        self.ln = LayerNorm(cfg.dim)
        self.out = Linear(cfg.dim, cfg.vocab_size, rng)

    def forward(self, H: Tensor) -> Tensor:
        return self.out(self.ln(H))


def greedy_decode(model: MultiScaleModel, E_tilde: Tensor, max_len: int, bos_id: int) -> list[list[int]]:
    """Greedy decoding from BOS for a batch of pooled contexts; stops at EOS or ``max_len``."""
    from .tensor import no_grad

    if max_len > model.cfg.max_text_len:
        raise ValueError(f"max_len {max_len} exceeds max_text_len {model.cfg.max_text_len}")
    b = E_tilde.shape[0]
    seqs = np.full((b, 1), bos_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    with no_grad():
        while seqs.shape[1] < max_len and not done.all():
            logits = model.caption_logits(E_tilde, seqs).data[:, -1]
            nxt = logits.argmax(axis=-1)
            nxt = np.where(done, PAD_ID, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
    out = []
    for row in seqs:
        toks = [int(t) for t in row]
        if EOS_ID in toks:
            toks = toks[: toks.index(EOS_ID) + 1]
        out.append(toks)
    return out
