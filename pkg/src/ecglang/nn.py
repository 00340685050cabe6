"""Minimal module system and transformer building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype

NEG_INF = -1e9


class RngHolder:
    """Shared mutable handle to the dropout generator, so reseeding reaches every layer."""

    def __init__(self, seed: int = 0):
        self.gen = np.random.default_rng(seed)


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = np.array(p.data, dtype=dtype, order="C")
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype, order="C")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray, name: str = "") -> Tensor:
    return Tensor(np.array(arr, dtype=get_default_dtype(), order="C"), requires_grad=True, name=name)


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(uniform_fan_in(rng, (d_in, d_out), d_in))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        self.groups = groups
        self.gain = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gain, self.bias, self.eps)


class Conv1d(Module):
    """Channel-last conv with uniform fan-in init for weights and biases."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        fan_in = c_in * kernel
        self.weight = _param(uniform_fan_in(rng, (c_out, c_in, kernel), fan_in))
        self.bias = _param(uniform_fan_in(rng, (c_out,), fan_in))
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: Tensor, pad_left: int = 0, pad_right: int = 0) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, self.stride, pad_left, pad_right)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.weight = _param(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(n, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        return F.embedding(self.weight, ids)


class Dropout(Module):
    def __init__(self, p: float, rng: RngHolder):
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.rng.gen, self.training)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention; queries and keys/values may come from different sequences."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).swapaxes(1, 2)

    def forward(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        context = x if context is None else context
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        out, w = F.attention(q, k, v, mask)
        self.last_weights = w.data
        b, h, n, dh = out.shape
        return self.o(out.swapaxes(1, 2).reshape(b, n, h * dh))


class EncoderBlock(Module):
    """Pre-norm transformer block: self-attention then MLP, each residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout: float,
                 rng: np.random.Generator, drop_rng: RngHolder):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, rng)
        self.drop = Dropout(dropout, drop_rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.drop(self.attn(self.ln1(x), mask=mask))
        return x + self.drop(self.mlp(self.ln2(x)))


class DecoderBlock(Module):
    """Causal self-attention, cross-attention to a context, MLP; all pre-norm residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout: float,
                 rng: np.random.Generator, drop_rng: RngHolder):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, rng)
        self.drop = Dropout(dropout, drop_rng)

    def forward(self, x: Tensor, context: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.drop(self.self_attn(self.ln1(x), mask=mask))
        x = x + self.drop(self.cross_attn(self.ln2(x), context=context))
        return x + self.drop(self.mlp(self.ln3(x)))


class AttentionPool(Module):
    """Learnable queries cross-attend to a sequence (keys = values = the sequence), then LayerNorm."""

    def __init__(self, n_queries: int, dim: int, heads: int, rng: np.random.Generator):
        self.queries = _param(rng.normal(0.0, 1.0, size=(n_queries, dim)) / math.sqrt(dim))
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln = LayerNorm(dim)

    def forward(self, seq: Tensor) -> Tensor:
        # a batch-1 query set broadcasts against the batch inside attention
        q = self.queries.reshape((1,) + self.queries.shape)
        return self.ln(self.attn(q, context=seq))

    @property
    def last_weights(self) -> np.ndarray | None:
        return self.attn.last_weights
