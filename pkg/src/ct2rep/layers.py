"""Parameter containers and the transformer building blocks shared by every model."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    embedding,
    gelu,
    layer_norm,
    parameter,
    softmax,
)


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


class Module:
    """Attribute-walking parameter container (insertion order = parameter order)."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(arr.shape):
                raise ShapeError(f"{name}: expected {p.shape}, got {tuple(arr.shape)}")
            p.data = np.array(arr, dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x W + b with W uniform(+-1/sqrt(fan_in))."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = parameter(rng.uniform(-bound, bound, size=(d_out,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def zero_(self):
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(n, dim)))

    def forward(self, ids) -> Tensor:
        return embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular keep-mask: row i may attend to columns <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


class MultiHeadAttention(Module):
    """softmax(Q K^T / sqrt(d_k)) V over ``heads`` parallel subspaces.

    Works on any number of leading batch axes. The most recent attention
    weights are kept on ``last_weights`` for inspection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.dim // self.heads).swapaxes(-2, -3)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, mask=None) -> Tensor:
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.dim // self.heads))
        weights = softmax(scores, axis=-1, mask=mask)
        self.last_weights = weights.data
        ctx = (weights @ v).swapaxes(-2, -3)
        *lead, n, _, _ = ctx.shape
        return self.out(ctx.reshape(*lead, n, self.dim))


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, mask=mask)
        return x + self.mlp(self.norm2(x))


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


__all__ = [
    "Module",
    "Linear",
    "Embedding",
    "LayerNorm",
    "MLP",
    "MultiHeadAttention",
    "TransformerBlock",
    "causal_mask",
    "sinusoidal_positions",
    "make_rng",
]
