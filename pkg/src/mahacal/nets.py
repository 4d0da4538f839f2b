"""Feature extractor and attentive set encoder.

The extractor is a fully-connected residual network whose linear maps are
spectrally normalized (optional, for the plain Protonet baseline).  The set
encoder is a small Set Transformer: two self-attention blocks followed by
attention pooling onto learned seeds, with heads producing raw diagonal
logits and low-rank covariance factors.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tt
from .tensor import Tensor


class Module:
    """Minimal parameter container with hierarchical names."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        yield from vars(self).items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters(prefix)}
        state.update({name: b.copy() for name, b in self.named_buffers(prefix)})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            value = _lookup(state, name, p.data.shape)
            p.data = value.copy()
        for name, _ in self.named_buffers(prefix):
            owner, attr = self._resolve(name[len(prefix):])
            current = getattr(owner, attr)
            setattr(owner, attr, _lookup(state, name, current.shape).copy())

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        owner: Module = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = getattr(owner, part)
        return owner, attr

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _lookup(state: dict[str, np.ndarray], name: str, shape: tuple[int, ...]) -> np.ndarray:
    if name not in state:
        raise KeyError(f"checkpoint is missing tensor {name!r}")
    value = np.asarray(state[name], dtype=np.float64)
    if value.shape != shape:
        raise ValueError(f"tensor {name!r} has shape {value.shape}, expected {shape}")
    return value


def _unit(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / max(float(np.linalg.norm(x)), eps)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def effective_weight(self) -> Tensor:
        return self.weight

    def __call__(self, x) -> Tensor:
        out = tt.as_tensor(x) @ tt.transpose(self.effective_weight())
        return out + self.bias if self.bias is not None else out


class SpectralLinear(Linear):
    """Linear map with weight rescaled to spectral norm at most ``bound``.

    One power iteration runs per forward pass in training mode; evaluation
    reuses the stored ``u``/``v``.  The norm estimate enters the graph as a
    constant.
    """

    _buffer_names = ("u", "v")

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bound: float = 3.0, bias: bool = True):
        super().__init__(in_dim, out_dim, rng, bias=bias)
        if bound <= 0:
            raise ValueError(f"spectral bound must be positive, got {bound}")
        self.bound = float(bound)
        self.u = _unit(rng.normal(size=out_dim))
        self.v = _unit(self.weight.data.T @ self.u)

    def power_iterate(self, steps: int = 1) -> None:
        w = self.weight.data
        for _ in range(steps):
            self.v = _unit(w.T @ self.u)
            self.u = _unit(w @ self.v)

    def sigma(self) -> float:
        """Current power-iteration estimate of the raw weight's spectral norm."""
        return float(self.u @ self.weight.data @ self.v)

    def scale(self) -> float:
        s = self.sigma()
        return 1.0 if s <= self.bound else self.bound / s

    def effective_sigma(self) -> float:
        """Power-iteration estimate for the rescaled weight actually applied."""
        return self.sigma() * self.scale()

    def effective_weight(self) -> Tensor:
        if self.training:
            self.power_iterate()
        return self.weight * self.scale()


class ResidualBlock(Module):
    """``x + relu(W x + b)``."""

    def __init__(self, dim: int, rng: np.random.Generator, spectral: bool = True, bound: float = 3.0):
        self.inner = SpectralLinear(dim, dim, rng, bound=bound) if spectral else Linear(dim, dim, rng)

    def __call__(self, x) -> Tensor:
        x = tt.as_tensor(x)
        return x + tt.relu(self.inner(x))


class FeatureExtractor(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int = 2,
        dim: int = 16,
        depth: int = 3,
        spectral: bool = True,
        bound: float = 3.0,
    ):
        self.in_dim = in_dim
        self.dim = dim
        self.depth = depth
        if spectral:
            self.proj = SpectralLinear(in_dim, dim, rng, bound=bound)
        else:
            self.proj = Linear(in_dim, dim, rng)
        for i in range(depth):
            setattr(self, f"block{i}", ResidualBlock(dim, rng, spectral=spectral, bound=bound))

    @property
    def blocks(self) -> list[ResidualBlock]:
        return [getattr(self, f"block{i}") for i in range(self.depth)]

    def spectral_layers(self) -> list[SpectralLinear]:
        layers = [self.proj] + [b.inner for b in self.blocks]
        return [layer for layer in layers if isinstance(layer, SpectralLinear)]

    def __call__(self, x) -> Tensor:
        x = tt.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise tt.ShapeError(f"extractor: expected input dim {self.in_dim}, got shape {x.shape}")
        h = self.proj(x)
        for block in self.blocks:
            h = block(h)
        return h


class MultiheadAttention(Module):
    def __init__(self, dim_q: int, dim_kv: int, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.q = Linear(dim_q, dim, rng)
        self.k = Linear(dim_kv, dim, rng)
        self.v = Linear(dim_kv, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        x = tt.reshape(x, (b, n, self.heads, self.dim // self.heads))
        return tt.transpose(x, (0, 2, 1, 3))

    def weights(self, query: Tensor, keys: Tensor) -> Tensor:
        q = self._split(self.q(query))
        k = self._split(self.k(keys))
        scores = (q @ tt.transpose(k)) * (1.0 / math.sqrt(self.dim // self.heads))
        return tt.softmax(scores, axis=-1)

    def __call__(self, query: Tensor, keys: Tensor) -> Tensor:
        attn = self.weights(query, keys)
        v = self._split(self.v(keys))
        out = tt.transpose(attn @ v, (0, 2, 1, 3))
        b, n = out.shape[:2]
        return self.o(tt.reshape(out, (b, n, self.dim)))


class SelfAttentionBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiheadAttention(dim, dim, dim, heads, rng)
        self.ff = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = x + self.attn(x, x)
        return h + tt.relu(self.ff(h))


class PoolingAttention(Module):
    """Attention pooling onto learned seeds, without the seed residual.

    Adding the seeds back onto the attention output lets the pool ignore its
    inputs and emit the same covariance for every class, so the output is
    ``softmax(QK^T)V`` followed by a residual feed-forward on that output.
    """

    def __init__(self, dim: int, heads: int, n_seeds: int, rng: np.random.Generator):
        self.seed = Tensor(rng.normal(size=(n_seeds, dim)), requires_grad=True)
        self.attn = MultiheadAttention(dim, dim, dim, heads, rng)
        self.ff = Linear(dim, dim, rng)

    def attend(self, x: Tensor) -> Tensor:
        seeds = tt.broadcast_to(self.seed, (x.shape[0],) + self.seed.shape)
        return self.attn(seeds, x)

    def __call__(self, x: Tensor) -> Tensor:
        o = self.attend(x)
        return o + tt.relu(self.ff(o))


class SetEncoder(Module):
    """Map a batch of sets ``(B, n, d)`` to raw diagonal logits and factors."""

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int = 16,
        rank: int = 0,
        hidden: int = 32,
        heads: int = 4,
        n_blocks: int = 2,
        n_seeds: int = 1,
        factor_gain: float = 0.1,
    ):
        self.dim = dim
        self.rank = rank
        self.n_blocks = n_blocks
        self.factor_gain = factor_gain
        self.embed = Linear(dim, hidden, rng)
        for i in range(n_blocks):
            setattr(self, f"sab{i}", SelfAttentionBlock(hidden, heads, rng))
        self.pma = PoolingAttention(hidden, heads, n_seeds, rng)
        self.diag_head = Linear(hidden * n_seeds, dim, rng)
        self.factor_head = Linear(hidden * n_seeds, dim * rank, rng) if rank > 0 else None

    def __call__(self, sets) -> tuple[Tensor, Tensor]:
        sets = tt.as_tensor(sets)
        if sets.ndim == 2:
            sets = tt.reshape(sets, (1,) + sets.shape)
        b, n, _ = sets.shape
        if n == 0:
            raise ValueError("set encoder: input set is empty")
        h = self.embed(sets)
        for i in range(self.n_blocks):
            h = getattr(self, f"sab{i}")(h)
        pooled = tt.reshape(self.pma(h), (b, -1))
        diag_raw = self.diag_head(pooled)
        if self.factor_head is None:
            factors = Tensor(np.zeros((b, self.dim, 0)))
        else:
            factors = tt.reshape(self.factor_head(pooled), (b, self.dim, self.rank)) * self.factor_gain
        return diag_raw, factors
