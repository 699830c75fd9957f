"""Batch normalization, dropout and the seeded random streams they use."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from .tensor import Tensor, _result, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def philox(*key: int) -> np.random.Generator:
    """Counter-based generator whose stream is a pure function of ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, n: int) -> "RunningStats":
        return cls(np.zeros(n), np.ones(n))


def batch_norm(
    x,
    scale: Tensor,
    shift: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize over every axis but the last (the feature axis).

    Train mode uses batch statistics (biased variance) and folds them into
    ``stats`` with momentum; eval mode uses ``stats`` only.
    """
    x = as_tensor(x)
    C = x.shape[-1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeMismatch("batch_norm: affine parameters must match the feature axis", x.shape, scale.shape)
    axes = tuple(range(x.ndim - 1))
    dt = x.data.dtype
    if mode == "eval":
        inv = (1.0 / np.sqrt(stats.var + eps)).astype(dt)
        xhat = (x.data - stats.mean.astype(dt)) * inv
        out = scale.data * xhat + shift.data

        def fn_eval(g):
            gx = g * (scale.data * inv) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _result(out, (x, scale, shift), fn_eval)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    n = x.size // C
    if n < 2:
        raise ValueError("batch_norm in train mode needs more than one value per feature (batch size 1?)")
    mu = x.data.mean(axis=axes)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = scale.data * xhat + shift.data
    m = stats.momentum
    stats.mean = (1 - m) * stats.mean + m * mu.astype(np.float64)
    stats.var = (1 - m) * stats.var + m * var.astype(np.float64) * (n / (n - 1))

    def fn(g):
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = (inv / n) * (n * gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, scale, shift), fn)


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep * (1.0 / (1.0 - p))


def dropout(x, p: float, rng: np.random.Generator | None = None, mode: str = "train", seed=None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    x = as_tensor(x)
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        key = seed if isinstance(seed, (tuple, list)) else (0 if seed is None else seed,)
        rng = philox(*key)
    return x * dropout_mask(x.shape, p, rng)


@dataclass
class BatchNormParams:
    scale: Tensor
    shift: Tensor
    stats: RunningStats = field(default=None)

    @classmethod
    def create(cls, n: int, name: str = "bn") -> "BatchNormParams":
        return cls(
            Tensor(np.ones(n), requires_grad=True, name=f"{name}.scale"),
            Tensor(np.zeros(n), requires_grad=True, name=f"{name}.shift"),
            RunningStats.fresh(n),
        )

    def __call__(self, x, mode: str) -> Tensor:
        return batch_norm(x, self.scale, self.shift, self.stats, mode)
