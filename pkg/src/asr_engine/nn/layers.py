"""Parameter initializers and the normalization / dropout building blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def glorot_init(fan_in: int, fan_out: int, seed) -> np.ndarray:
    """Uniform on [-L, L] with L = sqrt(6 / (fan_in + fan_out)); shape (fan_in, fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return _rng(seed).uniform(-limit, limit, size=(fan_in, fan_out))


def orthogonal_init(n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    a = _rng(seed).standard_normal((n, n))
    q, r = np.linalg.qr(a)
    # Sign fix makes the draw uniform over the orthogonal group.
    q *= np.sign(np.diag(r))
    return q


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout multiplier, already scaled by 1/keep_prob.

    One mask is drawn per forward pass and reused at every time step.
    """

    values: np.ndarray
    keep_prob: float

    def apply(self, x):
        return x * self.values


def make_dropout_mask(shape, keep_prob: float, seed) -> DropoutMask:
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must be in (0, 1]")
    if keep_prob == 1.0:
        return DropoutMask(np.ones(shape), 1.0)
    keep = _rng(seed).random(shape) < keep_prob
    return DropoutMask(keep / keep_prob, keep_prob)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, dim: int) -> "RunningStats":
        return cls(np.zeros(dim), np.ones(dim))


def batch_norm(x, gamma, beta, training: bool, stats: RunningStats, mask=None,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Normalize the last axis of ``x``.

    In training mode statistics come from positions where ``mask`` (shape
    ``x.shape[:-1]``) is 1, so padded positions neither shape the statistics nor
    receive gradient through them; ``stats`` is updated in place.
    """
    x = ag.as_tensor(x)
    dim = x.shape[-1]
    if not training:
        scale = gamma / np.sqrt(stats.var + BN_EPS)
        return (x - stats.mean) * scale + beta
    flat = x.reshape(-1, dim)
    if mask is None:
        m = np.ones((flat.shape[0], 1))
    else:
        m = np.asarray(mask, dtype=float).reshape(-1, 1)
    n = m.sum()
    if n < 1:
        raise ValueError("batch_norm needs at least one valid position")
    mu = ag.tsum(flat * m, axis=0) * (1.0 / n)
    centered = flat - mu
    cm = centered * m
    var = ag.tsum(cm * cm, axis=0) * (1.0 / n)
    inv_std = 1.0 / ag.sqrt(var + eps)
    out = centered * inv_std * gamma + beta
    unbiased = var.data * (n / (n - 1)) if n > 1 else var.data
    stats.mean = (1 - momentum) * stats.mean + momentum * mu.data
    stats.var = (1 - momentum) * stats.var + momentum * unbiased
    return out.reshape(x.shape)


def count_parameters(params: dict, exclude_prefix: str = "bn") -> int:
    return sum(p.data.size for name, p in params.items()
               if not name.split(".")[-1].startswith(exclude_prefix))


def new_param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
