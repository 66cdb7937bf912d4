"""Diagonal Gaussians built on diffmath tensors.

A ``DiagGaussian`` carries a mean and a stddev tensor of identical shape.
The trailing ``event_ndim`` axes form the event; any leading axes are batch
axes, and ``kl``/``log_prob`` reduce over the event axes only.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import ShapeError, Tensor

STD_FLOOR = 1e-4
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class DiagGaussian:
    __slots__ = ("mean", "stddev", "event_ndim")

    def __init__(self, mean, stddev, event_ndim: int = 1):
        mean = mean if isinstance(mean, Tensor) else Tensor(mean)
        stddev = stddev if isinstance(stddev, Tensor) else Tensor(stddev)
        if mean.shape != stddev.shape:
            raise ShapeError("DiagGaussian", f"mean {mean.shape} vs stddev {stddev.shape}")
        if np.any(~(stddev.data > 0)):
            raise ValueError("DiagGaussian: stddev must be strictly positive")
        if event_ndim > mean.ndim:
            raise ShapeError("DiagGaussian", f"event_ndim {event_ndim} exceeds rank {mean.ndim}")
        self.mean = mean
        self.stddev = stddev
        self.event_ndim = event_ndim

    @classmethod
    def from_raw(cls, mean, raw_std, event_ndim: int = 1) -> "DiagGaussian":
        """Stddev parameterized as softplus(raw) + 1e-4."""
        return cls(mean, dm.softplus(raw_std) + STD_FLOOR, event_ndim)

    @classmethod
    def standard(cls, shape, event_ndim: int = 1) -> "DiagGaussian":
        return cls(np.zeros(shape), np.ones(shape), event_ndim)

    @property
    def shape(self):
        return self.mean.shape

    @property
    def event_axes(self) -> tuple[int, ...]:
        nd = self.mean.ndim
        return tuple(range(nd - self.event_ndim, nd))

    @property
    def variance(self) -> Tensor:
        return dm.square(self.stddev)

    def __repr__(self):
        return f"DiagGaussian(shape={self.shape}, event_ndim={self.event_ndim})"


def _check_same(op, a: DiagGaussian, b: DiagGaussian):
    if a.shape != b.shape:
        raise ShapeError(op, f"dimension mismatch {a.shape} vs {b.shape}")


def poe_fuse(experts: Sequence[DiagGaussian]) -> DiagGaussian:
    """Product of Gaussian experts in closed form.

    Precisions add and the mean is the precision-weighted average; the
    normalizing constant of the product never needs to be formed. A single
    expert is returned unchanged.
    """
    if not experts:
        raise ValueError("poe_fuse: at least one expert is required")
    first = experts[0]
    for e in experts[1:]:
        _check_same("poe_fuse", first, e)
    if len(experts) == 1:
        return first
    precision = None
    weighted = None
    for e in experts:
        p = 1.0 / e.variance
        precision = p if precision is None else precision + p
        weighted = e.mean * p if weighted is None else weighted + e.mean * p
    var = 1.0 / precision
    return DiagGaussian(weighted * var, dm.sqrt(var), first.event_ndim)


def kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL[q || p] in closed form, summed over event axes."""
    _check_same("kl", q, p)
    ratio = dm.square(q.stddev / p.stddev)
    diff = dm.square((q.mean - p.mean) / p.stddev)
    per_dim = 0.5 * (ratio + diff - 1.0) - dm.log(q.stddev / p.stddev)
    return dm.sum(per_dim, axis=q.event_axes)


def rsample(g: DiagGaussian, noise) -> Tensor:
    """Reparameterized draw ``mean + stddev * noise``; noise receives no gradient."""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise)
    if noise.shape != g.shape:
        raise ShapeError("rsample", f"noise {noise.shape} vs distribution {g.shape}")
    return g.mean + g.stddev * Tensor._wrap(noise.astype(g.mean.data.dtype, copy=False))


def log_prob(g: DiagGaussian, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=g.mean.data.dtype))
    if x.shape != g.shape:
        raise ShapeError("log_prob", f"value {x.shape} vs distribution {g.shape}")
    z = (x - g.mean) / g.stddev
    per_dim = -0.5 * dm.square(z) - dm.log(g.stddev) - HALF_LOG_2PI
    return dm.sum(per_dim, axis=g.event_axes)
