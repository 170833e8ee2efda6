"""Scalar and vector primitives shared by the losses and metrics.

Everything here works in float64. Probabilities are clamped to
``[EPS, 1 - EPS]`` before any logarithm is taken.
"""
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


class DomainError(ValueError):
    """An input lies outside the domain of the operation."""


class GradCheckError(RuntimeError):
    """The function under test returned a non-finite value."""

    def __init__(self, index, value):
        super().__init__(f"non-finite function value {value!r} at coordinate {index}")
        self.index = index
        self.value = value


def _check_same_shape(y, z):
    if y.shape != z.shape:
        raise ValueError(f"dimension mismatch: {y.shape} vs {z.shape}")


def sigmoid(x):
    """Logistic sigmoid, clamped to ``[EPS, 1 - EPS]``.

    Accepts a scalar or an array. Raises :class:`DomainError` on non-finite input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("sigmoid input must be finite")
    out = np.where(arr >= 0, 1.0 / (1.0 + np.exp(-np.abs(arr))),
                   np.exp(-np.abs(arr)) / (1.0 + np.exp(-np.abs(arr))))
    out = np.clip(out, EPS, 1.0 - EPS)
    return float(out) if out.ndim == 0 else out


def softmax_t(logits, temperature=1.0):
    """Softmax of ``logits / temperature`` along the last axis."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise ValueError("softmax needs at least one logit")
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p):
    """Shannon entropy (nats) of a probability vector."""
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.maximum(p, EPS))).sum())


def bce(y, z):
    """Total binary cross entropy ``-sum(y log z + (1-y) log(1-z))``."""
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _check_same_shape(y, z)
    z = np.clip(z, EPS, 1.0 - EPS)
    return float(-(y * np.log(z) + (1.0 - y) * np.log(1.0 - z)).sum())


def ce(y, z):
    """Cross entropy ``-sum(y log z)``."""
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _check_same_shape(y, z)
    return float(-(y * np.log(np.maximum(z, EPS))).sum())


@dataclass(frozen=True)
class BinGrid:
    """Equal-width bins over ``[lo, hi]``.

    Bins are left-closed and right-open, except the last which also
    contains ``hi``.
    """

    num_bins: int = 20
    lo: float = -1.0
    hi: float = 1.0
    centers: np.ndarray = field(init=False, repr=False, compare=False)
    edges: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_bins < 1 or not self.hi > self.lo:
            raise ValueError("need num_bins >= 1 and hi > lo")
        centers = self.lo + self.width * (np.arange(self.num_bins) + 0.5)
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        # One rounding per edge, so e.g. the edge at 0.1 is the double nearest 0.1.
        k = np.arange(self.num_bins + 1)
        edges = (self.lo * (self.num_bins - k) + self.hi * k) / self.num_bins
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def width(self):
        return (self.hi - self.lo) / self.num_bins


VA_GRID = BinGrid()


def to_bin(v, grid=VA_GRID):
    """Bin index of ``v`` (scalar or array) on ``grid``."""
    arr = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < grid.lo) or np.any(arr > grid.hi):
        raise DomainError(f"value outside [{grid.lo}, {grid.hi}]")
    # Compare against the edges directly: floor((v - lo) / width) puts v = -0.9 in bin 0.
    idx = np.minimum(np.searchsorted(grid.edges, arr, side="right") - 1, grid.num_bins - 1)
    return int(idx) if idx.ndim == 0 else idx


def onehot(index, size):
    out = np.zeros(size)
    out[index] = 1.0
    return out


def bin_expectation(probs, grid=VA_GRID):
    """Expected bin center under ``probs`` (last axis)."""
    return np.asarray(probs, dtype=np.float64) @ grid.centers


def _ccc_parts(y, t):
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _check_same_shape(y, t)
    if y.ndim != 1 or y.shape[0] < 2:
        raise DomainError("ccc needs two 1-D sequences of length >= 2")
    dy = y - y.mean()
    dt = t - t.mean()
    cov = (dy * dt).mean()
    denom = (dy * dy).mean() + (dt * dt).mean() + (y.mean() - t.mean()) ** 2
    return dy, dt, cov, denom


def ccc(y, t):
    """Concordance correlation coefficient between ground truth ``y`` and ``t``.

    Covariance form with population statistics. Returns 1.0 when both
    sequences are constant and equal (zero denominator).
    """
    _, _, cov, denom = _ccc_parts(y, t)
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


def ccc_grad(y, t):
    """Gradient of :func:`ccc` with respect to the predictions ``t``."""
    dy, dt, cov, denom = _ccc_parts(y, t)
    n = dy.shape[0]
    if denom == 0.0:
        return np.zeros(n)
    mean_gap = np.mean(y) - np.mean(t)
    d_cov = dy / n
    d_denom = 2.0 * dt / n - 2.0 * mean_gap / n
    return (2.0 * d_cov * denom - 2.0 * cov * d_denom) / denom**2


def grad_check(f, analytic, x0, h=1e-5):
    """Largest per-coordinate relative error of ``analytic`` against central differences.

    ``f`` maps a float64 vector to a scalar; ``analytic`` is the claimed
    gradient at ``x0``. The error for coordinate i is
    ``|fd_i - analytic_i| / max(1, |analytic_i|)``.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    g = np.asarray(analytic, dtype=np.float64).ravel()
    if g.shape != x.shape:
        raise ValueError("analytic gradient shape does not match x0")
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        f_plus = float(f(x))
        x[i] = orig - h
        f_minus = float(f(x))
        x[i] = orig
        for val in (f_plus, f_minus):
            if not np.isfinite(val):
                raise GradCheckError(i, val)
        fd = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(fd - g[i]) / max(1.0, abs(g[i])))
    return worst
