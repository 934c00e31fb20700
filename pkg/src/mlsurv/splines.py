"""Restricted cubic splines of log time.

The basis is the truncated-power restricted cubic spline: the first column
is the identity, and each interior knot k_j contributes

    v_j(x) = (x - k_j)^3_+  -  lam_j (x - k_min)^3_+  -  (1 - lam_j)(x - k_max)^3_+

with lam_j = (k_max - k_j) / (k_max - k_min).  The construction is C2
continuous everywhere and linear beyond the boundary knots, so a basis with
m interior knots has m + 1 degrees of freedom.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelSpecError


@dataclass(frozen=True)
class KnotVector:
    """Ascending boundary + interior knots on the log-time scale."""

    boundary_low: float
    interior: tuple[float, ...]
    boundary_high: float

    def __post_init__(self):
        ks = (self.boundary_low, *self.interior, self.boundary_high)
        if any(a >= b for a, b in zip(ks, ks[1:])):
            raise ModelSpecError(f"knots must be strictly ascending, got {ks}")

    @property
    def df(self) -> int:
        return len(self.interior) + 1

    def as_array(self) -> np.ndarray:
        return np.array([self.boundary_low, *self.interior, self.boundary_high])


def place_default_knots(event_log_times, df: int) -> KnotVector:
    """Default knot placement from the uncensored log survival times.

    Boundary knots sit at the min and max of the uncensored log times; the
    df - 1 interior knots sit at the evenly spaced centiles 100*k/df,
    k = 1..df-1, using the nearest-rank rule (1-based index ceil(p*n) into
    the sorted values).  Duplicate knot values are collapsed, reducing df,
    with a warning.
    """
    if not 1 <= df <= 10:
        raise ModelSpecError(f"df must be between 1 and 10, got {df}")
    x = np.sort(np.asarray(event_log_times, dtype=float))
    if x.size == 0:
        raise ModelSpecError("knot placement requires at least one uncensored time")
    n = x.size
    interior = []
    for k in range(1, df):
        p = k / df
        idx = int(np.ceil(p * n))  # nearest rank, 1-based
        interior.append(x[min(max(idx, 1), n) - 1])
    knots = [x[0], *interior, x[-1]]
    uniq = sorted(set(knots))
    if len(uniq) < len(knots):
        warnings.warn(
            "duplicate knot values collapsed; degrees of freedom reduced to %d"
            % (len(uniq) - 1),
            stacklevel=2,
        )
    if len(uniq) < 2:
        raise ModelSpecError("all uncensored times identical; cannot place knots")
    return KnotVector(uniq[0], tuple(uniq[1:-1]), uniq[-1])


def rcs_eval(x, knots: KnotVector) -> np.ndarray:
    """Evaluate the df basis columns at x (scalar or array), shape (..., df)."""
    x = np.asarray(x, dtype=float)
    kmin, kmax = knots.boundary_low, knots.boundary_high
    cols = [x]
    for kj in knots.interior:
        lam = (kmax - kj) / (kmax - kmin)
        cols.append(
            np.maximum(x - kj, 0.0) ** 3
            - lam * np.maximum(x - kmin, 0.0) ** 3
            - (1.0 - lam) * np.maximum(x - kmax, 0.0) ** 3
        )
    return np.stack(cols, axis=-1)


def rcs_deriv(x, knots: KnotVector) -> np.ndarray:
    """Analytic derivative of rcs_eval with respect to x, shape (..., df)."""
    x = np.asarray(x, dtype=float)
    kmin, kmax = knots.boundary_low, knots.boundary_high
    cols = [np.ones_like(x)]
    for kj in knots.interior:
        lam = (kmax - kj) / (kmax - kmin)
        cols.append(
            3.0 * np.maximum(x - kj, 0.0) ** 2
            - 3.0 * lam * np.maximum(x - kmin, 0.0) ** 2
            - 3.0 * (1.0 - lam) * np.maximum(x - kmax, 0.0) ** 2
        )
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class SplineBasis:
    """A knot vector plus an optional orthogonalization of its columns.

    When orthogonalized, the df raw columns are replaced by linear
    combinations of [1, raw columns] that, over the fitting sample, are
    mutually orthogonal with zero mean and unit variance (Gram matrix
    n times the identity).  The (df+1) x (df+1) triangular transform is
    stored so that any later evaluation (prediction at new times)
    reproduces the identical basis.  The span of {1, columns} is
    unchanged, so maximized likelihoods are invariant to the choice; only
    the reported coefficient scale differs.
    """

    knots: KnotVector
    orthogonalized: bool = False
    transform: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, knots: KnotVector, sample_x=None, orthogonalize: bool = False) -> "SplineBasis":
        if not orthogonalize:
            return cls(knots, False, None)
        if sample_x is None:
            raise ModelSpecError("orthogonalization requires a fitting sample")
        x = np.asarray(sample_x, dtype=float)
        aug = np.column_stack([np.ones_like(x), rcs_eval(x, knots)])
        q, r = np.linalg.qr(aug)
        # fix signs so the transform is deterministic and the constant column
        # stays positive
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        r = r * signs[:, None]
        # scale columns to unit sample variance (the first stays constant 1)
        t = np.linalg.inv(r) * np.sqrt(x.shape[0])
        return cls(knots, True, t)

    @property
    def df(self) -> int:
        return self.knots.df

    def eval(self, x) -> np.ndarray:
        raw = rcs_eval(x, self.knots)
        if not self.orthogonalized:
            return raw
        aug = np.concatenate([np.ones(raw.shape[:-1] + (1,)), raw], axis=-1)
        return (aug @ self.transform)[..., 1:]

    def deriv(self, x) -> np.ndarray:
        raw = rcs_deriv(x, self.knots)
        if not self.orthogonalized:
            return raw
        aug = np.concatenate([np.zeros(raw.shape[:-1] + (1,)), raw], axis=-1)
        return (aug @ self.transform)[..., 1:]
