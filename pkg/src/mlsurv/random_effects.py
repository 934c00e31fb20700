"""Random-effect covariance structures and log densities.

Free parameters live on an unconstrained scale: variances as log standard
deviations, correlations as tanh-mapped values, and the unstructured case
as a Cholesky factor with log diagonal.  Any finite parameter vector
therefore assembles to a symmetric positive-definite matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .errors import ModelSpecError

COVARIANCE_KINDS = ("diagonal", "exchangeable", "identity", "unstructured")


def n_free_params(kind: str, q: int) -> int:
    if kind == "diagonal":
        return q
    if kind == "exchangeable":
        return 2
    if kind == "identity":
        return 1
    if kind == "unstructured":
        return q * (q + 1) // 2
    raise ModelSpecError(f"unknown covariance kind {kind!r}")


@dataclass(frozen=True)
class CovarianceStructure:
    kind: str
    q: int
    free_params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in COVARIANCE_KINDS:
            raise ModelSpecError(f"unknown covariance kind {self.kind!r}")
        if self.q < 1:
            raise ModelSpecError("covariance dimension must be positive")
        if self.kind == "exchangeable" and self.q < 2:
            raise ModelSpecError("exchangeable structure needs dimension >= 2")
        want = n_free_params(self.kind, self.q)
        if len(self.free_params) != want:
            raise ModelSpecError(
                f"{self.kind} structure with q={self.q} takes {want} free "
                f"parameters, got {len(self.free_params)}"
            )


@dataclass(frozen=True)
class REDistribution:
    kind: str = "gaussian"  # gaussian | student_t
    dof: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t"):
            raise ModelSpecError(f"unknown random-effect distribution {self.kind!r}")
        if self.kind == "student_t":
            if self.dof is None or self.dof <= 2:
                raise ModelSpecError(
                    "student_t random effects need dof > 2 for a finite covariance"
                )


def assemble_sigma(structure: CovarianceStructure) -> np.ndarray:
    """Build the SPD covariance matrix from the free parameters."""
    q = structure.q
    theta = np.asarray(structure.free_params, dtype=float)
    if structure.kind == "diagonal":
        return np.diag(np.exp(2.0 * theta))
    if structure.kind == "identity":
        return np.exp(2.0 * theta[0]) * np.eye(q)
    if structure.kind == "exchangeable":
        sd = np.exp(theta[0])
        lo = -1.0 / (q - 1)
        rho = lo + (1.0 - lo) * (np.tanh(theta[1]) + 1.0) / 2.0
        return sd * sd * ((1.0 - rho) * np.eye(q) + rho * np.ones((q, q)))
    # unstructured: lower-triangular Cholesky factor, log diagonal
    chol = cholesky_from_free(theta, q)
    return chol @ chol.T


def cholesky_from_free(theta: np.ndarray, q: int) -> np.ndarray:
    """Lower-triangular factor for the unstructured kind (row-major order,
    diagonal entries stored as logs)."""
    chol = np.zeros((q, q))
    pos = 0
    for i in range(q):
        for j in range(i + 1):
            chol[i, j] = np.exp(theta[pos]) if i == j else theta[pos]
            pos += 1
    return chol


def logdensity_gaussian(b, sigma) -> float:
    """Multivariate normal log density at b with mean zero."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    q = b.shape[-1]
    factor = cho_factor(sigma, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    quad = np.sum(b * cho_solve(factor, b.T).T, axis=-1)
    return -0.5 * (q * np.log(2.0 * np.pi) + logdet + quad)


def logdensity_t(b, sigma, nu: float) -> float:
    """Multivariate t log density at b, mean zero, degrees of freedom nu.

    The scale matrix is sigma * (nu - 2) / nu, so that the distribution's
    covariance equals sigma and reported standard deviations stay
    comparable with the Gaussian case.
    """
    if nu <= 2:
        raise ModelSpecError("student_t density needs dof > 2")
    b = np.atleast_1d(np.asarray(b, dtype=float))
    q = b.shape[-1]
    scale = np.asarray(sigma, dtype=float) * (nu - 2.0) / nu
    factor = cho_factor(scale, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    quad = np.sum(b * cho_solve(factor, b.T).T, axis=-1)
    return (
        gammaln((nu + q) / 2.0)
        - gammaln(nu / 2.0)
        - 0.5 * q * np.log(nu * np.pi)
        - 0.5 * logdet
        - 0.5 * (nu + q) * np.log1p(quad / nu)
    )
