"""Node and weight generation for the marginal-likelihood integrals.

Gauss-Hermite rules are built against the standard normal measure, so
weights sum to one and moments are exact through degree 2n - 1.  Adaptive
rules recentre the nodes at the mode of a cluster's integrand and rescale
by its curvature; their weights absorb the change-of-variables term and
the reference density, making every NodeSet usable the same way:

    integral of exp(g(b)) db  ~=  logsumexp(log_weights + g(nodes))

Monte-Carlo integration uses unscrambled Halton sequences (inverse-normal
transformed) for Gaussian random effects and antithetic pseudo-random
draws for t random effects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, eigh_tridiagonal, solve_triangular
from scipy.special import ndtri

from .errors import ModelSpecError, ResourceError
from .random_effects import REDistribution, logdensity_t

_FIRST_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71)

HALTON_SKIP = 20
MAX_TENSOR_POINTS = 10_000_000


class AdaptationWarning(UserWarning):
    """Per-cluster adaptation failed to converge; non-adaptive nodes used."""


@dataclass(frozen=True)
class IntegrationSettings:
    method: str = "mvaghermite"  # mvaghermite | ghermite | mcarlo
    points: int | None = None  # default 7, or 150 for mcarlo
    adapt_iterations: int = 1001
    adapt_tolerance: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("mvaghermite", "ghermite", "mcarlo"):
            raise ModelSpecError(f"unknown integration method {self.method!r}")
        if self.points is None:
            object.__setattr__(self, "points", 150 if self.method == "mcarlo" else 7)
        if self.points < 1:
            raise ModelSpecError("integration points must be positive")
        if self.adapt_iterations > 1001:
            raise ModelSpecError("adapt_iterations is capped at 1001")


@dataclass(frozen=True)
class NodeSet:
    """Points in q dimensions with log weights."""

    nodes: np.ndarray = field(repr=False)  # (K, q)
    log_weights: np.ndarray = field(repr=False)  # (K,)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def npoints(self) -> int:
        return self.nodes.shape[0]


def gauss_hermite(n: int) -> NodeSet:
    """n-point rule for E[f(Z)] with Z standard normal.

    Nodes and weights come from the eigen-decomposition of the symmetric
    tridiagonal Jacobi matrix of the (probabilists') Hermite recurrence:
    eigenvalues are the nodes and squared first eigenvector components the
    weights.
    """
    if not 1 <= n <= 200:
        raise ModelSpecError(f"gauss_hermite points must be in 1..200, got {n}")
    if n == 1:
        return NodeSet(np.zeros((1, 1)), np.zeros(1))
    offdiag = np.sqrt(np.arange(1, n, dtype=float))
    nodes, vecs = eigh_tridiagonal(np.zeros(n), offdiag)
    weights = vecs[0, :] ** 2
    # enforce exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    with np.errstate(divide="ignore"):  # far-tail weights may underflow to 0
        log_weights = np.log(weights)
    return NodeSet(nodes[:, None], log_weights)


def tensor_nodes(base: NodeSet, q: int) -> NodeSet:
    """Full tensor product of a 1-D rule in q dimensions."""
    if q < 1:
        raise ModelSpecError("dimension must be >= 1")
    if base.dim != 1:
        raise ModelSpecError("tensor_nodes expects a 1-D base rule")
    n = base.npoints
    if n**q > MAX_TENSOR_POINTS:
        raise ResourceError(
            f"tensor rule would need {n}^{q} points; use intmethod mcarlo instead"
        )
    if q == 1:
        return base
    grids = np.meshgrid(*([base.nodes[:, 0]] * q), indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([base.log_weights] * q), indexing="ij")
    log_weights = sum(w.ravel() for w in wgrids)
    return NodeSet(nodes, log_weights)


def gauss_legendre(n: int, a: float, b: float) -> NodeSet:
    """n-point Gauss-Legendre rule on [a, b]; exact through degree 2n - 1."""
    if n < 1:
        raise ModelSpecError("gauss_legendre needs at least one node")
    if not a < b:
        raise ModelSpecError(f"need a < b, got [{a}, {b}]")
    x, w = np.polynomial.legendre.leggauss(n)
    nodes = 0.5 * (a + b) + 0.5 * (b - a) * x
    weights = 0.5 * (b - a) * w
    return NodeSet(nodes[:, None], np.log(weights))


def halton(n: int, base: int, skip: int = 0) -> np.ndarray:
    """First n values of the radical-inverse (Halton) sequence, indices
    skip+1 .. skip+n."""
    out = np.empty(n)
    for m, i in enumerate(range(skip + 1, skip + n + 1)):
        f, value = 1.0, 0.0
        while i > 0:
            f /= base
            value += f * (i % base)
            i //= base
        out[m] = value
    return out


def shift_to_reference(base: NodeSet, mean: np.ndarray, chol_lower: np.ndarray) -> NodeSet:
    """Map standard-normal-measure nodes z to b = mean + L z, returning a
    rule that integrates against db (the N(mean, L L') reference density is
    divided out of the weights)."""
    z = base.nodes
    q = z.shape[1]
    nodes = mean[None, :] + z @ chol_lower.T
    logdet = np.sum(np.log(np.diag(chol_lower)))
    log_weights = (
        base.log_weights
        + 0.5 * q * np.log(2.0 * np.pi)
        + 0.5 * np.sum(z * z, axis=1)
        + logdet
    )
    return NodeSet(nodes, log_weights)


def adapt_cluster(
    nodes: NodeSet,
    log_integrand,
    sigma: np.ndarray,
    settings: IntegrationSettings,
    grad=None,
    hess=None,
) -> NodeSet:
    """Recentre and rescale standard-normal nodes at the mode of a cluster
    integrand.

    Newton iterations (at most settings.adapt_iterations, tolerance
    settings.adapt_tolerance on the parameter change) locate the mode bhat
    and the curvature H = -g''(bhat); nodes become bhat + L z with
    L L' = H^{-1} and weights absorb the change of variables.  If the
    iteration fails to converge, or the curvature is not positive definite,
    the rule falls back to non-adaptive nodes referenced at N(0, sigma)
    with a warning.
    """
    q = nodes.dim
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))

    def _numgrad(b):
        g = np.empty(q)
        h = 1e-5
        for i in range(q):
            e = np.zeros(q)
            e[i] = h
            g[i] = (log_integrand(b + e) - log_integrand(b - e)) / (2 * h)
        return g

    def _numhess(b):
        hmat = np.empty((q, q))
        h = 1e-4
        f0 = log_integrand(b)
        for i in range(q):
            ei = np.zeros(q)
            ei[i] = h
            hmat[i, i] = (log_integrand(b + ei) - 2 * f0 + log_integrand(b - ei)) / h**2
            for j in range(i):
                ej = np.zeros(q)
                ej[j] = h
                hmat[i, j] = hmat[j, i] = (
                    log_integrand(b + ei + ej)
                    - log_integrand(b + ei - ej)
                    - log_integrand(b - ei + ej)
                    + log_integrand(b - ei - ej)
                ) / (4 * h**2)
        return hmat

    gfun = grad if grad is not None else _numgrad
    hfun = hess if hess is not None else _numhess

    b = np.zeros(q)
    fb = log_integrand(b)
    converged = False
    if np.isfinite(fb):
        for _ in range(settings.adapt_iterations):
            gvec = gfun(b)
            hmat = hfun(b)
            try:
                step = np.linalg.solve(hmat, -gvec)
            except np.linalg.LinAlgError:
                break
            # safeguard: halve the step until the integrand improves
            scale = 1.0
            for _ in range(30):
                bnew = b + scale * step
                fnew = log_integrand(bnew)
                if np.isfinite(fnew) and fnew >= fb - 1e-12:
                    break
                scale *= 0.5
            else:
                break
            delta = np.max(np.abs(bnew - b))
            b, fb = bnew, fnew
            if delta < settings.adapt_tolerance:
                converged = True
                break

    if converged:
        curvature = -hfun(b)
        try:
            cfac = cholesky(curvature, lower=True)
            lmat = solve_triangular(cfac, np.eye(q), lower=True).T
            return shift_to_reference(nodes, b, np.tril(lmat))
        except np.linalg.LinAlgError:
            pass

    warnings.warn(
        "cluster adaptation did not converge; using non-adaptive nodes",
        AdaptationWarning,
        stacklevel=2,
    )
    return shift_to_reference(nodes, np.zeros(q), cholesky(sigma, lower=True))


def mc_draws(q: int, n: int, dist: REDistribution, seed: int = 0) -> NodeSet:
    """Monte-Carlo integration draws on the standard scale (identity
    covariance); callers map them through the covariance factor.

    Gaussian: the first q coprime-base Halton sequences, skipping the
    first 20 points, inverse-normal transformed.  Student t: antithetic
    pseudo-random draws (exact +/- pairs) of a multivariate t with
    identity scale.  All weights equal 1/n.
    """
    if n < 2:
        raise ModelSpecError("Monte-Carlo integration needs at least 2 points")
    if q > len(_FIRST_PRIMES):
        raise ModelSpecError(f"mcarlo supports at most {len(_FIRST_PRIMES)} dimensions")
    if dist.kind == "gaussian":
        u = np.column_stack([halton(n, p, skip=HALTON_SKIP) for p in _FIRST_PRIMES[:q]])
        nodes = ndtri(u)
    else:
        if n % 2:
            raise ModelSpecError("antithetic t draws need an even number of points")
        rng = np.random.Generator(np.random.Philox(seed))
        half = n // 2
        z = rng.standard_normal((half, q))
        chi2 = rng.chisquare(dist.dof, size=half)
        x = z * np.sqrt(dist.dof / chi2)[:, None]
        nodes = np.vstack([x, -x])
    return NodeSet(nodes, np.full(n, -np.log(n)))


def mc_reference(draws: NodeSet, sigma: np.ndarray, dist: REDistribution) -> NodeSet:
    """Map standard-scale Monte-Carlo draws through the covariance and
    divide the sampling density out of the weights, giving a db rule."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if dist.kind == "gaussian":
        return shift_to_reference(draws, np.zeros(draws.dim), cholesky(sigma, lower=True))
    scale = sigma * (dist.dof - 2.0) / dist.dof
    lmat = cholesky(scale, lower=True)
    nodes = draws.nodes @ lmat.T
    log_weights = draws.log_weights - logdensity_t(nodes, sigma, dist.dof)
    return NodeSet(nodes, log_weights)
