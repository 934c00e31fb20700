"""Post-estimation predictions.

Predictions are evaluated per row at covariate values taken from the data
(after any at() overrides) or from an explicit time grid.  fixedonly sets
the random effects to zero; marginal integrates the requested quantity
itself over the fitted random-effect distribution (population-averaged
predictions), which is not the same as plugging in the average random
effect.  Confidence intervals use the delta method with normal critical
values; strictly bounded quantities are transformed first (survival on
the complementary log-log scale, hazards and mean-time quantities on the
log scale) so the reported limits respect their range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag, cholesky
from scipy.stats import norm

from .errors import PredictionError
from .estimation import GRAD_STEP, FittedModel
from .families import cum_hazard, eta as eta_op, log_hazard
from .model import bind
from .quadrature import gauss_hermite, gauss_legendre, mc_draws, tensor_nodes
from .random_effects import assemble_sigma

PREDICTION_KINDS = ("eta", "hazard", "survival", "chazard", "cif", "rmst", "timelost")

RMST_NODES = 30


@dataclass(frozen=True)
class PredictionRequest:
    kind: str
    at: dict = field(default_factory=dict)
    fixedonly: bool = False
    marginal: bool = False
    timevar: str | None = None
    times: tuple | None = None
    ci: bool = False
    level: float = 95.0

    def __post_init__(self):
        if self.kind not in PREDICTION_KINDS:
            raise PredictionError(f"unknown prediction kind {self.kind!r}")
        if self.fixedonly and self.marginal:
            raise PredictionError("fixedonly and marginal are mutually exclusive")
        if self.kind == "hazard" and self.marginal:
            raise PredictionError(
                "a marginal hazard is not defined here; predict marginal "
                "survival (or cumulative hazard) instead"
            )
        if not 0 < self.level < 100:
            raise PredictionError(f"level must be in (0, 100), got {self.level}")


@dataclass
class PredictionResult:
    rowid: np.ndarray
    estimate: np.ndarray
    lci: np.ndarray | None = None
    uci: np.ndarray | None = None
    kind: str = ""


def _model_covariates(fit: FittedModel) -> tuple[str, ...]:
    spec = fit.spec
    names = list(spec.fixed) + [t.var for t in spec.tvc]
    for eq in spec.random:
        names.extend(eq.vars)
    return tuple(dict.fromkeys(names))


def _re_nodes(fit: FittedModel, theta):
    """Probability-weighted nodes of the fitted random-effect distribution
    over the concatenated levels."""
    _, _, covs = bind(fit.structure, theta)
    sigmas = [assemble_sigma(c) for c in covs]
    sigma = block_diag(*sigmas) if len(sigmas) > 1 else sigmas[0]
    q = sigma.shape[0]
    dist = fit.spec.re_distribution
    if dist.kind == "gaussian":
        base = tensor_nodes(gauss_hermite(fit.settings.points), q)
        nodes = base.nodes @ cholesky(sigma, lower=True).T
        return nodes, np.exp(base.log_weights)
    draws = mc_draws(q, fit.settings.points, dist, fit.settings.seed)
    scale = sigma * (dist.dof - 2.0) / dist.dof
    nodes = draws.nodes @ cholesky(scale, lower=True).T
    return nodes, np.full(draws.npoints, 1.0 / draws.npoints)


def _point_value(fit: FittedModel, theta, x: dict, t: float, kind: str, marginal: bool) -> float:
    family, lp, _ = bind(fit.structure, theta)
    q = lp.re_dim

    if kind == "eta":
        return eta_op(lp, x, np.zeros(q) if q else None, t)

    def survival(b, u):
        return math.exp(-cum_hazard(family, u, spec=lp, x=x, b=b))

    def chaz(b, u):
        return cum_hazard(family, u, spec=lp, x=x, b=b)

    if marginal and q:
        nodes, w = _re_nodes(fit, theta)
    else:
        nodes, w = np.zeros((1, q)), np.ones(1)

    if kind == "hazard":
        b = nodes[0]
        ev = eta_op(lp, x, b if q else None, t)
        if family.kind == "rp":
            # signed value: slope of the log cumulative hazard times H / t
            g = np.asarray(family.baseline_params[1:])
            ds = float(family.basis.deriv(math.log(t)) @ g)
            for term in lp.tvc:
                ds += term.deriv_logt(t) * float(x[term.var])
            return ds / t * math.exp(
                family.baseline_params[0]
                + float(family.basis.eval(math.log(t)) @ g)
                + ev
            )
        return math.exp(log_hazard(family, t, ev, spec=lp, x=x))

    if kind == "survival":
        return float(sum(wk * survival(bk, t) for wk, bk in zip(w, nodes)))
    if kind == "cif":
        return 1.0 - float(sum(wk * survival(bk, t) for wk, bk in zip(w, nodes)))
    if kind == "chazard":
        return float(sum(wk * chaz(bk, t) for wk, bk in zip(w, nodes)))
    if kind in ("rmst", "timelost"):
        if t <= 0:
            raise PredictionError(f"{kind} needs a positive time, got {t}")
        rule = gauss_legendre(RMST_NODES, 0.0, t)
        svals = np.array(
            [
                sum(wk * survival(bk, u) for wk, bk in zip(w, nodes))
                for u in rule.nodes[:, 0]
            ]
        )
        weights = np.exp(rule.log_weights)
        rmst = float(weights @ svals)
        return rmst if kind == "rmst" else float(weights @ (1.0 - svals))
    raise PredictionError(f"unknown prediction kind {kind!r}")  # pragma: no cover


def delta_ci(fit: FittedModel, predictor, level: float = 95.0):
    """Delta-method interval for a scalar function of the parameters.

    predictor maps a packed parameter vector to a value; the gradient is
    taken by central differences and propagated through the fitted
    covariance.
    """
    if fit.vcov is None:
        raise PredictionError("model has no covariance matrix; cannot form intervals")
    theta = fit.theta.values
    gradient = np.zeros(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = GRAD_STEP * max(abs(theta[i]), 1.0)
        gradient[i] = (predictor(theta + e) - predictor(theta - e)) / (2.0 * e[i])
    var = float(gradient @ fit.vcov @ gradient)
    se = math.sqrt(max(var, 0.0))
    z = norm.ppf(0.5 + level / 200.0)
    center = predictor(theta)
    return center - z * se, center + z * se


def _transformed_ci(fit, x, t, kind, marginal, level):
    """CI on a range-respecting scale, then mapped back."""
    if kind == "cif":
        lo_s, hi_s = _transformed_ci(fit, x, t, "survival", marginal, level)
        return 1.0 - hi_s, 1.0 - lo_s

    value = _point_value(fit, fit.theta.values, x, t, kind, marginal)

    if kind == "survival":
        def g(th):
            s = min(max(_point_value(fit, th, x, t, kind, marginal), 1e-300), 1.0 - 1e-16)
            return math.log(-math.log(s))

        lo_t, hi_t = delta_ci(fit, g, level)
        # the map u -> exp(-exp(u)) is decreasing
        return math.exp(-math.exp(hi_t)), math.exp(-math.exp(lo_t))

    if kind in ("hazard", "chazard", "rmst", "timelost") and value > 0:
        def g(th):
            v = _point_value(fit, th, x, t, kind, marginal)
            return math.log(v) if v > 0 else -745.0

        lo_t, hi_t = delta_ci(fit, g, level)
        return math.exp(lo_t), math.exp(hi_t)

    def g(th):
        return _point_value(fit, th, x, t, kind, marginal)

    return delta_ci(fit, g, level)


def predict(fit: FittedModel, data=None, request: PredictionRequest | None = None, **kwargs) -> PredictionResult:
    """Per-row predictions (and delta-method intervals with ci).

    Rows come either from data (times default to each row's exit time, or
    the timevar column) or, with request.times, from an explicit grid
    whose covariates must be fully resolved by at().
    """
    if request is None:
        request = PredictionRequest(**kwargs)
    model_covs = _model_covariates(fit)
    for name in request.at:
        if name not in model_covs:
            raise PredictionError(f"unknown covariate {name!r} in at()")
    marginal = request.marginal  # default (neither flag) is fixed-portion
    rows: list[tuple[dict, float]] = []
    if request.times is not None:
        missing = [c for c in model_covs if c not in request.at]
        if missing:
            raise PredictionError(
                f"at() must set every model covariate with an explicit time "
                f"grid; missing {missing}"
            )
        x = {c: float(request.at[c]) for c in model_covs}
        rows = [(x, float(t)) for t in request.times]
    else:
        if data is None:
            raise PredictionError("predict needs data rows or an explicit time grid")
        if request.timevar is not None and request.timevar not in data.columns:
            raise PredictionError(f"time variable {request.timevar!r} not in data")
        for cov in model_covs:
            if cov not in request.at and cov not in data.columns:
                raise PredictionError(f"covariate {cov!r} not in data; set it via at()")
        n = data.n_records
        tcol = (
            data.columns[request.timevar]
            if request.timevar is not None
            else data.columns[data.time_col]
        )
        for i in range(n):
            x = {
                c: float(request.at[c]) if c in request.at else float(data.columns[c][i])
                for c in model_covs
            }
            rows.append((x, float(tcol[i])))

    est = np.array(
        [
            _point_value(fit, fit.theta.values, x, t, request.kind, marginal)
            for x, t in rows
        ]
    )
    rowid = np.arange(1, len(rows) + 1)
    if not request.ci:
        return PredictionResult(rowid, est, kind=request.kind)
    lci = np.empty(len(rows))
    uci = np.empty(len(rows))
    for i, (x, t) in enumerate(rows):
        lci[i], uci[i] = _transformed_ci(fit, x, t, request.kind, marginal, request.level)
    return PredictionResult(rowid, est, lci, uci, kind=request.kind)
