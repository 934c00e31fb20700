"""Maximum-likelihood fitting and reporting.

Estimation is two-stage: the fixed-effects-only model supplies starting
values for the full model, whose variance parameters start at sd = 1
(log-sd 0) with covariances 0.  The maximizer is a quasi-Newton (BFGS)
ascent on the packed parameter vector with central-difference gradients;
when a step direction is not an ascent direction the inverse-curvature
estimate resets to steepest ascent with a halving line search (such
iterations are flagged "not concave" in the log).  Convergence requires
both a small gradient (max abs < 1e-6) and a small relative change in the
log likelihood (< 1e-8).  Standard errors come from the observed
information, a central-difference Hessian at the optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .errors import ConvergenceError, ModelSpecError
from .likelihood import LikelihoodContext, ThetaVector
from .model import ModelStructure, build_layout
from .quadrature import IntegrationSettings
from .random_effects import CovarianceStructure, assemble_sigma

GRAD_STEP = np.cbrt(np.finfo(float).eps)  # ~6.06e-6
HESS_STEP = np.finfo(float).eps ** 0.25
GRAD_TOL = 1e-6
LOGLIK_RELTOL = 1e-8
MAX_ITER = 300


@dataclass
class ConvergenceInfo:
    iterations: int
    gradient_norm: float
    status: str  # converged | maxiter | stalled

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass
class FittedModel:
    """Estimates, observed-information covariance, and everything needed
    to evaluate or predict from the model without the original data."""

    structure: ModelStructure
    theta: ThetaVector
    vcov: np.ndarray | None
    loglik: float
    convergence: ConvergenceInfo
    n_obs: int
    n_events: int
    settings: IntegrationSettings
    relative_survival: bool = False
    delayed_entry: bool = False
    level: float = 95.0

    @property
    def spec(self):
        return self.structure.spec

    @property
    def param_names(self):
        return self.structure.layout.names

    def se(self) -> np.ndarray | None:
        if self.vcov is None:
            return None
        return np.sqrt(np.diag(self.vcov))


# -- numerical derivatives ----------------------------------------------------


def central_gradient(f, x, steps=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = steps if steps is not None else GRAD_STEP * np.maximum(np.abs(x), 1.0)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        fp, fm = f(x + e), f(x - e)
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / (2.0 * h[i])
        elif np.isfinite(fp):
            g[i] = (fp - f(x)) / h[i]
        elif np.isfinite(fm):
            g[i] = (f(x) - fm) / h[i]
        else:
            g[i] = 0.0
    return g


def numerical_hessian(f, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    h = HESS_STEP * np.maximum(np.abs(x), 1.0)
    hess = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            hess[i, j] = hess[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return hess


# -- quasi-Newton ascent -------------------------------------------------------


def _bfgs_maximize(f, x0, *, gtol=GRAD_TOL, ltol=LOGLIK_RELTOL, maxiter=MAX_ITER, verbose=False):
    x = np.asarray(x0, dtype=float).copy()
    fx = f(x)
    if not np.isfinite(fx):
        raise ValueError("objective not finite at the starting values")
    n = x.size
    binv = np.eye(n)
    g = central_gradient(f, x)
    if verbose:
        print(f"Iteration 0:   log likelihood = {fx:.5f}")
    status = "maxiter"
    it = 0
    for it in range(1, maxiter + 1):
        direction = binv @ g
        slope = float(direction @ g)
        concave = slope > 0.0
        if not concave:
            binv = np.eye(n)
            direction = g.copy()
            slope = float(g @ g)
            if slope == 0.0:
                status = "converged" if np.max(np.abs(g)) < gtol else "stalled"
                it -= 1
                break
        step = 1.0
        xn = fn = None
        for _ in range(60):
            cand = x + step * direction
            fc = f(cand)
            if np.isfinite(fc) and fc >= fx + 1e-4 * step * slope:
                xn, fn = cand, fc
                break
            step *= 0.5
        if xn is None:
            status = "converged" if np.max(np.abs(g)) < 1e-4 else "stalled"
            it -= 1
            break
        gn = central_gradient(f, xn)
        s = xn - x
        y = g - gn  # curvature pair for the negated objective
        sy = float(s @ y)
        if sy > 1e-12:
            rho = 1.0 / sy
            v = np.eye(n) - rho * np.outer(s, y)
            binv = v @ binv @ v.T + rho * np.outer(s, s)
        rel_change = abs(fn - fx) / (abs(fx) + 1e-10)
        x, fx, g = xn, fn, gn
        if verbose:
            suffix = "  (not concave)" if not concave else ""
            print(f"Iteration {it}:   log likelihood = {fx:.5f}{suffix}")
        if np.max(np.abs(g)) < gtol and rel_change < ltol:
            status = "converged"
            break
    return x, fx, ConvergenceInfo(it, float(np.max(np.abs(g))), status)


# -- starting values -----------------------------------------------------------


def _crude_rate(design) -> float:
    total = float(np.sum(design.T - design.entry))
    events = max(float(np.sum(design.d)), 0.5)
    return events / total


def _nelson_aalen_at_exits(T, d, entry) -> np.ndarray:
    """Nelson-Aalen cumulative hazard evaluated at each record's exit."""
    order = np.argsort(T, kind="stable")
    h_at = {}
    cum = 0.0
    for i in order:
        if d[i] == 1.0:
            t = T[i]
            if t not in h_at:
                at_risk = np.sum((entry < t) & (T >= t))
                events_at_t = np.sum((T == t) & (d == 1.0))
                cum += events_at_t / max(at_risk, 1)
                h_at[t] = cum
    out = np.zeros_like(T)
    event_times = sorted(h_at)
    for i, t in enumerate(T):
        val = 0.0
        for s in event_times:
            if s <= t:
                val = h_at[s]
            else:
                break
        out[i] = val
    return out


def _baseline_init(design) -> np.ndarray:
    spec = design.spec
    lay = design.layout
    nb = lay.baseline.stop - lay.baseline.start
    init = np.zeros(nb)
    lograte = math.log(_crude_rate(design))
    init[0] = lograte
    if spec.distribution == "rp":
        # regress log Nelson-Aalen pseudo-values on the basis and covariates
        na = _nelson_aalen_at_exits(design.T, design.d, design.entry)
        keep = na > 0
        y = np.log(na[keep])
        cols = [np.ones(keep.sum()), design.B[keep]]
        if design.X.shape[1]:
            cols.append(design.X[keep])
        xmat = np.column_stack(cols)
        coefs, *_ = np.linalg.lstsq(xmat, y, rcond=None)
        ncol = 1 + design.B.shape[1]
        init = np.zeros(nb)
        init[:ncol] = coefs[:ncol]
        beta_init = coefs[ncol:] if design.X.shape[1] else None
        # require a positive log-cumulative-hazard slope at every event;
        # otherwise start from the straight-line (unit-shape) target
        ds = design.dB @ init[1:]
        if np.any(ds[design.d == 1.0] <= 0):
            y2 = lograte + np.log(design.T)
            xmat2 = np.column_stack([np.ones(design.n), design.B])
            coefs2, *_ = np.linalg.lstsq(xmat2, y2, rcond=None)
            init = np.zeros(nb)
            init[:ncol] = coefs2
            beta_init = None
        return init, beta_init
    return init, None


def _fixed_structure(design):
    spec1 = replace(design.spec, random=(), covariance=())
    bdf = design.structure.baseline_basis.df if design.structure.baseline_basis else 0
    layout1 = build_layout(spec1, bdf)
    structure1 = ModelStructure(
        spec1, layout1, design.structure.baseline_basis, design.structure.tvc_bases
    )
    return replace(design, structure=structure1, z_levels=(), clusters=())


def _zero_covariance_start(kind: str, q: int) -> np.ndarray:
    """Free parameters giving unit variances and zero covariances."""
    if kind == "diagonal":
        return np.zeros(q)
    if kind == "identity":
        return np.zeros(1)
    if kind == "exchangeable":
        return np.array([0.0, math.atanh(-(q - 2.0) / q) if q > 2 else 0.0])
    return np.zeros(q * (q + 1) // 2)  # unstructured: log-diag 0, off-diag 0


def starting_values(ctx: LikelihoodContext, zeros: bool = False, verbose: bool = False, maxiter: int = MAX_ITER) -> ThetaVector:
    """Stage-1 starting values for the full model.

    Unless zeros is set, the fixed-effects-only model is maximized first
    and its estimates seed the fixed and baseline slots; variance
    parameters start at sd 1 (log-sd 0) and covariances at 0.
    """
    design = ctx.design
    lay = design.layout
    if zeros:
        return ThetaVector(np.zeros(lay.size), lay)

    theta = np.zeros(lay.size)
    binit, beta_init = _baseline_init(design)
    theta[lay.baseline] = binit
    if beta_init is not None:
        theta[lay.beta] = beta_init

    if not design.spec.random:
        return ThetaVector(theta, lay)

    fixed_design = _fixed_structure(design)
    fixed_ctx = LikelihoodContext(
        fixed_design, ctx.settings, ctx.relative_survival, ctx.delayed_entry
    )
    flay = fixed_design.layout
    start1 = np.zeros(flay.size)
    start1[flay.baseline] = binit
    if beta_init is not None:
        start1[flay.beta] = beta_init
    if verbose:
        print("Fitting fixed effects model:")
        print()
    x1, _, info1 = _bfgs_maximize(
        fixed_ctx.engine.total_loglik, start1, maxiter=maxiter, verbose=verbose
    )
    if info1.status == "stalled":
        raise ConvergenceError(
            "fixed-effects starting model did not converge; "
            "retry with zeros=True (all-zero starting values)"
        )
    theta[: flay.size] = x1  # shared [beta, tvc, baseline] prefix
    for eq, kind, sl in zip(design.spec.random, design.spec.covariance, lay.cov_slices):
        theta[sl] = _zero_covariance_start(kind, eq.q)
    return ThetaVector(theta, lay)


def _logsd_positions(design) -> list[int]:
    pos = []
    for eq, kind, sl in zip(design.spec.random, design.spec.covariance, design.layout.cov_slices):
        base = sl.start
        if kind in ("diagonal", "identity"):
            pos.extend(range(base, sl.stop if kind == "diagonal" else base + 1))
        elif kind == "exchangeable":
            pos.append(base)
        else:  # unstructured log-diagonal entries
            off = 0
            for i in range(eq.q):
                off += i
                pos.append(base + off)
                off += 1
    return pos


def maximize(
    start: ThetaVector,
    ctx: LikelihoodContext,
    *,
    maxiter: int = MAX_ITER,
    verbose: bool = False,
    level: float = 95.0,
) -> FittedModel:
    """Quasi-Newton maximization with observed-information covariance."""
    design = ctx.design
    f = ctx.engine.total_loglik
    x0 = np.asarray(start.values, dtype=float).copy()
    if not np.isfinite(f(x0)):
        logsd = _logsd_positions(design)
        for _ in range(5):
            for i in logsd:
                x0[i] += 0.5
            if np.isfinite(f(x0)):
                break
        else:
            raise ConvergenceError(
                "log likelihood is not finite at the starting values"
            )
    if verbose and design.spec.random:
        print("Fitting full model:")
        print()
    xhat, fhat, info = _bfgs_maximize(f, x0, maxiter=maxiter, verbose=verbose)

    hess = numerical_hessian(f, xhat)
    vcov = None
    try:
        factor = cho_factor(-hess, lower=True)
        vcov = cho_solve(factor, np.eye(xhat.size))
        vcov = 0.5 * (vcov + vcov.T)
    except np.linalg.LinAlgError:
        vcov = None
    return FittedModel(
        structure=design.structure,
        theta=ThetaVector(xhat, design.layout),
        vcov=vcov,
        loglik=float(fhat),
        convergence=info,
        n_obs=design.n,
        n_events=int(np.sum(design.d)),
        settings=ctx.settings,
        relative_survival=ctx.relative_survival,
        delayed_entry=ctx.delayed_entry,
        level=level,
    )


def fit(
    dataset,
    spec,
    settings: IntegrationSettings | None = None,
    *,
    zeros: bool = False,
    start: ThetaVector | None = None,
    maxiter: int = MAX_ITER,
    verbose: bool = False,
    level: float = 95.0,
) -> FittedModel:
    """Compile, find starting values, and maximize."""
    from .model import compile_design

    design = compile_design(spec, dataset)
    ctx = LikelihoodContext(design, settings)
    if start is None:
        start = starting_values(ctx, zeros=zeros, verbose=verbose, maxiter=maxiter)
    return maximize(start, ctx, maxiter=maxiter, verbose=verbose, level=level)


# -- reporting ------------------------------------------------------------------


@dataclass
class ReportRow:
    label: str
    coef: float | None = None
    se: float | None = None
    z: float | None = None
    p: float | None = None
    lci: float | None = None
    uci: float | None = None
    section: str = ""  # linear predictor section or level name


@dataclass
class Report:
    rows: list
    loglik: float
    n_obs: int
    level: float
    notes: list = field(default_factory=list)

    def __str__(self) -> str:
        lines = []
        lines.append(f"{'Mixed effects survival model':<48}Number of obs     = {self.n_obs:>10,}")
        lines.append(f"Log likelihood = {self.loglik:.5f}")
        sep = "-" * 78
        lines.append(sep)
        lines.append(
            f"{'':>13}|{'Coef.':>11}{'Std. Err.':>11}{'z':>8}{'P>|z|':>8}"
            f"{'[' + format(self.level, 'g') + '% Conf. Interval]':>26}"
        )
        lines.append("-" * 13 + "+" + "-" * 64)
        section = None
        for row in self.rows:
            if row.section != section:
                section = row.section
                lines.append(f"{section + ':':<13}|")

            def cell(v, fmt="{:>11.7g}", blank=11):
                return fmt.format(v) if v is not None else " " * blank

            lines.append(
                f"{row.label:>12} |"
                + cell(row.coef)
                + cell(row.se)
                + cell(row.z, "{:>8.2f}", 8)
                + cell(row.p, "{:>8.3f}", 8)
                + cell(row.lci, "{:>13.7g}", 13)
                + cell(row.uci, "{:>13.7g}", 13)
            )
        lines.append(sep)
        lines.extend(f"    Warning: {note}" for note in self.notes)
        return "\n".join(lines)


def _se_of(fit: FittedModel, i: int) -> float | None:
    if fit.vcov is None:
        return None
    v = fit.vcov[i, i]
    return math.sqrt(v) if v >= 0 else None


def report(fit: FittedModel, level: float | None = None, show_baseline: bool = False) -> Report:
    """Coefficient table: estimates, SEs, z, p, and Wald intervals.

    Random-effect standard deviations are reported as exp(log-sd) with
    end-point-transformed intervals; their asymmetry about the estimate is
    the mark of the exponentiated scale.  Baseline spline coefficients are
    suppressed unless requested.
    """
    level = fit.level if level is None else level
    if not 0 < level < 100:
        raise ModelSpecError(f"level must be in (0, 100), got {level}")
    zcrit = norm.ppf(0.5 + level / 200.0)
    lay = fit.structure.layout
    spec = fit.spec
    theta = fit.theta.values
    rows: list[ReportRow] = []
    notes: list[str] = []

    def coef_row(i, label, section):
        se = _se_of(fit, i)
        est = theta[i]
        if se is None or se == 0.0:
            rows.append(ReportRow(label, est, se, section=section))
            return
        z = est / se
        rows.append(
            ReportRow(
                label,
                est,
                se,
                z,
                2.0 * norm.sf(abs(z)),
                est - zcrit * se,
                est + zcrit * se,
                section=section,
            )
        )

    for i in range(lay.beta.start, lay.beta.stop):
        coef_row(i, lay.names[i], "_t")
    for sl in lay.tvc_slices:
        for i in range(sl.start, sl.stop):
            coef_row(i, lay.names[i], "_t")
    for label, _level, _var in fit.structure.re_labels:
        rows.append(ReportRow(label, 1.0, section="_t"))
    b = lay.baseline
    coef_row(b.start, "_cons", "_t")
    if spec.distribution in ("weibull", "gompertz"):
        coef_row(b.start + 1, lay.names[b.start + 1], "_t")
    elif spec.distribution in ("rp", "rcs_loghazard"):
        if show_baseline:
            for i in range(b.start + 1, b.stop):
                coef_row(i, lay.names[i], "_t")
        else:
            notes.append(
                "Baseline spline coefficients not shown - "
                "use report(..., show_baseline=True)"
            )
    elif spec.distribution == "user":
        for i in range(b.start + 1, b.stop):
            coef_row(i, lay.names[i], "_t")

    # random-effect summaries, one block per level
    m = 0
    for eq, kind, sl in zip(spec.random, spec.covariance, lay.cov_slices):
        labels = [f"M{m + k + 1}" for k in range(eq.q)]
        block = theta[sl]
        vblock = fit.vcov[sl, sl] if fit.vcov is not None else None

        def tx_row(label, est, se_t, transform, inverse_ci):
            """est on transformed scale with monotone back-transform."""
            val = transform(est)
            if se_t is None:
                rows.append(ReportRow(label, val, section=eq.level))
                return
            lo, hi = inverse_ci(est - zcrit * se_t, est + zcrit * se_t)
            rows.append(
                ReportRow(label, val, abs(val) * se_t if transform is math.exp else se_t,
                          lci=lo, uci=hi, section=eq.level)
            )

        if kind == "diagonal":
            for k in range(eq.q):
                i = sl.start + k
                tx_row(
                    f"sd({labels[k]})",
                    theta[i],
                    _se_of(fit, i),
                    math.exp,
                    lambda a, b_: (math.exp(a), math.exp(b_)),
                )
        elif kind == "identity":
            i = sl.start
            lab = f"sd({labels[0]})" if eq.q == 1 else f"sd({labels[0]}..{labels[-1]})"
            tx_row(lab, theta[i], _se_of(fit, i), math.exp,
                   lambda a, b_: (math.exp(a), math.exp(b_)))
        elif kind == "exchangeable":
            i = sl.start
            lab = f"sd({labels[0]})" if eq.q == 1 else f"sd({labels[0]}..{labels[-1]})"
            tx_row(lab, theta[i], _se_of(fit, i), math.exp,
                   lambda a, b_: (math.exp(a), math.exp(b_)))
            lo_b = -1.0 / (eq.q - 1)

            def rho(t):
                return lo_b + (1.0 - lo_b) * (math.tanh(t) + 1.0) / 2.0

            j = sl.start + 1
            se_j = _se_of(fit, j)
            est = rho(theta[j])
            if se_j is None:
                rows.append(ReportRow("corr", est, section=eq.level))
            else:
                drho = (1.0 - lo_b) / 2.0 * (1.0 - math.tanh(theta[j]) ** 2)
                rows.append(
                    ReportRow(
                        "corr",
                        est,
                        abs(drho) * se_j,
                        lci=rho(theta[j] - zcrit * se_j),
                        uci=rho(theta[j] + zcrit * se_j),
                        section=eq.level,
                    )
                )
        else:  # unstructured: delta method through the assembled matrix
            def sigma_of(block_vals):
                return assemble_sigma(CovarianceStructure(kind, eq.q, tuple(block_vals)))

            sig = sigma_of(block)
            for k in range(eq.q):
                est = math.sqrt(sig[k, k])

                def g_logsd(v, k=k):
                    return 0.5 * math.log(sigma_of(v)[k, k])

                se_t = _delta_se(g_logsd, block, vblock)
                tx_row(f"sd({labels[k]})", g_logsd(block), se_t, math.exp,
                       lambda a, b_: (math.exp(a), math.exp(b_)))
            for k in range(eq.q):
                for l in range(k):
                    def g_atanh(v, k=k, l=l):
                        s = sigma_of(v)
                        return math.atanh(s[k, l] / math.sqrt(s[k, k] * s[l, l]))

                    se_t = _delta_se(g_atanh, block, vblock)
                    est_t = g_atanh(block)
                    if se_t is None:
                        rows.append(ReportRow(f"corr({labels[l]},{labels[k]})",
                                              math.tanh(est_t), section=eq.level))
                    else:
                        rows.append(
                            ReportRow(
                                f"corr({labels[l]},{labels[k]})",
                                math.tanh(est_t),
                                (1 - math.tanh(est_t) ** 2) * se_t,
                                lci=math.tanh(est_t - zcrit * se_t),
                                uci=math.tanh(est_t + zcrit * se_t),
                                section=eq.level,
                            )
                        )
        m += eq.q

    rep = Report(rows, fit.loglik, fit.n_obs, level, notes)
    if not fit.convergence.converged:
        rep.notes.append("convergence not achieved")
    return rep


def _delta_se(g, block, vblock) -> float | None:
    if vblock is None:
        return None
    block = np.asarray(block, dtype=float)
    grad = np.zeros(block.size)
    for i in range(block.size):
        e = np.zeros(block.size)
        e[i] = GRAD_STEP * max(abs(block[i]), 1.0)
        grad[i] = (g(block + e) - g(block - e)) / (2.0 * e[i])
    var = float(grad @ vblock @ grad)
    return math.sqrt(var) if var >= 0 else None
