"""Model specification and design compilation.

ModelSpec is the user-facing configuration: family, baseline flexibility,
fixed and time-dependent covariates, random-effect equations (one per
nesting level, highest first), covariance structures, and the
random-effect distribution.  compile_design binds it to a Dataset,
placing knots, building spline bases and design matrices, and fixing the
packed parameter layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ModelSpecError
from .families import FAMILY_KINDS, n_baseline_params
from .random_effects import COVARIANCE_KINDS, REDistribution, n_free_params
from .splines import KnotVector, SplineBasis, place_default_knots

N_CUMHAZARD_NODES = 30


@dataclass(frozen=True)
class TvcSpec:
    """A time-dependent effect: covariate interacted with a spline of log
    time.  Explicit knots are interior knots on the time scale."""

    var: str
    df: int = 1
    knots: tuple[float, ...] | None = None


@dataclass(frozen=True)
class RandomEquation:
    """Random effects at one nesting level: loadings on the listed
    covariates plus, unless suppressed, a random intercept."""

    level: str
    vars: tuple[str, ...] = ()
    intercept: bool = True

    @property
    def q(self) -> int:
        return len(self.vars) + (1 if self.intercept else 0)

    @property
    def design_names(self) -> tuple[str, ...]:
        return self.vars + (("_cons",) if self.intercept else ())


@dataclass(frozen=True)
class ModelSpec:
    distribution: str
    fixed: tuple[str, ...] = ()
    df: int = 3
    knots: tuple[float, ...] | None = None  # interior knots, time scale
    tvc: tuple[TvcSpec, ...] = ()
    random: tuple[RandomEquation, ...] = ()
    covariance: tuple[str, ...] = ()
    re_distribution: REDistribution = field(default_factory=REDistribution)
    orthogonalize: bool = True
    cumhazard_nodes: int = N_CUMHAZARD_NODES
    user_hazard: object = None
    user_cumhazard: object = None
    user_n_params: int = 1

    def __post_init__(self):
        if self.distribution not in FAMILY_KINDS:
            raise ModelSpecError(f"unknown distribution {self.distribution!r}")
        if self.distribution in ("rp", "rcs_loghazard") and self.knots is None:
            if not 1 <= self.df <= 10:
                raise ModelSpecError(f"df must be between 1 and 10, got {self.df}")
        if self.distribution == "user" and self.user_hazard is None:
            raise ModelSpecError("user distribution needs a hazard callback")
        fixed = set(self.fixed)
        if len(fixed) != len(self.fixed):
            raise ModelSpecError("duplicate fixed covariates")
        for term in self.tvc:
            if term.var not in fixed:
                raise ModelSpecError(
                    f"tvc covariate {term.var!r} must also be a fixed covariate"
                )
            if term.knots is None and not 1 <= term.df <= 10:
                raise ModelSpecError(
                    f"dftvc must be between 1 and 10, got {term.df} for {term.var!r}"
                )
        for eq in self.random:
            if eq.q < 1:
                raise ModelSpecError(
                    f"random equation at level {eq.level!r} has no terms"
                )
        if self.covariance:
            if len(self.covariance) != len(self.random):
                raise ModelSpecError(
                    "covariance() takes one structure per random-effects equation"
                )
            for kind in self.covariance:
                if kind not in COVARIANCE_KINDS:
                    raise ModelSpecError(f"unknown covariance kind {kind!r}")
        else:
            object.__setattr__(self, "covariance", ("diagonal",) * len(self.random))

    @property
    def n_levels(self) -> int:
        return len(self.random)


@dataclass(frozen=True)
class ThetaLayout:
    """Named slices into the packed free-parameter vector: fixed
    coefficients, tvc coefficients, baseline parameters, covariance
    parameters (one block per level)."""

    names: tuple[str, ...]
    beta: slice
    tvc_slices: tuple[slice, ...]
    baseline: slice
    cov_slices: tuple[slice, ...]

    @property
    def size(self) -> int:
        return len(self.names)


def _re_labels(spec: ModelSpec) -> tuple[tuple[str, str, str], ...]:
    """(label, level, loading var) per random effect, numbered M1, M2, ..."""
    out = []
    m = 0
    for eq in spec.random:
        for var in eq.design_names:
            m += 1
            label = f"M{m}[{eq.level}]" if var == "_cons" else f"{var}#M{m}[{eq.level}]"
            out.append((label, eq.level, var))
    return tuple(out)


def build_layout(spec: ModelSpec, baseline_df: int) -> ThetaLayout:
    names: list[str] = list(spec.fixed)
    pos = len(names)
    tvc_slices = []
    for term in spec.tvc:
        dfr = term.df if term.knots is None else len(term.knots) + 1
        if dfr == 1:
            names.append(f"{term.var}#rcs()")
        else:
            names.extend(f"{term.var}#rcs({j})" for j in range(1, dfr + 1))
        tvc_slices.append(slice(pos, pos + dfr))
        pos += dfr
    nb = n_baseline_params(spec.distribution, baseline_df, spec.user_n_params)
    bnames = ["_cons"]
    if spec.distribution == "weibull":
        bnames.append("log(gamma)")
    elif spec.distribution == "gompertz":
        bnames.append("gamma")
    elif spec.distribution in ("rp", "rcs_loghazard"):
        bnames.extend(f"rcs({j})" for j in range(1, baseline_df + 1))
    elif spec.distribution == "user":
        bnames.extend(f"user({j})" for j in range(1, nb))
    names.extend(bnames)
    baseline = slice(pos, pos + nb)
    pos += nb
    cov_slices = []
    for eq, kind in zip(spec.random, spec.covariance):
        nfree = n_free_params(kind, eq.q)
        cov_slices.append(slice(pos, pos + nfree))
        if kind == "diagonal":
            names.extend(f"log_sd({eq.level}:{v})" for v in eq.design_names)
        elif kind == "identity":
            names.append(f"log_sd({eq.level})")
        elif kind == "exchangeable":
            names.extend([f"log_sd({eq.level})", f"atanh_corr({eq.level})"])
        else:
            names.extend(
                f"chol({eq.level})[{i},{j}]" for i in range(eq.q) for j in range(i + 1)
            )
        pos += nfree
    return ThetaLayout(tuple(names), slice(0, len(spec.fixed)), tuple(tvc_slices), baseline, tuple(cov_slices))


@dataclass(frozen=True)
class ModelStructure:
    """Everything prediction needs besides the data: the spec, the packed
    layout, and the frozen spline bases (knots snapshot)."""

    spec: ModelSpec
    layout: ThetaLayout
    baseline_basis: SplineBasis | None
    tvc_bases: tuple[SplineBasis, ...]

    @property
    def re_labels(self):
        return _re_labels(self.spec)


@dataclass
class ModelDesign:
    """ModelStructure plus the data bound design arrays used by the
    likelihood engine."""

    structure: ModelStructure
    # per-record arrays
    T: np.ndarray
    d: np.ndarray
    entry: np.ndarray
    rate: np.ndarray | None
    X: np.ndarray  # (n, p) fixed covariates
    tvc_x: tuple[np.ndarray, ...]  # covariate column per tvc term
    z_levels: tuple[np.ndarray, ...]  # (n, q_l) per level
    clusters: tuple
    # basis values at exit times
    B: np.ndarray | None
    dB: np.ndarray | None
    tvc_B: tuple[np.ndarray, ...]
    tvc_dB: tuple[np.ndarray, ...]
    # entry-time machinery (delayed entry)
    entry_declared: bool
    B_entry: np.ndarray | None
    tvc_B_entry: tuple[np.ndarray, ...]
    # Gauss-Legendre sub-times for numeric cumulative hazards
    needs_numeric: bool
    gl_t: np.ndarray | None  # (n, K)
    gl_lw: np.ndarray | None
    B_gl: np.ndarray | None  # (n, K, df)
    tvc_B_gl: tuple[np.ndarray, ...]
    gl_t_entry: np.ndarray | None
    gl_lw_entry: np.ndarray | None
    B_gl_entry: np.ndarray | None
    tvc_B_gl_entry: tuple[np.ndarray, ...]

    @property
    def spec(self) -> ModelSpec:
        return self.structure.spec

    @property
    def layout(self) -> ThetaLayout:
        return self.structure.layout

    @property
    def n(self) -> int:
        return self.T.shape[0]


def _tvc_knots(term: TvcSpec, event_log_times) -> KnotVector:
    if term.knots is None:
        return place_default_knots(event_log_times, term.df)
    lo = float(np.min(event_log_times))
    hi = float(np.max(event_log_times))
    interior = tuple(sorted(np.log(k) for k in term.knots))
    return KnotVector(lo, interior, hi)


def _gl_grid(spec: ModelSpec, times: np.ndarray):
    """Cubic-mapped Gauss-Legendre nodes on (0, t] per row (see
    families.cumhazard_nodes); log-weights stacked."""
    from .families import cumhazard_nodes

    return cumhazard_nodes(times, spec.cumhazard_nodes)


def compile_design(spec: ModelSpec, dataset: Dataset) -> ModelDesign:
    """Bind a ModelSpec to declared, grouped data."""
    if dataset.time_col is None or dataset.event_col is None:
        raise ModelSpecError("dataset has no declared survival outcome")
    needed = set(spec.fixed) | {t.var for t in spec.tvc}
    for eq in spec.random:
        needed |= set(eq.vars)
    missing = needed - set(dataset.covariate_names)
    if missing:
        raise ModelSpecError(f"covariates not in dataset: {sorted(missing)}")
    if spec.random:
        levels = tuple(eq.level for eq in spec.random)
        if dataset.level_names != levels:
            raise ModelSpecError(
                f"dataset hierarchy {dataset.level_names} does not match the "
                f"random-effect levels {levels}; call build_hierarchy first"
            )

    T = np.asarray(dataset.columns[dataset.time_col], dtype=float)
    d = np.asarray(dataset.columns[dataset.event_col], dtype=float)
    entry_declared = dataset.entry_col is not None
    entry = (
        np.asarray(dataset.columns[dataset.entry_col], dtype=float)
        if entry_declared
        else np.zeros_like(T)
    )
    rate = (
        np.asarray(dataset.columns[dataset.rate_col], dtype=float)
        if dataset.rate_col
        else None
    )
    logT = np.log(T)
    event_logt = logT[d == 1.0]

    # baseline basis
    baseline_basis = None
    baseline_df = 0
    if spec.distribution in ("rp", "rcs_loghazard"):
        if spec.knots is not None:
            if event_logt.size == 0:
                raise ModelSpecError("no events: cannot place boundary knots")
            kv = KnotVector(
                float(event_logt.min()),
                tuple(sorted(np.log(k) for k in spec.knots)),
                float(event_logt.max()),
            )
        else:
            kv = place_default_knots(event_logt, spec.df)
        baseline_basis = SplineBasis.build(kv, sample_x=logT, orthogonalize=spec.orthogonalize)
        baseline_df = kv.df

    # tvc bases share the orthogonalization convention (zero mean, unit
    # variance over the fitting sample), so reported interaction
    # coefficients are on the standardized log-time scale
    tvc_bases = tuple(
        SplineBasis.build(
            _tvc_knots(term, event_logt), sample_x=logT, orthogonalize=spec.orthogonalize
        )
        for term in spec.tvc
    )

    X = (
        np.column_stack([np.asarray(dataset.columns[v], dtype=float) for v in spec.fixed])
        if spec.fixed
        else np.zeros((T.shape[0], 0))
    )
    tvc_x = tuple(np.asarray(dataset.columns[t.var], dtype=float) for t in spec.tvc)
    z_levels = []
    for eq in spec.random:
        cols = [
            np.ones_like(T) if v == "_cons" else np.asarray(dataset.columns[v], dtype=float)
            for v in eq.design_names
        ]
        z_levels.append(np.column_stack(cols))

    B = baseline_basis.eval(logT) if baseline_basis is not None else None
    dB = baseline_basis.deriv(logT) if baseline_basis is not None else None
    tvc_B = tuple(basis.eval(logT) for basis in tvc_bases)
    tvc_dB = tuple(basis.deriv(logT) for basis in tvc_bases)

    has_entry = bool(np.any(entry > 0))
    B_entry = None
    tvc_B_entry = ()
    log_entry = None
    if has_entry:
        log_entry = np.where(entry > 0, np.log(np.where(entry > 0, entry, 1.0)), 0.0)
        if baseline_basis is not None:
            B_entry = baseline_basis.eval(log_entry)
        tvc_B_entry = tuple(basis.eval(log_entry) for basis in tvc_bases)

    needs_numeric = spec.distribution == "rcs_loghazard" or (
        spec.distribution in ("exponential", "weibull", "gompertz", "user") and bool(spec.tvc)
    ) or (spec.distribution == "user" and spec.user_cumhazard is None)

    gl_t = gl_lw = B_gl = None
    tvc_B_gl = ()
    gl_t_entry = gl_lw_entry = B_gl_entry = None
    tvc_B_gl_entry = ()
    if needs_numeric and spec.distribution != "user":
        gl_t, gl_lw = _gl_grid(spec, T)
        log_gl = np.log(gl_t)
        if baseline_basis is not None:
            B_gl = baseline_basis.eval(log_gl)
        tvc_B_gl = tuple(basis.eval(log_gl) for basis in tvc_bases)
        if has_entry:
            pos = entry > 0
            safe_entry = np.where(pos, entry, 1.0)
            gl_t_entry, gl_lw_entry = _gl_grid(spec, safe_entry)
            gl_lw_entry = np.where(pos[:, None], gl_lw_entry, -np.inf)
            log_gl_e = np.log(gl_t_entry)
            if baseline_basis is not None:
                B_gl_entry = baseline_basis.eval(log_gl_e)
            tvc_B_gl_entry = tuple(basis.eval(log_gl_e) for basis in tvc_bases)

    layout = build_layout(spec, baseline_df)
    structure = ModelStructure(spec, layout, baseline_basis, tvc_bases)
    return ModelDesign(
        structure=structure,
        T=T,
        d=d,
        entry=entry,
        rate=rate,
        X=X,
        tvc_x=tvc_x,
        z_levels=tuple(z_levels),
        clusters=dataset.clusters or (),
        B=B,
        dB=dB,
        tvc_B=tvc_B,
        tvc_dB=tvc_dB,
        entry_declared=entry_declared,
        B_entry=B_entry,
        tvc_B_entry=tvc_B_entry,
        needs_numeric=needs_numeric,
        gl_t=gl_t,
        gl_lw=gl_lw,
        B_gl=B_gl,
        tvc_B_gl=tvc_B_gl,
        gl_t_entry=gl_t_entry,
        gl_lw_entry=gl_lw_entry,
        B_gl_entry=B_gl_entry,
        tvc_B_gl_entry=tvc_B_gl_entry,
    )


def bind(structure: ModelStructure, theta: np.ndarray):
    """Materialize a Family, LinearPredictorSpec and per-level covariance
    structures from a packed parameter vector."""
    from .families import Family, LinearPredictorSpec, TvcTerm
    from .random_effects import CovarianceStructure

    spec = structure.spec
    layout = structure.layout
    theta = np.asarray(theta, dtype=float)
    family = Family(
        kind=spec.distribution,
        baseline_params=tuple(theta[layout.baseline]),
        basis=structure.baseline_basis,
        user_hazard=spec.user_hazard,
        user_cumhazard=spec.user_cumhazard,
    )
    fixed = tuple(zip(spec.fixed, theta[layout.beta]))
    tvc_terms = tuple(
        TvcTerm(term.var, basis, tuple(theta[sl]))
        for term, basis, sl in zip(spec.tvc, structure.tvc_bases, layout.tvc_slices)
    )
    re_design = tuple(eq.design_names for eq in spec.random)
    lp = LinearPredictorSpec(fixed=fixed, tvc=tvc_terms, re_design=re_design)
    covs = tuple(
        CovarianceStructure(kind, eq.q, tuple(theta[sl]))
        for eq, kind, sl in zip(spec.random, spec.covariance, layout.cov_slices)
    )
    return family, lp, covs
