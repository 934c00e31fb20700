"""Marginal log-likelihood assembly.

Each top-level cluster contributes

    log L_i = log integral over b of  prod_j f_j(b) p(b) db

evaluated as a log-sum-exp over quadrature or Monte-Carlo nodes carrying
Lebesgue weights (the node reference density is folded into the weights,
see quadrature).  The mvaghermite method recentres and rescales each
cluster's nodes at the posterior mean and variance of its integrand,
iterated to convergence; lower nesting levels stay non-adaptive.
Subject densities are d * log h(T) - H(T) on the hazard
scale, or the cumulative-hazard-scale form for the 'rp' family.  Under
relative survival the event term becomes d * log(h*(T) + hazard) while the
cumulative term keeps the excess hazard only.  Under delayed entry the
cluster value subtracts the log marginal survival at the entry times,
integral of prod_j S(t0_j | b) p(b) db, evaluated over the same nodes.

Since random effects enter the linear predictor and stay constant in
time, every built-in family reduces per record to

    log f_j(b) = d_j * A_j(u_j) - exp(c_j + u_j),     u_j = z_j' b

with theta-dependent constants precomputed once per evaluation; cluster
evaluation is then vectorized over nodes.  User-defined hazards cannot be
factored this way and take a per-node path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
from scipy.linalg import cholesky
from scipy.special import logsumexp

from .errors import ModelSpecError
from .families import cum_hazard, eta as eta_op, log_hazard
from .model import ModelDesign, ModelStructure, ThetaLayout, bind
from .quadrature import (
    AdaptationWarning,
    IntegrationSettings,
    adapt_cluster,
    gauss_hermite,
    mc_draws,
    mc_reference,
    shift_to_reference,
    tensor_nodes,
)
from .random_effects import (
    CovarianceStructure,
    assemble_sigma,
    logdensity_gaussian,
    logdensity_t,
)


@dataclass(frozen=True)
class ThetaVector:
    """Packed free parameters plus the layout mapping names to slices."""

    values: np.ndarray
    layout: ThetaLayout

    def __post_init__(self):
        if len(self.values) != self.layout.size:
            raise ModelSpecError(
                f"theta has {len(self.values)} values, layout needs {self.layout.size}"
            )

    def unpack(self) -> dict:
        lay = self.layout
        return {
            "beta": self.values[lay.beta],
            "tvc": tuple(self.values[sl] for sl in lay.tvc_slices),
            "baseline": self.values[lay.baseline],
            "covariance": tuple(self.values[sl] for sl in lay.cov_slices),
        }

    @staticmethod
    def pack(layout: ThetaLayout, beta, tvc, baseline, covariance) -> "ThetaVector":
        vals = np.empty(layout.size)
        vals[layout.beta] = beta
        for sl, block in zip(layout.tvc_slices, tvc):
            vals[sl] = block
        vals[layout.baseline] = baseline
        for sl, block in zip(layout.cov_slices, covariance):
            vals[sl] = block
        return ThetaVector(vals, layout)


class LikelihoodContext:
    """A compiled design plus integration settings and model flags."""

    def __init__(
        self,
        design: ModelDesign,
        settings: IntegrationSettings | None = None,
        relative_survival: bool | None = None,
        delayed_entry: bool | None = None,
    ):
        self.design = design
        self.settings = settings or IntegrationSettings()
        if relative_survival is None:
            relative_survival = design.rate is not None
        if relative_survival and design.rate is None:
            raise ModelSpecError("relative survival needs an expected rate on every record")
        self.relative_survival = relative_survival
        self.delayed_entry = design.entry_declared if delayed_entry is None else delayed_entry
        spec = design.spec
        if spec.re_distribution.kind == "student_t" and spec.random:
            if self.settings.method != "mcarlo":
                raise ModelSpecError(
                    "t-distributed random effects support Monte-Carlo integration only"
                )
        self.engine = Engine(design, self.settings, self.relative_survival, self.delayed_entry)

    @property
    def layout(self) -> ThetaLayout:
        return self.design.layout


class Engine:
    """Vectorized likelihood evaluator."""

    def __init__(self, design: ModelDesign, settings, relative_survival, delayed_entry):
        self.design = design
        self.settings = settings
        self.relative_survival = relative_survival
        self.delayed_entry = delayed_entry
        spec = design.spec
        self.logT = np.log(design.T)
        self.ev = design.d == 1.0
        if relative_survival:
            rate = design.rate
            with np.errstate(divide="ignore"):
                self.lograte = np.where(rate > 0, np.log(np.where(rate > 0, rate, 1.0)), -np.inf)
        else:
            self.lograte = None
        self.entry_pos = design.entry > 0
        with np.errstate(divide="ignore"):
            self.log_entry = np.where(
                self.entry_pos, np.log(np.where(self.entry_pos, design.entry, 1.0)), -np.inf
            )
        # per-level standard-scale node sets, generated once and shared
        self._base_nodes = []
        for eq in spec.random:
            if settings.method == "mcarlo":
                ns = mc_draws(eq.q, settings.points, spec.re_distribution, settings.seed)
            else:
                ns = tensor_nodes(gauss_hermite(settings.points), eq.q)
            self._base_nodes.append(ns)
        # sorted-by-cluster record layout for the vectorized one-level path
        self._flat = None
        if (
            len(spec.random) == 1
            and spec.random[0].q == 1
            and spec.distribution != "user"
            and design.clusters
            and all(not cl.children for cl in design.clusters)
        ):
            ncl = len(design.clusters)
            rc = np.empty(design.n, dtype=int)
            for ci, cl in enumerate(design.clusters):
                rc[list(cl.record_idx)] = ci
            perm = np.argsort(rc, kind="stable")
            sizes = np.bincount(rc, minlength=ncl)
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            self._flat = SimpleNamespace(
                ncl=ncl,
                perm=perm,
                rc=rc[perm],
                offsets=offsets,
                z=design.z_levels[0][perm, 0],
                ev=self.ev[perm],
                lograte=self.lograte[perm] if relative_survival else None,
            )

    # -- per-theta profiles ------------------------------------------------

    def _eta_fixed(self, theta, B_list, x_cols=None):
        """Fixed-part linear predictor at the times whose tvc bases are in
        B_list; x_cols defaults to the design tvc covariate columns."""
        de = self.design
        lay = de.layout
        val = de.X @ theta[lay.beta]
        cols = x_cols if x_cols is not None else de.tvc_x
        for basis_vals, xcol, sl in zip(B_list, cols, lay.tvc_slices):
            term = basis_vals @ theta[sl]
            if term.ndim > 1:
                val = val[:, None] if val.ndim == 1 else val
                val = val + term * xcol[:, None]
            else:
                val = val + term * xcol
        return val

    def _profiles(self, theta) -> SimpleNamespace:
        de = self.design
        spec = de.spec
        lay = de.layout
        kind = spec.distribution
        bp = theta[lay.baseline]
        b0 = bp[0]
        logT = self.logT

        if kind == "user":
            return self._profiles_user(theta)

        eta_T = self._eta_fixed(theta, de.tvc_B)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            if kind == "rp":
                g = bp[1:]
                c_cum = b0 + de.B @ g + eta_T
                ds = de.dB @ g
                for dBr, xcol, sl in zip(de.tvc_dB, de.tvc_x, lay.tvc_slices):
                    ds = ds + (dBr @ theta[sl]) * xcol
                c_event = np.where(
                    ds > 0, np.log(np.where(ds > 0, ds, 1.0)) - logT + c_cum, -np.inf
                )
            elif kind == "rcs_loghazard":
                g = bp[1:]
                c_event = b0 + de.B @ g + eta_T
                c_cum = self._numeric_ccum(theta, b0, bp)
            elif kind == "exponential":
                c_event = b0 + eta_T
                c_cum = (
                    self._numeric_ccum(theta, b0, bp)
                    if de.needs_numeric
                    else b0 + logT + eta_T
                )
            elif kind == "weibull":
                gam = np.exp(bp[1])
                c_event = b0 + bp[1] + (gam - 1.0) * logT + eta_T
                c_cum = (
                    self._numeric_ccum(theta, b0, bp)
                    if de.needs_numeric
                    else b0 + gam * logT + eta_T
                )
            elif kind == "gompertz":
                gam = bp[1]
                c_event = b0 + gam * de.T + eta_T
                if de.needs_numeric:
                    c_cum = self._numeric_ccum(theta, b0, bp)
                else:
                    if gam == 0.0:
                        c_cum = b0 + logT + eta_T
                    else:
                        c_cum = b0 + np.log(np.expm1(gam * de.T) / gam) + eta_T
            else:  # pragma: no cover
                raise ModelSpecError(f"unhandled family {kind!r}")

            c_entry = self._entry_profile(theta, bp)
        return SimpleNamespace(c_event=c_event, c_cum=c_cum, c_entry=c_entry)

    def _numeric_ccum(self, theta, b0, bp, entry_side=False):
        """log H at the exit (or entry) times by Gauss-Legendre sums."""
        de = self.design
        spec = de.spec
        lay = de.layout
        kind = spec.distribution
        glt = de.gl_t_entry if entry_side else de.gl_t
        gllw = de.gl_lw_entry if entry_side else de.gl_lw
        Bgl = de.B_gl_entry if entry_side else de.B_gl
        tvcBgl = de.tvc_B_gl_entry if entry_side else de.tvc_B_gl
        log_glt = np.log(glt)
        if kind == "rcs_loghazard":
            base = b0 + Bgl @ bp[1:]
        elif kind == "exponential":
            base = np.full_like(glt, b0)
        elif kind == "weibull":
            base = b0 + bp[1] + (np.exp(bp[1]) - 1.0) * log_glt
        elif kind == "gompertz":
            base = b0 + bp[1] * glt
        else:  # pragma: no cover
            raise ModelSpecError(f"no numeric path for {kind!r}")
        eta_gl = self._eta_fixed(theta, tvcBgl)
        if eta_gl.ndim == 1:
            eta_gl = eta_gl[:, None]
        return logsumexp(gllw + base + eta_gl, axis=1)

    def _entry_profile(self, theta, bp):
        de = self.design
        if not np.any(self.entry_pos):
            return np.full(de.n, -np.inf)
        spec = de.spec
        lay = de.layout
        kind = spec.distribution
        b0 = bp[0]
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            if kind == "rp":
                eta_e = self._eta_fixed(theta, de.tvc_B_entry)
                val = b0 + de.B_entry @ bp[1:] + eta_e
            elif de.needs_numeric:
                val = self._numeric_ccum(theta, b0, bp, entry_side=True)
            else:
                eta_e = self._eta_fixed(theta, de.tvc_B_entry or de.tvc_B)
                if kind == "exponential":
                    val = b0 + self.log_entry + eta_e
                elif kind == "weibull":
                    val = b0 + np.exp(bp[1]) * self.log_entry + eta_e
                else:  # gompertz
                    gam = bp[1]
                    if gam == 0.0:
                        val = b0 + self.log_entry + eta_e
                    else:
                        val = b0 + np.log(np.expm1(gam * de.entry) / gam) + eta_e
        return np.where(self.entry_pos, val, -np.inf)

    def _profiles_user(self, theta) -> SimpleNamespace:
        """User family: per-record scalar callbacks at b = 0 offsets; the
        cluster path recomputes per node instead of shifting constants."""
        de = self.design
        family, lp, _ = bind(de.structure, theta)
        n = de.n
        c_event = np.empty(n)
        c_cum = np.empty(n)
        c_entry = np.full(n, -np.inf)
        x_rows = self._x_rows()
        bzero = np.zeros(lp.re_dim) if lp.re_dim else None
        for i in range(n):
            ev_eta = eta_op(lp, x_rows[i], bzero, de.T[i])
            c_event[i] = log_hazard(family, de.T[i], ev_eta, spec=lp, x=x_rows[i])
            with np.errstate(over="ignore"):
                h = cum_hazard(family, de.T[i], spec=lp, x=x_rows[i], b=bzero)
                c_cum[i] = np.log(h) if h > 0 else -np.inf
                if de.entry[i] > 0:
                    he = cum_hazard(family, de.entry[i], spec=lp, x=x_rows[i], b=bzero)
                    c_entry[i] = np.log(he) if he > 0 else -np.inf
        return SimpleNamespace(c_event=c_event, c_cum=c_cum, c_entry=c_entry)

    def _x_rows(self):
        de = self.design
        spec = de.spec
        names = list(dict.fromkeys(list(spec.fixed) + [t.var for t in spec.tvc]))
        name_to_col = {}
        for j, v in enumerate(spec.fixed):
            name_to_col[v] = de.X[:, j]
        for term, xcol in zip(spec.tvc, de.tvc_x):
            name_to_col.setdefault(term.var, xcol)
        return [{v: name_to_col[v][i] for v in names} for i in range(de.n)]

    # -- covariance assembly -----------------------------------------------

    def _covariances(self, theta):
        de = self.design
        spec = de.spec
        out = []
        for eq, kind, sl in zip(spec.random, spec.covariance, de.layout.cov_slices):
            with np.errstate(over="ignore"):
                sigma = assemble_sigma(CovarianceStructure(kind, eq.q, tuple(theta[sl])))
            if not np.all(np.isfinite(sigma)):
                return None  # invalid parameter region
            try:
                out.append((sigma, cholesky(sigma, lower=True)))
            except np.linalg.LinAlgError:
                return None  # variance underflowed to zero
        return out

    def _log_prior(self, b, sigma):
        dist = self.design.spec.re_distribution
        if dist.kind == "gaussian":
            return logdensity_gaussian(b, sigma)
        return logdensity_t(b, sigma, dist.dof)

    # -- record-level pieces -----------------------------------------------

    def _rows_ll(self, idx, U, prof, mode="density"):
        """Sum of record log densities for records idx given RE offsets U
        with shape (..., len(idx))."""
        if mode == "entry":
            with np.errstate(over="ignore"):
                return -np.sum(np.exp(prof.c_entry[idx] + U), axis=-1)
        with np.errstate(over="ignore", invalid="ignore"):
            cum = np.sum(np.exp(prof.c_cum[idx] + U), axis=-1)
            ev = prof.c_event[idx] + U
            if self.relative_survival:
                ev = np.logaddexp(self.lograte[idx], ev)
            evm = self.ev[idx]
            evsum = np.sum(ev[..., evm], axis=-1)
        return evsum - cum

    # -- fixed-effects model (no random effects) ----------------------------

    def _fixed_total(self, prof) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            ev = prof.c_event
            if self.relative_survival:
                ev = np.logaddexp(self.lograte, ev)
            total = np.sum(ev[self.ev]) - np.sum(np.exp(prof.c_cum))
            if self.delayed_entry:
                # conditional on survival to entry, subject by subject
                total = total + np.sum(np.exp(prof.c_entry[self.entry_pos]))
        return float(total)

    # -- all clusters at once: one level, scalar random effect --------------

    def _values_1level_q1(self, prof, sigma) -> np.ndarray:
        """Cluster values for a single scalar random effect per cluster.

        mvaghermite recentres and rescales the nodes at each cluster's
        posterior mean and standard deviation, iterating the moments to
        convergence for every cluster simultaneously.
        """
        fl = self._flat
        settings = self.settings
        dist = self.design.spec.re_distribution
        sig2 = float(sigma[0, 0])
        sd = np.sqrt(sig2)
        c1 = prof.c_event[fl.perm]
        c2 = prof.c_cum[fl.perm]
        ce = prof.c_entry[fl.perm]
        z, ev, rc = fl.z, fl.ev, fl.rc
        ncl = fl.ncl

        def seg_matrix(values):
            # values (nrec, K) -> per-cluster sums (ncl, K); rows are sorted
            # by cluster so reduceat segments them
            return np.add.reduceat(values, fl.offsets, axis=0)

        def rows_ll_matrix(B, mode="density"):
            """(ncl, K) record-sum log densities at node matrix B (ncl, K)."""
            u = z[:, None] * B[rc]
            if mode == "entry":
                with np.errstate(over="ignore"):
                    return -seg_matrix(np.exp(ce[:, None] + u))
            with np.errstate(over="ignore", invalid="ignore"):
                cum = seg_matrix(np.exp(c2[:, None] + u))
                evl = c1[:, None] + u
                if self.relative_survival:
                    evl = np.logaddexp(fl.lograte[:, None], evl)
                evs = seg_matrix(np.where(ev[:, None], evl, 0.0))
            return evs - cum

        def log_prior(B):
            if dist.kind == "gaussian":
                return -0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * (B / sd) ** 2
            return logdensity_t(B.reshape(-1, 1), sigma, dist.dof).reshape(B.shape)

        base = self._base_nodes[0]
        zk = base.nodes[:, 0]
        lwk = base.log_weights

        def lebesgue(mean, scale):
            B = mean[:, None] + scale[:, None] * zk[None, :]
            lw = (
                lwk[None, :]
                + 0.5 * np.log(2.0 * np.pi)
                + 0.5 * zk[None, :] ** 2
                + np.log(scale)[:, None]
            )
            return B, lw

        if settings.method == "mcarlo":
            if dist.kind == "student_t":
                scale_t = np.sqrt(sig2 * (dist.dof - 2.0) / dist.dof)
                brow = scale_t * zk
                bnodes = np.broadcast_to(brow, (ncl, zk.size))
                lw = np.broadcast_to(
                    lwk - logdensity_t(brow[:, None], sigma, dist.dof), (ncl, zk.size)
                )
            else:
                bnodes, lw = lebesgue(np.zeros(ncl), np.full(ncl, sd))
        elif settings.method == "ghermite":
            bnodes, lw = lebesgue(np.zeros(ncl), np.full(ncl, sd))
        else:  # mvaghermite: mean-variance adaptation, all clusters at once
            m = np.zeros(ncl)
            s = np.full(ncl, sd)
            ok = np.ones(ncl, dtype=bool)
            converged = np.zeros(ncl, dtype=bool)
            for _ in range(settings.adapt_iterations):
                B, lw = lebesgue(m, s)
                dens = lw + rows_ll_matrix(B) + log_prior(B)
                with np.errstate(invalid="ignore"):
                    li = logsumexp(dens, axis=1)
                    h = np.exp(dens - li[:, None])
                    m_new = np.sum(h * B, axis=1)
                    v_new = np.sum(h * B * B, axis=1) - m_new**2
                good = np.isfinite(m_new) & np.isfinite(v_new) & (v_new > 0)
                ok &= good | converged
                step_done = (
                    (np.abs(m_new - m) < settings.adapt_tolerance)
                    & (np.abs(np.sqrt(np.where(v_new > 0, v_new, 1.0)) - s) < settings.adapt_tolerance)
                )
                upd = ok & ~converged & good
                m = np.where(upd, m_new, m)
                s = np.where(upd, np.sqrt(np.where(v_new > 0, v_new, 1.0)), s)
                converged |= step_done & ok
                if np.all(converged | ~ok):
                    break
            use = ok & converged
            if not np.all(use):
                warnings.warn(
                    "cluster adaptation did not converge; using non-adaptive nodes",
                    AdaptationWarning,
                    stacklevel=2,
                )
            bnodes, lw = lebesgue(np.where(use, m, 0.0), np.where(use, s, sd))

        out = logsumexp(lw + rows_ll_matrix(bnodes) + log_prior(bnodes), axis=1)
        if self.delayed_entry:
            has_entry = np.add.reduceat(np.isfinite(ce).astype(float), fl.offsets) > 0
            if np.any(has_entry):
                s_marg = logsumexp(
                    lw + rows_ll_matrix(bnodes, "entry") + log_prior(bnodes), axis=1
                )
                out = np.where(has_entry, out - s_marg, out)
        return out

    # -- single-level clusters (vectorized over nodes) -----------------------

    def _cluster_value_1level(self, cl, prof, sigma, chol_s):
        de = self.design
        idx = np.asarray(cl.record_idx, dtype=int)
        Z = de.z_levels[0][idx]
        q = Z.shape[1]

        def ll_batch(B, mode="density"):
            U = B @ Z.T
            return self._rows_ll(idx, U, prof, mode)

        def G_batch(B, mode="density"):
            return ll_batch(B, mode) + self._log_prior(B, sigma)

        settings = self.settings
        if settings.method == "mvaghermite":
            ns = self._mv_adapt(G_batch, sigma, chol_s)
        elif settings.method == "ghermite":
            ns = shift_to_reference(self._base_nodes[0], np.zeros(q), chol_s)
        else:
            ns = mc_reference(self._base_nodes[0], sigma, de.spec.re_distribution)

        val = logsumexp(ns.log_weights + G_batch(ns.nodes))
        if self.delayed_entry and np.any(np.isfinite(prof.c_entry[idx])):
            val = val - logsumexp(ns.log_weights + G_batch(ns.nodes, mode="entry"))
        return float(val)

    def _mv_adapt(self, G_batch, sigma, chol_s):
        """Mean-variance adaptation for one cluster in q dimensions:
        iterate the posterior mean and covariance of the integrand under
        the current rule until stable, then return the recentred rule."""
        settings = self.settings
        base = self._base_nodes[0]
        q = base.dim
        mean = np.zeros(q)
        chol_post = chol_s
        ns = shift_to_reference(base, mean, chol_post)
        for _ in range(settings.adapt_iterations):
            dens = ns.log_weights + G_batch(ns.nodes)
            li = logsumexp(dens)
            if not np.isfinite(li):
                warnings.warn(
                    "cluster adaptation did not converge; using non-adaptive nodes",
                    AdaptationWarning,
                    stacklevel=2,
                )
                return shift_to_reference(base, np.zeros(q), chol_s)
            h = np.exp(dens - li)
            m_new = h @ ns.nodes
            centered = ns.nodes - m_new
            v_new = (centered * h[:, None]).T @ centered
            try:
                chol_new = cholesky(v_new, lower=True)
            except np.linalg.LinAlgError:
                warnings.warn(
                    "cluster adaptation did not converge; using non-adaptive nodes",
                    AdaptationWarning,
                    stacklevel=2,
                )
                return shift_to_reference(base, np.zeros(q), chol_s)
            done = (
                np.max(np.abs(m_new - mean)) < settings.adapt_tolerance
                and np.max(np.abs(chol_new - chol_post)) < settings.adapt_tolerance
            )
            mean, chol_post = m_new, chol_new
            ns = shift_to_reference(base, mean, chol_post)
            if done:
                return ns
        warnings.warn(
            "cluster adaptation did not converge; using non-adaptive nodes",
            AdaptationWarning,
            stacklevel=2,
        )
        return shift_to_reference(base, np.zeros(q), chol_s)

    # -- generic path: multilevel nesting or user families ------------------

    def _cluster_value_generic(self, cl, prof, covs, theta):
        de = self.design
        spec = de.spec
        user = spec.distribution == "user"
        if user:
            family, lp, _ = bind(de.structure, theta)
            x_rows = self._x_rows()
            etafix = {}

        # non-adaptive Lebesgue node sets for levels below the top
        inner_nodes = []
        for (sigma, chol_s), base in zip(covs, self._base_nodes):
            if self.settings.method == "mcarlo":
                inner_nodes.append(mc_reference(base, sigma, spec.re_distribution))
            else:
                inner_nodes.append(
                    shift_to_reference(base, np.zeros(base.dim), chol_s)
                )

        def record_ll(j, u, mode):
            if not user:
                if mode == "entry":
                    with np.errstate(over="ignore"):
                        return -float(np.exp(prof.c_entry[j] + u))
                with np.errstate(over="ignore"):
                    cum = float(np.exp(prof.c_cum[j] + u))
                if not self.ev[j]:
                    return -cum
                ev = prof.c_event[j] + u
                if self.relative_survival:
                    ev = np.logaddexp(self.lograte[j], ev)
                return float(ev) - cum
            # user family: recompute through the callbacks at eta + u
            x = x_rows[j]
            bzero = np.zeros(lp.re_dim)
            if mode == "entry":
                if de.entry[j] <= 0:
                    return 0.0
                base_eta = eta_op(lp, x, bzero, de.entry[j])
                return -cum_hazard(family, de.entry[j], base_eta + u)
            base_eta = eta_op(lp, x, bzero, de.T[j])
            hh = cum_hazard(family, de.T[j], base_eta + u)
            if self.ev[j]:
                lh = log_hazard(family, de.T[j], base_eta + u, spec=lp, x=x)
                if self.relative_survival:
                    lh = np.logaddexp(self.lograte[j], lh)
                return float(lh) - hh
            return -hh

        def subtree(node, depth, u_base, mode):
            """log of the level-(depth) integral for one subcluster given
            accumulated offsets u_base (dict record index -> float)."""
            ns = inner_nodes[depth]
            sigma = covs[depth][0]
            z = de.z_levels[depth]
            vals = np.empty(ns.npoints)
            for k in range(ns.npoints):
                b = ns.nodes[k]
                tot = self._log_prior(b, sigma)
                for j in node.record_idx:
                    tot += record_ll(j, u_base.get(j, 0.0) + float(z[j] @ b), mode)
                for child in node.children:
                    u_child = {
                        j: u_base.get(j, 0.0) + float(z[j] @ b)
                        for j in child.all_records()
                    }
                    tot += subtree(child, depth + 1, u_child, mode)
                vals[k] = tot
            return float(logsumexp(ns.log_weights + vals))

        sigma1, chol1 = covs[0]
        z1 = de.z_levels[0]

        def G_scalar(b, mode="density"):
            tot = float(self._log_prior(b, sigma1))
            for j in cl.record_idx:
                tot += record_ll(j, float(z1[j] @ b), mode)
            for child in cl.children:
                u_child = {j: float(z1[j] @ b) for j in child.all_records()}
                tot += subtree(child, 1, u_child, mode)
            return tot

        settings = self.settings
        if settings.method == "mvaghermite":
            ns = adapt_cluster(self._base_nodes[0], G_scalar, sigma1, settings)
        elif settings.method == "ghermite":
            ns = shift_to_reference(self._base_nodes[0], np.zeros(self._base_nodes[0].dim), chol1)
        else:
            ns = mc_reference(self._base_nodes[0], sigma1, spec.re_distribution)

        vals = np.array([G_scalar(ns.nodes[k]) for k in range(ns.npoints)])
        out = float(logsumexp(ns.log_weights + vals))
        if self.delayed_entry and any(
            np.isfinite(prof.c_entry[j]) or (user and de.entry[j] > 0)
            for j in cl.all_records()
        ):
            svals = np.array([G_scalar(ns.nodes[k], mode="entry") for k in range(ns.npoints)])
            out = out - float(logsumexp(ns.log_weights + svals))
        return out

    def _cluster_value(self, cl, prof, covs, theta):
        spec = self.design.spec
        if len(spec.random) == 1 and spec.distribution != "user" and not cl.children:
            sigma, chol_s = covs[0]
            return self._cluster_value_1level(cl, prof, sigma, chol_s)
        return self._cluster_value_generic(cl, prof, covs, theta)

    # -- entry points --------------------------------------------------------

    def cluster_values(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        prof = self._profiles(theta)
        covs = self._covariances(theta)
        if covs is None:
            return np.full(len(self.design.clusters), -np.inf)
        if self._flat is not None:
            return self._values_1level_q1(prof, covs[0][0])
        return np.array(
            [self._cluster_value(cl, prof, covs, theta) for cl in self.design.clusters]
        )

    def total_loglik(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        prof = self._profiles(theta)
        if not self.design.spec.random:
            return self._fixed_total(prof)
        covs = self._covariances(theta)
        if covs is None:
            return -np.inf
        if self._flat is not None:
            return float(np.sum(self._values_1level_q1(prof, covs[0][0])))
        vals = [self._cluster_value(cl, prof, covs, theta) for cl in self.design.clusters]
        return float(np.sum(vals))


# -- public operations -------------------------------------------------------


def subject_log_density(
    rec,
    b,
    theta: ThetaVector,
    ctx: LikelihoodContext,
    condition_on_entry: bool = True,
) -> float:
    """Log density of one record given its random effects.

    With delayed entry and condition_on_entry, the term +H(entry | b) is
    added (survival from entry, conditional on b); this is the form the
    fixed-effects likelihood sums directly.  The mixed likelihood instead
    integrates the unconditional densities and divides by the marginal
    entry survival at cluster level (see cluster_log_likelihood).
    """
    family, lp, _ = bind(ctx.design.structure, theta.values)
    x = rec.covariates
    bvec = np.zeros(lp.re_dim) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    ev = eta_op(lp, x, bvec if lp.re_dim else None, rec.exit_time)
    hh = cum_hazard(family, rec.exit_time, ev, spec=lp, x=x, b=bvec if lp.re_dim else None)
    val = -hh
    if rec.event:
        lh = log_hazard(family, rec.exit_time, ev, spec=lp, x=x)
        if ctx.relative_survival:
            lh = float(np.logaddexp(np.log(rec.expected_rate) if rec.expected_rate > 0 else -np.inf, lh))
        val += lh
    if ctx.delayed_entry and condition_on_entry and rec.entry_time > 0:
        val += cum_hazard(
            family, rec.entry_time, spec=lp, x=x, b=bvec if lp.re_dim else None
        )
    return float(val)


def cluster_log_likelihood(cluster, theta: ThetaVector, ctx: LikelihoodContext) -> float:
    """Marginal log likelihood of one top-level cluster."""
    engine = ctx.engine
    vals = np.asarray(theta.values if isinstance(theta, ThetaVector) else theta, dtype=float)
    if engine._flat is not None:
        pos = next(
            i for i, cl in enumerate(ctx.design.clusters)
            if cl.cluster_id == cluster.cluster_id
        )
        out = float(engine.cluster_values(vals)[pos])
        if out == -np.inf:
            warnings.warn(
                f"all quadrature nodes underflowed for cluster {cluster.cluster_id!r}",
                stacklevel=2,
            )
        return out
    prof = engine._profiles(vals)
    covs = engine._covariances(vals)
    if covs is None:
        return -np.inf
    out = engine._cluster_value(cluster, prof, covs, vals)
    if out == -np.inf:
        warnings.warn(
            f"all quadrature nodes underflowed for cluster {cluster.cluster_id!r}",
            stacklevel=2,
        )
    return out


def total_log_likelihood(theta, ctx: LikelihoodContext) -> float:
    """Sum of cluster log likelihoods, reduced in ascending cluster-id
    order (fixed for reproducibility)."""
    vals = np.asarray(theta.values if isinstance(theta, ThetaVector) else theta, dtype=float)
    return ctx.engine.total_loglik(vals)
