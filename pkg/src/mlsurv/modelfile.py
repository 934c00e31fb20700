"""Model-file serialization.

A fitted model saves as structured text (JSON) with every numeric value
written as decimal text at 17 significant digits, which round-trips IEEE
doubles exactly: predictions from a reloaded file are bit-identical to
in-memory ones.  The file is self-contained; prediction needs no original
data beyond covariate values.  Files written by a newer format version
are refused.  User-defined families cannot be serialized because their
callbacks live in the host program.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ModelFileError
from .estimation import ConvergenceInfo, FittedModel
from .likelihood import ThetaVector
from .model import ModelSpec, ModelStructure, RandomEquation, TvcSpec, build_layout
from .quadrature import IntegrationSettings
from .random_effects import REDistribution
from .splines import KnotVector, SplineBasis

FORMAT_VERSION = 1


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _fmt_vec(v) -> list:
    return [_fmt(x) for x in np.asarray(v, dtype=float).ravel()]


def _parse_vec(v) -> np.ndarray:
    return np.array([float(x) for x in v])


def _knots_payload(kv: KnotVector) -> dict:
    return {
        "boundary_low": _fmt(kv.boundary_low),
        "interior": _fmt_vec(kv.interior),
        "boundary_high": _fmt(kv.boundary_high),
    }


def _knots_from(payload: dict) -> KnotVector:
    return KnotVector(
        float(payload["boundary_low"]),
        tuple(float(x) for x in payload["interior"]),
        float(payload["boundary_high"]),
    )


def _basis_payload(basis: SplineBasis | None) -> dict | None:
    if basis is None:
        return None
    return {
        "knots": _knots_payload(basis.knots),
        "orthogonalized": basis.orthogonalized,
        "transform": _fmt_vec(basis.transform) if basis.transform is not None else None,
    }


def _basis_from(payload: dict | None) -> SplineBasis | None:
    if payload is None:
        return None
    kv = _knots_from(payload["knots"])
    transform = None
    if payload["transform"] is not None:
        m = kv.df + 1
        transform = _parse_vec(payload["transform"]).reshape(m, m)
    return SplineBasis(kv, payload["orthogonalized"], transform)


def save_model(fit: FittedModel, path) -> None:
    spec = fit.spec
    if spec.distribution == "user":
        raise ModelFileError(
            "user-defined families cannot be serialized: the hazard callback "
            "lives in the host program"
        )
    payload = {
        "format": "mlsurv-model",
        "version": FORMAT_VERSION,
        "distribution": spec.distribution,
        "fixed": list(spec.fixed),
        "tvc": [
            {
                "var": term.var,
                "basis": _basis_payload(basis),
            }
            for term, basis in zip(spec.tvc, fit.structure.tvc_bases)
        ],
        "random": [
            {"level": eq.level, "vars": list(eq.vars), "intercept": eq.intercept}
            for eq in spec.random
        ],
        "covariance": list(spec.covariance),
        "re_distribution": {
            "kind": spec.re_distribution.kind,
            "dof": _fmt(spec.re_distribution.dof) if spec.re_distribution.dof else None,
        },
        "orthogonalize": spec.orthogonalize,
        "cumhazard_nodes": spec.cumhazard_nodes,
        "baseline_basis": _basis_payload(fit.structure.baseline_basis),
        "theta": _fmt_vec(fit.theta.values),
        "param_names": list(fit.structure.layout.names),
        "vcov": _fmt_vec(fit.vcov) if fit.vcov is not None else None,
        "loglik": _fmt(fit.loglik),
        "n_obs": fit.n_obs,
        "n_events": fit.n_events,
        "settings": {
            "method": fit.settings.method,
            "points": fit.settings.points,
            "adapt_iterations": fit.settings.adapt_iterations,
            "adapt_tolerance": _fmt(fit.settings.adapt_tolerance),
            "seed": fit.settings.seed,
        },
        "relative_survival": fit.relative_survival,
        "delayed_entry": fit.delayed_entry,
        "level": _fmt(fit.level),
        "convergence": {
            "iterations": fit.convergence.iterations,
            "gradient_norm": _fmt(fit.convergence.gradient_norm),
            "status": fit.convergence.status,
        },
    }
    text = json.dumps(payload, indent=1)
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def load_model(path) -> FittedModel:
    if hasattr(path, "read"):
        text = path.read()
    else:
        with open(path) as fh:
            text = fh.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"not a model file: {exc}") from None
    if payload.get("format") != "mlsurv-model":
        raise ModelFileError("not a model file")
    version = payload.get("version")
    if version > FORMAT_VERSION:
        raise ModelFileError(
            f"model file version {version} is newer than this library supports "
            f"({FORMAT_VERSION})"
        )

    baseline_basis = _basis_from(payload["baseline_basis"])
    tvc_bases = tuple(_basis_from(t["basis"]) for t in payload["tvc"])
    tvc_specs = tuple(
        TvcSpec(t["var"], df=basis.df) for t, basis in zip(payload["tvc"], tvc_bases)
    )
    redist = payload["re_distribution"]
    spec = ModelSpec(
        distribution=payload["distribution"],
        fixed=tuple(payload["fixed"]),
        df=baseline_basis.df if baseline_basis is not None else 3,
        tvc=tvc_specs,
        random=tuple(
            RandomEquation(r["level"], tuple(r["vars"]), r["intercept"])
            for r in payload["random"]
        ),
        covariance=tuple(payload["covariance"]),
        re_distribution=REDistribution(
            redist["kind"], float(redist["dof"]) if redist["dof"] else None
        ),
        orthogonalize=payload["orthogonalize"],
        cumhazard_nodes=payload["cumhazard_nodes"],
    )
    layout = build_layout(spec, baseline_basis.df if baseline_basis is not None else 0)
    if list(layout.names) != list(payload["param_names"]):
        raise ModelFileError("parameter names in file do not match the model layout")
    structure = ModelStructure(spec, layout, baseline_basis, tvc_bases)
    theta = _parse_vec(payload["theta"])
    vcov = None
    if payload["vcov"] is not None:
        vcov = _parse_vec(payload["vcov"]).reshape(layout.size, layout.size)
    st = payload["settings"]
    settings = IntegrationSettings(
        method=st["method"],
        points=st["points"],
        adapt_iterations=st["adapt_iterations"],
        adapt_tolerance=float(st["adapt_tolerance"]),
        seed=st["seed"],
    )
    conv = payload["convergence"]
    return FittedModel(
        structure=structure,
        theta=ThetaVector(theta, layout),
        vcov=vcov,
        loglik=float(payload["loglik"]),
        convergence=ConvergenceInfo(
            conv["iterations"], float(conv["gradient_norm"]), conv["status"]
        ),
        n_obs=payload["n_obs"],
        n_events=payload["n_events"],
        settings=settings,
        relative_survival=payload["relative_survival"],
        delayed_entry=payload["delayed_entry"],
        level=float(payload["level"]),
    )
