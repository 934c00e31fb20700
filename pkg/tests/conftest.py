import numpy as np
import pytest

from mlsurv.data import Dataset, build_hierarchy, declare_survival
from mlsurv.datasets import load_catheter
from mlsurv.estimation import fit
from mlsurv.model import ModelSpec, RandomEquation


def make_dataset(columns, schema, levels=()):
    order = tuple(columns)
    ds = Dataset(columns={k: tuple(v) for k, v in columns.items()},
                 column_schema=dict(schema), column_order=order)
    ds = declare_survival(
        ds,
        next(c for c, r in schema.items() if r == "time"),
        next(c for c, r in schema.items() if r == "event"),
        next((c for c, r in schema.items() if r == "entry"), None),
        next((c for c, r in schema.items() if r == "rate"), None),
    )
    if levels:
        ds = build_hierarchy(ds, levels)
    return ds


@pytest.fixture(scope="session")
def toy_clustered():
    """Three clusters of two records, exponential-friendly."""
    return make_dataset(
        {
            "id": ("1", "1", "2", "2", "3", "3"),
            "t": (2.0, 1.5, 0.7, 3.0, 1.2, 0.4),
            "d": (1.0, 0.0, 1.0, 1.0, 0.0, 1.0),
            "x": (0.5, -0.2, 1.0, 0.0, 0.3, -1.0),
        },
        {"id": "level", "t": "time", "d": "event", "x": "covariate"},
        levels=("id",),
    )


@pytest.fixture(scope="session")
def catheter():
    return load_catheter()


@pytest.fixture(scope="session")
def catheter_rp_fit(catheter):
    spec = ModelSpec(
        distribution="rp",
        fixed=("age", "female"),
        df=3,
        random=(RandomEquation("patient"),),
    )
    return fit(catheter, spec)


def brute_force_cluster_loglik(times, events, etas, sd, lo=-8.0, hi=8.0, n=20001):
    """Trapezoid oracle for an exponential cluster with a scalar Gaussian
    random intercept: integral of prod_j f_j(b) phi(b; 0, sd^2) db."""
    b = np.linspace(lo, hi, n)
    ll = np.zeros_like(b)
    for t, d, e in zip(times, events, etas):
        log_h = e + b
        ll += d * log_h - np.exp(log_h) * t
    dens = np.exp(ll) * np.exp(-0.5 * (b / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
    return float(np.log(np.trapezoid(dens, b)))
