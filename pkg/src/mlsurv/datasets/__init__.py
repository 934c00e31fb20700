"""Bundled example data."""

from importlib import resources

from ..data import Dataset, build_hierarchy, declare_survival, load_csv


def catheter_path() -> str:
    """Filesystem path of the kidney catheter CSV (38 patients, two
    catheter insertions each; infection at the insertion point)."""
    return str(resources.files(__package__).joinpath("catheter.csv"))


def load_catheter() -> Dataset:
    """The catheter data, declared (time/infect) and grouped by patient."""
    ds = load_csv(
        catheter_path(),
        {
            "patient": "level",
            "time": "time",
            "infect": "event",
            "age": "covariate",
            "female": "covariate",
        },
    )
    ds = declare_survival(ds, "time", "infect")
    return build_hierarchy(ds, ("patient",))
