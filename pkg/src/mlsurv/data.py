"""Data ingestion, outcome declaration, and the cluster hierarchy.

A Dataset is immutable: declare_survival and build_hierarchy return new
instances, so shared readers never observe mutation.  Cluster identifiers
are compared as strings after trimming, which avoids float-id pitfalls.
Missing values ('.' or an empty cell) in declared columns are hard errors
rather than silently dropped rows, since case-wise deletion would change
likelihoods invisibly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

from .errors import NestingError, ParseError, SchemaError, ValidationError

ROLES = ("time", "event", "entry", "rate", "covariate", "level")


@dataclass(frozen=True)
class SurvivalRecord:
    """One observation row: (entry, exit] at-risk window, event flag,
    covariates, optional expected mortality rate, and the cluster path
    ordered from the highest level down."""

    entry_time: float
    exit_time: float
    event: int
    covariates: dict
    expected_rate: float | None
    cluster_path: tuple[str, ...]


@dataclass(frozen=True)
class ClusterNode:
    """A node of the hierarchy; records attach at the deepest level."""

    cluster_id: str
    level: int
    children: tuple = ()
    record_idx: tuple[int, ...] = ()

    def all_records(self) -> list[int]:
        out = list(self.record_idx)
        for child in self.children:
            out.extend(child.all_records())
        return out


@dataclass(frozen=True)
class Dataset:
    columns: dict = field(repr=False)
    column_schema: dict
    column_order: tuple[str, ...]
    time_col: str | None = None
    event_col: str | None = None
    entry_col: str | None = None
    rate_col: str | None = None
    level_names: tuple[str, ...] = ()
    clusters: tuple[ClusterNode, ...] | None = None

    @property
    def n_records(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(
            c for c in self.column_order if self.column_schema.get(c) == "covariate"
        )

    @property
    def records(self) -> tuple[SurvivalRecord, ...]:
        n = self.n_records
        time = self.columns.get(self.time_col, (None,) * n)
        event = self.columns.get(self.event_col, (None,) * n)
        entry = self.columns.get(self.entry_col, None) if self.entry_col else None
        rate = self.columns.get(self.rate_col, None) if self.rate_col else None
        covs = {c: self.columns[c] for c in self.covariate_names}
        recs = []
        for i in range(n):
            recs.append(
                SurvivalRecord(
                    entry_time=float(entry[i]) if entry is not None else 0.0,
                    exit_time=float(time[i]) if time[i] is not None else float("nan"),
                    event=int(event[i]) if event[i] is not None else 0,
                    covariates={c: v[i] for c, v in covs.items()},
                    expected_rate=float(rate[i]) if rate is not None else None,
                    cluster_path=tuple(str(self.columns[lv][i]) for lv in self.level_names),
                )
            )
        return tuple(recs)

    # summary identities: events = sum d, time at risk = sum(exit - entry)
    @property
    def n_events(self) -> int:
        if self.event_col is None:
            raise ValidationError("survival outcome not declared")
        return int(sum(self.columns[self.event_col]))

    @property
    def total_time_at_risk(self) -> float:
        if self.time_col is None:
            raise ValidationError("survival outcome not declared")
        exit_t = self.columns[self.time_col]
        if self.entry_col:
            entry_t = self.columns[self.entry_col]
            return float(sum(e - s for e, s in zip(exit_t, entry_t)))
        return float(sum(exit_t))


def load_csv(source, schema: dict) -> Dataset:
    """Read a comma-separated UTF-8 file with a header row.

    schema maps column name -> role, one of 'time', 'event', 'entry',
    'rate', 'covariate', 'level'.  Only declared columns are loaded.
    Missing-value cells ('.' or empty) in declared columns are rejected
    with the offending data-row number (1-based, header excluded).
    """
    for col, role in schema.items():
        if role not in ROLES:
            raise SchemaError(f"unknown role {role!r} for column {col!r}")

    if hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    else:
        with open(source, "rb") as fh:
            text = fh.read().decode("utf-8")

    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty file: no header row") from None
    header = [h.strip() for h in header]
    for col in schema:
        if col not in header:
            raise SchemaError(f"column {col!r} not found in header")
    idx = {col: header.index(col) for col in schema}

    values: dict[str, list] = {col: [] for col in schema}
    nrows = 0
    for rownum, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        nrows += 1
        for col, j in idx.items():
            cell = row[j].strip() if j < len(row) else ""
            if cell in ("", "."):
                raise ParseError(f"missing value in column {col!r} at row {rownum}")
            if schema[col] == "level":
                values[col].append(cell)
            else:
                try:
                    values[col].append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"non-numeric value {cell!r} in column {col!r} at row {rownum}"
                    ) from None
    if nrows == 0:
        raise ValidationError("no records")

    order = tuple(c for c in header if c in schema)
    columns = {c: tuple(values[c]) for c in order}
    ds = Dataset(columns=columns, column_schema=dict(schema), column_order=order)
    # wire any roles already present in the schema
    role_cols = {r: [c for c, role in schema.items() if role == r] for r in ROLES}
    for role in ("time", "event", "entry", "rate"):
        if len(role_cols[role]) > 1:
            raise SchemaError(f"multiple columns declared with role {role!r}")
    return replace(
        ds,
        time_col=(role_cols["time"] or [None])[0],
        event_col=(role_cols["event"] or [None])[0],
        entry_col=(role_cols["entry"] or [None])[0],
        rate_col=(role_cols["rate"] or [None])[0],
    )


def declare_survival(
    d: Dataset,
    time_col: str,
    event_col: str,
    entry_col: str | None = None,
    rate_col: str | None = None,
) -> Dataset:
    """Declare outcome semantics and validate them row by row."""
    for col in filter(None, (time_col, event_col, entry_col, rate_col)):
        if col not in d.columns:
            raise SchemaError(f"column {col!r} not loaded")
    exit_t = d.columns[time_col]
    event = d.columns[event_col]
    entry_t = d.columns[entry_col] if entry_col else None
    rate = d.columns[rate_col] if rate_col else None
    for i in range(d.n_records):
        row = i + 1
        t1 = exit_t[i]
        t0 = entry_t[i] if entry_t is not None else 0.0
        if not t1 > 0:
            raise ValidationError(f"exit time must be positive at row {row}")
        if t0 < 0:
            raise ValidationError(f"entry time must be nonnegative at row {row}")
        if not t1 > t0:
            raise ValidationError(f"exit time <= entry time at row {row}")
        if event[i] not in (0.0, 1.0):
            raise ValidationError(f"event indicator must be 0 or 1 at row {row}")
        if rate is not None and rate[i] < 0:
            raise ValidationError(f"negative expected rate at row {row}")
    return replace(d, time_col=time_col, event_col=event_col, entry_col=entry_col, rate_col=rate_col)


def build_hierarchy(d: Dataset, level_vars) -> Dataset:
    """Group records by the nested level variables (highest level first).

    Top-level clusters are ordered by ascending id (string comparison);
    within-cluster record order follows the file.  A child id appearing
    under two distinct parents is a nesting error.
    """
    level_vars = tuple(level_vars)
    for lv in level_vars:
        if lv not in d.columns:
            raise SchemaError(f"level variable {lv!r} not loaded")
    n = d.n_records
    paths = [
        tuple(str(d.columns[lv][i]).strip() for lv in level_vars) for i in range(n)
    ]
    # nesting consistency: each id at level l has a single parent
    for depth in range(1, len(level_vars)):
        parent_of: dict[str, tuple] = {}
        for p in paths:
            child, parent = p[depth], p[:depth]
            if child in parent_of and parent_of[child] != parent:
                raise NestingError(
                    f"cluster {child!r} at level {level_vars[depth]!r} appears under "
                    f"parents {parent_of[child]!r} and {parent!r}"
                )
            parent_of[child] = parent

    def _build(depth: int, members: list[int]) -> tuple[ClusterNode, ...]:
        groups: dict[str, list[int]] = {}
        for i in members:
            groups.setdefault(paths[i][depth], []).append(i)
        nodes = []
        for cid in sorted(groups):
            idx = groups[cid]
            if depth + 1 < len(level_vars):
                nodes.append(
                    ClusterNode(cid, depth, children=_build(depth + 1, idx))
                )
            else:
                nodes.append(ClusterNode(cid, depth, record_idx=tuple(idx)))
        return tuple(nodes)

    clusters = _build(0, list(range(n))) if level_vars else ()
    return replace(d, level_names=level_vars, clusters=clusters)


def write_csv(d: Dataset, path_or_buf) -> None:
    """Write the loaded columns back out; numeric cells carry 17
    significant digits so a reload reproduces the records exactly."""

    def _fmt(col, v):
        return v if d.column_schema[col] == "level" else format(float(v), ".17g")

    buf = path_or_buf if hasattr(path_or_buf, "write") else open(path_or_buf, "w", newline="")
    try:
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(d.column_order)
        for i in range(d.n_records):
            writer.writerow([_fmt(c, d.columns[c][i]) for c in d.column_order])
    finally:
        if buf is not path_or_buf:
            buf.close()
