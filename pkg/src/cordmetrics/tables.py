"""Per-level metric tables and their CSV serialization.

A table holds rows keyed by (subject, session, level, metric). Levels are
the cervical vertebral levels C1..C7 plus the pooled ranges C1C7 and C3C5;
metrics are the six the pipeline produces. Diffusivities are stored in
mm^2/s (never display-scaled), FA and FWW are unitless in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import (
    DuplicateKey,
    InvalidValue,
    ParseError,
    UnknownLevel,
    UnknownMetric,
)

LEVELS = ("C1", "C2", "C3", "C4", "C5", "C6", "C7", "C1C7", "C3C5")
POOLED_RANGES = {"C1C7": ("C1", "C2", "C3", "C4", "C5", "C6", "C7"),
                 "C3C5": ("C3", "C4", "C5")}
METRICS = ("FA", "MD", "AD", "RD", "ID", "FWW")
UNIT_INTERVAL_METRICS = frozenset({"FA", "FWW"})

CSV_HEADER = "subject,session,level,metric,value"


@dataclass(frozen=True)
class MetricRow:
    subject: str
    session: str
    level: str
    metric: str
    value: float

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.subject, self.session, self.level, self.metric)


def level_name(level) -> str:
    """Normalize a level given as int 1..7 or string to its table name."""
    if isinstance(level, int):
        name = f"C{level}"
    else:
        name = str(level)
    if name not in LEVELS:
        raise UnknownLevel(f"unknown level {level!r}")
    return name


def _check_value(metric: str, value: float) -> float:
    value = float(value)
    if metric in UNIT_INTERVAL_METRICS:
        if not (0.0 <= value <= 1.0):
            raise InvalidValue(f"{metric} = {value:g} outside [0, 1]")
    elif value < 0.0:
        raise InvalidValue(f"{metric} = {value:g} negative diffusivity")
    return value


class MetricTable:
    """Rows of (subject, session, level, metric, value) with unique keys."""

    def __init__(self, rows=()):
        self._rows: dict[tuple, MetricRow] = {}
        for row in rows:
            if isinstance(row, MetricRow):
                self.add(*row.key, row.value)
            else:
                self.add(*row)

    def add(self, subject, session, level, metric, value) -> None:
        level = level_name(level)
        if metric not in METRICS:
            raise UnknownMetric(f"unknown metric {metric!r}")
        value = _check_value(metric, value)
        row = MetricRow(str(subject), str(session), level, metric, value)
        if row.key in self._rows:
            raise DuplicateKey(f"duplicate row for {row.key}")
        self._rows[row.key] = row

    def get(self, subject, session, level, metric) -> float:
        return self._rows[(str(subject), str(session), level_name(level), metric)].value

    def __contains__(self, key) -> bool:
        subject, session, level, metric = key
        return (str(subject), str(session), level_name(level), metric) in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        return iter(self.rows())

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricTable):
            return NotImplemented
        return self._rows == other._rows

    def rows(self) -> list[MetricRow]:
        """Rows in deterministic (subject, session, level, metric) order."""
        order = {name: i for i, name in enumerate(LEVELS)}
        morder = {name: i for i, name in enumerate(METRICS)}
        return sorted(
            self._rows.values(),
            key=lambda r: (r.subject, r.session, order[r.level], morder[r.metric]),
        )

    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self._rows.values()})

    def sessions(self) -> list[str]:
        return sorted({r.session for r in self._rows.values()})

    def metrics(self) -> list[str]:
        present = {r.metric for r in self._rows.values()}
        return [m for m in METRICS if m in present]

    def filter(self, subject=None, session=None, level=None, metric=None) -> "MetricTable":
        level = level_name(level) if level is not None else None
        out = MetricTable()
        for r in self._rows.values():
            if subject is not None and r.subject != str(subject):
                continue
            if session is not None and r.session != str(session):
                continue
            if level is not None and r.level != level:
                continue
            if metric is not None and r.metric != metric:
                continue
            out.add(*r.key, r.value)
        return out

    def merged_with(self, other: "MetricTable") -> "MetricTable":
        out = MetricTable(self.rows())
        for r in other.rows():
            out.add(*r.key, r.value)
        return out


def write_metric_table(table: MetricTable, path) -> None:
    """Write the CSV form, values at 9 significant digits."""
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in table.rows():
            fh.write(f"{r.subject},{r.session},{r.level},{r.metric},{r.value:.9g}\n")


def read_metric_table(path) -> MetricTable:
    """Read the CSV form written by :func:`write_metric_table`.

    Raises
    ------
    ParseError, DuplicateKey, UnknownLevel, UnknownMetric, InvalidValue
    """
    table = MetricTable()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ParseError(f"{path}: expected header {CSV_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            subject, session, level, metric, value = parts
            try:
                value = float(value)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad value {parts[4]!r}") from None
            table.add(subject, session, level, metric, value)
    return table
