"""CSV ingestion into column arrays with missingness masks.

Each table is held column-wise: real columns as float64, categorical columns
as int64 level codes, boolean columns as bool, foreign keys as int64 parent
row indices. A parallel boolean mask marks missing cells; masked entries
carry no meaning. An empty CSV field is the only missing marker.
"""
import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .schema import (
    ATTR,
    BOOLEAN,
    CATEGORICAL,
    FK,
    IMPLICIT_KEY,
    PK,
    REAL,
    AttributeType,
    Schema,
    Table,
    ignore_column,
    topo_order,
)

log = logging.getLogger(__name__)

_TRUE = {"true", "t", "1"}
_FALSE = {"false", "f", "0"}


class DataError(ValueError):
    """Input data that does not conform to the schema."""


@dataclass(frozen=True, eq=False)
class ColumnData:
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.missing.shape:
            raise DataError("values and mask lengths differ")

    @classmethod
    def from_observations(cls, n, rows, values, dtype):
        """Build a column holding only the given (row, value) observations."""
        out = np.zeros(n, dtype=dtype)
        missing = np.ones(n, dtype=bool)
        rows = np.asarray(rows, dtype=np.int64)
        out[rows] = values
        missing[rows] = False
        return cls(out, missing)

    @property
    def observed(self):
        return np.flatnonzero(~self.missing)

    def equals(self, other):
        return (np.array_equal(self.missing, other.missing)
                and np.array_equal(self.values[~self.missing], other.values[~other.missing]))


@dataclass(frozen=True, eq=False)
class KeyIndex:
    keys: tuple
    index: dict = field(default=None)

    def __post_init__(self):
        if self.index is None:
            object.__setattr__(self, "index", {k: i for i, k in enumerate(self.keys)})

    def __len__(self):
        return len(self.keys)

    def lookup(self, key):
        return self.index[key]


@dataclass(frozen=True)
class Transform:
    mean: float
    scale: float

    def forward(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean


@dataclass(frozen=True, eq=False)
class TableData:
    name: str
    n_rows: int
    keys: KeyIndex
    attrs: dict
    fks: dict
    levels: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: Schema
    tables: dict
    transforms: dict = field(default_factory=dict)

    def table(self, name):
        try:
            return self.tables[name]
        except KeyError:
            raise DataError(f"dataset has no table {name!r}") from None

    def transform(self, table, column):
        return self.transforms.get((table, column), Transform(0.0, 1.0))

    def replace_table(self, tdata):
        return replace(self, tables={**self.tables, tdata.name: tdata})


# -- parsing ----------------------------------------------------------------


def _parse_real(text, where):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse {text!r} as a real number") from None
    if not math.isfinite(value):
        raise DataError(f"{where}: non-finite value {text!r}")
    return value


def _parse_bool(text, where):
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise DataError(f"{where}: cannot parse {text!r} as a boolean")


def _read_rows(source, table):
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and Path(source).exists()):
        with open(source, newline="", encoding="utf-8") as fh:
            return list(csv.reader(fh))
    if isinstance(source, str):
        return list(csv.reader(io.StringIO(source, newline="")))
    if hasattr(source, "read"):
        return list(csv.reader(source))
    raise DataError(f"no readable CSV source for table {table!r}: {source!r}")


def load_csv(schema, files, max_categories=100, levels=None):
    """Load one CSV per table (path, open file, or CSV text) against ``schema``.

    ``levels`` optionally fixes categorical level tables as
    {(table, column): [literal, ...]}; otherwise levels are the distinct
    observed values in first-occurrence order.
    """
    levels = levels or {}
    tables = {}
    for name in topo_order(schema):
        if name not in files:
            raise DataError(f"no CSV file for table {name!r}")
        table = schema.table(name)
        tdata, ignored = _load_table(table, _read_rows(files[name], name), tables,
                                     max_categories, levels)
        for col in ignored:
            schema = ignore_column(schema, name, col)
        tables[name] = tdata
    schema = _resolve_levels(schema, tables)
    dataset = Dataset(schema, tables)
    check_links(dataset)
    return dataset


def load_dir(schema, directory, max_categories=100, levels=None):
    directory = Path(directory)
    files = {t.name: directory / f"{t.name}.csv" for t in schema.tables}
    missing = [str(p) for p in files.values() if not p.exists()]
    if missing:
        raise DataError(f"missing data files: {', '.join(missing)}")
    return load_csv(schema, files, max_categories, levels)


def _load_table(table, rows, loaded, max_categories, fixed_levels):
    name = table.name
    if not rows:
        raise DataError(f"{name}.csv: empty file (header required)")
    header, body = rows[0], rows[1:]
    expected = [c.name for c in table.columns]
    if sorted(header) != sorted(expected) or len(set(header)) != len(header):
        raise DataError(f"{name}.csv: header {header} does not match schema columns {expected}")
    pos = {h: i for i, h in enumerate(header)}
    n = len(body)
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{name}.csv line {r + 2}: expected {len(header)} fields, got {len(row)}")

    pk = table.primary_key
    if pk == IMPLICIT_KEY:
        keys = tuple(str(i) for i in range(n))
    else:
        keys = tuple(row[pos[pk]] for row in body)
        seen = {}
        for r, k in enumerate(keys):
            if k == "":
                raise DataError(f"{name}.csv line {r + 2}: empty primary key")
            if k in seen:
                raise DataError(f"{name}.csv line {r + 2}: duplicate primary key {k!r} "
                                f"(first on line {seen[k] + 2})")
            seen[k] = r
    key_index = KeyIndex(keys)

    attrs, fks, levels, ignored = {}, {}, {}, []
    for col in table.columns:
        cells = [row[pos[col.name]] for row in body]
        missing = np.array([c == "" for c in cells], dtype=bool)
        if col.role == FK:
            parent = loaded[col.ref_table].keys
            values = np.full(n, -1, dtype=np.int64)
            for r, c in enumerate(cells):
                if c == "":
                    continue
                try:
                    values[r] = parent.lookup(c)
                except KeyError:
                    raise DataError(f"{name}.csv line {r + 2}: {col.name}={c!r} matches no "
                                    f"{col.ref_table} row") from None
            fks[col.name] = ColumnData(values, missing)
        elif col.role == ATTR:
            kind = col.type.kind
            if kind == REAL:
                values = np.zeros(n)
                for r, c in enumerate(cells):
                    if c != "":
                        values[r] = _parse_real(c, f"{name}.csv line {r + 2}, column {col.name}")
            elif kind == BOOLEAN:
                values = np.zeros(n, dtype=bool)
                for r, c in enumerate(cells):
                    if c != "":
                        values[r] = _parse_bool(c, f"{name}.csv line {r + 2}, column {col.name}")
            else:
                fixed = fixed_levels.get((name, col.name))
                table_levels = list(fixed) if fixed is not None else []
                lookup = {v: i for i, v in enumerate(table_levels)}
                values = np.zeros(n, dtype=np.int64)
                for r, c in enumerate(cells):
                    if c == "":
                        continue
                    code = lookup.get(c)
                    if code is None:
                        if fixed is not None:
                            raise DataError(f"{name}.csv line {r + 2}, column {col.name}: "
                                            f"unknown level {c!r}")
                        code = lookup[c] = len(table_levels)
                        table_levels.append(c)
                    values[r] = code
                declared = col.type.levels
                if fixed is None and declared is None and len(table_levels) > max_categories:
                    log.warning("%s.%s has %d distinct values (> %d); column ignored",
                                name, col.name, len(table_levels), max_categories)
                    ignored.append(col.name)
                    continue
                if declared is not None and len(table_levels) > declared:
                    raise DataError(f"{name}.{col.name}: {len(table_levels)} distinct values "
                                    f"exceed the declared {declared} levels")
                levels[col.name] = tuple(table_levels)
            attrs[col.name] = ColumnData(values, missing)
    return TableData(name, n, key_index, attrs, fks, levels), ignored


def level_count(schema_col, observed_levels):
    declared = schema_col.type.levels
    return max(declared or 0, len(observed_levels), 2)


def _resolve_levels(schema, tables):
    out = []
    for t in schema.tables:
        cols = []
        for c in t.columns:
            if c.role == ATTR and c.type.kind == CATEGORICAL:
                n = level_count(c, tables[t.name].levels.get(c.name, ()))
                c = replace(c, type=AttributeType(CATEGORICAL, n))
            cols.append(c)
        out.append(Table(t.name, tuple(cols)))
    return Schema(tuple(out))


def check_links(dataset):
    """Reject rows whose FKs into one parent table resolve to the same row."""
    for t in dataset.schema.tables:
        by_parent = {}
        for c in t.foreign_keys:
            by_parent.setdefault(c.ref_table, []).append(c.name)
        tdata = dataset.table(t.name)
        for parent, cols in by_parent.items():
            for a in range(len(cols)):
                for b in range(a + 1, len(cols)):
                    x, y = tdata.fks[cols[a]], tdata.fks[cols[b]]
                    clash = np.flatnonzero(~x.missing & ~y.missing & (x.values == y.values))
                    if len(clash):
                        r = clash[0]
                        raise DataError(
                            f"{t.name} row {tdata.keys.keys[r]!r}: {cols[a]} and {cols[b]} both "
                            f"reference {parent} row {dataset.table(parent).keys.keys[x.values[r]]!r}")


# -- transforms -------------------------------------------------------------


def standardize(dataset):
    """Shift/scale every real column to zero mean, unit sample sd (observed cells)."""
    transforms = dict(dataset.transforms)
    tables = dict(dataset.tables)
    for t in dataset.schema.tables:
        tdata = tables[t.name]
        attrs = dict(tdata.attrs)
        for c in t.attributes:
            if c.type.kind != REAL or c.name not in attrs:
                continue
            col = attrs[c.name]
            obs = col.values[~col.missing]
            prev = transforms.get((t.name, c.name), Transform(0.0, 1.0))
            mean = float(obs.mean()) if len(obs) else 0.0
            sd = float(obs.std(ddof=1)) if len(obs) > 1 else 0.0
            if sd == 0.0:
                log.warning("%s.%s is constant over observed cells; scale set to 1", t.name, c.name)
                sd = 1.0
            values = np.where(col.missing, 0.0, (col.values - mean) / sd)
            attrs[c.name] = ColumnData(values, col.missing.copy())
            transforms[(t.name, c.name)] = Transform(prev.mean + prev.scale * mean, prev.scale * sd)
        tables[t.name] = replace(tdata, attrs=attrs)
    return replace(dataset, tables=tables, transforms=transforms)


def raw_value(dataset, table, column, row):
    """Observed cell value in original units / literal form."""
    tdata = dataset.table(table)
    col = tdata.attrs[column]
    value = col.values[row]
    kind = dataset.schema.table(table).column(column).type.kind
    if kind == REAL:
        return float(dataset.transform(table, column).inverse(value))
    if kind == BOOLEAN:
        return bool(value)
    return tdata.levels[column][int(value)]


@dataclass(frozen=True)
class GroundTruth:
    table: str
    row: int
    key: str
    column: str
    value: object


def eligible_cells(dataset, columns=None):
    """Observed attribute cells as (table, column, row), in schema order."""
    cells = []
    for t in dataset.schema.tables:
        tdata = dataset.table(t.name)
        for c in t.attributes:
            if columns is not None and (t.name, c.name) not in columns:
                continue
            col = tdata.attrs[c.name]
            cells.extend((t.name, c.name, int(r)) for r in col.observed)
    return cells


def mask_cells(dataset, fraction, seed, columns=None):
    """Hide round(fraction x eligible) observed attribute cells, chosen uniformly."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    cells = eligible_cells(dataset, columns)
    count = math.floor(fraction * len(cells) + 0.5)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(cells), size=count, replace=False)) if count else []
    truths = []
    masks = {}
    for idx in chosen:
        table, column, row = cells[idx]
        truths.append(GroundTruth(table, row, dataset.table(table).keys.keys[row], column,
                                  raw_value(dataset, table, column, row)))
        masks.setdefault((table, column), []).append(row)
    tables = dict(dataset.tables)
    for (table, column), rows in masks.items():
        tdata = tables[table]
        col = tdata.attrs[column]
        missing = col.missing.copy()
        missing[rows] = True
        tables[table] = replace(tdata, attrs={**tdata.attrs, column: ColumnData(col.values, missing)})
    return replace(dataset, tables=tables), truths


def write_truth_csv(truths, out):
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["table", "row", "column", "true_value"])
    for g in truths:
        w.writerow([g.table, g.key, g.column, _format(g.value)])


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(dataset, directory):
    """Write one <table>.csv per table in original units."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in dataset.schema.tables:
        tdata = dataset.table(t.name)
        header = [c.name for c in t.columns]
        with open(directory / f"{t.name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in range(tdata.n_rows):
                w.writerow([_cell(dataset, t, c, tdata, r) for c in t.columns])


def _cell(dataset, table, col, tdata, r):
    if col.role == PK:
        return tdata.keys.keys[r]
    if col.role == FK:
        fk = tdata.fks[col.name]
        return "" if fk.missing[r] else dataset.table(col.ref_table).keys.keys[fk.values[r]]
    if col.role == ATTR and col.name in tdata.attrs:
        if tdata.attrs[col.name].missing[r]:
            return ""
        return _format(raw_value(dataset, table.name, col.name, r))
    return ""
