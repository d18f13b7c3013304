"""DDL-subset parsing, model configuration, and foreign-key graph checks.

Grammar (keywords case-insensitive, ``--`` comments)::

    stmt := CREATE TABLE ident "(" item ("," item)* ")" ";"
    item := ident sqltype [NOT NULL] [PRIMARY KEY] [REFERENCES ident "(" ident ")"]
          | PRIMARY KEY "(" ident ")"
          | FOREIGN KEY "(" ident ")" REFERENCES ident "(" ident ")"
"""
import json
import re
from dataclasses import dataclass, field, replace

REAL, CATEGORICAL, BOOLEAN = "real", "categorical", "boolean"
PK, FK, ATTR, IGNORED = "pk", "fk", "attr", "ignored"

_REAL_TYPES = {"REAL", "FLOAT", "DOUBLE", "DECIMAL", "NUMERIC", "INT", "INTEGER", "BIGINT"}
_BOOL_TYPES = {"BOOLEAN", "BOOL"}
_TEXT_TYPES = {"TEXT", "VARCHAR", "CHAR"}

IMPLICIT_KEY = "__row__"


class SchemaError(ValueError):
    """Invalid schema, configuration, or DDL."""


class DDLSyntaxError(SchemaError):
    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class AttributeType:
    kind: str
    levels: int | None = None

    def __post_init__(self):
        if self.kind not in (REAL, CATEGORICAL, BOOLEAN):
            raise SchemaError(f"unknown attribute type {self.kind!r}")
        if self.levels is not None and (self.kind != CATEGORICAL or self.levels < 2):
            raise SchemaError(f"categorical level count must be >= 2, got {self.levels}")


@dataclass(frozen=True)
class Column:
    name: str
    role: str
    sql_type: str = ""
    type: AttributeType | None = None
    ref_table: str | None = None
    ref_column: str | None = None


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple

    @property
    def primary_key(self):
        for c in self.columns:
            if c.role == PK:
                return c.name
        return IMPLICIT_KEY

    @property
    def attributes(self):
        return tuple(c for c in self.columns if c.role == ATTR)

    @property
    def foreign_keys(self):
        return tuple(c for c in self.columns if c.role == FK)

    def column(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"table {self.name!r} has no column {name!r}")


@dataclass(frozen=True)
class Schema:
    tables: tuple

    def table(self, name):
        for t in self.tables:
            if t.name == name:
                return t
        raise SchemaError(f"unknown table {name!r}")

    @property
    def names(self):
        return [t.name for t in self.tables]

    def children(self, name):
        """(child table, fk column) pairs referencing ``name``, in declaration order."""
        return [(t.name, c.name) for t in self.tables for c in t.foreign_keys
                if c.ref_table == name]

    def to_ddl(self):
        return to_ddl(self)


@dataclass(frozen=True)
class Priors:
    dirichlet_alpha: float = 1.0
    gauss_mean: float = 0.0
    gauss_precision: float = 0.01
    gamma_shape: float = 1.0
    gamma_rate: float = 1.0
    beta_a: float = 1.0
    beta_b: float = 1.0


@dataclass(frozen=True)
class Limits:
    max_categories: int = 100
    cpt_cell_cap: int = 1_000_000
    fk_candidate_cap: int = 10_000


@dataclass(frozen=True)
class ModelConfig:
    components: dict = field(default_factory=dict)
    columns: dict = field(default_factory=dict)
    priors: Priors = field(default_factory=Priors)
    limits: Limits = field(default_factory=Limits)
    default_components: int = 5

    def __post_init__(self):
        for table, k in {**self.components, None: self.default_components}.items():
            if not isinstance(k, int) or k < 1:
                raise SchemaError(f"component count for {table or 'default'} must be an integer >= 1, got {k!r}")
        for name, value in vars(self.priors).items():
            if not value > 0 and name != "gauss_mean":
                raise SchemaError(f"prior {name} must be > 0, got {value!r}")
        for name, value in vars(self.limits).items():
            if not value >= 1:
                raise SchemaError(f"limit {name} must be >= 1, got {value!r}")

    def k(self, table):
        return self.components.get(table, self.default_components)

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - {"tables", "columns", "priors", "limits", "default_components"}
        if unknown:
            raise SchemaError(f"unknown config keys: {sorted(unknown)}")
        components = {}
        for table, opts in doc.get("tables", {}).items():
            if "components" in opts:
                components[table] = opts["components"]
        columns = {}
        for ref, opts in doc.get("columns", {}).items():
            if "." not in ref:
                raise SchemaError(f"column reference {ref!r} must be 'table.column'")
            kind = opts.get("type")
            if kind not in (REAL, CATEGORICAL, BOOLEAN, "ignore"):
                raise SchemaError(f"column {ref}: unknown type {kind!r}")
            columns[ref] = (kind, opts.get("levels"))
        try:
            priors = Priors(**doc.get("priors", {}))
            limits = Limits(**doc.get("limits", {}))
        except TypeError as exc:
            raise SchemaError(str(exc)) from None
        return cls(components=components, columns=columns, priors=priors, limits=limits,
                   default_components=doc.get("default_components", 5))

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self):
        return {
            "tables": {t: {"components": k} for t, k in sorted(self.components.items())},
            "columns": {ref: ({"type": kind} if levels is None else {"type": kind, "levels": levels})
                        for ref, (kind, levels) in sorted(self.columns.items())},
            "priors": vars(self.priors).copy(),
            "limits": vars(self.limits).copy(),
            "default_components": self.default_components,
        }


# -- tokenizer --------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>--[^\n]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*|"[^"]+")
  | (?P<number>\d+)
  | (?P<punct>[(),;])
""", re.VERBOSE)


def _tokenize(text):
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DDLSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        value = m.group()
        if kind not in ("ws", "comment"):
            if kind == "ident" and value.startswith('"'):
                kind, value = "qident", value[1:-1]
            tokens.append((kind, value, line, m.start() - line_start + 1))
        newlines = m.group().count("\n")
        if newlines:
            line += newlines
            line_start = m.start() + m.group().rfind("\n") + 1
        pos = m.end()
    tokens.append(("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self, offset=0):
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def error(self, message, tok=None):
        tok = tok or self.peek()
        raise DDLSyntaxError(message, tok[2], tok[3])

    def is_kw(self, word, offset=0):
        kind, value = self.peek(offset)[:2]
        return kind == "ident" and value.upper() == word

    def expect_kw(self, word):
        if not self.is_kw(word):
            self.error(f"expected {word}, found {self.peek()[1] or 'end of input'!r}")
        self.i += 1

    def expect(self, punct):
        kind, value = self.peek()[:2]
        if kind != "punct" or value != punct:
            self.error(f"expected {punct!r}, found {value or 'end of input'!r}")
        self.i += 1

    def ident(self):
        kind, value = self.peek()[:2]
        if kind not in ("ident", "qident"):
            self.error(f"expected identifier, found {value or 'end of input'!r}")
        self.i += 1
        return value

    def parse(self):
        raw = []
        while self.peek()[0] != "eof":
            raw.append(self.statement())
        return raw

    def statement(self):
        self.expect_kw("CREATE")
        self.expect_kw("TABLE")
        name_tok = self.peek()
        name = self.ident()
        self.expect("(")
        cols, pks, fks = [], [], []
        while True:
            self.item(cols, pks, fks)
            if self.peek()[1] == ",":
                self.i += 1
                continue
            break
        self.expect(")")
        self.expect(";")
        return name, name_tok, cols, pks, fks

    def key_list(self):
        self.expect("(")
        tok = self.peek()
        names = [self.ident()]
        while self.peek()[1] == ",":
            self.i += 1
            names.append(self.ident())
        self.expect(")")
        if len(names) > 1:
            self.error("composite keys are not supported", tok)
        return names[0], tok

    def item(self, cols, pks, fks):
        if self.is_kw("PRIMARY") and self.is_kw("KEY", 1):
            self.i += 2
            pks.append(self.key_list())
            return
        if self.is_kw("FOREIGN") and self.is_kw("KEY", 1):
            self.i += 2
            col, tok = self.key_list()
            self.expect_kw("REFERENCES")
            target = self.ident()
            target_col, _ = self.key_list()
            fks.append((col, target, target_col, tok))
            return
        tok = self.peek()
        name = self.ident()
        sql_type = self.sqltype()
        cols.append((name, sql_type, tok))
        while True:
            if self.is_kw("NOT") and self.is_kw("NULL", 1):
                self.i += 2
            elif self.is_kw("PRIMARY") and self.is_kw("KEY", 1):
                self.i += 2
                pks.append((name, tok))
            elif self.is_kw("REFERENCES"):
                self.i += 1
                target = self.ident()
                target_col, _ = self.key_list()
                fks.append((name, target, target_col, tok))
            else:
                break

    def sqltype(self):
        kind, value = self.peek()[:2]
        if kind != "ident":
            self.error(f"expected SQL type, found {value or 'end of input'!r}")
        self.i += 1
        base = value.upper()
        if base == "DOUBLE" and self.is_kw("PRECISION"):
            self.i += 1
        args = []
        if self.peek()[1] == "(":
            self.i += 1
            while True:
                k, v = self.peek()[:2]
                if k != "number":
                    self.error(f"expected type size, found {v or 'end of input'!r}")
                args.append(v)
                self.i += 1
                if self.peek()[1] == ",":
                    self.i += 1
                    continue
                break
            self.expect(")")
        return base + (f"({','.join(args)})" if args else "")


def _base_type(sql_type):
    return sql_type.split("(")[0]


def _attribute_type(sql_type, tok):
    base = _base_type(sql_type)
    if base in _REAL_TYPES:
        return AttributeType(REAL)
    if base in _BOOL_TYPES:
        return AttributeType(BOOLEAN)
    if base in _TEXT_TYPES:
        return AttributeType(CATEGORICAL)
    raise DDLSyntaxError(f"unsupported SQL type {sql_type}", tok[2], tok[3])


def parse_ddl(text):
    """Parse CREATE TABLE statements into a validated Schema."""
    raw = _Parser(text).parse()
    tables = []
    seen_tables = set()
    for name, name_tok, cols, pks, fks in raw:
        if name in seen_tables:
            raise DDLSyntaxError(f"duplicate table {name!r}", name_tok[2], name_tok[3])
        seen_tables.add(name)
        names = [c[0] for c in cols]
        for cname, _, tok in cols:
            if names.count(cname) > 1:
                raise DDLSyntaxError(f"duplicate column {name}.{cname}", tok[2], tok[3])
        if len(pks) > 1:
            tok = pks[1][1]
            raise DDLSyntaxError(f"table {name!r} declares more than one primary key", tok[2], tok[3])
        pk = pks[0][0] if pks else None
        fk_by_col = {}
        for col, target, target_col, tok in fks:
            if col in fk_by_col:
                raise DDLSyntaxError(f"column {name}.{col} has two foreign keys", tok[2], tok[3])
            fk_by_col[col] = (target, target_col, tok)
        for col, tok in pks:
            if col not in names:
                raise DDLSyntaxError(f"primary key column {col!r} not declared in {name!r}", tok[2], tok[3])
        for col, (_, _, tok) in fk_by_col.items():
            if col not in names:
                raise DDLSyntaxError(f"foreign key column {col!r} not declared in {name!r}", tok[2], tok[3])
            if col == pk:
                raise DDLSyntaxError(f"column {name}.{col} cannot be both primary and foreign key", tok[2], tok[3])
        columns = []
        for cname, sql_type, tok in cols:
            if cname == pk:
                columns.append(Column(cname, PK, sql_type))
            elif cname in fk_by_col:
                target, target_col, _ = fk_by_col[cname]
                columns.append(Column(cname, FK, sql_type, ref_table=target, ref_column=target_col))
            else:
                columns.append(Column(cname, ATTR, sql_type, _attribute_type(sql_type, tok)))
        tables.append(Table(name, tuple(columns)))
    schema = Schema(tuple(tables))
    validate(schema)
    return schema


def validate(schema):
    """Check name uniqueness, FK resolution, and acyclicity."""
    if not schema.tables:
        raise SchemaError("schema has no tables")
    names = [t.name for t in schema.tables]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate table names")
    by_name = {t.name: t for t in schema.tables}
    for t in schema.tables:
        cnames = [c.name for c in t.columns]
        if len(set(cnames)) != len(cnames):
            raise SchemaError(f"duplicate column names in {t.name!r}")
        if sum(c.role == PK for c in t.columns) > 1:
            raise SchemaError(f"table {t.name!r} has more than one primary key")
        for c in t.foreign_keys:
            target = by_name.get(c.ref_table)
            if target is None:
                raise SchemaError(f"{t.name}.{c.name} references unknown table {c.ref_table!r}")
            if c.ref_column != target.primary_key or target.primary_key == IMPLICIT_KEY:
                raise SchemaError(f"{t.name}.{c.name} must reference the primary key of {target.name!r}")
    topo_order(schema)
    return schema


def topo_order(schema):
    """Parents before children; ties broken by declaration order."""
    index = {t.name: i for i, t in enumerate(schema.tables)}
    parents = {t.name: {c.ref_table for c in t.foreign_keys} for t in schema.tables}
    order, placed = [], set()
    while len(order) < len(schema.tables):
        ready = [t.name for t in schema.tables
                 if t.name not in placed and parents[t.name] <= placed]
        if not ready:
            stuck = sorted((n for n in index if n not in placed), key=index.get)
            raise SchemaError(f"foreign keys form a cycle among tables {stuck}")
        order.append(ready[0])
        placed.add(ready[0])
    return order


def apply_config(schema, config):
    """Apply per-column type overrides and ignore flags."""
    tables = {t.name: list(t.columns) for t in schema.tables}
    for ref, (kind, levels) in config.columns.items():
        tname, cname = ref.split(".", 1)
        if tname not in tables:
            raise SchemaError(f"config references unknown table {tname!r}")
        cols = tables[tname]
        idx = next((i for i, c in enumerate(cols) if c.name == cname), None)
        if idx is None:
            raise SchemaError(f"config references unknown column {ref!r}")
        col = cols[idx]
        if col.role in (PK, FK):
            raise SchemaError(f"cannot override key column {ref!r}")
        if kind == "ignore":
            cols[idx] = replace(col, role=IGNORED, type=None)
        else:
            if levels is not None and kind != CATEGORICAL:
                raise SchemaError(f"{ref}: levels only apply to categorical columns")
            cols[idx] = replace(col, role=ATTR, type=AttributeType(kind, levels))
    for tname in config.components:
        if tname not in tables:
            raise SchemaError(f"config references unknown table {tname!r}")
    out = Schema(tuple(Table(t.name, tuple(tables[t.name])) for t in schema.tables))
    validate(out)
    return out


def ignore_column(schema, table, column):
    tables = []
    for t in schema.tables:
        if t.name == table:
            t = Table(t.name, tuple(replace(c, role=IGNORED, type=None) if c.name == column else c
                                    for c in t.columns))
        tables.append(t)
    return Schema(tuple(tables))


def to_ddl(schema):
    """Serialize to the DDL subset (parse_ddl(to_ddl(s)) == s for parsed schemas)."""
    out = []
    for t in schema.tables:
        items = []
        for c in t.columns:
            items.append(f"  {_quote(c.name)} {c.sql_type}")
        if t.primary_key != IMPLICIT_KEY:
            items.append(f"  PRIMARY KEY ({_quote(t.primary_key)})")
        for c in t.foreign_keys:
            items.append(f"  FOREIGN KEY ({_quote(c.name)}) REFERENCES "
                         f"{_quote(c.ref_table)} ({_quote(c.ref_column)})")
        out.append(f"CREATE TABLE {_quote(t.name)} (\n" + ",\n".join(items) + "\n);\n")
    return "\n".join(out)


_KEYWORDS = {"CREATE", "TABLE", "PRIMARY", "KEY", "FOREIGN", "REFERENCES", "NOT", "NULL"}


def _quote(name):
    if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name) and name.upper() not in _KEYWORDS:
        return name
    return f'"{name}"'


def schema_to_dict(schema):
    return {"tables": [
        {"name": t.name, "columns": [
            {k: v for k, v in {
                "name": c.name, "role": c.role, "sql_type": c.sql_type,
                "type": c.type.kind if c.type else None,
                "levels": c.type.levels if c.type else None,
                "ref_table": c.ref_table, "ref_column": c.ref_column,
            }.items() if v is not None}
            for c in t.columns]}
        for t in schema.tables]}


def schema_from_dict(doc):
    tables = []
    for t in doc["tables"]:
        cols = []
        for c in t["columns"]:
            atype = AttributeType(c["type"], c.get("levels")) if c.get("type") else None
            cols.append(Column(c["name"], c["role"], c.get("sql_type", ""), atype,
                               c.get("ref_table"), c.get("ref_column")))
        tables.append(Table(t["name"], tuple(cols)))
    return validate(Schema(tuple(tables)))
