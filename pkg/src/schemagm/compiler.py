"""Schema -> model structure.

Every table becomes a K-component mixture. A table with foreign keys gets a
gated mixture-weight table: one Dirichlet-distributed weight vector per joint
configuration of its parents' components (edges in FK declaration order,
first edge most significant). A table without foreign keys degenerates to a
single weight vector.
"""
import json
from dataclasses import dataclass

from .schema import (
    BOOLEAN,
    CATEGORICAL,
    REAL,
    ModelConfig,
    SchemaError,
    schema_to_dict,
    topo_order,
)

SPEC_VERSION = 1

GAUSSIAN, DISCRETE, BERNOULLI = "gaussian", "discrete", "bernoulli"
_FAMILY = {REAL: GAUSSIAN, CATEGORICAL: DISCRETE, BOOLEAN: BERNOULLI}


@dataclass(frozen=True)
class ParentEdge:
    column: str
    parent: str
    parent_k: int


@dataclass(frozen=True)
class GateCPTSpec:
    parent_edges: tuple
    config_count: int
    child_k: int
    alpha: float

    @property
    def cells(self):
        return self.config_count * self.child_k


@dataclass(frozen=True)
class AttributeModel:
    column: str
    family: str
    levels: int | None
    prior: tuple  # family-specific hyperparameters, see _prior_for


@dataclass(frozen=True)
class TableModel:
    table: str
    k: int
    gate: GateCPTSpec
    attributes: tuple

    def attribute(self, column):
        for a in self.attributes:
            if a.column == column:
                return a
        raise KeyError(column)


@dataclass(frozen=True)
class ModelSpec:
    tables: tuple
    schema: object
    config: ModelConfig

    def table(self, name):
        for t in self.tables:
            if t.table == name:
                return t
        raise SchemaError(f"unknown table {name!r}")

    @property
    def order(self):
        return [t.table for t in self.tables]

    def to_dict(self):
        return {
            "spec_version": SPEC_VERSION,
            "schema": schema_to_dict(self.schema),
            "config": self.config.to_dict(),
            "tables": [{
                "table": t.table,
                "k": t.k,
                "gate": {
                    "parent_edges": [[e.column, e.parent, e.parent_k] for e in t.gate.parent_edges],
                    "config_count": t.gate.config_count,
                    "child_k": t.gate.child_k,
                    "alpha": t.gate.alpha,
                },
                "attributes": [{"column": a.column, "family": a.family, "levels": a.levels,
                                "prior": list(a.prior)} for a in t.attributes],
            } for t in self.tables],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _prior_for(family, priors):
    if family == GAUSSIAN:
        return (priors.gauss_mean, priors.gauss_precision, priors.gamma_shape, priors.gamma_rate)
    if family == DISCRETE:
        return (priors.dirichlet_alpha,)
    return (priors.beta_a, priors.beta_b)


def compile(schema, config):  # noqa: A001 - the operation's name
    """Build the ModelSpec for a validated schema with config applied."""
    order = topo_order(schema)
    ks = {name: config.k(name) for name in order}
    cap = config.limits.cpt_cell_cap
    models = []
    for name in order:
        table = schema.table(name)
        k = ks[name]
        if k < 1:
            raise SchemaError(f"table {name!r}: component count must be >= 1")
        edges = tuple(ParentEdge(c.name, c.ref_table, ks[c.ref_table]) for c in table.foreign_keys)
        configs = 1
        for e in edges:
            configs *= e.parent_k
        if configs * k > cap:
            raise SchemaError(
                f"table {name!r}: gate CPT needs {configs} x {k} = {configs * k} cells, "
                f"over the cap of {cap}")
        gate = GateCPTSpec(edges, configs, k, config.priors.dirichlet_alpha)
        attrs = []
        for c in table.attributes:
            family = _FAMILY[c.type.kind]
            levels = 2 if family == BERNOULLI else c.type.levels
            attrs.append(AttributeModel(c.name, family, levels, _prior_for(family, config.priors)))
        models.append(TableModel(name, k, gate, tuple(attrs)))
    return ModelSpec(tuple(models), schema, config)


def spec_from_dict(doc):
    from .schema import schema_from_dict

    if doc.get("spec_version") != SPEC_VERSION:
        raise SchemaError(f"unsupported spec_version {doc.get('spec_version')!r}")
    schema = schema_from_dict(doc["schema"])
    config = ModelConfig.from_dict(doc["config"])
    tables = []
    for t in doc["tables"]:
        g = t["gate"]
        gate = GateCPTSpec(tuple(ParentEdge(*e) for e in g["parent_edges"]),
                           g["config_count"], g["child_k"], g["alpha"])
        attrs = tuple(AttributeModel(a["column"], a["family"], a["levels"], tuple(a["prior"]))
                      for a in t["attributes"])
        tables.append(TableModel(t["table"], t["k"], gate, attrs))
    return ModelSpec(tuple(tables), schema, config)


def _param_count(attr, k):
    return 2 * k if attr.family == GAUSSIAN else k


def describe(spec):
    """Human-readable structure report."""
    lines = []
    total_cells = 0
    for t in spec.tables:
        g = t.gate
        total_cells += g.cells
        if g.parent_edges:
            parents = " x ".join(f"{e.parent}.{e.column}[K={e.parent_k}]" for e in g.parent_edges)
            gate_desc = f"{g.config_count} configs ({parents}) x {g.child_k} = {g.cells} cells"
        else:
            gate_desc = f"single weight vector, {g.child_k} cells"
        latent = g.config_count + sum(_param_count(a, t.k) for a in t.attributes)
        lines.append(f"table {t.table}: K={t.k}")
        lines.append(f"  gate: {gate_desc}")
        lines.append(f"  attribute factors: {len(t.attributes)}")
        for a in t.attributes:
            extra = ""
            if a.family == DISCRETE:
                extra = f" levels={a.levels if a.levels is not None else 'deferred'}"
            lines.append(f"    {a.column}: {a.family}{extra}")
        lines.append(f"  latent parameter variables: {latent} "
                     f"(+1 component indicator per row, +1 per missing foreign key)")
    lines.append(f"total gate CPT cells: {total_cells}")
    return "\n".join(lines) + "\n"
