import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from schemagm.schema import (
    BOOLEAN,
    CATEGORICAL,
    FK,
    IGNORED,
    IMPLICIT_KEY,
    PK,
    REAL,
    AttributeType,
    DDLSyntaxError,
    ModelConfig,
    SchemaError,
    apply_config,
    parse_ddl,
    schema_from_dict,
    schema_to_dict,
    to_ddl,
    topo_order,
)


class TestParse:
    def test_users_table(self):
        s = parse_ddl("CREATE TABLE users(id INT PRIMARY KEY, gender BOOLEAN, age REAL);")
        (users,) = s.tables
        assert users.primary_key == "id"
        assert {c.name: c.type.kind for c in users.attributes} == {"gender": BOOLEAN, "age": REAL}

    def test_attribute_less_table(self):
        s = parse_ddl("CREATE TABLE t(id INT PRIMARY KEY);")
        assert s.tables[0].attributes == ()

    def test_type_mapping(self):
        s = parse_ddl("""create table t (
            k bigint primary key, a FLOAT, b double precision, c decimal(10,2), d numeric,
            e integer, f int, g bool, h varchar(3), i char(1), j text);""")
        kinds = {c.name: c.type.kind for c in s.tables[0].attributes}
        assert kinds == {"a": REAL, "b": REAL, "c": REAL, "d": REAL, "e": REAL, "f": REAL,
                         "g": BOOLEAN, "h": CATEGORICAL, "i": CATEGORICAL, "j": CATEGORICAL}
        assert all(c.type.levels is None for c in s.tables[0].attributes if c.type.kind == CATEGORICAL)

    def test_keys_get_roles_regardless_of_type(self, umr_schema):
        ratings = umr_schema.table("ratings")
        assert ratings.column("user_id").role == FK
        assert ratings.column("user_id").ref_table == "users"
        assert ratings.column("id").role == PK
        assert umr_schema.table("movies").primary_key == "id"

    def test_comments_and_quoted_identifiers(self):
        s = parse_ddl('-- hi\nCREATE TABLE "order" ( -- trailing\n "key" INT PRIMARY KEY, x REAL NOT NULL);')
        assert s.tables[0].name == "order"
        assert s.tables[0].primary_key == "key"

    def test_implicit_key(self):
        s = parse_ddl("CREATE TABLE t(x REAL);")
        assert s.tables[0].primary_key == IMPLICIT_KEY

    @pytest.mark.parametrize("text,line,col", [
        ("CREATE TABLE t(id INT PRIMARY KEY", 1, 34),
        ("CREATE TABLE t(\n  id INT PRIMARY KEY,\n  x @);", 3, 5),
        ("CREATE TABEL t(id INT);", 1, 8),
    ])
    def test_syntax_error_location(self, text, line, col):
        with pytest.raises(DDLSyntaxError) as err:
            parse_ddl(text)
        assert (err.value.line, err.value.column) == (line, col)

    @pytest.mark.parametrize("text,fragment", [
        ("CREATE TABLE t(id INT PRIMARY KEY); CREATE TABLE t(id INT PRIMARY KEY);", "duplicate table"),
        ("CREATE TABLE t(id INT PRIMARY KEY, x REAL, x REAL);", "duplicate column"),
        ("CREATE TABLE t(id INT PRIMARY KEY, u INT REFERENCES nope(id));", "unknown table"),
        ("CREATE TABLE p(id INT PRIMARY KEY, v INT); CREATE TABLE t(id INT PRIMARY KEY, u INT REFERENCES p(v));",
         "primary key"),
        ("CREATE TABLE t(a INT, b INT, PRIMARY KEY (a, b));", "composite"),
        ("CREATE TABLE t(id INT PRIMARY KEY, x BLOB);", "unsupported SQL type"),
    ])
    def test_semantic_errors(self, text, fragment):
        with pytest.raises(SchemaError, match=fragment):
            parse_ddl(text)

    def test_cycle_rejected(self, fixtures):
        with pytest.raises(SchemaError, match="cycle"):
            parse_ddl((fixtures / "cycle.sql").read_text())

    def test_two_fks_to_same_parent_are_distinct_edges(self, players_schema):
        fks = players_schema.table("matches").foreign_keys
        assert [c.name for c in fks] == ["player1", "player2"]
        assert players_schema.children("players") == [("matches", "player1"), ("matches", "player2")]


class TestTopoOrder:
    def test_umr(self, umr_schema):
        assert topo_order(umr_schema) == ["users", "movies", "ratings"]

    def test_single(self):
        assert topo_order(parse_ddl("CREATE TABLE t(id INT PRIMARY KEY);")) == ["t"]

    def test_players(self, players_schema):
        assert topo_order(players_schema) == ["players", "matches"]

    def test_children_declared_first(self):
        s = parse_ddl("""
            CREATE TABLE c(id INT PRIMARY KEY, p INT REFERENCES p(id));
            CREATE TABLE p(id INT PRIMARY KEY);
            CREATE TABLE q(id INT PRIMARY KEY);""")
        assert topo_order(s) == ["p", "c", "q"]


@st.composite
def random_dag_ddl(draw, inject_cycle=False):
    n = draw(st.integers(2 if inject_cycle else 1, 6))
    edges = set()
    for child in range(n):
        for parent in range(child):
            if draw(st.booleans()):
                edges.add((child, parent))
    if inject_cycle:
        # guarantee a path parent -> child then add the back-edge
        child = draw(st.integers(1, n - 1))
        parent = draw(st.integers(0, child - 1))
        edges.add((child, parent))
        edges.add((parent, child))
    perm = draw(st.permutations(range(n)))
    stmts = []
    for t in perm:
        cols = ["id INT PRIMARY KEY"]
        cols += [f"fk{p} INT REFERENCES t{p}(id)" for (c, p) in sorted(edges) if c == t]
        for j in range(draw(st.integers(0, 3))):
            cols.append(f"a{j} {draw(st.sampled_from(['REAL', 'BOOLEAN', 'TEXT', 'VARCHAR(9)', 'INT']))}")
        stmts.append(f"CREATE TABLE t{t} ({', '.join(cols)});")
    return "\n".join(stmts), edges


class TestProperties:
    @given(random_dag_ddl())
    def test_round_trip_and_topo(self, case):
        text, edges = case
        s = parse_ddl(text)
        assert parse_ddl(to_ddl(s)) == s
        order = topo_order(s)
        assert sorted(order) == sorted(s.names)
        pos = {name: i for i, name in enumerate(order)}
        for c, p in edges:
            assert pos[f"t{p}"] < pos[f"t{c}"]

    @given(random_dag_ddl(inject_cycle=True))
    def test_back_edge_rejected(self, case):
        with pytest.raises(SchemaError, match="cycle"):
            parse_ddl(case[0])

    def test_fixture_round_trip(self, fixtures):
        for name in ("umr.sql", "players.sql"):
            s = parse_ddl((fixtures / name).read_text())
            assert parse_ddl(to_ddl(s)) == s
            assert schema_from_dict(json.loads(json.dumps(schema_to_dict(s)))) == s


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig.from_json("{}")
        assert cfg.k("anything") == 5
        assert cfg.priors.dirichlet_alpha == 1.0
        assert cfg.priors.gauss_precision == 0.01
        assert cfg.limits.max_categories == 100
        assert cfg.limits.cpt_cell_cap == 10**6
        assert cfg.limits.fk_candidate_cap == 10_000

    def test_override_to_categorical(self, umr_schema):
        cfg = ModelConfig.from_dict({"columns": {"users.age": {"type": "categorical", "levels": 3}}})
        out = apply_config(umr_schema, cfg)
        assert out.table("users").column("age").type == AttributeType(CATEGORICAL, 3)

    def test_ignore(self, umr_applied):
        assert umr_applied.table("movies").column("title").role == IGNORED
        assert [c.name for c in umr_applied.table("movies").attributes] == ["category", "year"]

    @pytest.mark.parametrize("doc,fragment", [
        ({"columns": {"users.nope": {"type": "real"}}}, "unknown column"),
        ({"columns": {"nope.age": {"type": "real"}}}, "unknown table"),
        ({"columns": {"ratings.user_id": {"type": "real"}}}, "key column"),
        ({"tables": {"nope": {"components": 2}}}, "unknown table"),
    ])
    def test_override_errors(self, umr_schema, doc, fragment):
        with pytest.raises(SchemaError, match=fragment):
            apply_config(umr_schema, ModelConfig.from_dict(doc))

    @pytest.mark.parametrize("doc", [
        {"tables": {"t": {"components": 0}}},
        {"priors": {"gauss_precision": 0}},
        {"priors": {"bogus": 1}},
        {"columns": {"t.c": {"type": "categorical", "levels": 1}}},
        {"surprise": 1},
    ])
    def test_invalid_config(self, doc):
        with pytest.raises(SchemaError):
            cfg = ModelConfig.from_dict(doc)
            apply_config(parse_ddl("CREATE TABLE t(id INT PRIMARY KEY, c TEXT);"), cfg)

    def test_config_round_trip(self, umr_config):
        assert ModelConfig.from_dict(umr_config.to_dict()) == umr_config
