import csv

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from schemagm.compiler import compile
from schemagm.data import DataError, load_csv, standardize
from schemagm.engine import FitConfig, fit
from schemagm.schema import ModelConfig, parse_ddl
from schemagm.synthbench import (
    UMR_K,
    GenerationError,
    GenParams,
    adjusted_rand_index,
    generate,
    h2h_params,
    head_to_head_experiment,
    join_baseline,
    linear_r2,
    matrix_is_monotone,
    missing_value_experiment,
    random_params,
    rmse,
    scaling_experiment,
    umr_params,
)

SMALL = {"users": 40, "movies": 30, "ratings": 600}


class TestGenerate:
    def test_paper_sizes(self):
        ds, truth = generate(umr_params(0))
        assert {t: ds.table(t).n_rows for t in ds.schema.names} == {"users": 943, "movies": 1682, "ratings": 100_000}
        assert len(truth.z["ratings"]) == 100_000

    def test_same_seed_same_data(self):
        a, _ = generate(umr_params(4, SMALL))
        b, _ = generate(umr_params(4, SMALL))
        c, _ = generate(umr_params(5, SMALL))
        for name in a.schema.names:
            for col, data in a.table(name).attrs.items():
                assert data.equals(b.table(name).attrs[col])
            for col, data in a.table(name).fks.items():
                assert data.equals(b.table(name).fks[col])
        assert not a.table("ratings").attrs["score"].equals(c.table("ratings").attrs["score"])

    def test_degenerate_generator(self):
        schema = parse_ddl("CREATE TABLE t(id INT PRIMARY KEY, x REAL, y REAL);")
        params = GenParams(schema, {"t": 1}, {"t": np.ones((1, 1))},
                           {"t": {"x": {"mean": np.array([2.5]), "sd": np.zeros(1)},
                                  "y": {"mean": np.array([-1.0]), "sd": np.zeros(1)}}}, {"t": 50})
        ds, _ = generate(params)
        assert set(ds.table("t").attrs["x"].values) == {2.5}
        assert set(ds.table("t").attrs["y"].values) == {-1.0}

    def test_dimension_mismatch(self):
        schema = parse_ddl("CREATE TABLE t(id INT PRIMARY KEY, x REAL);")
        with pytest.raises(GenerationError, match="CPT shape"):
            GenParams(schema, {"t": 2}, {"t": np.ones((1, 3)) / 3},
                      {"t": {"x": {"mean": np.zeros(2), "sd": np.ones(2)}}}, {"t": 5})
        with pytest.raises(GenerationError, match="does not match K"):
            GenParams(schema, {"t": 2}, {"t": np.ones((1, 2)) / 2},
                      {"t": {"x": {"mean": np.zeros(3), "sd": np.ones(3)}}}, {"t": 5})

    def test_two_links_into_one_parent_are_distinct(self):
        ds, _ = generate(h2h_params(0, players=5, matches=500))
        m = ds.table("matches")
        assert not np.any(m.fks["player1"].values == m.fks["player2"].values)

    def test_csv_round_trip(self, tmp_path):
        from schemagm.data import load_dir, write_csv

        ds, _ = generate(umr_params(1, SMALL))
        write_csv(ds, tmp_path)
        again = load_dir(parse_ddl(ds.schema.to_ddl()), tmp_path)
        np.testing.assert_allclose(again.table("ratings").attrs["score"].values,
                                   ds.table("ratings").attrs["score"].values, rtol=1e-15)

    def test_recovers_true_means(self):
        ds, truth = generate(umr_params(2, {"users": 400, "movies": 400, "ratings": 8000}))
        ds = standardize(ds)
        spec = compile(ds.schema, ModelConfig(components=UMR_K))
        state, _ = fit(spec, ds, FitConfig(max_sweeps=200))
        for table, column in (("users", "age"), ("movies", "year"), ("ratings", "score")):
            tr = ds.transform(table, column)
            post = state.params[table][column]
            est = tr.inverse(post.mean)
            sd = np.sqrt(post.var) * tr.scale
            true = truth.params.attrs[table][column]["mean"]
            rows, cols = linear_sum_assignment(np.abs(est[:, None] - true[None, :]))
            # sampling noise of the generated data is part of the comparison, hence a floor
            assert np.all(np.abs(est[rows] - true[cols]) <= 3 * np.maximum(sd[rows], 0.05 * tr.scale))


class TestJoin:
    def test_shape_and_duplication(self):
        ds, _ = generate(umr_params(0, SMALL))
        joined = join_baseline(ds)
        (name,) = joined.schema.names
        t = joined.table(name)
        assert t.n_rows == ds.table("ratings").n_rows
        assert list(t.attrs) == ["score", "user_id.gender", "user_id.age", "movie_id.category", "movie_id.year"]
        uid = ds.table("ratings").fks["user_id"].values
        np.testing.assert_array_equal(t.attrs["user_id.age"].values, ds.table("users").attrs["age"].values[uid])

    def test_masked_cells_stay_masked(self):
        from schemagm.data import mask_cells

        ds, _ = generate(umr_params(0, SMALL))
        masked, _ = mask_cells(ds, 0.3, seed=0)
        joined = join_baseline(masked).table("ratings")
        uid = masked.table("ratings").fks["user_id"].values
        np.testing.assert_array_equal(joined.attrs["user_id.age"].missing,
                                      masked.table("users").attrs["age"].missing[uid])

    def test_single_table_is_identity(self):
        ds = load_csv(parse_ddl("CREATE TABLE t(id INT PRIMARY KEY, x REAL, c TEXT);"),
                      {"t": "id,x,c\n1,1.5,a\n2,,b\n"})
        joined = join_baseline(ds)
        assert joined.schema == ds.schema
        for col, data in ds.table("t").attrs.items():
            assert data.equals(joined.table("t").attrs[col])

    def test_latent_fk_rejected(self):
        ds = load_csv(parse_ddl("CREATE TABLE p(id INT PRIMARY KEY, x REAL);"
                                "CREATE TABLE c(id INT PRIMARY KEY, pid INT REFERENCES p(id), y REAL);"),
                      {"p": "id,x\n1,0\n", "c": "id,pid,y\n1,,2\n"})
        with pytest.raises(ValueError, match="latent"):
            join_baseline(ds)

    def test_fits_as_single_table(self):
        joined = standardize(join_baseline(generate(umr_params(0, SMALL))[0]))
        spec = compile(joined.schema, ModelConfig(components={"ratings": 3}))
        _, report = fit(spec, joined, FitConfig(max_sweeps=5))
        assert np.isfinite(report.elbo[-1])


class TestMetrics:
    @pytest.mark.parametrize("pairs,want", [([(1, 1)], 0.0), ([(0, 1), (0, -1)], 1.0), ([(0, 3)], 3.0)])
    def test_rmse(self, pairs, want):
        p, t = zip(*pairs)
        assert rmse(p, t) == want

    def test_rmse_empty(self):
        with pytest.raises(ValueError, match="empty"):
            rmse([], [])

    def test_ari(self):
        assert adjusted_rand_index([0, 0, 1, 1, 2, 2], [2, 2, 0, 0, 1, 1]) == pytest.approx(1.0)
        # reference value from the pair-counting definition
        assert adjusted_rand_index([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2]) == pytest.approx(0.24242424242424246)
        assert adjusted_rand_index([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(-0.5)

    def test_r2(self):
        assert linear_r2([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)

    def test_monotone_matrix(self):
        assert matrix_is_monotone([[0.5, 0.2], [0.8, 0.5]])
        assert not matrix_is_monotone([[0.5, 0.9], [0.8, 0.5]])


class TestExperiments:
    def test_missing_small(self, tmp_path):
        sizes = {"users": 40, "movies": 30, "ratings": 800}
        result = missing_value_experiment(seeds=(0,), fractions=(0.2,), config=FitConfig(max_sweeps=30), sizes=sizes)
        assert len(result.rows) == 6
        assert {r[2] for r in result.rows} == {"relational", "join"}
        result.write_csv(tmp_path / "missing_rmse.csv")
        with open(tmp_path / "missing_rmse.csv") as fh:
            assert next(csv.reader(fh)) == ["fraction", "seed", "model", "attribute", "rmse"]
        again = missing_value_experiment(seeds=(0,), fractions=(0.2,), config=FitConfig(max_sweeps=30), sizes=sizes)
        assert again.rows == result.rows

    def test_zero_fraction_surfaces_rmse_error(self):
        with pytest.raises(ValueError, match="empty"):
            missing_value_experiment(seeds=(0,), fractions=(0.0,), config=FitConfig(max_sweeps=3), sizes=SMALL)

    def test_scaling_single_count(self):
        result = scaling_experiment(row_counts=(500,), sweeps=2)
        assert [r[:2] for r in result.rows] == [(500, 5), (500, 10)]
        assert "r2_base" not in result.extras

    def test_h2h_small(self):
        result = head_to_head_experiment(players=30, matches=600, seeds=(0,))
        matrix = result.extras["matrix"][0]
        assert matrix.shape[0] <= 3
        assert -1.0 <= result.extras["ari"][0] <= 1.0


def test_random_params_valid():
    for seed in range(10):
        p = random_params(seed)
        ds, truth = generate(p)
        for t in p.schema.tables:
            assert ds.table(t.name).n_rows == p.rows[t.name]
            assert truth.z[t.name].max() < p.k[t.name]


def test_generated_links_pass_ingest_checks():
    from schemagm.data import check_links

    ds, _ = generate(h2h_params(3, players=10, matches=200))
    check_links(ds)
    with pytest.raises(DataError):
        bad = ds.table("matches")
        bad.fks["player2"].values[0] = bad.fks["player1"].values[0]
        check_links(ds)
