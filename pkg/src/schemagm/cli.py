"""Command-line interface: compile, fit, predict, query, cluster, synth, bench."""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .compiler import compile, describe
from .data import DataError, load_dir, mask_cells, standardize, write_csv, write_truth_csv
from .engine import INIT_MODES, FitConfig, NumericError, VMP, load_posterior, save_posterior
from .query import (
    QueryError,
    answer_query,
    cluster_assignments,
    load_query_file,
    predict_missing_cells,
    write_predictions,
)
from .schema import ModelConfig, SchemaError, apply_config, parse_ddl
from .synthbench import (
    GenerationError,
    generate,
    h2h_params,
    head_to_head_experiment,
    missing_value_experiment,
    scaling_experiment,
    umr_params,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("schemagm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Formatter(logging.Formatter):
    COLORS = {"WARNING": "\033[33m", "ERROR": "\033[31m"}

    def __init__(self, color):
        super().__init__("%(levelname)s %(name)s: %(message)s")
        self.color = color

    def format(self, record):
        text = super().format(record)
        code = self.COLORS.get(record.levelname) if self.color else None
        return f"{code}{text}\033[0m" if code else text


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    color = "NO_COLOR" not in os.environ and sys.stderr.isatty()
    handler.setFormatter(_Formatter(color))
    root = logging.getLogger("schemagm")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


# -- helpers ------------------------------------------------------------------


def _read_text(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _load_config(path):
    if path is None:
        return ModelConfig()
    try:
        return ModelConfig.from_json(_read_text(path))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None


def _load_schema(args):
    schema = parse_ddl(_read_text(args.schema))
    config = _load_config(args.config)
    return apply_config(schema, config), config


def _open_out(path):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fit_config(args):
    return FitConfig(max_sweeps=args.sweeps, tol=args.tol, seed=args.seed, noise=args.noise,
                     threads=args.threads, init=args.init)


# -- commands -----------------------------------------------------------------


def cmd_compile(args):
    schema, config = _load_schema(args)
    spec = compile(schema, config)
    print(describe(spec))
    if args.out:
        Path(args.out).write_text(spec.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_fit(args):
    schema, config = _load_schema(args)
    dataset = standardize(load_dir(schema, args.data, config.limits.max_categories))
    spec = compile(dataset.schema, config)
    vmp = VMP(spec, dataset, _fit_config(args))
    try:
        state, report = vmp.fit()
    finally:
        vmp.close()
    status = "converged" if report.converged else "stopped at max sweeps"
    log.info("%s after %d sweeps, final elbo %.10g", status, report.sweeps, report.elbo[-1])
    save_posterior(args.out, state, spec, dataset, include_resp=not args.no_resp)
    return EXIT_OK


def _load_model(path):
    try:
        return load_posterior(path)
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{path}: malformed posterior file ({exc})") from None


def cmd_predict(args):
    model = _load_model(args.model)
    if not model.has_resp:
        raise DataError(f"{args.model}: posterior saved without responsibilities; refit without --no-resp")
    schema = model.spec.schema
    dataset = load_dir(schema, args.data, model.spec.config.limits.max_categories, levels=model.levels)
    for name in model.spec.order:
        if dataset.table(name).keys.keys != model.keys[name].keys:
            raise DataError(f"{name}.csv: rows differ from the training data the model was fit on")
    dataset = replace(dataset, schema=schema, transforms=model.transforms)
    predictions = predict_missing_cells(model.state, model.spec, dataset)
    out, close = _open_out(args.out)
    try:
        write_predictions(predictions, out, "row")
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_query(args):
    model = _load_model(args.model)
    predictions = answer_query(model, load_query_file(args.query), iters=args.iters)
    out, close = _open_out(args.out)
    try:
        write_predictions(predictions, out, "id")
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_cluster(args):
    model = _load_model(args.model)
    if not model.has_resp:
        raise DataError(f"{args.model}: posterior saved without responsibilities")
    if args.table not in model.spec.order:
        raise DataError(f"unknown table {args.table!r}")
    keys = model.keys[args.table].keys
    out, close = _open_out(args.out)
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["row", "component", "probability"])
        for key, (comp, prob) in zip(keys, cluster_assignments(model.state, args.table)):
            w.writerow([key, comp, repr(prob)])
    finally:
        if close:
            out.close()
    return EXIT_OK


def _sizes(pairs):
    out = {}
    for item in pairs or []:
        name, _, value = item.partition("=")
        try:
            out[name] = int(value)
        except ValueError:
            raise UsageError(f"--rows expects table=count, got {item!r}") from None
    return out


def cmd_synth(args):
    out = Path(args.out)
    if args.kind == "umr":
        sizes = {"users": 943, "movies": 1682, "ratings": 100_000, **_sizes(args.rows)}
        params = umr_params(args.seed, sizes)
    else:
        sizes = {"players": 90, "matches": 3000, **_sizes(args.rows)}
        params = h2h_params(args.seed, sizes["players"], sizes["matches"])
    dataset, _ = generate(params)
    if args.mask:
        dataset, truths = mask_cells(dataset, args.mask, seed=args.seed)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
            write_truth_csv(truths, fh)
    write_csv(dataset, out)
    (out / "schema.sql").write_text(dataset.schema.to_ddl(), encoding="utf-8")
    log.info("wrote %s", ", ".join(f"{t.name} ({dataset.table(t.name).n_rows} rows)" for t in dataset.schema.tables))
    return EXIT_OK


def cmd_bench(args):
    fit_cfg = _fit_config(args)
    if args.experiment == "missing":
        result = missing_value_experiment(seeds=args.seeds, fractions=args.fractions, config=fit_cfg)
    elif args.experiment == "scaling":
        result = scaling_experiment(row_counts=args.rows, sweeps=args.sweeps, config=fit_cfg, seed=args.seed)
        for key in ("r2_base", "r2_doubled"):
            if key in result.extras:
                log.info("%s = %.4f", key, result.extras[key])
    else:
        result = head_to_head_experiment(players=args.players, matches=args.matches, k=args.k,
                                         seeds=args.seeds, config=fit_cfg)
        for seed, ari in result.extras["ari"].items():
            log.info("seed %d: adjusted agreement with true tiers %.4f", seed, ari)
    result.write_csv(args.out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_fit_flags(p, sweeps=200, tol=1e-6):
    p.add_argument("--sweeps", type=int, default=sweeps, help=f"maximum VMP sweeps (default {sweeps})")
    p.add_argument("--tol", type=float, default=tol, help=f"relative ELBO tolerance (default {tol:g})")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--noise", type=float, default=0.1, help="initial responsibility noise amplitude (default 0.1)")
    p.add_argument("--init", choices=INIT_MODES, default="seeded",
                   help="initialization: k-means seeded or noise only (default seeded)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for row updates (default 1)")


def build_parser():
    parser = _Parser(prog="schemagm", description="Relational mixture models compiled from SQL schemas.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("compile", help="check a schema and describe the compiled model")
    p.add_argument("--schema", required=True, help="DDL file")
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--out", help="write the model spec JSON here")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("fit", help="fit a model to CSV data")
    p.add_argument("--schema", required=True, help="DDL file")
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--data", required=True, help="directory holding <table>.csv files")
    p.add_argument("--out", required=True, help="posterior JSON output path")
    p.add_argument("--no-resp", action="store_true", help="omit per-row responsibilities from the output")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict every missing cell of the training data")
    p.add_argument("--model", required=True, help="posterior JSON")
    p.add_argument("--data", required=True, help="directory the model was fit on")
    p.add_argument("--out", help="predictions CSV (default standard output)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("query", help="answer a query over new partial records")
    p.add_argument("--model", required=True, help="posterior JSON")
    p.add_argument("--query", required=True, help="JSON list of query records")
    p.add_argument("--iters", type=int, default=20, help="query iterations (default 20)")
    p.add_argument("--out", help="predictions CSV (default standard output)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("cluster", help="export per-row cluster assignments")
    p.add_argument("--model", required=True, help="posterior JSON")
    p.add_argument("--table", required=True, help="table name")
    p.add_argument("--out", help="CSV output (default standard output)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--kind", choices=("umr", "h2h"), default="umr", help="users/movies/ratings or players/matches")
    p.add_argument("--rows", action="append", metavar="TABLE=N", help="override a table's row count")
    p.add_argument("--mask", type=float, default=0.0, help="fraction of attribute cells to hide (truth.csv)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run a synthetic experiment")
    bsub = p.add_subparsers(dest="experiment", metavar="EXPERIMENT", parser_class=_Parser)
    bsub.required = True
    b = bsub.add_parser("missing", help="missing-value RMSE, relational model vs join baseline")
    b.add_argument("--fractions", type=_float_list, default=[0.1, 0.2, 0.3, 0.4, 0.5], help="masking fractions")
    b.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="generator seeds")
    b.add_argument("--out", default="missing_rmse.csv", help="CSV output")
    _add_fit_flags(b)
    b = bsub.add_parser("scaling", help="seconds per sweep against leaf rows")
    b.add_argument("--rows", type=_int_list, default=[10_000, 20_000, 40_000, 80_000], help="leaf row counts")
    b.add_argument("--out", default="scaling.csv", help="CSV output")
    _add_fit_flags(b, sweeps=10)
    b = bsub.add_parser("h2h", help="head-to-head player clustering")
    b.add_argument("--players", type=int, default=90, help="player count (default 90)")
    b.add_argument("--matches", type=int, default=3000, help="match count (default 3000)")
    b.add_argument("--k", type=int, default=3, help="player components (default 3)")
    b.add_argument("--seeds", type=_int_list, default=[0], help="generator seeds")
    b.add_argument("--out", default="h2h.csv", help="CSV output")
    _add_fit_flags(b, sweeps=300)
    p.set_defaults(func=cmd_bench)
    return parser


_DATA_ERRORS = (SchemaError, DataError, QueryError, GenerationError, OSError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error[{EXIT_USAGE}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except UsageError as exc:
        code, message = EXIT_USAGE, str(exc)
    except ValueError as exc:
        if isinstance(exc, _DATA_ERRORS):
            code, message = EXIT_DATA, str(exc)
        else:
            code, message = EXIT_USAGE, str(exc)
    except _DATA_ERRORS as exc:
        code, message = EXIT_DATA, str(exc)
    except (NumericError, FloatingPointError) as exc:
        code, message = EXIT_NUMERIC, str(exc)
    print(f"error[{code}]: {' '.join(message.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
