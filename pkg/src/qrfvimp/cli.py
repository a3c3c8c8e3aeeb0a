"""
Command-line interface: ``qrfvimp {fit,predict,vimp,simulate,demo}``.

Every run writes its artifacts plus ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .forest import CorruptModelError, Dataset, ForestConfig, fit_forest, load_model, save_model
from .quantile import predict_with_interval
from .simlab.campaigns import (
    SimConfig,
    run_bias_scaling,
    run_phase_transition,
    run_pointwise_normality,
)
from .vimp import FeatureSubset, run_vimp

logger = logging.getLogger("qrfvimp")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MALFORMED = 4
EXIT_NON_NUMERIC = 5
EXIT_SCHEMA = 6
EXIT_CONFIG = 7
EXIT_NUMERICAL = 8

EXIT_CODES_HELP = """exit codes:
  0  success
  2  invalid command-line usage
  3  I/O error (missing or unreadable input, unwritable output)
  4  malformed input (ragged CSV, corrupt model or config file)
  5  non-numeric or non-finite cell in a data file
  6  schema error (unknown target column, feature mismatch)
  7  invalid configuration (tau, beta, subsample, subset, grids)
  8  numerical failure (too many failed replications, degenerate fit)
"""

CAMPAIGNS = {
    "phase_transition": run_phase_transition,
    "normality": run_pointwise_normality,
    "bias_scaling": run_bias_scaling,
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    """Everything needed to reproduce a run."""

    command: str
    argv: list
    version: str
    config: dict
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    started: float = 0.0
    wall_seconds: float = 0.0

    def write(self, out_dir: Path):
        path = out_dir / "manifest.json"
        self.artifacts["manifest"] = str(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_table(path: Path):
    """Header and float matrix of a comma-separated file."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such file: {path}")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}")
    except csv.Error as exc:
        raise CliError(EXIT_MALFORMED, f"malformed CSV {path}: {exc}")
    rows = [r for r in rows if r]
    if not rows:
        raise CliError(EXIT_MALFORMED, f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise CliError(EXIT_MALFORMED, f"{path}: header has blank or duplicate names")
    body = rows[1:]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise CliError(EXIT_MALFORMED, f"{path}:{k}: expected {len(header)} fields, got {len(r)}")
    values = np.empty((len(body), len(header)))
    for k, r in enumerate(body):
        for j, cell in enumerate(r):
            try:
                values[k, j] = float(cell)
            except ValueError:
                raise CliError(EXIT_NON_NUMERIC, f"{path}:{k + 2}: non-numeric value {cell!r} "
                                                 f"in column {header[j]!r}")
    if not np.all(np.isfinite(values)):
        raise CliError(EXIT_NON_NUMERIC, f"{path}: non-finite value")
    return header, values


def _load_dataset(path: Path, target: str) -> Dataset:
    header, values = _read_table(path)
    if target not in header:
        raise CliError(EXIT_SCHEMA, f"target column {target!r} not in {path}")
    j = header.index(target)
    features = [h for h in header if h != target]
    if not features:
        raise CliError(EXIT_SCHEMA, f"{path} has no feature columns")
    try:
        return Dataset(np.delete(values, j, axis=1), values[:, j], tuple(features))
    except ValueError as exc:
        raise CliError(EXIT_SCHEMA, f"{path}: {exc}")


def _forest_config(args) -> ForestConfig:
    try:
        return ForestConfig(num_trees=args.trees, subsample_size=args.subsample,
                            beta=args.beta, alpha=args.alpha, min_leaf_est=args.min_leaf,
                            mtry=args.mtry, seed=args.seed, tau=args.tau)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc}")
    return out


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("QRFVIMP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"QRFVIMP_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _fit_or_fail(data, cfg, **kw):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return fit_forest(data, cfg, **kw)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))


# commands -------------------------------------------------------------------

def cmd_fit(args, manifest: RunManifest):
    data = _load_dataset(Path(args.data), args.target)
    cfg = _forest_config(args)
    model = _fit_or_fail(data, cfg)
    out = _out_dir(args)
    path = out / "model.json"
    save_model(model, path)
    manifest.config = {**cfg.to_dict(), "subsample_size_resolved": model.subsample_size,
                       "mtry_resolved": model.mtry, "target": args.target}
    manifest.inputs = {"data": {"path": str(args.data), "sha256": _sha256(Path(args.data))}}
    manifest.artifacts = {"model": str(path)}
    manifest.seeds = {"forest": cfg.seed}
    return out


def cmd_predict(args, manifest: RunManifest):
    try:
        model = load_model(args.model)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such file: {args.model}")
    except CorruptModelError as exc:
        raise CliError(EXIT_MALFORMED, str(exc))
    header, values = _read_table(Path(args.query))
    names = list(model.feature_names) or [f"x{j + 1}" for j in range(model.n_features)]
    missing = [nm for nm in names if nm not in header]
    if missing:
        raise CliError(EXIT_SCHEMA, f"query is missing feature columns {missing}")
    X = values[:, [header.index(nm) for nm in names]]
    if not 0 < args.level < 1:
        raise CliError(EXIT_CONFIG, "level must lie in (0, 1)")
    preds = predict_with_interval(model, None, X, level=args.level) if len(X) else []
    out = _out_dir(args)
    path = out / "predictions.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["q_hat", "eta_hat", "f_hat", "ci_low", "ci_high"])
        for p in preds:
            w.writerow([repr(p.q_hat), repr(p.eta_hat), repr(p.f_hat),
                        repr(p.ci_low), repr(p.ci_high)])
    manifest.config = {"level": args.level, "model_config": model.config.to_dict()}
    manifest.inputs = {"model": {"path": str(args.model), "sha256": _sha256(Path(args.model))},
                       "query": {"path": str(args.query), "sha256": _sha256(Path(args.query))}}
    manifest.artifacts = {"predictions": str(path)}
    manifest.seeds = {"forest": model.config.seed}
    return out


def cmd_vimp(args, manifest: RunManifest):
    data = _load_dataset(Path(args.data), args.target)
    cfg = _forest_config(args)
    try:
        subset = FeatureSubset.parse(args.subset).validate(data.p)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid --subset: {exc}")
    split_seed = cfg.seed if args.split_seed is None else args.split_seed
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = run_vimp(data, subset, cfg, split_seed=split_seed, level=args.level,
                              keep_losses=args.per_point)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    if not all(math.isfinite(v) for v in (report.v_hat, report.v_tilde, report.sigma_s_hat)):
        raise CliError(EXIT_NUMERICAL, "non-finite importance estimate")
    out = _out_dir(args)
    path = out / "vimp.json"
    doc = report.to_dict()
    doc["subset_one_based"] = [j + 1 for j in report.subset]
    doc["subset_names"] = [data.feature_names[j] for j in report.subset]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.artifacts = {"vimp": str(path)}
    if args.per_point:
        pp = out / "vimp_losses.csv"
        with open(pp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["loss_difference"])
            w.writerows([repr(v)] for v in report.per_point_losses)
        manifest.artifacts["per_point"] = str(pp)
    manifest.config = {**cfg.to_dict(), "subset": list(report.subset), "level": args.level,
                       "target": args.target, "subsample_size_resolved": report.subsample_size}
    manifest.inputs = {"data": {"path": str(args.data), "sha256": _sha256(Path(args.data))}}
    manifest.seeds = {"forest": cfg.seed, "split": split_seed}
    return out


def cmd_simulate(args, manifest: RunManifest):
    path = Path(args.config)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such file: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_MALFORMED, f"{path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise CliError(EXIT_MALFORMED, f"{path} must hold a JSON object")
    campaign = doc.pop("campaign", args.campaign)
    if campaign not in CAMPAIGNS:
        raise CliError(EXIT_CONFIG, f"unknown campaign {campaign!r}; choose from {sorted(CAMPAIGNS)}")
    try:
        cfg = SimConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid simulation config: {exc}")
    workers = _threads(args)
    try:
        result = CAMPAIGNS[campaign](cfg, workers=workers)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    except RuntimeError as exc:
        raise CliError(EXIT_NUMERICAL, str(exc))
    out = _out_dir(args)
    csv_path, json_path = out / "sim_results.csv", out / "sim_summary.json"
    result.write_csv(csv_path)
    result.write_json(json_path)
    manifest.config = {"campaign": campaign, **cfg.to_dict(), "workers": workers}
    manifest.inputs = {"config": {"path": str(path), "sha256": _sha256(path)}}
    manifest.artifacts = {"results": str(csv_path), "summary": str(json_path)}
    manifest.seeds = {"master": cfg.master_seed}
    return out


def cmd_demo(args, manifest: RunManifest):
    out = _out_dir(args)
    path = out / "demo.csv"
    path.write_bytes(demo_dataset_path().read_bytes())
    manifest.config = {"description": "Y = X1 + 0.5 X2 + N(0,1); X3 has zero coefficient"}
    manifest.artifacts = {"data": str(path)}
    return out


def demo_dataset_path() -> Path:
    return Path(str(resources.files("qrfvimp") / "data" / "demo.csv"))


# parser ---------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _add_forest_flags(p):
    g = p.add_argument_group("forest")
    g.add_argument("--tau", type=float, default=0.5, help="quantile level in (0, 1)")
    size = g.add_mutually_exclusive_group()
    size.add_argument("--beta", type=float, default=None,
                      help="subsampling rate; s = even(round(n^beta)) (default 0.7)")
    size.add_argument("--subsample", type=int, default=None, help="subsample size s")
    g.add_argument("--trees", type=_positive_int, default=1000, help="number of trees B")
    g.add_argument("--alpha", type=float, default=0.05, help="minimum child fraction")
    g.add_argument("--min-leaf", type=_positive_int, default=5,
                   help="minimum estimation-half rows per leaf")
    g.add_argument("--mtry", type=_positive_int, default=None,
                   help="candidate features per split (default ceil(sqrt(p)))")
    g.add_argument("--seed", type=int, default=0, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrfvimp",
        description="Honest quantile regression forests with variable-importance inference.",
        epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--out", default=".", help="output directory (default: current)")
        return p

    p = add("fit", "fit a forest and write model.json")
    p.add_argument("data", help="CSV with header row")
    p.add_argument("--target", default="y", help="response column (default: y)")
    _add_forest_flags(p)

    p = add("predict", "quantiles and intervals for query rows, written to predictions.csv")
    p.add_argument("model", help="model.json from `fit`")
    p.add_argument("query", help="CSV with the model's feature columns")
    p.add_argument("--level", type=float, default=0.95, help="interval level (default 0.95)")

    p = add("vimp", "cross-fitted importance of a feature subset, written to vimp.json")
    p.add_argument("data", help="CSV with header row")
    p.add_argument("--target", default="y", help="response column (default: y)")
    p.add_argument("--subset", default="", help="comma-separated 1-based feature indices")
    p.add_argument("--level", type=float, default=0.95, help="interval level (default 0.95)")
    p.add_argument("--split-seed", type=int, default=None,
                   help="seed of the train/eval split (default: --seed)")
    p.add_argument("--per-point", action="store_true",
                   help="also write per-row loss differences to vimp_losses.csv")
    _add_forest_flags(p)

    p = add("simulate", "run a Monte Carlo campaign from a JSON config")
    p.add_argument("config", help="JSON object with SimConfig fields and optional 'campaign'")
    p.add_argument("--campaign", default="phase_transition", choices=sorted(CAMPAIGNS))
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes (default: $QRFVIMP_THREADS, else CPU count)")

    add("demo", "write the bundled demo dataset to demo.csv")
    return parser


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "vimp": cmd_vimp,
            "simulate": cmd_simulate, "demo": cmd_demo}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv, __version__, {}, started=time.time())
    t0 = time.perf_counter()
    try:
        out = COMMANDS[args.command](args, manifest)
        manifest.wall_seconds = time.perf_counter() - t0
        manifest.write(out)
    except CliError as exc:
        print(f"qrfvimp: error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"qrfvimp: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"qrfvimp: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
