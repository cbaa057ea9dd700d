"""Command-line driver.

Commands: ``generate``, ``calibrate``, ``evaluate``, ``pipeline``, ``sweep``
and ``concentration-check``. Every experiment flag can also be given in a
flat YAML/JSON file passed with ``--config``; flags override the file.

Exit codes: 0 success, 1 failed self-check, 2 configuration error, 3 data
error, 4 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import yaml

from ._rng import rng_for
from .calibrate import (
    Threshold,
    derive_aprcp_params,
    inflated_ar_threshold,
    iprcp_threshold,
    vanilla_cp_threshold,
)
from .classifier import (
    ProbabilityTable,
    SyntheticSoftmaxClassifier,
    dataset_text,
    generate_synthetic_dataset,
    load_dataset,
    load_probability_table,
    probability_table_text,
)
from .errors import ConfigError, DataError
from .eval import CLI_METHODS, ExperimentConfig, calibrate_threshold, evaluate_threshold, run_experiment, sweep_tradeoff
from .quantile import concentration_check
from .scores import label_scores

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

SEED_ENV = "PRCP_SEED"

_CLI_NAME = {v: k for k, v in CLI_METHODS.items()}


def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    try:
        parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_experiment_flags(p: argparse.ArgumentParser, *, data_flags: bool = True) -> None:
    g = p.add_argument_group("method")
    g.add_argument("--method", choices=["vanilla", "rscp", "iprcp", "aprcp"])
    g.add_argument("--alpha", type=float)
    g.add_argument("--s", type=float)
    g.add_argument("--alpha-tilde", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--m-r", type=float, help="inflation constant (default: analytic HPS bound)")
    g.add_argument("--d-gap", type=float, help="calibration/test noise density gap")
    g.add_argument("--score", choices=["hps", "aps"])
    g.add_argument("--m", type=int, help="perturbations per calibration example")
    g.add_argument("--shared-draws", action="store_const", const=True)

    g = p.add_argument_group("noise")
    g.add_argument("--radius", type=float)
    g.add_argument("--noise", choices=["uniform", "shell", "gaussian"])
    g.add_argument("--shells", type=int)
    g.add_argument("--sigma", type=float)
    g.add_argument("--eval-noise", choices=["uniform", "shell", "gaussian"])
    g.add_argument("--eval-shells", type=int)
    g.add_argument("--eval-sigma", type=float)
    g.add_argument("--match-noise", action="store_const", const=True)
    g.add_argument("--n-s", type=int, help="perturbations per test example")

    g = p.add_argument_group("evaluation")
    g.add_argument("--mode", choices=["prob", "worst"])
    g.add_argument("--attack-steps", type=int)
    g.add_argument("--attack-restarts", type=int)
    g.add_argument("--attack-step-size", type=float)

    if data_flags:
        g = p.add_argument_group("synthetic task")
        g.add_argument("--classes", type=int)
        g.add_argument("--dim", type=int)
        g.add_argument("--spacing", type=float)
        g.add_argument("--sigma-x", type=float)
        g.add_argument("--n-cal", type=int)
        g.add_argument("--n-test", type=int)
        g.add_argument("--runs", type=int)

    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--config", help="flat YAML/JSON file of flag values")


_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}


def _load_config_file(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
        raise ConfigError(f"config file {path} must be a flat key-value mapping")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


def _effective_config(args: argparse.Namespace, extra_keys: tuple[str, ...] = ()) -> tuple[ExperimentConfig, dict]:
    """Merge defaults < config file < flags; return the config and leftover keys."""
    merged: dict = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command", "func"):
            merged[k] = v
    extras = {k: merged.pop(k) for k in list(merged) if k not in _CONFIG_KEYS}
    unknown = sorted(k for k in extras if k not in extra_keys)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    try:
        cfg = ExperimentConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, extras


def _require(extras: dict, key: str, flag: str):
    if extras.get(key) is None:
        raise ConfigError(f"missing required option {flag}")
    return extras[key]


def _load_model(path) -> tuple[SyntheticSoftmaxClassifier, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return SyntheticSoftmaxClassifier.from_dict(doc), doc
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed model file {path}: {exc}") from exc


def cmd_generate(args) -> int:
    cfg, extras = _effective_config(args, ("n", "out", "model_out", "table_out", "format"))
    n = int(extras.get("n", cfg.n_cal))
    if n < 0:
        raise ConfigError("--n must be >= 0")
    out = _require(extras, "out", "--out")
    try:
        spec = cfg.task()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    clf = spec.bayes_classifier()
    data = generate_synthetic_dataset(spec, n, cfg.seed)
    write_atomic(out, dataset_text(data, spec.dim))
    if extras.get("model_out"):
        doc = clf.to_dict()
        doc["task"] = spec.to_dict()
        write_atomic(extras["model_out"], json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if extras.get("table_out"):
        probs = clf.predict_proba(data.x) if n else np.zeros((0, spec.n_classes))
        table = ProbabilityTable(list(range(n)), data.y, probs)
        write_atomic(extras["table_out"], probability_table_text(table, extras.get("format") or "csv"))
    print(f"wrote {n} rows ({spec.n_classes} classes, dim {spec.dim}) to {out}")
    return EXIT_OK


def _calibrate_from_table(cfg: ExperimentConfig, table: ProbabilityTable) -> Threshold:
    if cfg.method == "aprcp":
        raise ConfigError("aprcp needs a model to perturb inputs; use --data with --model")
    if cfg.method in ("rscp", "iprcp") and cfg.m_r is None:
        raise ConfigError("--m-r is required when calibrating from a probability table")
    u = rng_for(cfg.seed, 2).random(len(table)) if cfg.score == "aps" else None
    scores = label_scores(table.probs, table.labels, cfg.score, u)
    if cfg.method == "vanilla":
        thr = vanilla_cp_threshold(scores, cfg.alpha)
    elif cfg.method == "rscp":
        thr = inflated_ar_threshold(scores, cfg.alpha, cfg.m_r)
    else:
        thr = iprcp_threshold(scores, cfg.alpha, cfg.eta, cfg.m_r)
    thr.seed = cfg.seed
    return thr


def cmd_calibrate(args) -> int:
    cfg, extras = _effective_config(args, ("data", "model", "table", "out"))
    out = _require(extras, "out", "--out")
    if extras.get("table"):
        cfg.validate(check_task=False)
        table = load_probability_table(extras["table"])
        if len(table) == 0:
            raise DataError("empty calibration table")
        thr = _calibrate_from_table(cfg, table)
    else:
        data_path = _require(extras, "data", "--data or --table")
        clf, _ = _load_model(_require(extras, "model", "--model"))
        cfg = replace(cfg, dim=clf.dim, classes=clf.n_classes).validate(check_task=False)
        data = load_dataset(data_path)
        if len(data) == 0:
            raise DataError(f"{data_path}: empty calibration set")
        if data.x.shape[1] != clf.dim or data.y.max() >= clf.n_classes or data.y.min() < 0:
            raise DataError(f"{data_path}: data does not match the model (dim {clf.dim}, {clf.n_classes} classes)")
        thr = calibrate_threshold(cfg, clf, data.x, data.y, cfg.seed)
    doc = thr.to_dict()
    doc["config"] = cfg.to_dict()
    write_atomic(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{thr.method} threshold {doc['value']} (n={thr.n}) written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, extras = _effective_config(args, ("threshold", "data", "model", "out"))
    thr_path = _require(extras, "threshold", "--threshold")
    try:
        thr = Threshold.from_dict(json.loads(Path(thr_path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise DataError(f"cannot read threshold {thr_path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed threshold file {thr_path}: {exc}") from exc
    clf, _ = _load_model(_require(extras, "model", "--model"))
    # The threshold file, not the flags, decides which method is being evaluated.
    p = thr.params
    cfg = replace(
        cfg,
        method=_CLI_NAME[thr.method],
        alpha=p.get("alpha", cfg.alpha),
        s=p.get("s"),
        alpha_tilde=None,
        eta=p.get("eta", 0.0),
        d_gap=p.get("d_gap", 0.0),
        dim=clf.dim,
        classes=clf.n_classes,
    ).validate(check_task=False)
    data = load_dataset(_require(extras, "data", "--data"))
    if len(data) == 0:
        raise DataError("empty test set")
    if data.x.shape[1] != clf.dim:
        raise DataError("test data dimension does not match the model")
    res = evaluate_threshold(cfg, thr, clf, data.x, data.y, cfg.seed)
    doc = {
        "config": cfg.to_dict(),
        "threshold": thr.to_dict(),
        "n_test": len(data),
        "coverage_mean": res.mean_coverage,
        "set_size_mean": res.mean_set_size,
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if extras.get("out"):
        write_atomic(extras["out"], text)
    print(f"mode={cfg.mode} coverage={res.mean_coverage:.4f} set_size={res.mean_set_size:.4f} n={len(data)}")
    return EXIT_OK


def _write_report_outputs(report, extras: dict) -> None:
    if extras.get("out"):
        write_atomic(extras["out"], report.to_json())
    if extras.get("text_out"):
        write_atomic(extras["text_out"], report.to_text())
    if extras.get("csv_out"):
        write_atomic(extras["csv_out"], report.to_csv())


def cmd_pipeline(args) -> int:
    cfg, extras = _effective_config(args, ("out", "text_out", "csv_out"))
    cfg.validate()
    report = run_experiment(cfg)
    _write_report_outputs(report, extras)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, extras = _effective_config(args, ("out", "grid_s", "grid_alpha_tilde"))
    s_grid, at_grid = extras.get("grid_s"), extras.get("grid_alpha_tilde")
    if isinstance(s_grid, str):
        s_grid = _floats(s_grid)
    if isinstance(at_grid, str):
        at_grid = _floats(at_grid)
    if (s_grid is None) == (at_grid is None):
        raise ConfigError("give exactly one of --grid-s or --grid-alpha-tilde")
    base = replace(cfg, method="aprcp", s=None, alpha_tilde=None)
    for v in s_grid or []:
        replace(base, s=v).validate()
    for v in at_grid or []:
        replace(base, alpha_tilde=v).validate()
    reports = sweep_tradeoff(base, s_grid, at_grid)
    rows = []
    print(f"{'s':>8} {'alpha_tilde':>12} {'coverage':>10} {'set_size':>10}")
    for rep in reports:
        p = derive_aprcp_params(rep.config["alpha"], rep.config["s"], rep.config["alpha_tilde"])
        agg = rep.aggregate
        rows.append({"s": p.s, "alpha_tilde": p.alpha_tilde, "report": rep.to_dict()})
        print(f"{p.s:>8.4f} {p.alpha_tilde:>12.4f} {agg['coverage_mean']:>10.4f} {agg['set_size_mean']:>10.4f}")
    if extras.get("out"):
        write_atomic(extras["out"], json.dumps({"config": base.to_dict(), "points": rows}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_concentration_check(args) -> int:
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get(SEED_ENV, 0))
    for name in ("alpha", "delta"):
        if not 0 < getattr(args, name) < 1:
            raise ConfigError(f"--{name} must lie in (0, 1)")
    if args.n < 1 or args.trials < 1:
        raise ConfigError("--n and --trials must be >= 1")
    res = concentration_check(args.n, args.alpha, args.delta, args.trials, seed)
    print(f"n={res.n} alpha={res.alpha} delta={res.delta} trials={res.trials} seed={res.seed}")
    print(f"half_width={res.half_width!r}")
    print(f"containment rate {res.rate:.4f} (target 1-delta = {1 - res.delta:.4f}, pass threshold {res.min_rate:.4f})")
    print("PASS" if res.passed else "FAIL")
    return EXIT_OK if res.passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prcp", description="Conformal prediction sets under bounded input perturbations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic labeled dataset (and model / probability table)")
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--spacing", type=float)
    p.add_argument("--sigma-x", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="dataset CSV (id,label,x0..)")
    p.add_argument("--model-out", help="Bayes-optimal softmax model JSON")
    p.add_argument("--table-out", help="probability table (id,label,p0..)")
    p.add_argument("--format", choices=["csv", "json"], help="probability table format")
    p.add_argument("--config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="compute a threshold from a calibration split")
    _add_experiment_flags(p, data_flags=False)
    p.add_argument("--data", help="calibration dataset CSV")
    p.add_argument("--model", help="model JSON written by generate")
    p.add_argument("--table", help="probability table (vanilla/rscp/iprcp only)")
    p.add_argument("--out", help="threshold JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="evaluate a threshold on a test split")
    _add_experiment_flags(p, data_flags=False)
    p.add_argument("--threshold", help="threshold JSON written by calibrate")
    p.add_argument("--data", help="test dataset CSV")
    p.add_argument("--model", help="model JSON")
    p.add_argument("--out", help="evaluation JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="repeated generate/calibrate/evaluate on a synthetic task")
    _add_experiment_flags(p)
    p.add_argument("--out", help="JSON report")
    p.add_argument("--text-out", help="aligned-column text report")
    p.add_argument("--csv-out", help="per-run CSV rows")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", help="aPRCP trade-off sweep over s or alpha-tilde")
    _add_experiment_flags(p)
    p.add_argument("--grid-s", type=_floats)
    p.add_argument("--grid-alpha-tilde", type=_floats)
    p.add_argument("--out", help="JSON with one report per grid point")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("concentration-check", help="Monte-Carlo check of the empirical quantile sandwich")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_concentration_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"runtime error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
