"""Command-line front end: ``natmed simulate | estimate | truth``.

Exit codes: 0 success, 2 configuration error, 3 more than 10% of replications
failed, 4 the data cannot support estimation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, parse_config, preset_names, scenario_preset, validate
from .data import DataError, InestimableError, Schema, load_csv, validate_case_cohort
from .estimators import ESTIMATORS, UnsupportedInputError, effect_report, mediator_support
from .nuisance import Known, NuisanceError, NuisanceFitter
from .simulate import METRIC_COLUMNS, run_replications, summarize, truth_dgp1, truth_dgp2

log = logging.getLogger("natmed")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_INESTIMABLE = 0, 2, 3, 4
FAILURE_LIMIT = 0.10
# two reported decimals: a Monte-Carlo SE above this makes the last digit unreliable
REPORT_PRECISION = 0.005
ESTIMATE_STRATEGY = "uniform:glm_all_interactions"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_table(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_cell(row[h]) if isinstance(row, dict) else _cell(x) for h, x in
                         (zip(header, header) if isinstance(row, dict) else zip(header, row))])


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, config_text: str, wall: float, files, **extra) -> Path:
    man = {
        "software": "natmed",
        "version": __version__,
        "config": config_text,
        "wall_time_seconds": round(wall, 3),
        "digests": {f.name: sha256(f) for f in files},
    }
    man.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------

def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    upd = {}
    env_seed = os.environ.get("NATMED_SEED")
    if env_seed:
        try:
            upd["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"NATMED_SEED must be an integer, got {env_seed!r}", source="environment") from None
    for key, attr in (("seed", "seed"), ("reps", "reps"), ("n", "n"), ("alpha", "alpha"), ("threads", "threads"),
                      ("out", "out"), ("ci_level", "ci_level"), ("p_min", "p_min"), ("strategy", "strategy_name")):
        v = getattr(args, key, None)
        if v is not None:
            upd[attr] = v
    if getattr(args, "estimator", None):
        upd["estimators"] = tuple(args.estimator)
    if getattr(args, "full_scale", False):
        upd["reps"] = 1000
    cfg = replace(cfg, **upd)
    problems = validate(cfg)
    if problems:
        key, msg = problems[0]
        raise ConfigError(f"{key}: {msg}", source="command line")
    return cfg


def _base_config(args) -> tuple[ScenarioConfig, str]:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("config file not found", source=str(path))
        cfg = parse_config(path.read_text(), source=str(path))
    else:
        cfg = ScenarioConfig()
    if getattr(args, "preset", None):
        try:
            cfg = replace(cfg, **scenario_preset(args.preset))
        except KeyError:
            raise ConfigError(f"unknown preset {args.preset!r}; known: {', '.join(preset_names())}",
                              source="command line") from None
    cfg = _apply_overrides(cfg, args)
    return cfg, cfg.to_ini()


def format_metrics(rows) -> str:
    head = f"{'setting':<14}{'n':>7} {'estimator':<14}{'parameter':<15}{'bias':>9}{'SE':>9}{'Cov.':>7}{'Ratio':>7}"
    lines = [head]
    for r in rows:
        if r["parameter"] == "psi10" and r["dgp"] == "discrete":
            b, s = r["sqrt_n_bias"], r["sqrt_n_se"]
        else:
            b, s = r["bias"], r["sqrt_n_se"] and r["sqrt_n_se"] / np.sqrt(r["n"])
        f = lambda v, p=2: "" if v is None else f"{v:.{p}f}"  # noqa: E731
        lines.append(f"{r['setting']:<14}{r['n']:>7} {r['estimator']:<14}{r['parameter']:<15}"
                     f"{f(b, 3):>9}{f(s, 3):>9}{f(r['coverage']):>7}{f(r['ratio']):>7}")
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    cfg, text = _base_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("simulate: dgp=%s setting=%s n=%d reps=%d seed=%d", cfg.dgp, cfg.setting, cfg.n, cfg.reps,
             cfg.seed)
    res = run_replications(cfg)
    rows = summarize(res, cfg)
    metrics = out / "metrics.csv"
    write_table(metrics, METRIC_COLUMNS, rows)
    reps_csv = out / "replications.csv"
    write_table(reps_csv, ("rep", "estimator", "parameter", "estimate", "lower", "upper", "se", "negative"),
                res.records)
    (out / "metrics.txt").write_text(format_metrics(rows) + "\n")
    print(format_metrics(rows))
    nfail = len(res.failures)
    write_manifest(out, text, res.wall_time, [metrics, reps_csv], failures=nfail, reps=cfg.reps,
                   failure_messages=[f"rep {r}: {m}" for r, m in res.failures[:20]])
    if nfail > FAILURE_LIMIT * cfg.reps:
        print(f"error: {nfail} of {cfg.reps} replications failed", file=sys.stderr)
        return EXIT_PARTIAL
    if nfail:
        log.warning("%d of %d replications failed and were excluded", nfail, cfg.reps)
    return EXIT_OK


def _read_design_table(path: Path, d, names) -> np.ndarray:
    """Join a (key columns..., probability) CSV against the data rows."""
    with path.open(newline="") as fh:
        rd = csv.reader(fh)
        header = [h.strip() for h in next(rd)]
        rows = [r for r in rd if r and any(x.strip() for x in r)]
    if len(header) < 2:
        raise ConfigError("design table needs key columns and a probability column", source=str(path))
    keys, prob_col = header[:-1], header[-1]
    cols = {}
    for k in keys:
        if k not in names:
            raise ConfigError(f"design table column {k!r} is not a data column", source=str(path))
        cols[k] = names[k]
    table = {}
    for i, r in enumerate(rows, start=2):
        try:
            key = tuple(float(x) for x in r[:-1])
            table[key] = float(r[-1])
        except ValueError:
            raise ConfigError(f"unparseable design row {r}", line=i, source=str(path)) from None
    data_keys = np.column_stack([cols[k] for k in keys])
    gr = np.empty(d.n)
    for i, key in enumerate(map(tuple, data_keys.tolist())):
        if key not in table:
            raise ConfigError(f"no design probability for data row {i} (key {key})", source=str(path))
        gr[i] = table[key]
    # a case-cohort table keyed without the outcome leaves cases at probability one
    cases = (d.c == 1) & (d.cy == 1)
    if prob_col and "Y" not in keys and validate_case_cohort(d).all_cases_sampled:
        gr[cases] = 1.0
    return gr


def cmd_estimate(args) -> int:
    cfg, text = _base_config(args)
    if not cfg.strategy_name:
        cfg = replace(cfg, strategy_name=ESTIMATE_STRATEGY)
    schema_map = dict(cfg.schema)
    try:
        schema = Schema.from_mapping(schema_map) if schema_map else None
        d = load_csv(args.data, schema)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    names = {name: d.w[:, j] for j, name in enumerate(d.covariate_names)}
    sch = schema or Schema(w=d.covariate_names)
    names.update({sch.a: d.a, sch.c: d.c, sch.y: d.cy})
    if args.design_gr:
        d = d.with_design_gr(_read_design_table(Path(args.design_gr), d, names))
    strategy = cfg.strategy()
    if d.design_gr is not None and not args.learn_gr:
        strategy = strategy.with_entries(gR=Known("design"))
    if "density_ratio" in cfg.estimators:
        try:
            mediator_support(d)
        except UnsupportedInputError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        d.check_estimable((0, 1))
    except InestimableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INESTIMABLE
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    fitter = NuisanceFitter(d, strategy)
    reports = []
    try:
        for name in cfg.estimators:
            reports.append(effect_report(d, strategy, name, cfg.ci_level, fitter))
    except NuisanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if "design probabilities" in str(exc) else EXIT_INESTIMABLE
    rows = [r.to_row() for r in reports]
    header = list(rows[0])
    csv_path = out / "effect_report.csv"
    write_table(csv_path, header, rows)
    txt = "\n\n".join(r.to_text() for r in reports)
    txt_path = out / "effect_report.txt"
    txt_path.write_text(txt + "\n")
    print(txt)
    flags = sorted(set().union(*(r.flags for r in reports)))
    if flags:
        print(f"WARNING: flags raised: {', '.join(flags)}", file=sys.stderr)
    write_manifest(out, text, time.perf_counter() - t0, [csv_path, txt_path], failures=0, data=str(args.data),
                   flags=flags)
    return EXIT_OK


def cmd_truth(args) -> int:
    if args.dgp not in ("discrete", "covid"):
        raise ConfigError(f"unknown dgp {args.dgp!r}", source="command line")
    if args.draws is not None and args.draws < 1:
        raise ConfigError("draws must be positive", source="command line")
    t0 = time.perf_counter()
    if args.dgp == "discrete":
        tr = truth_dgp1()
    else:
        alpha = -3.1 if args.alpha is None else args.alpha
        tr = truth_dgp2(alpha, args.draws or 1_000_000)
        worst = max(tr.contrast_se.values())
        if worst > REPORT_PRECISION:
            log.warning("Monte-Carlo SE %.4f exceeds reporting precision %.3f; increase --draws", worst,
                        REPORT_PRECISION)
    rows = tr.to_rows()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "truth.csv"
    write_table(path, ("quantity", "value", "se"), rows)
    for q, v, se in rows:
        print(f"{q:<24}{v:>14.6f}   (se {se:.2g})")
    text = f"dgp={args.dgp}\nalpha={args.alpha}\ndraws={args.draws}\nmethod={tr.method}\n"
    write_manifest(out, text, time.perf_counter() - t0, [path], failures=0, method=tr.method)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="natmed", description="One-step estimation of natural mediation effects "
                                                          "under case-cohort sampling.")
    p.add_argument("--version", action="version", version=f"natmed {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--ci-level", dest="ci_level", type=float)
        sp.add_argument("--p-min", dest="p_min", type=float)
        sp.add_argument("--estimator", action="append", choices=ESTIMATORS)
        sp.add_argument("--strategy")

    s = sub.add_parser("simulate", help="run a simulation scenario")
    common(s)
    s.add_argument("--preset", help="named scenario, e.g. table1-all-n2000 or table3-glm-inter-a-3.1")
    s.add_argument("--reps", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--full-scale", action="store_true", help="use 1000 replications")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate effects from a trial CSV")
    common(e)
    e.add_argument("data", metavar="DATA_CSV")
    e.add_argument("--design-gr", metavar="PATH", help="CSV of stratum key columns and sampling probability")
    e.add_argument("--learn-gr", action="store_true", help="estimate gR even when design probabilities are given")
    e.set_defaults(func=cmd_estimate)

    t = sub.add_parser("truth", help="compute oracle truths")
    t.add_argument("--dgp", required=True)
    t.add_argument("--alpha", type=float)
    t.add_argument("--draws", type=int)
    t.add_argument("--out", default="truth", metavar="DIR")
    t.set_defaults(func=cmd_truth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InestimableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INESTIMABLE


if __name__ == "__main__":
    sys.exit(main())
