"""Command-line interface: ``coupledbo run | report | benchmark``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluator import (
    FIDELITIES, BuiltinEvaluator, LatencyModel, SubprocessEvaluator, UnknownBenchmarkError,
    get_benchmark,
)
from .objective import Constraint, FomResult, FomSpec, ObjectiveError, Term
from .orchestrator import (
    Observation, RunAborted, RunConfig, RunError, RunResult, run_coupled, run_fusion_baseline,
    run_plain_baseline,
)
from .space import ParameterSpec, SpaceError, validate_space

log = logging.getLogger("coupledbo")

METHODS = ("coupled", "plain", "fusion")
SPEED_ENV = "CBO_SPEED_FACTOR"

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3

TOP_KEYS = {"space", "fom", "evaluator", "run"}
SPACE_KEYS = {"name", "kind", "lo", "hi", "step", "units"}
TERM_KEYS = {"metric", "coef", "transform"}
CONSTRAINT_KEYS = {"metric", "lo", "hi", "weight"}
EVALUATOR_KEYS = {"builtin", "command", "timeout_pre_s", "timeout_post_s",
                  "max_concurrent", "latency"}
RUN_KEYS = {"n_pre", "interval", "n_init", "seed", "gamma_alpha", "gamma_beta",
            "n_candidates", "n_post", "method", "n_train"}

# per-suite settings: (benchmark, n_pre, two coupled intervals)
SUITES = {
    "bowl": ("two_fidelity_bowl", 120, (4, 2)),
    "ota": ("synthetic_ota", 160, (10, 5)),
    "ldo": ("synthetic_ldo", 120, (4, 2)),
}


class ConfigError(ValueError):
    pass


class HistoryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# problem config
# ---------------------------------------------------------------------------

def _check_keys(obj, allowed: set, where: str, required=()) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ConfigError(f"{where}: missing key(s) {missing}")


def _parse_space(items):
    if not isinstance(items, list):
        raise ConfigError("space: expected a list of parameters")
    specs = []
    for i, item in enumerate(items):
        where = f"space[{i}]"
        _check_keys(item, SPACE_KEYS, where, ("name", "kind", "lo", "hi"))
        kind = item["kind"]
        if kind == "quantized" and "step" not in item:
            raise ConfigError(f"{where}: quantized parameter needs 'step'")
        step = item.get("step") if kind == "quantized" else (1 if kind == "integer" else None)
        specs.append(ParameterSpec(item["name"], kind, item["lo"], item["hi"], step,
                                   item.get("units", "")))
    try:
        return validate_space(specs)
    except SpaceError as exc:
        raise ConfigError(f"space: {exc}") from None


def _parse_fom(obj):
    _check_keys(obj, {"terms", "constraints"}, "fom", ("terms",))
    try:
        terms = []
        for i, t in enumerate(obj["terms"]):
            _check_keys(t, TERM_KEYS, f"fom.terms[{i}]", ("metric", "coef"))
            terms.append(Term(t["metric"], float(t["coef"]), t.get("transform", "identity")))
        constraints = []
        for i, c in enumerate(obj.get("constraints", [])):
            _check_keys(c, CONSTRAINT_KEYS, f"fom.constraints[{i}]", ("metric", "lo", "hi"))
            constraints.append(Constraint(c["metric"], float(c["lo"]), float(c["hi"]),
                                          float(c.get("weight", 1.0))))
        return FomSpec(tuple(terms), tuple(constraints))
    except ObjectiveError as exc:
        raise ConfigError(f"fom: {exc}") from None


def speed_factor() -> float:
    raw = os.environ.get(SPEED_ENV, "0")
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{SPEED_ENV} must be a number, got {raw!r}") from None


def _parse_evaluator(obj):
    _check_keys(obj, EVALUATOR_KEYS, "evaluator")
    if ("builtin" in obj) == ("command" in obj):
        raise ConfigError("evaluator: give exactly one of 'builtin' or 'command'")
    timeouts = {}
    if "timeout_pre_s" in obj:
        timeouts["pre"] = float(obj["timeout_pre_s"])
    if "timeout_post_s" in obj:
        timeouts["post"] = float(obj["timeout_post_s"])
    if "command" in obj:
        cmd = obj["command"]
        if isinstance(cmd, str):
            cmd = [cmd]
        return SubprocessEvaluator(cmd, timeouts=timeouts,
                                   max_concurrent=int(obj.get("max_concurrent", 2))), None
    try:
        bench = get_benchmark(obj["builtin"])
    except UnknownBenchmarkError as exc:
        raise ConfigError(f"evaluator.builtin: {exc.args[0]}") from None
    latency = None
    if "latency" in obj:
        lat = obj["latency"]
        _check_keys(lat, set(FIDELITIES), "evaluator.latency")
        latency = LatencyModel(**{k: tuple(v) for k, v in lat.items()})
    ev = BuiltinEvaluator(bench.name, speed_factor=speed_factor(), latency=latency,
                          timeouts=timeouts)
    return ev, bench


def parse_problem(obj: dict, overrides: dict | None = None) -> tuple[RunConfig, dict]:
    """Problem-config object -> (RunConfig, resolved run section)."""
    _check_keys(obj, TOP_KEYS, "config", ("evaluator", "run"))
    run = dict(obj["run"])
    _check_keys(run, RUN_KEYS, "run", ("n_pre",))
    for k, v in (overrides or {}).items():
        if v is not None:
            run[k] = v
    space = _parse_space(obj["space"]) if "space" in obj else None
    evaluator, bench = _parse_evaluator(obj["evaluator"])
    if bench is not None:
        if space is None:
            space = bench.space
        elif space.names != bench.space.names:
            raise ConfigError(
                f"space: parameters {space.names} do not match builtin "
                f"{bench.name} parameters {bench.space.names}")
    if space is None:
        raise ConfigError("config: 'space' is required for external evaluators")
    if "fom" in obj:
        fom = _parse_fom(obj["fom"])
    elif bench is not None:
        fom = bench.fom_spec
    else:
        raise ConfigError("config: 'fom' is required for external evaluators")

    kwargs = {k: run[k] for k in ("n_pre", "interval", "n_init", "seed", "gamma_alpha",
                                  "gamma_beta", "n_candidates", "n_post") if k in run}
    kwargs.setdefault("n_init", min(10, int(run["n_pre"])))
    try:
        cfg = RunConfig(space, fom, evaluator, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run: {exc}") from None
    run.setdefault("method", "coupled")
    if run["method"] not in METHODS:
        raise ConfigError(f"run.method: expected one of {METHODS}")
    return cfg, run


def load_problem(path, overrides: dict | None = None) -> tuple[RunConfig, dict]:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return parse_problem(obj, overrides)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# history records
# ---------------------------------------------------------------------------

def observation_record(obs, space) -> dict:
    fom = obs.fom
    return {
        "iter": obs.index,
        "fidelity": obs.fidelity,
        "config": space.as_dict(obs.config),
        "metrics": obs.metrics,
        "fom": fom.raw_fom if fom else None,
        "violation": fom.violation if fom else None,
        "effective": fom.effective if fom else None,
        "status": obs.status,
        "duration_ms": obs.duration_ms,
    }


def history_records(result: RunResult, space) -> list[dict]:
    return [observation_record(o, space) for o in result.history]


def write_history(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


RECORD_KEYS = {"iter", "fidelity", "config", "metrics", "fom", "violation", "effective",
               "status", "duration_ms"}


def read_history(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise HistoryError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or set(rec) != RECORD_KEYS:
                raise HistoryError(f"{path}:{lineno}: expected keys {sorted(RECORD_KEYS)}")
            if rec["fidelity"] not in FIDELITIES:
                raise HistoryError(f"{path}:{lineno}: bad fidelity {rec['fidelity']!r}")
            eff = rec["effective"]
            if rec["status"] == "ok" and not isinstance(eff, (int, float)):
                raise HistoryError(f"{path}:{lineno}: ok record without numeric 'effective'")
            records.append(rec)
    return records


def observation_from_record(rec: dict, space) -> Observation:
    """Inverse of :func:`observation_record` (the FOM breakdown is not stored)."""
    fom = None
    if rec["effective"] is not None:
        fom = FomResult(rec["fom"], rec["violation"], rec["effective"])
    return Observation(rec["iter"], rec["fidelity"], space.from_dict(rec["config"]),
                       rec["metrics"], fom, rec["duration_ms"], rec["status"])


def best_so_far_rows(records) -> list[tuple]:
    best = {"pre": None, "post": None}
    rows = []
    for rec in records:
        f = rec["fidelity"]
        if rec["status"] == "ok":
            e = rec["effective"]
            best[f] = e if best[f] is None else max(best[f], e)
        rows.append((rec["iter"], f, best["pre"], best["post"]))
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def execute(cfg: RunConfig, method: str, n_train: int | None = None) -> RunResult:
    if method == "coupled":
        return run_coupled(cfg)
    if method == "plain":
        return run_plain_baseline(cfg)
    return run_fusion_baseline(cfg, n_train if n_train is not None else cfg.expensive_budget)


def cmd_run(config_path, *, method=None, seed=None, n_pre=None, interval=None,
            out_dir="out", n_train=None) -> int:
    overrides = {"seed": seed, "n_pre": n_pre, "interval": interval, "method": method,
                 "n_train": n_train}
    cfg, run = load_problem(config_path, overrides)
    method = run["method"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    aborted = None
    try:
        result = execute(cfg, method, run.get("n_train"))
    except RunAborted as exc:
        result, aborted = exc.result, str(exc)
    wall = time.perf_counter() - start
    write_history(history_records(result, cfg.space), out / "history.jsonl")
    inc = result.incumbent
    summary = {
        "method": method,
        "config_path": str(config_path),
        "run": run,
        "incumbent": None if inc is None else {
            "config": cfg.space.as_dict(inc.config),
            "effective": inc.effective,
            "iter": inc.index,
        },
        "budgets": {
            "n_pre": cfg.n_pre,
            "interval": cfg.interval,
            "planned_post": cfg.expensive_budget,
            "pre_evaluations": result.count("pre"),
            "post_evaluations": result.count("post"),
            "post_failed": result.count("post") - result.count("post", "ok"),
        },
        "aborted": aborted,
        "wall_time_s": round(wall, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if aborted:
        log.error("run aborted: %s", aborted)
        return EXIT_ABORT
    log.info("incumbent %s", summary["incumbent"])
    return EXIT_OK


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_report(history_path, out_csv=None) -> int:
    rows = best_so_far_rows(read_history(history_path))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "fidelity", "best_pre_so_far", "best_post_so_far"])
    for it, f, bp, bq in rows:
        w.writerow([it, f, _fmt(bp), _fmt(bq)])
    _emit(buf.getvalue(), out_csv)
    return EXIT_OK


def _emit(text, out_path):
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def benchmark_rows(suite: str, seeds: int) -> list[dict]:
    names = list(SUITES) if suite == "all" else [suite]
    rows = []
    for key in names:
        bench_name, n_pre, intervals = SUITES[key]
        bench = get_benchmark(bench_name)
        evaluator = BuiltinEvaluator(bench_name, speed_factor=speed_factor())
        base = RunConfig(bench.space, bench.fom_spec, evaluator, n_pre=n_pre, n_init=10)
        variants = [("coupled", k, None) for k in intervals]
        variants.append(("plain", None, None))
        variants += [("fusion", k, n_pre // k) for k in intervals]
        for method, interval, n_train in variants:
            finals, pre_counts, post_counts = [], [], []
            for s in range(seeds):
                cfg = replace(base, seed=s, interval=interval or 1)
                try:
                    res = execute(cfg, method, n_train)
                except RunAborted as exc:
                    res = exc.result
                finals.append(res.incumbent.effective if res.incumbent else math.nan)
                pre_counts.append(res.count("pre"))
                post_counts.append(res.count("post"))
            q25, med, q75 = np.nanpercentile(finals, [25, 50, 75])
            rows.append({
                "benchmark": bench_name,
                "method": method,
                "interval": interval if interval is not None else "",
                "n_train": n_train if n_train is not None else "",
                "pre_sims": int(np.median(pre_counts)),
                "post_sims": int(np.median(post_counts)),
                "seeds": seeds,
                "median_fom": float(med),
                "q25": float(q25),
                "q75": float(q75),
                "iqr": float(q75 - q25),
            })
    return rows


BENCH_COLUMNS = ["benchmark", "method", "interval", "n_train", "pre_sims", "post_sims",
                 "seeds", "median_fom", "q25", "q75", "iqr"]


def cmd_benchmark(suite, seeds=5, out_csv=None) -> int:
    if suite != "all" and suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {sorted(SUITES) + ['all']}")
    if seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in benchmark_rows(suite, seeds):
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    _emit(buf.getvalue(), out_csv)
    return EXIT_OK


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coupledbo",
                                description="Coupled cheap/expensive Bayesian optimization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an optimization from a problem config")
    r.add_argument("config")
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--interval", type=_positive_int)
    r.add_argument("--n-pre", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--n-train", type=_positive_int, help="fusion baseline training size")
    r.add_argument("--out", default="out")

    rep = sub.add_parser("report", help="best-so-far CSV from a history file")
    rep.add_argument("history")
    rep.add_argument("--out")

    b = sub.add_parser("benchmark", help="compare methods on builtin benchmarks")
    b.add_argument("suite", choices=sorted(SUITES) + ["all"])
    b.add_argument("--seeds", type=_positive_int, default=5)
    b.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, method=args.method, seed=args.seed, n_pre=args.n_pre,
                           interval=args.interval, out_dir=args.out, n_train=args.n_train)
        if args.command == "report":
            return cmd_report(args.history, args.out)
        return cmd_benchmark(args.suite, args.seeds, args.out)
    except (ConfigError, HistoryError, OSError) as exc:
        print(f"coupledbo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunError as exc:
        print(f"coupledbo: run failed: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
