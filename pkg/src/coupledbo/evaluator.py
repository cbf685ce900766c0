"""Two-fidelity black-box evaluators.

Builtin benchmarks are closed-form stand-ins for pre-layout ("pre") and
post-layout ("post") simulation: the post surface is pessimistic relative
to pre and carries extra ripple. External simulators are driven through a
one-request-per-process line protocol::

    -> {"id": 7, "fidelity": "post", "config": {"w1": 2.5, "nf1": 4}}
    <- {"id": 7, "metrics": {"gain_db": 21.3, "ugb_hz": 8.1e6, "pm_deg": 61.0}}
"""

from __future__ import annotations

import json
import math
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .objective import Constraint, FomSpec, Term
from .space import ParameterSpace, ParameterSpec, validate_space

FIDELITIES = ("pre", "post")
DEFAULT_TIMEOUTS = {"pre": 60.0, "post": 240.0}

OK, TIMEOUT, EVAL_ERROR = "ok", "timeout", "eval_error"


class UnknownBenchmarkError(KeyError):
    pass


class ProtocolError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class EvalRequest:
    id: int
    fidelity: str
    config: dict

    def __post_init__(self):
        if self.fidelity not in FIDELITIES:
            raise ValueError(f"fidelity must be one of {FIDELITIES}, got {self.fidelity!r}")

    def to_line(self) -> str:
        return json.dumps({"id": self.id, "fidelity": self.fidelity, "config": self.config}) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "EvalRequest":
        obj = json.loads(line)
        return cls(int(obj["id"]), obj["fidelity"], dict(obj["config"]))


@dataclass(frozen=True)
class EvalResponse:
    id: int
    metrics: dict
    diagnostic: str = ""

    @classmethod
    def from_line(cls, line: str, expected_id: int | None = None) -> "EvalResponse":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"response is not JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ProtocolError("response must be a JSON object")
        if "id" not in obj:
            raise ProtocolError("response lacks 'id'", "id")
        if expected_id is not None and obj["id"] != expected_id:
            raise ProtocolError(f"response id {obj['id']!r} != request id {expected_id}", "id")
        raw = obj.get("metrics")
        if not isinstance(raw, dict):
            raise ProtocolError("response lacks a 'metrics' object", "metrics")
        metrics = {}
        for name, value in raw.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ProtocolError(f"metric {name!r} is not numeric: {value!r}", name)
            if not math.isfinite(value):
                raise ProtocolError(f"metric {name!r} is not finite: {value!r}", name)
            metrics[name] = float(value)
        return cls(int(obj["id"]), metrics, str(obj.get("diagnostic", "")))

    def to_line(self) -> str:
        obj = {"id": self.id, "metrics": self.metrics}
        if self.diagnostic:
            obj["diagnostic"] = self.diagnostic
        return json.dumps(obj) + "\n"


@dataclass(frozen=True)
class EvalOutcome:
    status: str
    metrics: dict | None = None
    duration_ms: float = 0.0
    diagnostic: str = ""


# ---------------------------------------------------------------------------
# builtin benchmarks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkDef:
    name: str
    space: ParameterSpace
    fom_spec: FomSpec
    pre: Callable[[Mapping[str, float]], dict]
    post: Callable[[Mapping[str, float]], dict]
    optimum_value: float | None = None
    optimum_location: tuple | None = None
    primary_metric: str = "score"


def _bowl_post(p):
    xs = [p["x1"], p["x2"], p["x3"], p["x4"]]
    score = 10.0 - sum((x - 0.5) ** 2 for x in xs) \
        - 0.2 * ((p["n1"] - 3) ** 2 + (p["n2"] - 5) ** 2)
    return {"score": score}


def _bowl_pre(p):
    score = _bowl_post(p)["score"] + 1.5 + 0.3 * p["x1"] + 0.5 * math.sin(3.0 * p["x2"])
    return {"score": score}


OTA_TARGET = (4.0, 6.0, 8.0, 3.0, 5.0)


def _ota_sizes(p):
    return [p[f"w{i}"] * p[f"nf{i}"] for i in range(1, 6)]


def _ota_pre(p):
    s = _ota_sizes(p)
    gain = 26.0 - 0.5 * sum((math.log(si) - math.log(ti)) ** 2 for si, ti in zip(s, OTA_TARGET))
    ugb = 1.2e7 * s[0] / (s[0] + 0.4 * (s[1] + s[2] + s[3] + s[4]))
    pm = 62.0 + 8.0 * math.tanh((s[3] - s[4]) / 4.0)
    return {"gain_db": gain, "ugb_hz": ugb, "pm_deg": pm}


def _ota_post(p):
    pre = _ota_pre(p)
    c = 0.02 * sum(_ota_sizes(p))
    return {
        "gain_db": pre["gain_db"] - 1.2 * c - 0.4 * math.sin(7.0 * p["w1"]) * math.cos(5.0 * p["w2"]),
        "ugb_hz": pre["ugb_hz"] / (1.0 + 0.15 * c),
        "pm_deg": pre["pm_deg"] - 6.0 * c / (1.0 + c) + 2.0 * math.sin(9.0 * p["w3"]),
    }


LDO_TARGET = (3.0, 2.2, 2.6, 3.4)


def _ldo_pre(p):
    gain = 75.0 - 0.4 * sum(
        (math.log(p[f"w{i}"] * p[f"nf{i}"]) - t) ** 2 for i, t in zip(range(1, 5), LDO_TARGET)
    )
    vou = 0.3 + 1.2 / (1.0 + 0.1 * p["w5"] * p["w6"])
    pm = 72.0 + 6.0 * math.tanh((p["w7"] - p["w8"]) / 5.0)
    return {"gain_db": gain, "vou_v": vou, "pm_deg": pm}


def _ldo_post(p):
    pre = _ldo_pre(p)
    c = 0.01 * (sum(p[f"w{i}"] * p[f"nf{i}"] for i in range(1, 5))
                + p["w5"] + p["w6"] + p["w7"] + p["w8"])
    return {
        "gain_db": pre["gain_db"] - 0.8 * c,
        "vou_v": pre["vou_v"] * (1.0 + 0.3 * c / (1.0 + c)) + 0.05 * math.sin(6.0 * p["w5"]),
        "pm_deg": pre["pm_deg"] - 8.0 * c / (1.0 + c),
    }


def _make_benchmarks() -> dict:
    bowl = BenchmarkDef(
        "two_fidelity_bowl",
        validate_space(
            [ParameterSpec.continuous(f"x{i}", -2.0, 2.0) for i in range(1, 5)]
            + [ParameterSpec.integer("n1", 1, 8), ParameterSpec.integer("n2", 1, 8)]
        ),
        FomSpec((Term("score", 1.0),)),
        _bowl_pre,
        _bowl_post,
        optimum_value=10.0,
        optimum_location=(0.5, 0.5, 0.5, 0.5, 3, 5),
    )
    ota = BenchmarkDef(
        "synthetic_ota",
        validate_space(
            [ParameterSpec.continuous(f"w{i}", 0.4, 8.0, "um") for i in range(1, 6)]
            + [ParameterSpec.integer(f"nf{i}", 1, 16, "fingers") for i in range(1, 6)]
        ),
        FomSpec(
            (Term("gain_db", 1.0), Term("ugb_hz", 1.0, "log10")),
            (Constraint("pm_deg", 45.0, 80.0),),
        ),
        _ota_pre,
        _ota_post,
        primary_metric="gain_db",
    )
    ldo = BenchmarkDef(
        "synthetic_ldo",
        validate_space(
            [ParameterSpec.continuous(f"w{i}", 0.4, 12.0, "um") for i in range(1, 9)]
            + [ParameterSpec.integer(f"nf{i}", 1, 32, "fingers") for i in range(1, 5)]
        ),
        FomSpec(
            (Term("gain_db", 0.1), Term("vou_v", -10.0)),
            (Constraint("pm_deg", 60.0, 90.0),),
        ),
        _ldo_pre,
        _ldo_post,
        primary_metric="gain_db",
    )
    return {b.name: b for b in (bowl, ota, ldo)}


BENCHMARKS = _make_benchmarks()
ALIASES = {"bowl": "two_fidelity_bowl", "ota": "synthetic_ota", "ldo": "synthetic_ldo"}


def get_benchmark(name: str) -> BenchmarkDef:
    try:
        return BENCHMARKS[ALIASES.get(name, name)]
    except KeyError:
        raise UnknownBenchmarkError(
            f"unknown benchmark {name!r}; known: {sorted(BENCHMARKS)}"
        ) from None


def evaluate_builtin(name: str, config, fidelity: str) -> dict:
    """Metrics of builtin benchmark `name` at `config` (dict or tuple)."""
    bench = get_benchmark(name)
    if fidelity not in FIDELITIES:
        raise ValueError(f"fidelity must be one of {FIDELITIES}")
    if not isinstance(config, Mapping):
        config = bench.space.as_dict(config)
    fn = bench.pre if fidelity == "pre" else bench.post
    return fn(config)


# ---------------------------------------------------------------------------
# evaluator objects used by the orchestrator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    """Emulated simulator wall time in seconds: mean +- uniform half-width per fidelity."""
    pre: tuple = (25.0, 5.0)
    # layout generation (70 +- 50) plus post-layout simulation (80 +- 15)
    post: tuple = (150.0, 65.0)

    def draw(self, fidelity: str, rng: np.random.Generator) -> float:
        mean, half = self.pre if fidelity == "pre" else self.post
        return max(0.0, mean + half * (2.0 * rng.random() - 1.0))


class Evaluator:
    """Base class: `evaluate` maps an EvalRequest to an EvalOutcome."""

    def evaluate(self, request: EvalRequest) -> EvalOutcome:
        raise NotImplementedError


class BuiltinEvaluator(Evaluator):
    """Evaluates a builtin benchmark with optional emulated latency and faults.

    Emulated latencies are drawn from `latency` (seeded by `latency_seed` and
    the request id), compared against the per-fidelity timeout, and slept
    for ``speed_factor * seconds`` of real time. With the default speed
    factor of 0 nothing sleeps and every duration is 0.

    `force_timeout(fidelity, call_number)` lets tests fail chosen calls;
    call numbers count from 1 per fidelity in submission order.
    """

    def __init__(self, name: str, *, speed_factor: float = 0.0,
                 latency: LatencyModel | None = None, latency_seed: int = 0,
                 timeouts: Mapping[str, float] | None = None,
                 force_timeout: Callable[[str, int], bool] | None = None):
        self.bench = get_benchmark(name)
        self.name = self.bench.name
        self.speed_factor = float(speed_factor)
        self.latency = latency or LatencyModel()
        self.latency_seed = latency_seed
        self.timeouts = {**DEFAULT_TIMEOUTS, **(timeouts or {})}
        self.force_timeout = force_timeout
        self._calls = {f: 0 for f in FIDELITIES}
        self._lock = threading.Lock()

    def evaluate(self, request: EvalRequest) -> EvalOutcome:
        with self._lock:
            self._calls[request.fidelity] += 1
            call = self._calls[request.fidelity]
        timeout = self.timeouts[request.fidelity]
        emulated = 0.0
        if self.speed_factor > 0:
            rng = np.random.default_rng([self.latency_seed, request.id])
            emulated = self.latency.draw(request.fidelity, rng)
        forced = self.force_timeout is not None and self.force_timeout(request.fidelity, call)
        if forced or emulated > timeout:
            waited = self.speed_factor * min(emulated, timeout)
            time.sleep(waited)
            return EvalOutcome(TIMEOUT, None, 1000.0 * waited,
                               f"{request.fidelity} evaluation exceeded {timeout:g}s")
        waited = self.speed_factor * emulated
        if waited:
            time.sleep(waited)
        metrics = evaluate_builtin(self.name, request.config, request.fidelity)
        return EvalOutcome(OK, metrics, 1000.0 * waited)


def evaluate_subprocess(command, request: EvalRequest, timeout_s: float) -> EvalOutcome:
    """Run `command` once for `request` under a wall-clock timeout.

    The child receives one request line on stdin and must print one
    response line on stdout. The child is killed when the timeout expires.
    """
    start = time.perf_counter()
    try:
        proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, text=True,
        )
    except OSError as exc:
        return EvalOutcome(EVAL_ERROR, None, 0.0, f"could not start {command!r}: {exc}")
    try:
        out, err = proc.communicate(request.to_line(), timeout=timeout_s)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        elapsed = 1000.0 * (time.perf_counter() - start)
        return EvalOutcome(TIMEOUT, None, elapsed, f"killed after {timeout_s:g}s")
    elapsed = 1000.0 * (time.perf_counter() - start)
    if proc.returncode != 0:
        return EvalOutcome(EVAL_ERROR, None, elapsed,
                           f"exit status {proc.returncode}: {err.strip()[-2000:]}")
    line = out.splitlines()[0] if out.strip() else ""
    if not line:
        return EvalOutcome(EVAL_ERROR, None, elapsed, f"empty response; stderr: {err.strip()[-2000:]}")
    try:
        resp = EvalResponse.from_line(line, expected_id=request.id)
    except ProtocolError as exc:
        return EvalOutcome(EVAL_ERROR, None, elapsed, str(exc))
    return EvalOutcome(OK, resp.metrics, elapsed, resp.diagnostic)


class SubprocessEvaluator(Evaluator):
    def __init__(self, command, *, timeouts: Mapping[str, float] | None = None,
                 max_concurrent: int = 2):
        self.command = list(command) if not isinstance(command, str) else [command]
        self.timeouts = {**DEFAULT_TIMEOUTS, **(timeouts or {})}
        self._slots = threading.Semaphore(max_concurrent)

    def evaluate(self, request: EvalRequest) -> EvalOutcome:
        with self._slots:
            return evaluate_subprocess(self.command, request, self.timeouts[request.fidelity])
