import json
import math
import sys
import time

import numpy as np
import pytest

from coupledbo.evaluator import (
    BENCHMARKS, EVAL_ERROR, OK, TIMEOUT, BuiltinEvaluator, EvalRequest, EvalResponse,
    LatencyModel, ProtocolError, SubprocessEvaluator, UnknownBenchmarkError, evaluate_builtin,
    evaluate_subprocess, get_benchmark,
)
from coupledbo.objective import effective_fom
from coupledbo.space import sample_uniform

PY = sys.executable


def child(code: str) -> list:
    return [PY, "-c", code]


ECHO = child(
    "import json,sys; r=json.loads(sys.stdin.readline());"
    "print(json.dumps({'id': r['id'], 'metrics': {'gain_db': 21.3, 'ugb_hz': 8.1e6}}))"
)


def test_bowl_optimum_post():
    x = {"x1": 0.5, "x2": 0.5, "x3": 0.5, "x4": 0.5, "n1": 3, "n2": 5}
    assert evaluate_builtin("two_fidelity_bowl", x, "post") == {"score": 10.0}


def test_bowl_optimum_pre():
    x = (0.5, 0.5, 0.5, 0.5, 3, 5)
    expected = 10 + 1.5 + 0.3 * 0.5 + 0.5 * math.sin(1.5)
    assert evaluate_builtin("bowl", x, "pre")["score"] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(12.1487, abs=1e-4)


def test_ota_formulas_at_a_point():
    w = (1.0, 2.0, 3.0, 1.5, 2.5)
    nf = (4, 3, 2, 2, 2)
    cfg = {**{f"w{i+1}": w[i] for i in range(5)}, **{f"nf{i+1}": nf[i] for i in range(5)}}
    s = [a * b for a, b in zip(w, nf)]
    gain = 26 - 0.5 * sum((math.log(a) - math.log(t)) ** 2 for a, t in zip(s, (4, 6, 8, 3, 5)))
    ugb = 1.2e7 * s[0] / (s[0] + 0.4 * sum(s[1:]))
    pm = 62 + 8 * math.tanh((s[3] - s[4]) / 4)
    c = 0.02 * sum(s)
    pre = evaluate_builtin("synthetic_ota", cfg, "pre")
    post = evaluate_builtin("synthetic_ota", cfg, "post")
    assert pre == pytest.approx({"gain_db": gain, "ugb_hz": ugb, "pm_deg": pm}, rel=1e-12)
    assert post["gain_db"] == pytest.approx(gain - 1.2 * c - 0.4 * math.sin(7.0) * math.cos(10.0), rel=1e-12)
    assert post["ugb_hz"] == pytest.approx(ugb / (1 + 0.15 * c), rel=1e-12)
    assert post["pm_deg"] == pytest.approx(pm - 6 * c / (1 + c) + 2 * math.sin(27.0), rel=1e-12)


def test_ldo_formulas_at_a_point():
    cfg = {"w1": 2.0, "w2": 1.0, "w3": 3.0, "w4": 4.0, "w5": 5.0, "w6": 2.0, "w7": 6.0, "w8": 3.0,
           "nf1": 10, "nf2": 9, "nf3": 4, "nf4": 8}
    prods = [20.0, 9.0, 12.0, 32.0]
    gain = 75 - 0.4 * sum((math.log(p) - t) ** 2 for p, t in zip(prods, (3.0, 2.2, 2.6, 3.4)))
    vou = 0.3 + 1.2 / (1 + 0.1 * 10.0)
    pm = 72 + 6 * math.tanh(3.0 / 5)
    c = 0.01 * (sum(prods) + 16.0)
    pre = evaluate_builtin("synthetic_ldo", cfg, "pre")
    post = evaluate_builtin("synthetic_ldo", cfg, "post")
    assert pre == pytest.approx({"gain_db": gain, "vou_v": vou, "pm_deg": pm}, rel=1e-12)
    assert post["gain_db"] == pytest.approx(gain - 0.8 * c, rel=1e-12)
    assert post["vou_v"] == pytest.approx(vou * (1 + 0.3 * c / (1 + c)) + 0.05 * math.sin(30.0), rel=1e-12)
    assert post["pm_deg"] == pytest.approx(pm - 8 * c / (1 + c), rel=1e-12)


def test_ota_post_gain_below_pre():
    bench = get_benchmark("synthetic_ota")
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = sample_uniform(bench.space, rng)
        assert evaluate_builtin(bench.name, c, "post")["gain_db"] < evaluate_builtin(bench.name, c, "pre")["gain_db"]


@pytest.mark.parametrize("name", sorted(BENCHMARKS))
def test_builtins_pure_and_finite(name):
    bench = get_benchmark(name)
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = sample_uniform(bench.space, rng)
        for fid in ("pre", "post"):
            a = evaluate_builtin(name, c, fid)
            assert a == evaluate_builtin(name, c, fid)
            assert all(math.isfinite(v) for v in a.values())
            effective_fom(a, bench.fom_spec)


@pytest.mark.parametrize("name", ["synthetic_ota", "synthetic_ldo"])
def test_fidelity_gap_and_ripple(name):
    bench = get_benchmark(name)
    rng = np.random.default_rng(2)
    m = bench.primary_metric
    gaps = []
    for _ in range(1000):
        c = sample_uniform(bench.space, rng)
        gaps.append(evaluate_builtin(name, c, "pre")[m] - evaluate_builtin(name, c, "post")[m])
    assert np.mean(gaps) > 0

    # total variation of the FOM along axis-aligned sweeps of each continuous axis
    base = bench.space.as_dict(sample_uniform(bench.space, rng))
    tv = {"pre": 0.0, "post": 0.0}
    for spec in bench.space.specs:
        if spec.is_grid:
            continue
        for fid in tv:
            vals = [effective_fom(evaluate_builtin(name, {**base, spec.name: v}, fid),
                                  bench.fom_spec).effective
                    for v in np.linspace(spec.lo, spec.hi, 100)]
            tv[fid] += np.abs(np.diff(vals)).sum()
    assert tv["post"] > tv["pre"]


def test_unknown_benchmark():
    with pytest.raises(UnknownBenchmarkError):
        evaluate_builtin("nope", {}, "pre")


def test_request_validation_and_round_trip():
    req = EvalRequest(7, "post", {"w1": 2.5, "nf1": 4})
    assert json.loads(req.to_line()) == {"id": 7, "fidelity": "post", "config": {"w1": 2.5, "nf1": 4}}
    assert EvalRequest.from_line(req.to_line()) == req
    with pytest.raises(ValueError):
        EvalRequest(1, "layout", {})


def test_response_parsing():
    resp = EvalResponse.from_line('{"id":7,"metrics":{"gain_db":21.3,"ugb_hz":8.1e6,"pm_deg":61.0}}', 7)
    assert resp.metrics == {"gain_db": 21.3, "ugb_hz": 8.1e6, "pm_deg": 61.0}
    with pytest.raises(ProtocolError) as err:
        EvalResponse.from_line('{"id":8,"metrics":{}}', 7)
    assert err.value.field == "id"
    with pytest.raises(ProtocolError) as err:
        EvalResponse.from_line('{"id":7,"metrics":{"pm_deg":"sixty"}}', 7)
    assert err.value.field == "pm_deg"
    with pytest.raises(ProtocolError) as err:
        EvalResponse.from_line('{"id":7,"metrics":{"pm_deg":NaN}}', 7)
    assert err.value.field == "pm_deg"


def test_subprocess_loopback():
    out = evaluate_subprocess(ECHO, EvalRequest(3, "pre", {"w1": 1.0}), 30)
    assert out.status == OK
    assert out.metrics == {"gain_db": 21.3, "ugb_hz": 8.1e6}


def test_subprocess_timeout_kills_child():
    out = evaluate_subprocess(child("import time; time.sleep(30)"), EvalRequest(1, "post", {}), 0.5)
    assert out.status == TIMEOUT
    assert out.duration_ms < 10_000


def test_subprocess_non_numeric_metric():
    bad = child("import json,sys; r=json.loads(sys.stdin.readline());"
                "print(json.dumps({'id': r['id'], 'metrics': {'gain_db': 'high'}}))")
    out = evaluate_subprocess(bad, EvalRequest(2, "pre", {}), 30)
    assert out.status == EVAL_ERROR
    assert "gain_db" in out.diagnostic


def test_subprocess_crash_isolated():
    out = evaluate_subprocess(child("import sys; sys.stderr.write('boom'); sys.exit(3)"),
                              EvalRequest(2, "pre", {}), 30)
    assert out.status == EVAL_ERROR
    assert "boom" in out.diagnostic
    missing = evaluate_subprocess(["/nonexistent/simulator"], EvalRequest(2, "pre", {}), 30)
    assert missing.status == EVAL_ERROR


def test_subprocess_evaluator_uses_fidelity_timeout():
    ev = SubprocessEvaluator(child("import time; time.sleep(30)"), timeouts={"pre": 0.3})
    start = time.perf_counter()
    assert ev.evaluate(EvalRequest(1, "pre", {})).status == TIMEOUT
    assert time.perf_counter() - start < 10


def test_builtin_evaluator_latency_and_timeout():
    ev = BuiltinEvaluator("bowl", speed_factor=1e-4, latency=LatencyModel(pre=(25, 5), post=(300, 0)))
    cfg = {"x1": 0, "x2": 0, "x3": 0, "x4": 0, "n1": 1, "n2": 1}
    pre = ev.evaluate(EvalRequest(2, "pre", cfg))
    assert pre.status == OK
    assert 20 * 1e-4 * 1000 <= pre.duration_ms <= 30 * 1e-4 * 1000
    assert pre.duration_ms == ev.evaluate(EvalRequest(2, "pre", cfg)).duration_ms
    post = ev.evaluate(EvalRequest(3, "post", cfg))
    assert post.status == TIMEOUT


def test_builtin_evaluator_forced_timeouts():
    ev = BuiltinEvaluator("bowl", force_timeout=lambda fid, n: fid == "post" and n % 2 == 0)
    cfg = {"x1": 0, "x2": 0, "x3": 0, "x4": 0, "n1": 1, "n2": 1}
    statuses = [ev.evaluate(EvalRequest(i, "post", cfg)).status for i in range(4)]
    assert statuses == [OK, TIMEOUT, OK, TIMEOUT]
    assert ev.evaluate(EvalRequest(9, "pre", cfg)).status == OK
