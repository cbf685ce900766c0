"""Coupled cheap/expensive optimization loop and its baselines.

The coupled run is split between two agents that exchange messages:

* the alpha agent (caller's thread) walks the logical iteration indices,
  proposing cheap evaluations from a TPE over the cheap history and, at
  each beta index, fitting the cheap GP and co-evaluating the beta agent's
  proposal at the cheap fidelity;
* the beta agent (worker thread) owns the expensive GP, rebuilds the
  coupled model, proposes by expected improvement and runs the slow
  expensive evaluation while the alpha agent carries on.

Every random draw comes from a generator keyed by (seed, index, stream)
and every model is fitted on a snapshot defined by logical indices, so the
proposal sequence does not depend on evaluator latencies.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tpe
from .coupling import build_coupled, estimate_rho
from .evaluator import (
    EVAL_ERROR, OK, BuiltinEvaluator, EvalOutcome, EvalRequest, Evaluator, UnknownBenchmarkError,
)
from .gp import expected_improvement, fit_gp
from .objective import FomResult, FomSpec, ObjectiveError, effective_fom
from .space import ParameterSpace, decode, encode, encode_many, sample_uniform

log = logging.getLogger(__name__)

N_PERTURB = 8
PERTURB_SIGMA = 0.05
ABORT_FRACTION = 0.5

# rng stream ids
_S_ALPHA, _S_GP_ALPHA, _S_POOL, _S_PERTURB, _S_GP_BETA, _S_FUSION = range(6)


class RunError(RuntimeError):
    pass


class RunAborted(RunError):
    """Too many expensive evaluations failed; `result` holds the partial run."""

    def __init__(self, message: str, result: "RunResult"):
        super().__init__(message)
        self.result = result


class NoIncumbentError(LookupError):
    pass


@dataclass(frozen=True)
class RunConfig:
    space: ParameterSpace
    fom_spec: FomSpec
    evaluator: Evaluator | str
    n_pre: int
    interval: int = 1
    n_init: int = 10
    seed: int = 0
    gamma_alpha: float = 0.5
    gamma_beta: float = 0.15
    n_candidates: int = tpe.DEFAULT_N_CANDIDATES
    # explicit expensive budget; defaults to floor(n_pre / interval)
    n_post: int | None = None

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.n_pre < 0 or self.n_init < 0:
            raise ValueError("n_pre and n_init must be >= 0")
        if self.n_init > self.n_pre:
            raise ValueError(f"n_init ({self.n_init}) exceeds n_pre ({self.n_pre})")
        if self.n_post is not None and self.n_post < 0:
            raise ValueError("n_post must be >= 0")
        for g in (self.gamma_alpha, self.gamma_beta):
            if not 0.0 < g < 1.0:
                raise ValueError("gammas must lie in (0, 1)")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")

    @property
    def expensive_budget(self) -> int:
        return self.n_pre // self.interval if self.n_post is None else self.n_post


@dataclass(frozen=True)
class Observation:
    index: int
    fidelity: str
    config: tuple
    metrics: dict | None
    fom: FomResult | None
    duration_ms: float
    status: str

    @property
    def ok(self) -> bool:
        return self.status == OK

    @property
    def effective(self) -> float | None:
        return self.fom.effective if self.fom is not None else None


@dataclass(frozen=True)
class Incumbent:
    config: tuple
    effective: float
    index: int


@dataclass
class RunResult:
    method: str
    history: list
    incumbent: Incumbent | None
    trace_pre: list = field(default_factory=list)
    trace_post: list = field(default_factory=list)
    rho_trace: list = field(default_factory=list)

    def count(self, fidelity: str, status: str | None = None) -> int:
        return sum(1 for o in self.history
                   if o.fidelity == fidelity and (status is None or o.status == status))

    @property
    def proposals(self) -> list:
        return [(o.index, o.fidelity, o.config) for o in self.history]


def resolve_evaluator(binding) -> Evaluator:
    if isinstance(binding, Evaluator):
        return binding
    if isinstance(binding, str):
        try:
            return BuiltinEvaluator(binding)
        except UnknownBenchmarkError as exc:
            raise RunError(f"evaluator binding not found: {exc}") from None
    raise RunError(f"evaluator binding not found: {binding!r}")


def schedule(n_pre: int, interval: int = 1, n_post: int | None = None) -> list[tuple[bool, bool]]:
    """Per logical iteration: (is_beta, co_observe).

    With only `interval`, iteration i (1-based) is a beta iteration when
    ``i % interval == 0``; every beta iteration also runs the cheap
    co-observation, so there are exactly n_pre cheap evaluations. An
    explicit `n_post` spreads that many beta iterations evenly; if it
    exceeds n_pre, all iterations are beta and only n_pre of them
    co-observe.
    """
    if n_post is None:
        return [(i % interval == 0, i % interval == 0) for i in range(1, n_pre + 1)]
    if n_post <= n_pre:
        return [(_spread(i, n_post, n_pre),) * 2 for i in range(1, n_pre + 1)]
    return [(True, _spread(i, n_pre, n_post)) for i in range(1, n_post + 1)]


def _spread(i: int, k: int, n: int) -> bool:
    """True at k of the n positions 1..n, evenly spaced, last position included."""
    return (i * k) // n > ((i - 1) * k) // n


def incumbent(history: Sequence[Observation]) -> Incumbent:
    best = None
    for o in history:
        if o.fidelity == "post" and o.ok and (best is None or o.effective > best.effective):
            best = Incumbent(o.config, o.effective, o.index)
    if best is None:
        raise NoIncumbentError("no successful expensive observation yet")
    return best


def _fidelity_order(o: Observation):
    return (o.index, 0 if o.fidelity == "pre" else 1)


def _traces(history, n_iter):
    best = {"pre": -math.inf, "post": -math.inf}
    by_index = {}
    for o in history:
        by_index.setdefault(o.index, []).append(o)
    out = {"pre": [], "post": []}
    for i in range(1, n_iter + 1):
        for o in by_index.get(i, ()):
            if o.ok:
                best[o.fidelity] = max(best[o.fidelity], o.effective)
        for f in out:
            out[f].append(best[f] if best[f] > -math.inf else math.nan)
    return out["pre"], out["post"]


def _finish(method, observations, rho_trace=()) -> RunResult:
    history = sorted(observations, key=_fidelity_order)
    try:
        inc = incumbent(history)
    except NoIncumbentError:
        inc = None
    n_iter = max((o.index for o in history), default=0)
    pre, post = _traces(history, n_iter)
    return RunResult(method, history, inc, pre, post, list(rho_trace))


class _Runner:
    """Shared plumbing: seeded streams, evaluation, FOM bookkeeping."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.space = cfg.space
        self.evaluator = resolve_evaluator(cfg.evaluator)
        self._lock = threading.Lock()
        self.observations: list[Observation] = []

    def rng(self, index: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, index, stream])

    def evaluate(self, index: int, fidelity: str, config: tuple) -> Observation:
        request = EvalRequest(2 * index + (fidelity == "post"), fidelity,
                              self.space.as_dict(config))
        try:
            outcome = self.evaluator.evaluate(request)
        except Exception as exc:  # evaluator bugs are recorded, not fatal
            outcome = EvalOutcome(EVAL_ERROR, None, 0.0, repr(exc))
        fom, status, metrics = None, outcome.status, outcome.metrics
        if status == OK:
            try:
                fom = effective_fom(metrics, self.cfg.fom_spec)
            except ObjectiveError as exc:
                log.warning("iteration %d %s: %s", index, fidelity, exc)
                status, fom = EVAL_ERROR, None
        if status != OK:
            log.info("iteration %d %s evaluation %s: %s", index, fidelity, status,
                     outcome.diagnostic)
            metrics = None
        obs = Observation(index, fidelity, tuple(config), metrics, fom,
                          round(outcome.duration_ms, 3), status)
        with self._lock:
            self.observations.append(obs)
        return obs

    def snapshot(self, fidelity: str, before: int) -> list[Observation]:
        with self._lock:
            return sorted((o for o in self.observations
                           if o.fidelity == fidelity and o.ok and o.index < before),
                          key=_fidelity_order)

    def tpe_proposal(self, index: int, history: list, gamma: float) -> tuple:
        rng = self.rng(index, _S_ALPHA)
        with self._lock:
            n_cheap = sum(1 for o in self.observations
                          if o.fidelity == "pre" and o.index < index)
        if n_cheap < self.cfg.n_init or len(history) < 2:
            return sample_uniform(self.space, rng)
        return tpe.propose_next(history, gamma, self.cfg.n_candidates, self.space, rng)


# ---------------------------------------------------------------------------
# coupled run
# ---------------------------------------------------------------------------

def _transferred_history(cheap: list, expensive: list) -> list[tuple]:
    """Cheap (config, FOM) pairs plus expensive points shifted onto the cheap scale."""
    hist = [(o.config, o.effective) for o in cheap]
    if not expensive:
        return hist
    cheap_at = {o.index: o.effective for o in cheap}
    gaps = [cheap_at[o.index] - o.effective for o in expensive if o.index in cheap_at]
    shift = float(np.mean(gaps)) if gaps else 0.0
    return hist + [(o.config, o.effective + shift) for o in expensive]


def _co_observations(cheap: list, expensive: list) -> list[tuple]:
    cheap_at = {o.index: o for o in cheap}
    return [(o.config, cheap_at[o.index].effective, o.effective)
            for o in expensive if o.index in cheap_at]


class _CoupledRun(_Runner):
    def __init__(self, cfg: RunConfig):
        super().__init__(cfg)
        self.plan = schedule(cfg.n_pre, cfg.interval, cfg.n_post)
        self.budget = sum(1 for b, _ in self.plan if b)
        self.to_beta: queue.Queue = queue.Queue()
        self.to_alpha: queue.Queue = queue.Queue()
        self.abort = threading.Event()
        self.beta_error: BaseException | None = None
        self.rho_trace: list = []
        self.n_failed = 0

    # -- alpha agent -------------------------------------------------------
    def alpha_iteration(self, index: int) -> Observation:
        cheap = self.snapshot("pre", index)
        # expensive results become visible once the beta iteration that
        # produced them is no longer the pending one
        last_beta = max((i for i, (b, _) in enumerate(self.plan, 1) if b and i < index),
                        default=0)
        expensive = self.snapshot("post", last_beta)
        history = _transferred_history(cheap, expensive)
        config = self.tpe_proposal(index, history, self.cfg.gamma_alpha)
        return self.evaluate(index, "pre", config)

    def fit_alpha(self, index: int):
        cheap = self.snapshot("pre", index)
        if not cheap:
            return None, cheap
        X = encode_many([o.config for o in cheap], self.space)
        y = [o.effective for o in cheap]
        return fit_gp(X, y, rng=self.rng(index, _S_GP_ALPHA)), cheap

    def run(self) -> RunResult:
        worker = threading.Thread(target=self._beta_agent, name="beta-agent", daemon=True)
        worker.start()
        try:
            for index, (is_beta, co_observe) in enumerate(self.plan, 1):
                if self.abort.is_set():
                    break
                if not is_beta:
                    self.alpha_iteration(index)
                    continue
                gp_alpha, cheap = self.fit_alpha(index)
                self.to_beta.put(("start", index, gp_alpha, cheap))
                msg = self.to_alpha.get()
                if msg[0] == "error":
                    break
                _, _, config = msg
                if co_observe:
                    self.evaluate(index, "pre", config)
        finally:
            self.to_beta.put(("stop",))
            worker.join()
        if self.beta_error is not None:
            raise RunError(f"beta agent failed: {self.beta_error!r}") from self.beta_error
        result = _finish("coupled", self.observations, self.rho_trace)
        if self.abort.is_set():
            raise RunAborted(
                f"{self.n_failed} of {self.budget} expensive evaluations failed", result)
        return result

    # -- beta agent --------------------------------------------------------
    def _beta_agent(self):
        while True:
            msg = self.to_beta.get()
            if msg[0] == "stop":
                return
            _, index, gp_alpha, cheap = msg
            try:
                config = self.beta_proposal(index, gp_alpha, cheap)
            except BaseException as exc:  # surfaced by run()
                self.beta_error = exc
                self.to_alpha.put(("error",))
                return
            self.to_alpha.put(("proposal", index, config))
            obs = self.evaluate(index, "post", config)
            if not obs.ok:
                self.n_failed += 1
                if self.n_failed > ABORT_FRACTION * self.budget:
                    self.abort.set()

    def candidate_pool(self, index: int, cheap: list, expensive: list) -> list[tuple]:
        history = [(o.config, o.effective) for o in cheap]
        pool = tpe.propose_candidates(history, self.cfg.gamma_beta, self.cfg.n_candidates,
                                      self.space, self.rng(index, _S_POOL))
        if expensive:
            best = incumbent(expensive)
            pool.append(best.config)
            rng = self.rng(index, _S_PERTURB)
            u0 = encode(best.config, self.space)
            for _ in range(N_PERTURB):
                u = np.clip(u0 + PERTURB_SIGMA * rng.standard_normal(u0.size), 0.0, 1.0)
                pool.append(decode(u, self.space))
        return pool

    def beta_proposal(self, index: int, gp_alpha, cheap: list) -> tuple:
        """Transfer cheap -> expensive, then pick the pool's EI maximizer."""
        expensive = self.snapshot("post", index)
        pool = self.candidate_pool(index, cheap, expensive)
        Xp = encode_many(pool, self.space)
        if not expensive:
            # no incumbent yet: rank by predicted mean, cheap model as proxy
            if gp_alpha is None:
                return pool[0]
            mean, _ = gp_alpha.predict(Xp)
            return pool[int(np.argmax(mean))]
        gp_beta = fit_gp(encode_many([o.config for o in expensive], self.space),
                         [o.effective for o in expensive], rng=self.rng(index, _S_GP_BETA))
        if gp_alpha is None:
            mean, var = gp_beta.predict(Xp)
        else:
            co = _co_observations(cheap, expensive)
            coupled = build_coupled(gp_alpha, gp_beta, co, estimate_rho(co))
            self.rho_trace.append((index, coupled.rho))
            mean, var = coupled.predict(Xp)
        ei = expected_improvement(mean, var, incumbent(expensive).effective)
        return pool[int(np.argmax(ei))]


def run_coupled(cfg: RunConfig) -> RunResult:
    return _CoupledRun(cfg).run()


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _cheap_only_phase(runner: _Runner) -> None:
    """TPE on the cheap fidelity for n_pre iterations (aggressive gamma)."""
    for index in range(1, runner.cfg.n_pre + 1):
        cheap = runner.snapshot("pre", index)
        history = [(o.config, o.effective) for o in cheap]
        runner.evaluate(index, "pre", runner.tpe_proposal(index, history, runner.cfg.gamma_beta))


def run_plain_baseline(cfg: RunConfig) -> RunResult:
    """Optimize the cheap fidelity only; verify the best cheap config once."""
    runner = _Runner(cfg)
    _cheap_only_phase(runner)
    cheap = runner.snapshot("pre", cfg.n_pre + 1)
    if cheap:
        best = max(cheap, key=lambda o: (o.effective, -o.index))
        config = best.config
    else:
        config = sample_uniform(cfg.space, runner.rng(cfg.n_pre + 1, _S_ALPHA))
    runner.evaluate(cfg.n_pre + 1, "post", config)
    return _finish("plain", runner.observations)


def run_fusion_baseline(cfg: RunConfig, n_train: int) -> RunResult:
    """Sequential stand-in for model fusion: 2 * n_train expensive evaluations.

    Top-n_train distinct cheap configurations train the expensive GP, which
    then drives n_train EI iterations over uniform candidate pools.
    """
    if n_train < 1 or n_train > cfg.n_pre:
        raise ValueError(f"n_train must lie in [1, n_pre={cfg.n_pre}]")
    runner = _Runner(cfg)
    _cheap_only_phase(runner)
    cheap = runner.snapshot("pre", cfg.n_pre + 1)
    ranked = sorted(cheap, key=lambda o: (-o.effective, o.index))
    seen, train = set(), []
    for o in ranked:
        if o.config not in seen:
            seen.add(o.config)
            train.append(o.config)
        if len(train) == n_train:
            break
    index = cfg.n_pre
    for config in train:
        index += 1
        runner.evaluate(index, "post", config)
    for _ in range(n_train):
        index += 1
        expensive = runner.snapshot("post", index)
        rng = runner.rng(index, _S_FUSION)
        pool = [sample_uniform(cfg.space, rng) for _ in range(cfg.n_candidates)]
        if expensive:
            gp = fit_gp(encode_many([o.config for o in expensive], cfg.space),
                        [o.effective for o in expensive], rng=runner.rng(index, _S_GP_BETA))
            mean, var = gp.predict(encode_many(pool, cfg.space))
            config = pool[int(np.argmax(expected_improvement(
                mean, var, incumbent(expensive).effective)))]
        else:
            config = pool[0]
        runner.evaluate(index, "post", config)
    return _finish("fusion", runner.observations)
