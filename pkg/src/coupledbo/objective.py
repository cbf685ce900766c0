"""Figure-of-merit scalarization with threshold-constraint penalties."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

TRANSFORMS = ("identity", "log10")


class ObjectiveError(ValueError):
    pass


class MissingMetricError(ObjectiveError, KeyError):
    def __init__(self, metric: str):
        super().__init__(f"metric {metric!r} required by the FOM is missing")
        self.metric = metric

    __str__ = ValueError.__str__


@dataclass(frozen=True)
class Term:
    metric: str
    coef: float
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ObjectiveError(f"unknown transform {self.transform!r} for {self.metric}")


@dataclass(frozen=True)
class Constraint:
    metric: str
    lo: float
    hi: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ObjectiveError(f"constraint on {self.metric}: need lo < hi")
        if self.weight < 0:
            raise ObjectiveError(f"constraint on {self.metric}: weight must be >= 0")


@dataclass(frozen=True)
class FomSpec:
    terms: tuple
    constraints: tuple = ()

    def __post_init__(self):
        if not self.terms:
            raise ObjectiveError("a FOM needs at least one term")

    @property
    def metric_names(self) -> list[str]:
        names = [t.metric for t in self.terms] + [c.metric for c in self.constraints]
        return list(dict.fromkeys(names))


@dataclass(frozen=True)
class FomResult:
    raw_fom: float
    violation: float
    effective: float
    terms: dict = field(default_factory=dict, compare=False)
    # metric -> (normalized violation, raw penalty value as printed, weight)
    constraints: dict = field(default_factory=dict, compare=False)


def term_value(metric: float, transform: str, coefficient: float, name: str = "metric") -> float:
    if transform == "identity":
        return coefficient * metric
    if transform == "log10":
        if not metric > 0:
            raise ObjectiveError(f"log10 of non-positive value {metric} for {name}")
        return coefficient * math.log10(metric)
    raise ObjectiveError(f"unknown transform {transform!r}")


def penalty(metric: float, thres_low: float, thres_high: float) -> float:
    """Un-normalized penalty: max(hi, m) - min(lo, m)."""
    return max(thres_high, metric) - min(thres_low, metric)


def constraint_violation(metric: float, thres_low: float, thres_high: float) -> float:
    """Distance of `metric` outside [thres_low, thres_high]; 0 inside.

    Equals ``penalty(...) - (thres_high - thres_low)``, computed without the
    cancellation that subtraction would suffer near the thresholds.
    """
    return max(thres_low - metric, 0.0) + max(metric - thres_high, 0.0)


def effective_fom(metrics: Mapping[str, float], spec: FomSpec) -> FomResult:
    def get(name):
        try:
            value = metrics[name]
        except KeyError:
            raise MissingMetricError(name) from None
        if not math.isfinite(value):
            raise ObjectiveError(f"metric {name!r} is not finite: {value}")
        return float(value)

    terms = {}
    raw = 0.0
    for t in spec.terms:
        v = term_value(get(t.metric), t.transform, t.coef, t.metric)
        terms[t.metric] = v
        raw += v

    constraints = {}
    total_violation = 0.0
    weighted = 0.0
    for c in spec.constraints:
        m = get(c.metric)
        viol = constraint_violation(m, c.lo, c.hi)
        constraints[c.metric] = (viol, penalty(m, c.lo, c.hi), c.weight)
        total_violation += viol
        weighted += c.weight * viol

    return FomResult(raw, total_violation, raw - weighted, terms, constraints)
