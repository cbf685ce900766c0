"""Mixed continuous / quantized / integer sizing parameter spaces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

KINDS = ("continuous", "quantized", "integer")

# A configuration is a plain tuple of numbers in canonical spec order.
Configuration = tuple


class SpaceError(ValueError):
    """Raised for malformed parameter specs or illegal configurations."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(f"{name}: {message}" if name else message)
        self.name = name


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: str
    lo: float
    hi: float
    step: float | None = None
    units: str = ""

    @classmethod
    def continuous(cls, name, lo, hi, units=""):
        return cls(name, "continuous", float(lo), float(hi), None, units)

    @classmethod
    def quantized(cls, name, lo, hi, step, units=""):
        return cls(name, "quantized", float(lo), float(hi), float(step), units)

    @classmethod
    def integer(cls, name, lo, hi, units=""):
        return cls(name, "integer", int(lo), int(hi), 1, units)

    @property
    def is_grid(self) -> bool:
        return self.kind != "continuous"

    @property
    def n_grid(self) -> int:
        """Number of legal values for grid kinds (0 for continuous)."""
        if not self.is_grid:
            return 0
        return int(round((self.hi - self.lo) / self.step)) + 1

    def grid_values(self) -> np.ndarray:
        if not self.is_grid:
            raise SpaceError("continuous parameter has no grid", self.name)
        k = np.arange(self.n_grid)
        return self.lo + k * self.step

    @property
    def encoded_step(self) -> float:
        """Grid spacing in unit-cube coordinates (0 for continuous)."""
        if not self.is_grid:
            return 0.0
        return self.step / (self.hi - self.lo)


def _check_spec(spec: ParameterSpec) -> None:
    if spec.kind not in KINDS:
        raise SpaceError(f"unknown kind {spec.kind!r}", spec.name)
    if not (math.isfinite(spec.lo) and math.isfinite(spec.hi)):
        raise SpaceError("bounds must be finite", spec.name)
    # lo == hi is allowed only for a singleton integer domain
    if spec.lo > spec.hi or (spec.lo == spec.hi and spec.kind != "integer"):
        raise SpaceError(f"inverted bounds lo={spec.lo} hi={spec.hi}", spec.name)
    if spec.kind == "integer":
        if float(spec.lo) != int(spec.lo) or float(spec.hi) != int(spec.hi):
            raise SpaceError("integer bounds must be whole numbers", spec.name)
    if spec.kind == "quantized":
        if spec.step is None or not spec.step > 0:
            raise SpaceError("quantized step must be positive", spec.name)
        ratio = (spec.hi - spec.lo) / spec.step
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, abs(ratio)):
            raise SpaceError(
                f"step {spec.step} does not divide range {spec.hi - spec.lo}", spec.name
            )


@dataclass(frozen=True)
class ParameterSpace:
    specs: tuple

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def dim(self) -> int:
        return len(self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    def as_dict(self, config: Sequence[float]) -> dict:
        self._check_length(config)
        return {s.name: v for s, v in zip(self.specs, config)}

    def from_dict(self, values: dict) -> tuple:
        missing = [n for n in self.names if n not in values]
        if missing:
            raise SpaceError(f"missing parameters {missing}")
        extra = sorted(set(values) - set(self.names))
        if extra:
            raise SpaceError(f"unknown parameters {extra}")
        config = tuple(_typed(s, values[s.name]) for s in self.specs)
        self.check(config)
        return config

    def _check_length(self, config) -> None:
        if len(config) != len(self.specs):
            raise SpaceError(
                f"configuration has {len(config)} values, space has {len(self.specs)}"
            )

    def contains(self, config: Sequence[float]) -> bool:
        try:
            self.check(config)
        except SpaceError:
            return False
        return True

    def check(self, config: Sequence[float]) -> None:
        """Raise SpaceError unless `config` is a legal configuration."""
        self._check_length(config)
        for s, v in zip(self.specs, config):
            if not (s.lo <= v <= s.hi):
                raise SpaceError(f"value {v} outside [{s.lo}, {s.hi}]", s.name)
            if s.is_grid and snap(v, s) != v:
                raise SpaceError(f"value {v} is not on the grid", s.name)


def validate_space(specs: Iterable[ParameterSpec]) -> ParameterSpace:
    specs = tuple(specs)
    if not specs:
        raise SpaceError("a parameter space needs at least one parameter")
    seen = set()
    for spec in specs:
        if spec.name in seen:
            raise SpaceError("duplicate parameter name", spec.name)
        seen.add(spec.name)
        _check_spec(spec)
    return ParameterSpace(specs)


def _typed(spec: ParameterSpec, value):
    return int(value) if spec.kind == "integer" else float(value)


def snap(value: float, spec: ParameterSpec):
    """Clamp to the parameter's bounds and round grid kinds to the nearest point.

    Ties round up. Integer specs return an ``int``.
    """
    v = min(max(float(value), spec.lo), spec.hi)
    if not spec.is_grid:
        return v
    k = math.floor((v - spec.lo) / spec.step + 0.5)
    k = min(max(k, 0), spec.n_grid - 1)
    if spec.kind == "integer":
        return int(spec.lo) + k
    return spec.lo + k * spec.step


def sample_uniform(space: ParameterSpace, rng: np.random.Generator) -> tuple:
    values = []
    for s in space.specs:
        if s.is_grid:
            k = int(rng.integers(s.n_grid))
            values.append(int(s.lo) + k if s.kind == "integer" else s.lo + k * s.step)
        else:
            values.append(float(rng.uniform(s.lo, s.hi)))
    return tuple(values)


def _spans(space: ParameterSpace) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([s.lo for s in space.specs], dtype=float)
    hi = np.array([s.hi for s in space.specs], dtype=float)
    span = hi - lo
    # singleton integer domain encodes to 0
    span[span == 0] = 1.0
    return lo, span


def encode(config: Sequence[float], space: ParameterSpace) -> np.ndarray:
    space._check_length(config)
    lo, span = _spans(space)
    return (np.asarray(config, dtype=float) - lo) / span


def encode_many(configs: Sequence[Sequence[float]], space: ParameterSpace) -> np.ndarray:
    if len(configs) == 0:
        return np.empty((0, space.dim))
    lo, span = _spans(space)
    return (np.asarray(configs, dtype=float) - lo) / span


def decode(u: Sequence[float], space: ParameterSpace) -> tuple:
    """Map a unit-cube vector back to a legal configuration (affine inverse + snap)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (space.dim,):
        raise SpaceError(f"encoded vector has shape {u.shape}, expected ({space.dim},)")
    lo, span = _spans(space)
    raw = lo + u * span
    return tuple(snap(v, s) for v, s in zip(raw, space.specs))
