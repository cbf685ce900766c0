"""Tree-structured Parzen estimator over mixed continuous/grid spaces.

Observations are split into a "good" set (top ``gamma`` fraction by FOM)
and a "bad" set. Each set becomes a Parzen mixture whose components are
products of per-dimension kernels; candidates drawn from the good mixture
are ranked by the density ratio g(x) / l(x), larger is better.

Continuous dimensions use Gaussian kernels truncated to the unit interval
(each component renormalized by its in-range mass). Grid dimensions use the
same Gaussian evaluated on the legal grid points and renormalized to sum
to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri

from .space import ParameterSpace, decode, encode_many, sample_uniform

SILVERMAN = 1.06
MIN_SIGMA = 0.05
MIN_BANDWIDTH = 0.01
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

DEFAULT_N_CANDIDATES = 64


@dataclass(frozen=True)
class TpeSplit:
    threshold: float
    good: list
    bad: list
    gamma: float


def split_by_threshold(history: Sequence[tuple], gamma: float) -> TpeSplit:
    """Split (config, fom) pairs into the top-gamma "good" set and the rest.

    Ranking is by FOM descending with ties going to the most recent entry,
    so ``ceil(gamma * n)`` points (clipped to [1, n-1]) are good.
    """
    n = len(history)
    if n < 2:
        raise ValueError("split_by_threshold needs at least 2 observations")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    n_good = min(max(math.ceil(gamma * n - 1e-9), 1), n - 1)
    order = sorted(range(n), key=lambda i: (-history[i][1], -i))
    good_idx = sorted(order[:n_good])
    bad_idx = sorted(order[n_good:])
    threshold = min(history[i][1] for i in good_idx)
    return TpeSplit(
        threshold,
        [history[i] for i in good_idx],
        [history[i] for i in bad_idx],
        gamma,
    )


def bandwidth(n: int, sigma: float, grid_step: float = 0.0) -> float:
    """Silverman's rule 1.06 * sigma * n^(-1/5) with floors.

    `sigma` is floored at 0.05; the result at max(0.01, grid_step / 2).
    """
    if n < 1:
        raise ValueError("bandwidth needs n >= 1")
    h = SILVERMAN * max(sigma, MIN_SIGMA) * n ** -0.2
    return max(h, MIN_BANDWIDTH, 0.5 * grid_step)


@dataclass(frozen=True)
class DensityModel:
    points: np.ndarray          # (n, d) encoded configurations
    bandwidths: np.ndarray      # (d,)
    grid_sizes: np.ndarray      # (d,) number of grid points; 0 for continuous
    bounded: bool = True        # truncate continuous kernels to [0, 1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def build_density(points: np.ndarray, space: ParameterSpace,
                  bandwidths: Sequence[float] | None = None,
                  bounded: bool = True) -> DensityModel:
    """Parzen mixture over encoded `points` with per-dimension Silverman bandwidths."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < 1:
        raise ValueError("a density needs at least one point")
    grid = np.array([s.n_grid for s in space.specs])
    if bandwidths is None:
        n = points.shape[0]
        sig = points.std(axis=0, ddof=1) if n > 1 else np.zeros(points.shape[1])
        bandwidths = [bandwidth(n, sig[j], space.specs[j].encoded_step)
                      for j in range(points.shape[1])]
    return DensityModel(points, np.asarray(bandwidths, dtype=float), grid, bounded)


def _grid_points(m: int) -> np.ndarray:
    if m <= 1:
        return np.zeros(1)
    return np.arange(m) / (m - 1)


def _log_component_terms(model: DensityModel, X: np.ndarray) -> np.ndarray:
    """log of each component's kernel at each query: shape (q, n)."""
    q = X.shape[0]
    total = np.zeros((q, model.n))
    for j in range(model.dim):
        h = model.bandwidths[j]
        c = model.points[:, j]
        z = (X[:, j][:, None] - c[None, :]) / h
        log_k = -0.5 * z * z - LOG_SQRT_2PI
        m = model.grid_sizes[j]
        if m > 0:
            g = _grid_points(m)
            zg = (g[:, None] - c[None, :]) / h
            log_norm = _logsumexp0(-0.5 * zg * zg - LOG_SQRT_2PI)
            total += log_k - log_norm[None, :]
        else:
            total += log_k - math.log(h)
            if model.bounded:
                total -= _log_mass(c, h)[None, :]
    return total


def _logsumexp0(a: np.ndarray) -> np.ndarray:
    # column-wise log-sum-exp; scipy's version carries heavy per-call overhead
    m = a.max(axis=0)
    return m + np.log(np.exp(a - m).sum(axis=0))


def _log_mass(c: np.ndarray, h: float) -> np.ndarray:
    """log(Phi((1-c)/h) - Phi(-c/h)), computed stably."""
    a, b = -c / h, (1.0 - c) / h
    # use the tail with less cancellation
    upper = log_ndtr(b) + np.log1p(-np.exp(np.minimum(log_ndtr(a) - log_ndtr(b), 0.0)))
    lower = log_ndtr(-a) + np.log1p(-np.exp(np.minimum(log_ndtr(-b) - log_ndtr(-a), 0.0)))
    return np.where(a > 0, lower, upper)


def log_parzen_density(model: DensityModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return logsumexp(_log_component_terms(model, X), axis=1) - math.log(model.n)


def parzen_density(model: DensityModel, x) -> float | np.ndarray:
    """Density (continuous dims) times probability mass (grid dims) at x.

    A 1-d input returns a float; a 2-d array of queries returns an array.
    """
    x = np.asarray(x, dtype=float)
    values = np.exp(log_parzen_density(model, x))
    return float(values[0]) if x.ndim == 1 else values


def sample_encoded(model: DensityModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw `size` encoded vectors from the mixture (before snapping)."""
    comp = rng.integers(model.n, size=size)
    out = np.empty((size, model.dim))
    for j in range(model.dim):
        h = model.bandwidths[j]
        centers = model.points[comp, j]
        m = model.grid_sizes[j]
        if m > 0:
            g = _grid_points(m)
            logits = -0.5 * ((g[None, :] - model.points[:, j][:, None]) / h) ** 2
            probs = np.exp(logits - logits.max(axis=1, keepdims=True))
            cdf = np.cumsum(probs / probs.sum(axis=1, keepdims=True), axis=1)
            u = rng.random(size)
            k = (cdf[comp] < u[:, None]).sum(axis=1)
            out[:, j] = g[np.minimum(k, m - 1)]
        else:
            u = rng.random(size)
            if model.bounded:
                # inverse CDF of the truncated kernel; [a, b] always brackets 0,
                # so neither CDF end sits deep in a tail
                lo, hi = ndtr(-centers / h), ndtr((1.0 - centers) / h)
                out[:, j] = np.clip(centers + h * ndtri(lo + u * (hi - lo)), 0.0, 1.0)
            else:
                out[:, j] = centers + h * ndtri(u)
    return out


def sample_from_density(model: DensityModel, space: ParameterSpace,
                        rng: np.random.Generator) -> tuple:
    return decode(sample_encoded(model, rng, 1)[0], space)


def acquisition_ratio(x, good: DensityModel, bad: DensityModel):
    """g(x) / l(x); larger means more promising."""
    x = np.asarray(x, dtype=float)
    r = np.exp(log_parzen_density(good, x) - log_parzen_density(bad, x))
    return float(r[0]) if x.ndim == 1 else r


def densities_for(history: Sequence[tuple], gamma: float,
                  space: ParameterSpace) -> tuple[DensityModel, DensityModel, TpeSplit]:
    split = split_by_threshold(history, gamma)
    good = build_density(encode_many([c for c, _ in split.good], space), space)
    bad = build_density(encode_many([c for c, _ in split.bad], space), space)
    return good, bad, split


def propose_candidates(history, gamma, n_candidates, space, rng) -> list[tuple]:
    """Draw `n_candidates` legal configurations from the good-set density."""
    if len(history) < 2:
        return [sample_uniform(space, rng) for _ in range(n_candidates)]
    good, _, _ = densities_for(history, gamma, space)
    return [decode(u, space) for u in sample_encoded(good, rng, n_candidates)]


def propose_next(history: Sequence[tuple], gamma: float, n_candidates: int,
                 space: ParameterSpace, rng: np.random.Generator) -> tuple:
    """Best-of-`n_candidates` good-density draw under the g/l ratio.

    Falls back to a uniform draw with fewer than two observations.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    if len(history) < 2:
        return sample_uniform(space, rng)
    good, bad, _ = densities_for(history, gamma, space)
    cands = [decode(u, space) for u in sample_encoded(good, rng, n_candidates)]
    if n_candidates == 1:
        return cands[0]
    X = encode_many(cands, space)
    score = log_parzen_density(good, X) - log_parzen_density(bad, X)
    return cands[int(np.argmax(score))]
