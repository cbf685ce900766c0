import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import truncnorm

from coupledbo.evaluator import evaluate_builtin, get_benchmark
from coupledbo.space import ParameterSpec, encode_many, sample_uniform, validate_space
from coupledbo.tpe import (
    DensityModel, acquisition_ratio, bandwidth, build_density, densities_for, parzen_density,
    propose_next, sample_encoded, sample_from_density, split_by_threshold,
)
from oracles import brute_parzen

UNIT = validate_space([ParameterSpec.continuous("x", 0.0, 1.0)])


def hist(foms):
    return [((float(i),), f) for i, f in enumerate(foms)]


def random_mixed_space(rng, d):
    specs = []
    for j in range(d):
        kind = rng.integers(3)
        if kind == 0:
            specs.append(ParameterSpec.continuous(f"p{j}", 0.0, float(rng.uniform(1, 10))))
        elif kind == 1:
            specs.append(ParameterSpec.integer(f"p{j}", 1, int(rng.integers(2, 20))))
        else:
            specs.append(ParameterSpec.quantized(f"p{j}", 0.0, 0.5 * int(rng.integers(1, 12)), 0.5))
    return validate_space(specs)


def test_split_top_quartile():
    s = split_by_threshold(hist([1, 2, 3, 4]), 0.25)
    assert [f for _, f in s.good] == [4]
    assert s.threshold == 4


def test_split_all_equal_takes_most_recent():
    s = split_by_threshold(hist([5, 5, 5, 5, 5]), 0.1)
    assert s.good == [((4.0,), 5)]
    assert len(s.bad) == 4


def test_split_half_sorting_oracle():
    rng = np.random.default_rng(0)
    foms = list(rng.normal(size=10))
    s = split_by_threshold(hist(foms), 0.5)
    assert len(s.good) == 5
    assert sorted(f for _, f in s.good) == sorted(foms)[5:]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=2, max_size=40), st.floats(0.01, 0.99))
def test_split_partitions(foms, gamma):
    s = split_by_threshold(hist(foms), gamma)
    assert len(s.good) >= 1 and len(s.bad) >= 1
    assert sorted(s.good + s.bad) == sorted(hist(foms))
    assert min(f for _, f in s.good) >= max(f for _, f in s.bad)


def test_split_errors():
    with pytest.raises(ValueError):
        split_by_threshold(hist([1.0]), 0.5)
    with pytest.raises(ValueError):
        split_by_threshold(hist([1.0, 2.0]), 1.0)


def test_bandwidth_examples():
    assert bandwidth(1, 0.0) == pytest.approx(0.053, abs=1e-12)
    assert bandwidth(32, 0.2) == pytest.approx(1.06 * 0.2 * 32 ** -0.2, abs=1e-12)
    assert bandwidth(32, 0.2) == pytest.approx(0.106, abs=1e-3)
    assert bandwidth(1, 0.0, grid_step=0.5) == 0.25


def test_bandwidth_decreasing_until_floor():
    hs = [bandwidth(n, 0.3) for n in range(1, 200)]
    assert all(a > b for a, b in zip(hs, hs[1:]))
    floored = [bandwidth(n, 0.01) for n in (10**6, 10**7)]
    assert floored == [0.01, 0.01]


def test_single_kernel_peak_unbounded():
    model = DensityModel(np.array([[0.5]]), np.array([1.0]), np.array([0]), bounded=False)
    assert parzen_density(model, [0.5]) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)


def test_single_kernel_peak_truncated():
    model = DensityModel(np.array([[0.5]]), np.array([1.0]), np.array([0]))
    mass = math.erf(0.5 / math.sqrt(2))
    assert parzen_density(model, [0.5]) == pytest.approx(1 / math.sqrt(2 * math.pi) / mass, rel=1e-12)


def test_grid_single_point_sums_to_one():
    space = validate_space([ParameterSpec.integer("n", 1, 16)])
    model = build_density(encode_many([(5,)], space), space)
    grid = encode_many([(k,) for k in range(1, 17)], space)
    assert parzen_density(model, grid).sum() == pytest.approx(1.0, abs=1e-12)


def test_brute_force_five_points_two_dims():
    rng = np.random.default_rng(1)
    space = validate_space([ParameterSpec.continuous("w", 0.4, 8.0), ParameterSpec.integer("n", 1, 9)])
    pts = encode_many([sample_uniform(space, rng) for _ in range(5)], space)
    model = build_density(pts, space)
    for x in encode_many([sample_uniform(space, rng) for _ in range(20)], space):
        expected = brute_parzen(pts, model.bandwidths, model.grid_sizes, x)
        assert abs(parzen_density(model, x) - expected) <= 1e-12 * max(1.0, expected)


@pytest.mark.parametrize("bounded", [True, False])
def test_brute_force_random_mixed(bounded):
    rng = np.random.default_rng(2)
    for _ in range(30):
        space = random_mixed_space(rng, int(rng.integers(1, 5)))
        pts = encode_many([sample_uniform(space, rng) for _ in range(int(rng.integers(1, 8)))], space)
        model = build_density(pts, space, bounded=bounded)
        X = encode_many([sample_uniform(space, rng) for _ in range(5)], space)
        got = parzen_density(model, X)
        for g, x in zip(got, X):
            expected = brute_parzen(pts, model.bandwidths, model.grid_sizes, x, bounded)
            assert abs(g - expected) <= 1e-12 * max(1.0, expected)
            assert g > 0


def test_grid_masses_sum_to_one():
    rng = np.random.default_rng(3)
    space = validate_space([ParameterSpec.integer("a", 1, 7), ParameterSpec.quantized("b", 0, 3, 0.5)])
    pts = encode_many([sample_uniform(space, rng) for _ in range(6)], space)
    model = build_density(pts, space)
    grid = encode_many([(a, b) for a in range(1, 8) for b in np.arange(0, 3.5, 0.5)], space)
    assert parzen_density(model, grid).sum() == pytest.approx(1.0, abs=1e-9)


def test_continuous_density_integrates_to_one():
    rng = np.random.default_rng(4)
    model = build_density(rng.random((7, 1)), UNIT)
    xs = (np.arange(10_000) + 0.5) / 10_000
    integral = parzen_density(model, xs[:, None]).mean()
    assert integral == pytest.approx(1.0, abs=1e-4)


def test_empirical_law_matches_density():
    model = build_density(np.array([[0.2], [0.75]]), UNIT, bandwidths=[0.1])
    draws = np.array([sample_from_density(model, UNIT, rng)[0]
                      for rng in [np.random.default_rng(5)] for _ in range(20_000)])
    edges = np.linspace(0, 1, 101)
    emp = np.histogram(draws, edges)[0] / draws.size
    cdf = np.mean([truncnorm.cdf(edges, -c / 0.1, (1 - c) / 0.1, loc=c, scale=0.1)
                   for c in (0.2, 0.75)], axis=0)
    tv = 0.5 * np.abs(emp - np.diff(cdf)).sum()
    assert tv < 0.03


def test_tiny_bandwidth_reproduces_points():
    space = validate_space([ParameterSpec.continuous("w", 0.0, 2.0), ParameterSpec.integer("n", 1, 5)])
    configs = [(0.5, 2), (1.5, 4)]
    model = build_density(encode_many(configs, space), space, bandwidths=[1e-9, 1e-9])
    rng = np.random.default_rng(6)
    for _ in range(50):
        c = sample_from_density(model, space, rng)
        assert any(abs(c[0] - w) < 1e-6 and c[1] == n for w, n in configs)


def test_samples_are_legal():
    rng = np.random.default_rng(7)
    space = random_mixed_space(rng, 4)
    model = build_density(encode_many([sample_uniform(space, rng) for _ in range(5)], space), space)
    for _ in range(200):
        assert space.contains(sample_from_density(model, space, rng))


def test_sampling_deterministic():
    model = build_density(np.array([[0.1], [0.9]]), UNIT)
    a = sample_encoded(model, np.random.default_rng(8), 10)
    b = sample_encoded(model, np.random.default_rng(8), 10)
    np.testing.assert_array_equal(a, b)


def test_ratio_one_for_identical_sets():
    model = build_density(np.array([[0.1], [0.4]]), UNIT)
    np.testing.assert_allclose(acquisition_ratio(np.linspace(0, 1, 11)[:, None], model, model), 1.0)


@pytest.mark.parametrize("bounded", [True, False])
def test_ratio_two_points(bounded):
    g = DensityModel(np.array([[0.0]]), np.array([1.0]), np.array([0]), bounded)
    l = DensityModel(np.array([[1.0]]), np.array([1.0]), np.array([0]), bounded)
    # both truncation masses are equal by symmetry, so they cancel
    assert acquisition_ratio([0.0], g, l) == pytest.approx(math.exp(0.5), rel=1e-12)
    assert acquisition_ratio([0.0], g, l) == pytest.approx(0.39894 / 0.24197, rel=1e-4)


def test_ratio_invariant_under_duplication():
    rng = np.random.default_rng(9)
    g_pts, l_pts = rng.random((3, 2)), rng.random((5, 2))
    bw, grid = np.array([0.2, 0.3]), np.zeros(2, dtype=int)
    g1, l1 = DensityModel(g_pts, bw, grid), DensityModel(l_pts, bw, grid)
    g2 = DensityModel(np.vstack([g_pts, g_pts]), bw, grid)
    l2 = DensityModel(np.vstack([l_pts, l_pts]), bw, grid)
    X = rng.random((30, 2))
    np.testing.assert_allclose(acquisition_ratio(X, g1, l1), acquisition_ratio(X, g2, l2), rtol=1e-12)


def test_single_candidate_is_first_draw():
    rng = np.random.default_rng(10)
    history = [((float(x),), -abs(x - 0.3)) for x in rng.random(12)]
    chosen = propose_next(history, 0.25, 1, UNIT, np.random.default_rng(3))
    good, _, _ = densities_for(history, 0.25, UNIT)
    first = sample_encoded(good, np.random.default_rng(3), 1)[0]
    assert chosen == (float(first[0]),)


def test_proposal_replay_and_cold_start():
    history = [((0.1,), 1.0), ((0.5,), 2.0), ((0.9,), 0.5)]
    a = propose_next(history, 0.3, 16, UNIT, np.random.default_rng(11))
    assert a == propose_next(history, 0.3, 16, UNIT, np.random.default_rng(11))
    cold = propose_next(history[:1], 0.3, 16, UNIT, np.random.default_rng(11))
    assert UNIT.contains(cold)


def test_proposal_maximizes_ratio():
    rng = np.random.default_rng(12)
    history = [((float(x),), math.sin(6 * x)) for x in rng.random(20)]
    chosen = propose_next(history, 0.25, 32, UNIT, np.random.default_rng(4))
    good, bad, _ = densities_for(history, 0.25, UNIT)
    cands = sample_encoded(good, np.random.default_rng(4), 32)
    ratios = acquisition_ratio(cands, good, bad)
    assert chosen == (float(cands[np.argmax(ratios)][0]),)


def test_bimodal_history_proposals_near_good_cluster():
    rng = np.random.default_rng(13)
    good_x = 0.2 + 0.03 * rng.standard_normal(8)
    bad_x = np.r_[0.8 + 0.05 * rng.standard_normal(12), rng.random(10)]
    history = [((float(x),), 1.0 - abs(x - 0.2)) for x in good_x]
    history += [((float(x),), -1.0 - abs(x - 0.2)) for x in bad_x]
    hits = 0
    for seed in range(200):
        x = propose_next(history, 0.25, 64, UNIT, np.random.default_rng(seed))[0]
        hits += 0.1 <= x <= 0.3
    assert hits >= 160


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["exp", "affine", "cube"]))
def test_quantile_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    xs = rng.random(15)
    foms = np.sin(5 * xs)
    f = {"exp": np.exp, "affine": lambda v: 3 * v + 1, "cube": lambda v: v ** 3}[kind]
    h1 = [((float(x),), float(v)) for x, v in zip(xs, foms)]
    h2 = [((float(x),), float(v)) for x, v in zip(xs, f(foms))]
    a = propose_next(h1, 0.2, 16, UNIT, np.random.default_rng(seed))
    b = propose_next(h2, 0.2, 16, UNIT, np.random.default_rng(seed))
    assert a == b


def _mean_pairwise(U):
    d = np.sqrt(((U[:, None, :] - U[None, :, :]) ** 2).sum(-1))
    n = len(U)
    return d.sum() / (n * (n - 1))


@pytest.mark.parametrize("name", ["two_fidelity_bowl", "synthetic_ota"])
def test_larger_gamma_disperses_proposals(name):
    bench = get_benchmark(name)
    space = bench.space
    medians = {}
    for gamma in (0.15, 0.5):
        spreads = []
        for rep in range(10):
            rng = np.random.default_rng([rep, 99])
            configs = [sample_uniform(space, rng) for _ in range(40)]
            history = [(c, bench.fom_spec and _fom(bench, c)) for c in configs]
            props = [propose_next(history, gamma, 16, space, np.random.default_rng([rep, k]))
                     for k in range(200)]
            spreads.append(_mean_pairwise(encode_many(props, space)))
        medians[gamma] = np.median(spreads)
    assert medians[0.5] >= medians[0.15]


def _fom(bench, config):
    from coupledbo.objective import effective_fom
    return effective_fom(evaluate_builtin(bench.name, config, "pre"), bench.fom_spec).effective
