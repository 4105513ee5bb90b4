from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixfbm import rng as mrng
from mixfbm.errors import CovarianceError, EulerDivergenceError
from mixfbm.mcstudy import normality_test
from mixfbm.sim import (
    DegenerateEffect,
    GaussianEffect,
    GeneralDrift,
    LinearMultiplier,
    SamplePath,
    SubjectPanel,
    TabulatedDensity,
    TimeGrid,
    fbm_increments,
    fgn_factor,
    gauss_hermite_density,
    lipschitz_estimate,
    mixed_driver_increments,
    parse_drift,
    sample_effects,
    simulate_bm,
    simulate_fbm,
    simulate_mixed_fbm,
    simulate_panel,
)


def fbm_cov(s, t, H):
    return 0.5 * (s ** (2 * H) + t ** (2 * H) - np.abs(s - t) ** (2 * H))


# ---- grid and paths ------------------------------------------------------------------
@given(st.floats(0.01, 100.0), st.integers(1, 400))
def test_grid_invariants(T, n):
    g = TimeGrid(T, n)
    p = g.points
    assert p[0] == 0.0 and p[-1] == T
    assert np.all(np.diff(p) > 0)
    assert np.allclose(np.diff(p), g.dt, rtol=1e-12, atol=0)


@pytest.mark.parametrize("T,n", [(0.0, 10), (-1.0, 10), (float("inf"), 10), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects_bad_input(T, n):
    with pytest.raises(ValueError):
        TimeGrid(T, n)


def test_sample_path_validation():
    g = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        SamplePath(g, np.zeros(4))
    with pytest.raises(ValueError):
        SamplePath(g, [0, 1, np.nan, 0, 0])


def test_time_strings_round_trip():
    g = TimeGrid(0.7, 30)
    assert [float(s) for s in g.time_strings()] == list(g.points)


# ---- effects ---------------------------------------------------------------------------
def test_degenerate_effect_copies(rng):
    assert sample_effects(DegenerateEffect(2.0), 3, rng).tolist() == [2.0, 2.0, 2.0]


def test_zero_variance_gaussian(rng):
    assert sample_effects(GaussianEffect(1.0, 0.0), 5, rng).tolist() == [1.0] * 5


def test_gaussian_effect_sample_mean(rng):
    x = sample_effects(GaussianEffect(0.0, 1.0), 100_000, rng)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.02


def test_effect_validation():
    with pytest.raises(ValueError):
        GaussianEffect(0.0, -1.0)
    with pytest.raises(ValueError):
        TabulatedDensity((0.0, 1.0), (0.5, 0.6))
    with pytest.raises(ValueError):
        TabulatedDensity((0.0, 1.0), (1.5, -0.5))


def test_tabulated_sampling_frequencies(rng):
    x = sample_effects(TabulatedDensity((-1.0, 2.0), (0.25, 0.75)), 40_000, rng)
    assert set(np.unique(x)) == {-1.0, 2.0}
    assert abs(np.mean(x == 2.0) - 0.75) < 4 * np.sqrt(0.75 * 0.25 / 40_000)


def test_gauss_hermite_density_moments():
    d = gauss_hermite_density(lambda x: -0.5 * (x - 1.0) ** 2 / 0.25, 1.0, 0.5)
    nodes, w = np.asarray(d.nodes), np.asarray(d.weights)
    assert abs(w.sum() - 1) < 1e-12
    assert abs(nodes @ w - 1.0) < 1e-10
    assert abs(((nodes - 1) ** 2) @ w - 0.25) < 1e-10


# ---- drifts ----------------------------------------------------------------------------
def test_parse_drift():
    assert parse_drift("identity").name == "identity"
    c = parse_drift("constant:1.5")
    assert c.base(np.array([0.0, 3.0])).tolist() == [1.5, 1.5]
    with pytest.raises(ValueError):
        parse_drift("constant")
    with pytest.raises(ValueError):
        parse_drift("cosine")


def test_builtin_drifts():
    x = np.linspace(-3, 3, 7)
    assert np.allclose(LinearMultiplier("sine").base(x), np.sin(x))
    assert np.allclose(LinearMultiplier("logistic").base(x), 1 / (1 + np.exp(-x)))
    assert np.allclose(LinearMultiplier("bump").base(x), 1 / (1 + x**2))
    tab = LinearMultiplier("tabulated", table=([0.0, 1.0], [0.0, 2.0]))
    assert np.allclose(tab.base([-1.0, 0.5, 3.0]), [0.0, 1.0, 2.0])


def test_lipschitz_estimate():
    assert lipschitz_estimate(LinearMultiplier("sine"), -5, 5) == pytest.approx(1.0, abs=1e-5)
    assert lipschitz_estimate(GeneralDrift(lambda x, p: p * x**2), 0, 2, psi=1.0) == pytest.approx(4.0, abs=1e-2)


# ---- Gaussian drivers ------------------------------------------------------------------
def test_fbm_half_is_brownian():
    g = TimeGrid(2.0, 16)
    L = fgn_factor(g, 0.5)
    assert np.allclose(L, np.sqrt(g.dt) * np.eye(16))


@pytest.mark.parametrize("H", [0.3, 0.6, 0.75, 0.9])
def test_fbm_exact_covariance_from_factor(H):
    # the factor reproduces the level covariance exactly
    g = TimeGrid(1.5, 20)
    L = fgn_factor(g, H)
    C = np.cumsum(np.cumsum(L @ L.T, axis=0), axis=1)
    t = g.points[1:]
    assert np.allclose(C, fbm_cov(t[:, None], t[None, :], H), atol=1e-12)
    assert np.allclose(np.diag(C), t ** (2 * H), atol=1e-12)


def test_fbm_empirical_covariance_h075():
    g = TimeGrid(1.0, 32)
    H, M = 0.75, 20_000
    z = np.random.default_rng(7).standard_normal((M, 32))
    x = np.cumsum(fbm_increments(g, H, z), axis=1)
    t = g.points[1:]
    prod = x[:, :, None] * x[:, None, :]
    emp = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(M)
    assert np.all(np.abs(emp - fbm_cov(t[:, None], t[None, :], H)) <= 4 * se)


def test_covariance_error_on_ill_conditioned_grid():
    with pytest.raises(CovarianceError) as exc:
        fgn_factor(TimeGrid(1.0, 200), 0.99999999999)
    assert "eigenvalue" in str(exc.value)


def test_simulate_paths_start_at_zero(rng):
    g = TimeGrid(1.0, 10)
    for path in (simulate_fbm(g, 0.7, rng), simulate_bm(g, rng), simulate_mixed_fbm(g, 0.7, rng)):
        assert path.values[0] == 0.0 and path.values.shape == (11,)


@pytest.mark.parametrize("H,expected", [(0.5, 2.0), (0.75, 2.0)])
def test_mixed_variance_at_one(H, expected):
    g = TimeGrid(1.0, 8)
    x = mixed_driver_increments(g, H, 3, range(20_000)).sum(axis=1)
    assert abs(x.var() - expected) < 4 * np.sqrt(2 * expected**2 / 20_000)


def test_mixed_components_independent():
    g = TimeGrid(1.0, 16)
    bm, fbm = mixed_driver_increments(g, 0.7, 11, range(10_000), split=True)
    a, b = bm.sum(axis=1), fbm.sum(axis=1)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 4 / np.sqrt(10_000)


# ---- panels -------------------------------------------------------------------------------
def test_zero_drift_panel_is_driver_plus_start():
    g = TimeGrid(1.0, 20)
    p = simulate_panel(g, 0.7, parse_drift("constant:0"), GaussianEffect(1.0, 1.0), 4, x0=1.5, seed=9, keep_driver=True)
    assert np.allclose(p.values, 1.5 + p.driver, rtol=0, atol=1e-13)


def test_zero_effect_same_as_zero_drift():
    g = TimeGrid(1.0, 20)
    a = simulate_panel(g, 0.7, LinearMultiplier("identity"), DegenerateEffect(0.0), 3, seed=4)
    b = simulate_panel(g, 0.7, parse_drift("constant:0"), DegenerateEffect(0.0), 3, seed=4)
    assert np.array_equal(a.values, b.values)


def test_panel_reproducible_and_subject_keyed():
    g = TimeGrid(1.0, 25)
    d = LinearMultiplier("sine")
    a = simulate_panel(g, 0.6, d, GaussianEffect(0.5, 1.0), 6, seed=21)
    b = simulate_panel(g, 0.6, d, GaussianEffect(0.5, 1.0), 6, seed=21)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.effects, b.effects)
    part = simulate_panel(g, 0.6, d, GaussianEffect(0.5, 1.0), 6, seed=21, subjects=[4, 5])
    assert np.array_equal(part.values, a.values[4:])
    other = simulate_panel(g, 0.6, d, GaussianEffect(0.5, 1.0), 6, seed=21, replicate=1)
    assert not np.array_equal(other.values, a.values)


def test_per_subject_start_values():
    g = TimeGrid(1.0, 5)
    p = simulate_panel(g, 0.7, LinearMultiplier("identity"), DegenerateEffect(-1.0), 3, x0=[0.0, 1.0, 2.0], seed=1)
    assert p.values[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_euler_against_straight_line_oracle():
    # independent loop implementation of the Euler recursion on the same driver draws
    g = TimeGrid(1.0, 40)
    H, M, seed = 0.6, 5000, 17
    panel = simulate_panel(g, H, LinearMultiplier("identity"), DegenerateEffect(-1.0), M, seed=seed)
    inc = mixed_driver_increments(g, H, seed, range(M))
    x = np.zeros(M)
    for k in range(g.n_steps):
        x = x + (-1.0 * x) * g.dt + inc[:, k]
    assert np.allclose(panel.values[:, -1], x, rtol=0, atol=1e-12)
    # and the Monte Carlo mean of X_T agrees with the oracle mean within its error
    se = np.std(x, ddof=1) / np.sqrt(M)
    assert abs(panel.values[:, -1].mean() - x.mean()) <= 4 * se


def test_euler_divergence_reports_subjects():
    g = TimeGrid(1.0, 50)
    drift = GeneralDrift(lambda x, p: p * np.exp(x * x))
    with pytest.raises(EulerDivergenceError) as exc:
        simulate_panel(g, 0.7, drift, TabulatedDensity((0.0, 50.0), (0.5, 0.5)), 6, x0=1.0, seed=2)
    assert exc.value.failures
    assert all(0 <= s < 6 for s in exc.value.failures)


def test_panel_validation():
    g = TimeGrid(1.0, 5)
    with pytest.raises(ValueError):
        SubjectPanel(g, np.zeros((2, 6)), 0.4)
    with pytest.raises(ValueError):
        SubjectPanel(g, np.zeros((2, 6)), 0.7, effects=[1.0])
    with pytest.raises(ValueError):
        simulate_panel(g, 0.3, LinearMultiplier("identity"), DegenerateEffect(0.0), 2)


def test_zero_drift_linear_functional_is_gaussian():
    g = TimeGrid(1.0, 20)
    p = simulate_panel(g, 0.7, parse_drift("constant:0"), DegenerateEffect(0.0), 2000, seed=5)
    functional = p.values @ np.linspace(1.0, -0.5, 21)
    assert normality_test(functional).p_value > 0.01


def test_substreams_are_distinct():
    a = mrng.substream(1, mrng.PANEL, 0, 0, mrng.BROWNIAN).standard_normal(4)
    b = mrng.substream(1, mrng.PANEL, 0, 0, mrng.FRACTIONAL).standard_normal(4)
    c = mrng.substream(1, mrng.PANEL, 0, 1, mrng.BROWNIAN).standard_normal(4)
    d = mrng.substream(1, mrng.PANEL, 0, 0, mrng.BROWNIAN).standard_normal(4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(a, d)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 12))
def test_subject_order_does_not_matter(seed, N):
    g = TimeGrid(1.0, 6)
    full = mixed_driver_increments(g, 0.7, seed, range(N))
    rev = mixed_driver_increments(g, 0.7, seed, range(N - 1, -1, -1))
    assert np.array_equal(full, rev[::-1])
