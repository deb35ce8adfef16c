#!/usr/bin/env python3
"""
Tests for the stochastic heat equation solver and its ensemble estimators
"""

import math

import numpy as np
import pytest

from kernels import GAUSSIAN, Mollifier, TestFunction
from montecarlo import ConfigError, NumericalFailure, SeedStream, combined_stderr
from noise_field import TorusGrid, mollify_slice, sample_increment_slice, stencil_for
from she_solver import (
    ENSEMBLE_COLUMNS, FieldState, SheConfig, ensemble_observables, ensemble_variance,
    fk_partition_estimate, gaussianity_sample, heat_halfstep, negative_moment_estimate,
    noise_multiply_step, observable_X, observable_linear, probe_stationarity, resolution_stability,
    second_moment_estimate, second_moment_path_estimate, simulate,
)

SMALL = TorusGrid(0.4, 16)


def _cfg(beta=1.0, t=0.05, replicas=400, seed=11):
    return SheConfig(beta, 0.1, t, SMALL, dt=1e-3, replicas=replicas, base_seed=seed)


@pytest.fixture(scope='module')
def small_table():
    cfg = _cfg(beta=0.5)
    return cfg, ensemble_observables(cfg, TestFunction(GAUSSIAN, 0.1), workers=1)


def test_config_rounds_dt_to_hit_final_time():
    cfg = SheConfig(0.5, 0.1, 0.05, SMALL, dt=0.003)
    assert cfg.steps == 17
    assert cfg.dt * cfg.steps == pytest.approx(0.05)
    assert cfg.beta_eps == pytest.approx(0.5 / math.sqrt(math.log(10)))
    with pytest.raises(ConfigError):
        SheConfig(0.5, 0.1, 0.0, SMALL)
    with pytest.raises(ConfigError):
        SheConfig(0.5, 0.1, 0.05, TorusGrid(0.4, 8))


def test_heat_step_keeps_constants_and_damps_modes():
    grid = TorusGrid(1.0, 32)
    flat = FieldState(grid, 0.0, np.full((32, 32), 2.5))
    np.testing.assert_array_equal(heat_halfstep(flat, 0.1).u, flat.u)

    x = grid.coordinates()
    mode = np.cos(2 * math.pi * x)[:, None] * np.ones((1, 32))
    state = heat_halfstep(FieldState(grid, 0.0, 1.0 + mode), 0.01)
    decay = math.exp(-0.5 * (2 * math.pi) ** 2 * 0.01)
    np.testing.assert_allclose(state.u, 1.0 + decay * mode, atol=1e-12)
    assert state.time == 0.01


def test_heat_step_conserves_mass():
    grid = TorusGrid(1.0, 32)
    blob = np.zeros((32, 32))
    blob[16, 16] = 1.0
    smoothed = heat_halfstep(FieldState(grid, 0.0, blob), 0.02).u
    assert smoothed.sum() == pytest.approx(1.0, abs=1e-12)
    assert smoothed.max() < 1.0


def test_noise_step():
    grid = TorusGrid(0.8, 64)
    m, eps = Mollifier(), 0.1
    state = FieldState.flat(grid)
    noise = mollify_slice(sample_increment_slice(grid, 1e-3, SeedStream(1, 0)), m, eps)
    assert noise_multiply_step(state, noise, 0.0) is state
    with pytest.raises(ConfigError):
        noise_multiply_step(FieldState.flat(SMALL), noise, 0.5)

    gen = SeedStream(1, 1).generator()
    stencil = stencil_for(grid, m, eps)
    factors = [noise_multiply_step(state, mollify_slice(sample_increment_slice(grid, 1e-3, gen),
                                                        m, eps, stencil), 0.5).u.mean()
               for _ in range(200)]
    assert np.mean(factors) == pytest.approx(1.0, abs=0.02)


def test_simulate_without_coupling_stays_flat():
    cfg = _cfg(beta=0.0)
    state = simulate(cfg, SeedStream(0, 0))
    np.testing.assert_array_equal(state.u, np.ones((16, 16)))
    assert state.time == cfg.t_final
    assert state.noise is None
    recorded = simulate(cfg, SeedStream(0, 0), record_noise=True)
    assert len(recorded.noise) == cfg.steps
    np.testing.assert_array_equal(recorded.u, np.ones((16, 16)))


def test_simulate_positive_and_deterministic():
    cfg = _cfg(beta=1.0)
    a = simulate(cfg, SeedStream(3, 0))
    b = simulate(cfg, SeedStream(3, 0))
    assert np.all(a.u > 0)
    np.testing.assert_array_equal(a.u, b.u)
    assert not np.array_equal(a.u, simulate(cfg, SeedStream(3, 1)).u)


def test_observables():
    g = TestFunction(GAUSSIAN, 0.1)
    flat = FieldState.flat(SMALL)
    assert observable_X(flat, g) == 0.0
    assert observable_linear(flat, g) == 0.0

    state = simulate(_cfg(), SeedStream(4, 0))
    k = 3
    shifted = FieldState(SMALL, state.time, np.roll(state.u, k, axis=0))
    g_shifted = TestFunction(GAUSSIAN, 0.1, (k * SMALL.spacing, 0.0))
    assert observable_X(shifted, g_shifted) == pytest.approx(observable_X(state, g), rel=1e-12)

    broken = FieldState(SMALL, 0.0, np.ones((16, 16)))
    broken.u[2, 3] = 0.0
    with pytest.raises(NumericalFailure):
        observable_X(broken, g)


def test_ensemble_table(small_table):
    cfg, table = small_table
    assert list(table.columns) == ['replica'] + ENSEMBLE_COLUMNS
    assert len(table) == 400
    # Ito solution has unit mean
    u = table['u_probe'].to_numpy()
    assert abs(u.mean() - 1.0) < 4 * u.std(ddof=1) / math.sqrt(u.size)


def test_ensemble_table_independent_of_workers(small_table):
    cfg, table = small_table
    again = ensemble_observables(cfg, TestFunction(GAUSSIAN, 0.1), replicas=6, workers=2)
    np.testing.assert_array_equal(again[ENSEMBLE_COLUMNS].to_numpy(),
                                  table[ENSEMBLE_COLUMNS].to_numpy()[:6])


def test_ensemble_variance(small_table):
    cfg, table = small_table
    g = TestFunction(GAUSSIAN, 0.1)
    report = ensemble_variance(cfg, g, table=table)
    assert report.value > 0 and report.stderr > 0
    assert report.replicas == 400
    assert report.diagnostics['sigma_t2_torus'] > 0
    assert report.diagnostics['linear_variance'] > 0

    trivial = ensemble_variance(_cfg(beta=0.0), g, replicas=10)
    assert trivial.value == 0.0 and trivial.diagnostics['relative_gap'] == 1.0
    with pytest.raises(ConfigError):
        ensemble_variance(cfg, g, replicas=1)


def test_gaussianity_sample(small_table):
    cfg, table = small_table
    g = TestFunction(GAUSSIAN, 0.1)
    sample = gaussianity_sample(cfg, g, table=table)
    assert not sample.degenerate
    assert sample.values.mean() == pytest.approx(0.0, abs=1e-12)
    assert sample.values.std(ddof=1) == pytest.approx(1.0)
    assert gaussianity_sample(_cfg(beta=0.0), g, replicas=100).degenerate
    with pytest.raises(ConfigError):
        gaussianity_sample(cfg, g, replicas=50)


def test_negative_moments(small_table):
    cfg, table = small_table
    u = table['u_probe'].to_numpy()
    first = negative_moment_estimate(cfg, 1, table=table)
    assert first.value >= 1.0 / u.mean()
    assert negative_moment_estimate(cfg, 2, table=table).value >= first.value ** 2
    assert negative_moment_estimate(_cfg(beta=0.0), 3, replicas=10).value == 1.0
    with pytest.raises(ConfigError):
        negative_moment_estimate(cfg, 5, table=table)
    with pytest.raises(ConfigError):
        negative_moment_estimate(_cfg(beta=1.0), 1, table=table)


def test_second_moment_matches_path_average():
    cfg = _cfg(beta=1.0, seed=21)
    ensemble = second_moment_estimate(cfg, workers=1)
    paths = second_moment_path_estimate(cfg, 4000, SeedStream(5, 0))
    assert paths.value > 1.0
    assert abs(ensemble.value - paths.value) < 3 * combined_stderr(ensemble, paths)
    assert second_moment_path_estimate(_cfg(beta=0.0), 10, SeedStream(5, 0)).value == 1.0
    with pytest.raises(ConfigError):
        second_moment_path_estimate(cfg, 1, SeedStream(5, 0))


def test_feynman_kac_matches_solver():
    cfg = _cfg(beta=0.5)
    state = simulate(cfg, SeedStream(6, 0), record_noise=True)
    report = fk_partition_estimate(cfg, state.noise, 4000, SeedStream(6, 1))
    assert abs(report.value - state.probe()) < 3 * report.stderr
    assert report.diagnostics['cutoff_time'] == pytest.approx(1.0 / math.log(10))
    assert report.diagnostics['late_slices'] == cfg.steps
    assert report.diagnostics['late_noise_estimate'] == pytest.approx(report.value)

    more = fk_partition_estimate(cfg, state.noise, 16000, SeedStream(6, 1))
    assert more.stderr < 0.8 * report.stderr


def test_feynman_kac_edge_cases():
    trivial = _cfg(beta=0.0)
    assert fk_partition_estimate(trivial, [np.zeros((16, 16))] * trivial.steps, 10,
                                 SeedStream(0, 0)).value == 1.0
    cfg = _cfg(beta=0.5)
    with pytest.raises(ConfigError):
        fk_partition_estimate(cfg, [np.zeros((16, 16))] * 3, 10, SeedStream(0, 0))
    with pytest.raises(ConfigError):
        fk_partition_estimate(cfg, None, 10, SeedStream(0, 0))


def test_feynman_kac_late_window_uses_last_slices():
    # t_final beyond 1/|log eps|: only the last j_cut slices enter the late average
    cfg = SheConfig(0.5, 0.1, 0.6, SMALL, dt=0.01, replicas=1, base_seed=12)
    state = simulate(cfg, SeedStream(12, 0), record_noise=True)
    report = fk_partition_estimate(cfg, state.noise, 2000, SeedStream(12, 1))
    late = report.diagnostics['late_slices']
    assert late == 44 and late < cfg.steps
    assert report.diagnostics['late_noise_estimate'] != pytest.approx(report.value, rel=1e-6)

    short = SheConfig(0.5, 0.1, late * cfg.dt, SMALL, dt=cfg.dt, replicas=1, base_seed=12)
    assert short.steps == late
    window = fk_partition_estimate(short, state.noise[cfg.steps - late:], 2000, SeedStream(12, 1))
    assert report.diagnostics['late_noise_estimate'] == pytest.approx(window.value, rel=1e-9)


def test_probe_stationarity(small_table):
    cfg, table = small_table
    check = probe_stationarity(table)
    assert list(check['statistic']) == ['mean', 'second_moment']
    assert check['passed'].all(), check
    assert check.loc[0, 'probe_a'] == pytest.approx(table['u_probe'].mean())

    shifted = table.copy()
    shifted['u_probe_b'] = shifted['u_probe_b'] + 0.5
    assert not probe_stationarity(shifted)['passed'].any()
    with pytest.raises(ConfigError):
        probe_stationarity(table.head(1))


def test_resolution_stability(small_table):
    cfg, table = small_table
    check = resolution_stability(cfg, TestFunction(GAUSSIAN, 0.1), table=table, workers=1)
    assert (check.coarse_n, check.fine_n) == (16, 32)
    assert check.replicas == 400 and len(check.fine_table) == 400
    assert check.statistic < 0.15
    assert check.pvalue > 1e-3
