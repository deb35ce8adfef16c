#!/usr/bin/env python3
"""
Tests for Brownian paths, occupation functionals and the path estimators
"""

import math

import numpy as np
import pytest
from scipy import integrate, special

from brownian import (
    OccupationQuery, PathConfig, adaptive_occupation, cutoff_time, exp_moment_estimate,
    exp_moment_mixture_estimate, f_estimate, frozen_path, kr_sample, kr_samples,
    late_window_moment_estimate, occupation_functional, occupation_moment_estimate,
    sample_bridge, sample_path, sample_relative_path, tail_occupation_estimate,
)
from kernels import default_covariance
from montecarlo import ConfigError, DomainError, QueryError, SeedStream, combined_stderr, streams_for


def _endpoints(sampler, cfg, count, *args):
    return np.array([sampler(cfg, *args, SeedStream(5, i)).positions[-1] for i in range(count)])


def test_path_config_validation():
    assert PathConfig(1.0, 0.01).n_steps == 100
    with pytest.raises(ConfigError):
        PathConfig(1.0, 0.0)
    with pytest.raises(ConfigError):
        PathConfig(-1.0, 0.1)
    with pytest.raises(ConfigError):
        PathConfig(1.0, 0.3)
    with pytest.raises(ConfigError):
        PathConfig(1.0, 0.1, dimension=3)


def test_sample_path_shape_and_determinism():
    cfg = PathConfig(1.0, 0.01)
    a = sample_path(cfg, SeedStream(1, 0))
    b = sample_path(cfg, SeedStream(1, 0))
    assert a.times.shape == (101,) and a.positions.shape == (101, 2)
    assert a.times[-1] == 1.0
    np.testing.assert_array_equal(a.positions[0], [0.0, 0.0])
    np.testing.assert_array_equal(a.positions, b.positions)


def test_path_variances():
    cfg = PathConfig(1.0, 0.1)
    free = _endpoints(sample_path, cfg, 4000)
    relative = _endpoints(sample_relative_path, cfg, 4000)
    np.testing.assert_allclose(free.var(axis=0, ddof=1), [1.0, 1.0], rtol=0.1)
    np.testing.assert_allclose(relative.var(axis=0, ddof=1), [2.0, 2.0], rtol=0.1)


def test_bridge_is_pinned():
    cfg = PathConfig(2.0, 0.05)
    endpoint = np.array([1.5, -0.5])
    mids = []
    for i in range(2000):
        path = sample_bridge(cfg, endpoint, SeedStream(9, i))
        np.testing.assert_array_equal(path.positions[-1], endpoint)
        np.testing.assert_array_equal(path.positions[0], [0.0, 0.0])
        mids.append(path.positions[20])
    mids = np.array(mids)
    # midpoint ~ N(y/2, T/4 I)
    se = math.sqrt(0.5 / len(mids))
    assert np.all(np.abs(mids.mean(axis=0) - endpoint / 2) < 4 * se)
    np.testing.assert_allclose(mids.var(axis=0, ddof=1), [0.5, 0.5], rtol=0.12)


def test_occupation_of_frozen_path():
    cov = default_covariance()
    path = frozen_path(1.0, 0.01)
    assert occupation_functional(path, OccupationQuery((0.0, 0.0), (0.0, 1.0))) == pytest.approx(
        cov.r0, rel=1e-12)
    assert occupation_functional(path, OccupationQuery((5.0, 0.0), (0.0, 1.0))) == 0.0


def test_occupation_is_additive_and_mirror_symmetric():
    path = sample_path(PathConfig(1.0, 0.01), SeedStream(3, 0))
    offset = (0.2, -0.1)
    whole = occupation_functional(path, OccupationQuery(offset, (0.0, 1.0)))
    left = occupation_functional(path, OccupationQuery(offset, (0.0, 0.373)))
    right = occupation_functional(path, OccupationQuery(offset, (0.373, 1.0)))
    assert left + right == pytest.approx(whole, abs=1e-12)
    mirrored = occupation_functional(path.mirrored(), OccupationQuery((-0.2, 0.1), (0.0, 1.0)))
    assert mirrored == pytest.approx(whole, rel=1e-12)


def test_occupation_outside_horizon():
    path = frozen_path(1.0, 0.1)
    with pytest.raises(QueryError):
        occupation_functional(path, OccupationQuery((0.0, 0.0), (0.0, 2.0)))
    with pytest.raises(QueryError):
        occupation_functional(path, OccupationQuery((0.0, 0.0), (0.6, 0.4)))


def test_adaptive_occupation_mean_matches_quadrature():
    cov = default_covariance()
    horizon = 4.0
    # E int_0^T R(B_s) ds = int_0^1 r R(r) E1(r^2 / 2T) dr
    exact, _ = integrate.quad(lambda r: r * float(cov.evaluate_radius(r)) * special.exp1(r * r / (2 * horizon)),
                              0.0, 1.0, limit=200)
    occ = adaptive_occupation(cov, (0.0, 0.0), horizon, 1.0, streams_for(2, range(3000)))
    se = occ.std(ddof=1) / math.sqrt(occ.size)
    assert abs(occ.mean() - exact) < 4 * se + 1e-3 * exact


def test_adaptive_occupation_replicas_are_batch_independent():
    cov = default_covariance()
    batch = adaptive_occupation(cov, (0.3, 0.0), 3.0, 2.0, streams_for(4, [0, 1, 2]))
    alone = adaptive_occupation(cov, (0.3, 0.0), 3.0, 2.0, streams_for(4, [1]))
    np.testing.assert_allclose(batch[1], alone[0], rtol=1e-12)


def test_adaptive_occupation_window_errors():
    cov = default_covariance()
    with pytest.raises(QueryError):
        adaptive_occupation(cov, (0.0, 0.0), 1.0, 1.0, streams_for(0, [0]), window_start=2.0)
    with pytest.raises(ConfigError):
        adaptive_occupation(cov, (0.0, 0.0), 0.0, 1.0, streams_for(0, [0]))


def test_kr_sample_frozen_path():
    eps = 0.2
    value = kr_sample(eps, 1.0, (0.0, 0.0), SeedStream(0, 0), frozen=True)
    assert value == pytest.approx(default_covariance().r0 / (eps * eps * math.log(1 / eps)), rel=1e-12)
    with pytest.raises(DomainError):
        kr_sample(1.0, 1.0, (0.0, 0.0), SeedStream(0, 0))
    with pytest.raises(ConfigError):
        kr_sample(0.2, 0.0, (0.0, 0.0), SeedStream(0, 0))


def test_kr_samples_deterministic_and_nonnegative():
    a = kr_samples(0.3, 1.0, (0.0, 0.0), 40, 17, workers=1)
    b = kr_samples(0.3, 1.0, (0.0, 0.0), 40, 17, workers=1)
    np.testing.assert_array_equal(a, b)
    assert np.all(a >= 0.0)


def test_f_estimate_trivial_and_monotone_in_beta():
    report = f_estimate(0.0, 0.3, 1.0, (0.0, 0.0), 50, 1, workers=1)
    assert report.value == 1.0 and report.stderr == 0.0
    values = [f_estimate(b, 0.3, 1.0, (0.0, 0.0), 50, 1, workers=1).value for b in (0.5, 1.0, 1.5)]
    assert 1.0 <= values[0] <= values[1] <= values[2]
    assert f_estimate(1.0, 0.3, 1.0, (0.0, 0.0), 10, 1, workers=1).diagnostics['limit'] == pytest.approx(
        2 * math.pi / (2 * math.pi - 1))


def test_exp_moment_trivial_and_bridge_runs_away():
    assert exp_moment_estimate(0.0, 0.5, 1.0, (0.0, 0.0), replicas=10).value == 1.0
    free = exp_moment_estimate(1.0, 0.5, 1.0, (0.0, 0.0), replicas=500, base_seed=3, workers=1)
    far = exp_moment_estimate(1.0, 0.5, 1.0, (0.0, 0.0), bridge_endpoint=(30.0, 0.0),
                              replicas=500, base_seed=3, workers=1)
    assert far.parameters['paths'] == 'bridge'
    assert far.value < free.value
    assert far.value >= 1.0


def test_mixture_of_bridges_matches_free_paths():
    free = exp_moment_estimate(1.0, 0.5, 1.0, (0.0, 0.0), replicas=2000, base_seed=8, workers=1)
    mixed = exp_moment_mixture_estimate(1.0, 0.5, 1.0, (0.0, 0.0), 2000, 9, workers=1)
    assert abs(free.value - mixed.value) < 4 * combined_stderr(free, mixed)


def test_occupation_moment_frozen_and_order():
    eps, t = 0.5, 1.0
    report = occupation_moment_estimate(2, eps, t, (0.0, 0.0), 5, 0, workers=1, frozen=True)
    expected = (t / eps ** 2 * default_covariance().r0) ** 2
    assert report.value == pytest.approx(expected, rel=1e-12)
    assert report.stderr == pytest.approx(0.0, abs=1e-12 * expected)
    with pytest.raises(ConfigError):
        occupation_moment_estimate(4, eps, t, (0.0, 0.0), 5, 0)


def test_cutoff_time():
    assert cutoff_time(0.1) == pytest.approx(100.0 / math.log(10.0))
    assert cutoff_time(0.1, alpha=2.0) == pytest.approx(100.0 / math.log(10.0) ** 2)
    with pytest.raises(DomainError):
        cutoff_time(1.0)


def test_tail_occupation():
    empty = tail_occupation_estimate(0.5, 1.0, (0.0, 0.0), replicas=10)
    assert empty.value == 0.0
    report = tail_occupation_estimate(0.1, 1.0, (0.0, 0.0), replicas=40, base_seed=2, workers=1)
    assert report.value >= 0.0
    assert report.diagnostics['cutoff_time'] == pytest.approx(cutoff_time(0.1))
    assert report.diagnostics['reference'] == pytest.approx(math.log(math.log(10)) / math.log(10))


def test_late_window_moment():
    report = late_window_moment_estimate(0.3, 0.5, (0.0, 0.0), 100, 4, workers=1)
    assert report.diagnostics['t1'] < report.diagnostics['t2']
    assert report.value >= 0.0
    assert report.diagnostics['ratio'] == pytest.approx(report.value / report.diagnostics['bound'])
