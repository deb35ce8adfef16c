#!/usr/bin/env python3
"""
Tests for the experiment harness: statistics, configs, runs and summaries
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

import harness
from harness import (
    EXPONENTIAL, NORMAL, RunManifest, distribution_test, load_spec, output_paths,
    run_experiment, summarize,
)
from montecarlo import ConfigError, ExperimentError, MergeError


def _manifest(kind, rows, flags=None):
    return RunManifest(spec={'kind': kind}, version='test', started='', finished='',
                       wall_time=0.0, reports=rows, flags=flags or [])


def test_distribution_test_exponential():
    rng = np.random.default_rng(0)
    accepted = distribution_test(rng.exponential(0.5, 2000), EXPONENTIAL, mean=0.5)
    assert accepted.accepted and accepted.n == 2000
    rejected = distribution_test(rng.uniform(0.0, 1.0, 2000), EXPONENTIAL, mean=1.0)
    assert not rejected.accepted
    assert rejected.statistic > 0.3


def test_distribution_test_normal():
    rng = np.random.default_rng(1)
    assert distribution_test(rng.standard_normal(1000), NORMAL).accepted
    assert not distribution_test(rng.exponential(1.0, 1000), NORMAL).accepted


def test_distribution_test_errors():
    with pytest.raises(ConfigError):
        distribution_test(np.ones(10))
    with pytest.raises(ConfigError):
        distribution_test(np.ones(200), 'cauchy')
    with pytest.raises(ConfigError):
        distribution_test(np.random.default_rng(2).standard_normal(200), NORMAL, level=3.0)


def test_load_spec_defaults_and_overrides(tmp_path):
    spec = load_spec('kr')
    assert spec.epsilons == [1e-2, 1e-3]
    assert spec.option('ell') == 1.0
    assert spec.seed == 20180101

    config = tmp_path / 'kr.json'
    config.write_text(json.dumps({'kind': 'kr', 'epsilons': [0.1], 'ell': 2.0,
                                  'options': {'ks_threshold': 0.2}}))
    spec = load_spec('kr', str(config), {'seed': 5, 'out': str(tmp_path), 'replicas': None})
    assert spec.epsilons == [0.1]
    assert spec.option('ell') == 2.0 and spec.option('ks_threshold') == 0.2
    assert spec.seed == 5 and spec.replicas == 2000
    assert output_paths(spec) == (os.path.join(str(tmp_path), 'kr_5.csv'),
                                  os.path.join(str(tmp_path), 'kr_5.json'))


def test_load_spec_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_spec('weather')
    with pytest.raises(ConfigError):
        load_spec('kr', str(tmp_path / 'missing.json'))
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json')
    with pytest.raises(ConfigError):
        load_spec('kr', str(bad))
    other = tmp_path / 'other.json'
    other.write_text(json.dumps({'kind': 'flimit'}))
    with pytest.raises(ConfigError):
        load_spec('kr', str(other))
    with pytest.raises(ConfigError):
        load_spec('kr', overrides={'replicas': 'many'})
    with pytest.raises(ConfigError):
        load_spec('kr').torus()


def test_kernels_check_run_writes_outputs(tmp_path):
    spec = load_spec('kernels-check', overrides={'out': str(tmp_path)})
    manifest = run_experiment(spec)
    assert manifest.passed, manifest.flags
    csv_path, json_path = output_paths(spec)
    table = pd.read_csv(csv_path)
    assert {'quantity', 'estimate', 'stderr', 'seed'} <= set(table.columns)
    assert 'sigma_t2' in set(table['quantity'])
    loaded = RunManifest.from_json(json_path)
    assert loaded.kind == 'kernels-check'
    assert [f['name'] for f in loaded.flags] == [f['name'] for f in manifest.flags]


def test_kr_run_independent_of_worker_count(tmp_path):
    spec = load_spec('kr', overrides={'epsilons': [0.1], 'replicas': 100, 'out': str(tmp_path)})
    serial = run_experiment(spec, workers=1, write=False)
    parallel = run_experiment(spec, workers=2, write=False)
    assert serial.reports == parallel.reports
    assert [f['name'] for f in serial.flags] == ['kr_mean_2pi_window', 'kr_ks_exponential']


def test_failures_carry_the_parameter_point(tmp_path):
    spec = load_spec('she-variance', overrides={'epsilons': [0.1], 'grid': {'L': 0.8, 'n': 16},
                                                'out': str(tmp_path)})
    with pytest.raises(ExperimentError) as excinfo:
        run_experiment(spec, workers=1, write=False)
    assert excinfo.value.point == {'eps': 0.1, 'beta': 0.5}


def test_summarize():
    first = _manifest('flimit', [
        {'quantity': 'f_estimate', 'beta': 1.0, 'eps': 0.01, 'estimate': 1.4, 'relative_gap': 0.2},
        {'quantity': 'f_estimate', 'beta': 1.0, 'eps': 0.1, 'estimate': 1.6, 'relative_gap': 0.3},
    ])
    second = _manifest('flimit', [
        {'quantity': 'f_estimate', 'beta': 1.0, 'eps': 0.001, 'estimate': 1.3, 'relative_gap': 0.1},
    ])
    table = summarize([first, second])
    assert list(table['eps']) == [0.1, 0.01, 0.001]
    assert table['monotone_gap'].all()

    single = summarize([first])
    assert len(single) == 2 and 'monotone_gap' not in single

    with pytest.raises(MergeError):
        summarize([first, _manifest('kr', [])])
    with pytest.raises(MergeError):
        summarize([])


def test_summarize_reads_manifest_files(tmp_path):
    path = tmp_path / 'flimit_1.json'
    _manifest('flimit', [{'quantity': 'f_estimate', 'beta': 1.0, 'eps': 0.1,
                          'estimate': 1.5}]).to_json(str(path))
    assert summarize([str(path)])['estimate'].tolist() == [1.5]


def test_main_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert harness.main(['kr', '--config', 'missing.json']) == 2
    assert harness.main(['kernels-check', '--out', str(tmp_path), '--seed', '3']) == 0
    assert 'sigma_t2_vs_gaussian_oracle' in capsys.readouterr().out
    assert os.path.exists(tmp_path / 'kernels-check_3.json')
    assert harness.main(['summarize', str(tmp_path / 'kernels-check_3.json')]) == 0


TINY = {'epsilons': [0.1], 'grid': {'L': 0.4, 'n': 16}, 't': 0.05, 'dt': 1e-3}


def test_she_variance_reports_wide_torus_bias(tmp_path):
    config = tmp_path / 'she.json'
    config.write_text(json.dumps(dict(TINY, kind='she-variance', replicas=120,
                                      wide_torus={'L': 0.8, 'n': 32, 'eps': 0.1, 'replicas': 120})))
    spec = load_spec('she-variance', str(config), {'out': str(tmp_path)})
    manifest = run_experiment(spec, workers=1, write=False)
    rows = {r['quantity']: r for r in manifest.reports}
    base, wide, bias = rows['she_variance'], rows['she_variance_wide_torus'], rows['wrap_around_bias']
    assert (base['L'], wide['L'], wide['n']) == (0.4, 0.8, 32)
    assert bias['estimate'] == pytest.approx(base['estimate'] / wide['estimate'] - 1.0)
    assert bias['limit'] > 0
    assert bias['relative_gap'] == base['relative_gap']
    assert bias['relative_gap_wide'] == wide['relative_gap']
    assert 'wrap_around_bias_matches_torus' in [f['name'] for f in manifest.flags]


def test_wide_torus_skipped_without_matching_eps(tmp_path):
    config = tmp_path / 'she.json'
    config.write_text(json.dumps(dict(TINY, kind='she-variance', replicas=20)))
    spec = load_spec('she-variance', str(config), {'out': str(tmp_path)})
    manifest = run_experiment(spec, workers=1, write=False)
    assert 'wrap_around_bias' not in [r['quantity'] for r in manifest.reports]


def test_mean_one_flags_probe_stationarity(tmp_path):
    spec = load_spec('mean-one', overrides=dict(TINY, replicas=200, out=str(tmp_path)))
    manifest = run_experiment(spec, workers=1, write=False)
    flags = {f['name']: f for f in manifest.flags}
    for name in ('stationarity_probes_mean', 'stationarity_probes_second_moment'):
        assert flags[name]['threshold'] > 0
        assert flags[name]['value'] >= 0
    rows = {r['quantity']: r for r in manifest.reports}
    assert rows['probe_b_mean']['probe_a'] == pytest.approx(rows['mean_u_probe']['estimate'])


def test_gaussianity_flags_resolution_stability(tmp_path):
    spec = load_spec('gaussianity', overrides=dict(TINY, replicas=100, out=str(tmp_path)))
    manifest = run_experiment(spec, workers=1, write=False)
    rows = [r for r in manifest.reports if r['quantity'] == 'resolution_ks']
    assert len(rows) == 1 and (rows[0]['n'], rows[0]['n_fine']) == (16, 32)
    flag = [f for f in manifest.flags if f['name'] == 'resolution_stability_ks'][0]
    assert flag['value'] == rows[0]['estimate'] and flag['threshold'] == 0.1
