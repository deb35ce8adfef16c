#!/usr/bin/env python3
"""
Experiment harness for the KPZ/EW laboratory

Statistics toolkit (KS / Anderson-Darling), experiment specs with JSON
configuration, per-kind runners that collect EstimateReports and pass/fail
flags, long-format CSV + JSON manifest output, and summaries across runs.

Usage:
    python harness.py <kind> [--config PATH] [--seed N] [--out DIR] [--replicas N] [--workers N]
    python harness.py summarize results/flimit_20180101.json ...
"""

import os
import sys
import copy
import json
import math
import time
import logging
import argparse
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

import settings
import brownian
import kernels
import limit_analysis
import noise_field
import she_solver
from montecarlo import (
    ConfigError, DomainError, ExperimentError, KpzLabError, MergeError, SeedStream,
    combined_stderr,
)

logger = logging.getLogger(__name__)

KS_THRESHOLD = 0.1
AD_LEVEL = 1.0
MIN_SAMPLE = 100
FLOAT_FORMAT = '%.17g'

EXPONENTIAL = 'exponential'
NORMAL = 'standard-normal'


@dataclass
class DistributionResult:
    reference: str
    statistic: float
    threshold: float
    accepted: bool
    n: int
    pvalue: Optional[float] = None


def distribution_test(sample: Sequence[float], reference: str = EXPONENTIAL, mean: float = 1.0,
                      ks_threshold: float = KS_THRESHOLD, level: float = AD_LEVEL) -> DistributionResult:
    """
    Goodness of fit against a pinned exponential law or the normal family

    Parameters:
    - sample: Observations
    - reference: 'exponential' (KS distance to Exp with the given mean) or
      'standard-normal' (Anderson-Darling, location and scale estimated)
    - mean: Mean of the reference exponential
    - ks_threshold: KS distance accepted for the exponential case
    - level: Anderson-Darling significance level in percent

    Returns:
    - DistributionResult
    """
    x = np.asarray(sample, dtype=float)
    if x.size < MIN_SAMPLE:
        raise ConfigError(f"Distribution test needs at least {MIN_SAMPLE} samples, got {x.size}")
    if reference == EXPONENTIAL:
        result = stats.kstest(x, 'expon', args=(0.0, mean))
        stat = float(result.statistic)
        return DistributionResult(reference, stat, ks_threshold, stat < ks_threshold, x.size,
                                  float(result.pvalue))
    if reference == NORMAL:
        result = stats.anderson(x, dist='norm')
        levels = list(result.significance_level)
        if level not in levels:
            raise ConfigError(f"Anderson-Darling level {level}% not tabulated; choose from {levels}")
        critical = float(result.critical_values[levels.index(level)])
        stat = float(result.statistic)
        return DistributionResult(reference, stat, critical, stat < critical, x.size)
    raise ConfigError(f"Unknown reference distribution: {reference}")


KINDS = (
    'kernels-check', 'kr', 'flimit', 'moments', 'pde', 'she-variance', 'gaussianity',
    'negmoments', 'crosscheck', 'noise-cov', 'mean-one',
)

BASE_DEFAULTS = {
    'beta': 0.5,
    'epsilons': [0.1],
    't': 1.0,
    'grid': None,
    'dt': None,
    'replicas': 500,
    'seed': None,
    'out': None,
}

KIND_DEFAULTS = {
    'kernels-check': {'beta': 1.0, 'epsilons': [], 'replicas': 1},
    'kr': {'beta': 0.0, 'epsilons': [1e-2, 1e-3], 'replicas': 2000, 'ell': 1.0},
    'flimit': {'beta': 1.0, 'epsilons': [1e-2, 1e-3, 1e-4], 'replicas': 2000, 'ell': 1.0},
    'moments': {'beta': 0.5, 'epsilons': [1e-2, 1e-3, 1e-4], 'replicas': 500,
                'x': [0.5, 0.0], 'exp_epsilons': [0.1, 0.05, 0.02]},
    'pde': {'beta': 1.0, 'epsilons': [1e-3], 'replicas': 2000, 'ell': 1.0,
            'prediction_epsilons': [1e-2, 1e-3], 'refinement_horizon': 4.0},
    'she-variance': {'beta': 0.5, 'epsilons': [0.1, 0.05, 0.025], 'grid': {'L': 0.8, 'n': 128},
                     'dt': 1e-3, 'replicas': 500, 'g_scale': 0.1, 'gaussianity_eps': 0.05,
                     'wide_torus': {'L': 1.6, 'n': 256, 'eps': 0.025, 'replicas': 200}},
    'gaussianity': {'beta': 0.5, 'epsilons': [0.05], 'grid': {'L': 0.8, 'n': 64},
                    'dt': 1e-3, 'replicas': 500, 'g_scale': 0.1, 'resolution_check': True},
    'negmoments': {'beta': 0.3, 'epsilons': [0.2, 0.1, 0.05], 't': 0.5,
                   'grid': {'L': 0.8, 'n': 64}, 'dt': 1e-3, 'replicas': 1000},
    'crosscheck': {'beta': 0.3, 'epsilons': [0.1], 't': 0.25, 'grid': {'L': 0.8, 'n': 32},
                   'replicas': 2000, 'paths': 10000},
    'noise-cov': {'beta': 0.0, 'epsilons': [0.1], 'grid': {'L': 0.8, 'n': 64}, 'dt': 1e-3,
                  'replicas': 10000},
    'mean-one': {'beta': 0.5, 'epsilons': [0.1], 't': 0.5, 'grid': {'L': 1.6, 'n': 64}, 'dt': 1e-3,
                 'replicas': 10000},
}


@dataclass
class ExperimentSpec:
    """Everything a run depends on; serialized verbatim into its outputs"""
    kind: str
    beta: float
    epsilons: List[float]
    t: float
    grid: Optional[Dict]
    dt: Optional[float]
    replicas: int
    seed: int
    out: str
    options: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    def torus(self, eps: float = None) -> noise_field.TorusGrid:
        if not self.grid:
            raise ConfigError(f"Experiment kind {self.kind} needs a grid {{L, n}}")
        return noise_field.TorusGrid(float(self.grid['L']), int(self.grid['n']))

    def option(self, key: str, default=None):
        return self.options.get(key, KIND_DEFAULTS.get(self.kind, {}).get(key, default))


def load_spec(kind: str, config_file: str = None, overrides: Dict = None) -> ExperimentSpec:
    """Merge a JSON config over the per-kind defaults; unknown keys go to options"""
    if kind not in KINDS:
        raise ConfigError(f"Unknown experiment kind: {kind} (choose from {', '.join(KINDS)})")
    merged = copy.deepcopy(BASE_DEFAULTS)
    options = {}
    for key, value in KIND_DEFAULTS[kind].items():
        (merged if key in BASE_DEFAULTS else options)[key] = copy.deepcopy(value)

    if config_file:
        if not os.path.exists(config_file):
            raise ConfigError(f"Config file not found: {config_file}")
        with open(config_file, 'r') as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid JSON in {config_file}: {e}")
        if loaded.get('kind', kind) != kind:
            raise ConfigError(f"Config is for kind {loaded['kind']}, not {kind}")
        for key, value in loaded.items():
            if key == 'kind':
                continue
            if key in BASE_DEFAULTS:
                merged[key] = value
            elif key == 'options' and isinstance(value, dict):
                options.update(value)
            else:
                options[key] = value

    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    try:
        return ExperimentSpec(
            kind=kind,
            beta=float(merged['beta']),
            epsilons=[float(e) for e in merged['epsilons']],
            t=float(merged['t']),
            grid=merged['grid'],
            dt=None if merged['dt'] is None else float(merged['dt']),
            replicas=int(merged['replicas']),
            seed=int(settings.DEFAULT_SEED if merged['seed'] is None else merged['seed']),
            out=merged['out'] or settings.OUTPUT_DIR,
            options=options,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid experiment parameter: {e}")


@dataclass
class RunManifest:
    spec: Dict
    version: str
    started: str
    finished: str
    wall_time: float
    reports: List[Dict] = field(default_factory=list)
    flags: List[Dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(f['passed'] for f in self.flags)

    @property
    def kind(self) -> str:
        return self.spec['kind']

    def to_json(self, path: str) -> None:
        with open(path, 'w') as f:
            json.dump(asdict(self), f, indent=2, default=_json_default)

    @classmethod
    def from_json(cls, path: str) -> 'RunManifest':
        with open(path, 'r') as f:
            data = json.load(f)
        return cls(**data)


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return str(value)


def _flag(name: str, value: float, threshold, passed: bool, **point) -> Dict:
    return {'name': name, 'value': value, 'threshold': threshold, 'passed': bool(passed), **point}


class _Run:
    """Collects rows and flags for one experiment"""

    def __init__(self, spec: ExperimentSpec, workers: Optional[int]):
        self.spec = spec
        self.workers = workers
        self.rows: List[Dict] = []
        self.flags: List[Dict] = []

    def row(self, report, quantity: str, **extra) -> Dict:
        row = report.to_row(quantity) if hasattr(report, 'to_row') else dict(report, quantity=quantity)
        row.update(extra)
        row.setdefault('beta', self.spec.beta)
        row.setdefault('eps', None)
        row.setdefault('t', self.spec.t)
        row.setdefault('replicas', self.spec.replicas)
        row['seed'] = self.spec.seed
        self.rows.append(row)
        return row

    def value_row(self, quantity: str, value: float, stderr: float = 0.0, **extra) -> Dict:
        return self.row({'estimate': value, 'stderr': stderr}, quantity, **extra)

    def flag(self, name: str, value, threshold, passed: bool, **point) -> None:
        self.flags.append(_flag(name, value, threshold, passed, **point))
        status = "✅" if passed else "❌"
        logger.info(f"{status} {name}: {value} (threshold {threshold})")


@contextmanager
def _point(kind: str, **point):
    try:
        yield
    except ExperimentError:
        raise
    except KpzLabError as e:
        raise ExperimentError(f"{kind} failed at {point}: {e}", point) from e


def _monotone_shrinking(gaps: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(gaps, gaps[1:]))


def _max_min_ratio(values: Sequence[float]) -> float:
    values = [abs(v) for v in values]
    return max(values) / min(values) if min(values) > 0 else float('inf')


def _run_kernels_check(run: _Run) -> None:
    """Deterministic kernel suite"""
    g = kernels.TestFunction(kernels.GAUSSIAN, 1.0)
    worst = 0.0
    for t in (0.5, 1.0, 2.0):
        value = kernels.sigma_t_squared(g, t, 0.0)
        oracle = kernels.gaussian_sigma_oracle(t)
        worst = max(worst, abs(value - oracle) / oracle)
        run.value_row('sigma_t2', value, t=t, beta=0.0, oracle=oracle, replicas=0)
    run.flag('sigma_t2_vs_gaussian_oracle', worst, 1e-6, worst < 1e-6)

    nu2 = kernels.effective_variance(1.0)
    exact = 2 * math.pi / (2 * math.pi - 1)
    run.value_row('effective_variance', nu2, beta=1.0, replicas=0)
    run.flag('effective_variance_beta1', abs(nu2 - exact), 1e-15, abs(nu2 - exact) <= 1e-15)
    try:
        kernels.effective_variance(math.sqrt(2 * math.pi))
        supercritical_raises = False
    except DomainError:
        supercritical_raises = True
    run.flag('supercritical_domain_error', supercritical_raises, True, supercritical_raises)

    # Chapman-Kolmogorov by product trapezoid on 256^2
    side, n = 16.0, 256
    x = (np.arange(n) - n // 2) * side / n
    xx, yy = np.meshgrid(x, x, indexing='ij')
    pts = np.stack([xx, yy], axis=-1)
    conv = math.fsum((kernels.heat_kernel(0.5, pts) ** 2).ravel()) * (side / n) ** 2
    ck_error = abs(conv - kernels.heat_kernel_eval(kernels.HeatKernelQuery(1.0)))
    run.value_row('chapman_kolmogorov_error', ck_error, replicas=0)
    run.flag('heat_semigroup', ck_error, 1e-8, ck_error < 1e-8)

    grid = noise_field.TorusGrid(10.0, 128)
    x = grid.coordinates()
    xx, yy = np.meshgrid(x, x, indexing='ij')
    pts = np.stack([xx, yy], axis=-1)
    state = she_solver.FieldState(grid, 0.0, kernels.heat_kernel(0.1, pts))
    evolved = she_solver.heat_halfstep(state, 0.5)
    central = np.hypot(xx, yy) < grid.side / 4
    spectral_error = float(np.max(np.abs(evolved.u - kernels.heat_kernel(0.6, pts))[central]))
    run.value_row('spectral_heat_error', spectral_error, replicas=0)
    run.flag('spectral_heat_step', spectral_error, 1e-6, spectral_error < 1e-6)

    for m in (kernels.Mollifier(kernels.SMOOTH_BUMP), kernels.Mollifier(kernels.GRID_BOX)):
        cov = kernels.build_covariance(m)
        r = np.linspace(0.0, 1.2, 241)
        values = cov.evaluate_radius(r)
        probe = np.array([[0.3, -0.2], [-0.3, 0.2]])
        even = float(abs(np.diff(cov.evaluate(probe))[0]))
        r0_gap = abs(cov.r0 - m.l2_squared())
        ok = (values[0] >= values.max() and np.all(values[r >= 1.0] == 0.0)
              and even == 0.0 and r0_gap < 1e-8)
        run.value_row('covariance_r0', cov.r0, mollifier=m.kind, replicas=0, r0_gap=r0_gap)
        run.flag(f'covariance_invariants_{m.kind}', r0_gap, 1e-8, ok)


def _run_kr(run: _Run) -> None:
    spec = run.spec
    ell = float(spec.option('ell'))
    target = 1.0 / (2 * math.pi)
    last = None
    for eps in spec.epsilons:
        with _point(spec.kind, eps=eps):
            started = time.perf_counter()
            samples = brownian.kr_samples(eps, ell, (0.0, 0.0), spec.replicas, spec.seed,
                                          run.workers)
            mean = float(samples.mean())
            se = float(samples.std(ddof=1) / math.sqrt(samples.size))
            test = distribution_test(samples, EXPONENTIAL, mean=target,
                                     ks_threshold=float(spec.option('ks_threshold', KS_THRESHOLD)))
            run.value_row('kr_mean_times_2pi', 2 * math.pi * mean, 2 * math.pi * se, eps=eps,
                          ell=ell, ks_statistic=test.statistic, ks_pvalue=test.pvalue, beta=0.0)
            logger.info(f"📊 KR eps={eps}: 2pi*mean={2 * math.pi * mean:.4f} ± {2 * math.pi * se:.4f}, "
                        f"KS={test.statistic:.4f} ({time.perf_counter() - started:.1f}s)")
            last = (eps, 2 * math.pi * mean, test)
    if last:
        eps, scaled, test = last
        run.flag('kr_mean_2pi_window', scaled, [0.85, 1.15], 0.85 <= scaled <= 1.15, eps=eps)
        run.flag('kr_ks_exponential', test.statistic, test.threshold, test.accepted, eps=eps)


def _run_flimit(run: _Run) -> None:
    spec = run.spec
    ell = float(spec.option('ell'))
    limit = kernels.effective_variance(spec.beta)
    gaps = []
    for eps in spec.epsilons:
        with _point(spec.kind, eps=eps, beta=spec.beta):
            report = brownian.f_estimate(spec.beta, eps, ell, (0.0, 0.0), spec.replicas, spec.seed,
                                         run.workers)
            gap = abs(report.value - limit) / limit
            gaps.append(gap)
            run.row(report, 'f_estimate', limit=limit, relative_gap=gap)
    if gaps:
        run.flag('f_gap_monotone', gaps, 'decreasing', _monotone_shrinking(gaps))
        run.flag('f_final_gap', gaps[-1], 0.2, gaps[-1] < 0.2, eps=spec.epsilons[-1])
    with _point(spec.kind, beta=0.0):
        zero = brownian.f_estimate(0.0, spec.epsilons[0] if spec.epsilons else 0.01, ell,
                                   (0.0, 0.0), spec.replicas, spec.seed, run.workers)
    run.row(zero, 'f_estimate_beta0')
    run.flag('f_beta0_exact', zero.value, 1.0, zero.value == 1.0 and zero.stderr == 0.0)


def _run_moments(run: _Run) -> None:
    spec = run.spec
    x = tuple(float(c) for c in spec.option('x'))
    ratios = []
    for eps in spec.epsilons:
        for n in (1, 2):
            with _point(spec.kind, eps=eps, n=n):
                report = brownian.occupation_moment_estimate(n, eps, spec.t, x, spec.replicas,
                                                             spec.seed, run.workers)
            ratio = report.value / kernels.log_eps(eps)
            run.row(report, f'occupation_moment_{n}', ratio_to_log_eps=ratio)
            if n == 2:
                ratios.append(ratio)
    if ratios:
        spread = _max_min_ratio(ratios)
        run.flag('occupation_moment2_scaling', spread, 3.0, spread < 3.0)

    exp_values = []
    for eps in spec.option('exp_epsilons'):
        with _point(spec.kind, eps=eps, beta=spec.beta):
            free = brownian.exp_moment_estimate(spec.beta, eps, spec.t, (0.0, 0.0), None,
                                                spec.replicas, spec.seed, run.workers)
        run.row(free, 'exp_moment_free')
        exp_values.append(free.value)
    if exp_values:
        spread = _max_min_ratio(exp_values)
        run.flag('exp_moment_bounded', spread, 2.0, spread < 2.0)

    eps = float(spec.option('exp_epsilons')[0])
    with _point(spec.kind, eps=eps, beta=spec.beta, paths='bridge'):
        free = brownian.exp_moment_estimate(spec.beta, eps, spec.t, (0.0, 0.0), None,
                                            spec.replicas, spec.seed, run.workers)
        far = brownian.exp_moment_estimate(spec.beta, eps, spec.t, (0.0, 0.0), (10.0 / eps, 0.0),
                                           spec.replicas, spec.seed, run.workers)
        mixture = brownian.exp_moment_mixture_estimate(spec.beta, eps, spec.t, (0.0, 0.0),
                                                       spec.replicas, spec.seed + 1, run.workers)
    run.row(far, 'exp_moment_far_bridge')
    run.row(mixture, 'exp_moment_bridge_mixture')
    bound = free.value + 3 * combined_stderr(free, far)
    run.flag('far_bridge_below_free', far.value, bound, far.value <= bound, eps=eps)
    gap = abs(mixture.value - free.value)
    tolerance = 3 * combined_stderr(free, mixture)
    run.flag('bridge_mixture_matches_free', gap, tolerance, gap <= tolerance, eps=eps)

    for eps in spec.epsilons:
        with _point(spec.kind, eps=eps, quantity='tail'):
            tail = brownian.tail_occupation_estimate(eps, 1.0, (0.0, 0.0), 1.0, spec.replicas,
                                                     spec.seed, run.workers)
            late = brownian.late_window_moment_estimate(eps, spec.t, (0.0, 0.0), spec.replicas,
                                                        spec.seed, run.workers)
        run.row(tail, 'tail_occupation', reference=tail.diagnostics['reference'])
        run.row(late, 'late_window_moment2', ratio=late.diagnostics['ratio'])


def _run_pde(run: _Run) -> None:
    spec = run.spec
    ell = float(spec.option('ell'))
    beta = spec.beta
    for eps in spec.epsilons:
        horizon = ell / eps ** 2
        with _point(spec.kind, eps=eps, beta=beta):
            coarse = limit_analysis.solve_F(beta, eps, horizon)
            fine = limit_analysis.solve_F(beta, eps, horizon, refine=2)
            mc = brownian.f_estimate(beta, eps, ell, (0.0, 0.0), spec.replicas, spec.seed,
                                     run.workers)
        pde_value = fine.center()
        pde_tol = abs(fine.center() - coarse.center())
        warnings = limit_analysis.check_F_invariants(fine)
        run.value_row('F_center_pde', pde_value, pde_tol, eps=eps, ell=ell,
                      invariant_warnings=len(warnings))
        run.row(mc, 'F_center_mc')
        gap = abs(pde_value - mc.value)
        tolerance = 3 * math.hypot(pde_tol, mc.stderr)
        run.flag('pde_vs_mc', gap, tolerance, gap <= tolerance, eps=eps)

    # mild-residual refinement on a torus of diffusive reach
    horizon = float(spec.option('refinement_horizon'))
    eps = spec.epsilons[0] if spec.epsilons else 1e-3
    side = 2 ** math.ceil(math.log2(limit_analysis.reach_side(horizon)))
    grid = noise_field.TorusGrid(float(side), int(side / 0.0625))
    residuals = []
    with _point(spec.kind, eps=eps, beta=beta, check='mild_residual'):
        for spacing in (0.5, 0.25):
            checkpoints = np.arange(spacing, horizon + 0.5 * spacing, spacing)
            sol = limit_analysis.solve_F(beta, eps, horizon, grid, dt=spacing / 5,
                                         checkpoints=checkpoints)
            residual = limit_analysis.mild_residual(sol, -1)
            residuals.append(residual)
            run.value_row('mild_residual', residual, eps=eps, checkpoint_spacing=spacing,
                          t=horizon, replicas=0)
        gap = limit_analysis.planar_kernel_gap(sol, -1)
        run.value_row('planar_kernel_gap', gap, eps=eps, t=horizon, replicas=0)
    order = residuals[0] / residuals[1] if residuals[1] > 0 else float('inf')
    run.flag('mild_residual_second_order', order, [3.0, 5.0], 3.0 <= order <= 5.0)

    g = kernels.TestFunction(kernels.GAUSSIAN, 1.0)
    gaps = []
    for eps in spec.option('prediction_epsilons'):
        with _point(spec.kind, eps=eps, beta=beta, check='variance_prediction'):
            sol = limit_analysis.solve_F(beta, eps, spec.t / eps ** 2)
            prediction = limit_analysis.variance_prediction(g, spec.t, beta, eps, sol)
        gaps.append(prediction.relative_gap)
        run.row(prediction.to_row(), 'variance_prediction', replicas=0)
    if gaps:
        run.flag('prediction_gap_monotone', gaps, 'decreasing', _monotone_shrinking(gaps))

    with _point(spec.kind, eps=0.05, beta=0.0, check='variance_prediction'):
        sol = limit_analysis.solve_F(0.0, 0.05, spec.t / 0.05 ** 2)
        flat = limit_analysis.variance_prediction(g, spec.t, 0.0, 0.05, sol)
    run.row(flat.to_row(), 'variance_prediction', replicas=0)
    run.flag('prediction_beta0_oracle', flat.relative_gap, 0.02, flat.relative_gap < 0.02)


def _she_config(spec: ExperimentSpec, eps: float, beta: float = None,
                grid: noise_field.TorusGrid = None, replicas: int = None) -> she_solver.SheConfig:
    return she_solver.SheConfig(beta=spec.beta if beta is None else beta, eps=eps, t_final=spec.t,
                                grid=grid or spec.torus(eps), dt=spec.dt,
                                replicas=replicas or spec.replicas, base_seed=spec.seed)


def _test_function(spec: ExperimentSpec) -> kernels.TestFunction:
    return kernels.TestFunction(spec.option('g_kind', kernels.GAUSSIAN),
                                float(spec.option('g_scale', 1.0)))


def _gaussianity_flags(run: _Run, cfg, g, table, eps) -> None:
    sample = she_solver.gaussianity_sample(cfg, g, table=table)
    if sample.degenerate:
        run.value_row('gaussianity_degenerate', 1.0, eps=eps)
        return
    test = distribution_test(sample.values, NORMAL, level=float(run.spec.option('ad_level', AD_LEVEL)))
    run.value_row('anderson_darling', test.statistic, eps=eps, critical=test.threshold)
    run.value_row('skewness', sample.skewness, sample.skewness_stderr, eps=eps)
    run.flag('gaussianity_ad', test.statistic, test.threshold, test.accepted, eps=eps)
    skew_bound = 3 * sample.skewness_stderr
    run.flag('gaussianity_skewness', abs(sample.skewness), skew_bound,
             abs(sample.skewness) < skew_bound, eps=eps)


def _wide_torus_bias(run: _Run, g, base: Dict) -> None:
    """Rerun one eps on a larger torus and report the wrap-around shift of the variance"""
    spec = run.spec
    wide = spec.option('wide_torus')
    eps = float(wide.get('eps', spec.epsilons[-1]))
    match = [e for e in base if abs(e - eps) < 1e-12]
    if not match:
        logger.warning(f"⚠️ Wide-torus run skipped: eps={eps} is not among {spec.epsilons}")
        return
    narrow = base[match[0]]
    with _point(spec.kind, eps=eps, beta=spec.beta, check='wide_torus'):
        grid = noise_field.TorusGrid(float(wide['L']), int(wide['n']))
        cfg = _she_config(spec, eps, grid=grid, replicas=int(wide.get('replicas', spec.replicas)))
        table = she_solver.ensemble_observables(cfg, g, workers=run.workers)
        report = she_solver.ensemble_variance(cfg, g, table=table)
    d = report.diagnostics
    run.row(report, 'she_variance_wide_torus', sigma_t2=d['sigma_t2'],
            sigma_t2_torus=d['sigma_t2_torus'], relative_gap=d['relative_gap'],
            relative_gap_torus=d['relative_gap_torus'])

    bias = narrow.value / report.value - 1.0
    bias_se = math.hypot(narrow.stderr / report.value, narrow.value * report.stderr / report.value ** 2)
    expected = narrow.diagnostics['sigma_t2_torus'] / d['sigma_t2_torus'] - 1.0
    run.value_row('wrap_around_bias', bias, bias_se, eps=eps, limit=expected,
                  L=spec.grid['L'], L_wide=grid.side,
                  relative_gap=narrow.diagnostics['relative_gap'],
                  relative_gap_wide=d['relative_gap'], replicas=report.replicas)
    gap = abs(bias - expected)
    run.flag('wrap_around_bias_matches_torus', gap, 3 * bias_se, gap <= 3 * bias_se, eps=eps)


def _run_she_variance(run: _Run) -> None:
    spec = run.spec
    g = _test_function(spec)
    gaps = []
    reports = {}
    for eps in spec.epsilons:
        with _point(spec.kind, eps=eps, beta=spec.beta):
            cfg = _she_config(spec, eps)
            table = she_solver.ensemble_observables(cfg, g, workers=run.workers)
            report = she_solver.ensemble_variance(cfg, g, table=table)
        reports[eps] = report
        d = report.diagnostics
        gaps.append(d['relative_gap_torus'])
        run.row(report, 'she_variance', sigma_t2=d['sigma_t2'], sigma_t2_torus=d['sigma_t2_torus'],
                relative_gap=d['relative_gap'], relative_gap_torus=d['relative_gap_torus'])
        run.value_row('she_linear_variance', d['linear_variance'], d['linear_stderr'], eps=eps,
                      replicas=report.replicas)
        if abs(eps - float(spec.option('gaussianity_eps', -1))) < 1e-12:
            with _point(spec.kind, eps=eps, check='gaussianity'):
                _gaussianity_flags(run, cfg, g, table, eps)
    if gaps:
        run.flag('she_variance_gap_monotone', gaps, 'decreasing', _monotone_shrinking(gaps))
        run.flag('she_variance_final_gap', gaps[-1], 0.3, gaps[-1] < 0.3, eps=spec.epsilons[-1])
    if spec.option('wide_torus') and reports:
        _wide_torus_bias(run, g, reports)


def _run_gaussianity(run: _Run) -> None:
    spec = run.spec
    g = _test_function(spec)
    for eps in spec.epsilons:
        with _point(spec.kind, eps=eps, beta=spec.beta):
            cfg = _she_config(spec, eps)
            table = she_solver.ensemble_observables(cfg, g, workers=run.workers)
            _gaussianity_flags(run, cfg, g, table, eps)
        if not spec.option('resolution_check'):
            continue
        with _point(spec.kind, eps=eps, beta=spec.beta, check='resolution'):
            check = she_solver.resolution_stability(cfg, g, table=table, workers=run.workers)
        threshold = float(spec.option('ks_threshold', KS_THRESHOLD))
        run.value_row('resolution_ks', check.statistic, eps=eps, n=check.coarse_n,
                      n_fine=check.fine_n, pvalue=check.pvalue)
        run.flag('resolution_stability_ks', check.statistic, threshold,
                 check.statistic < threshold, eps=eps)


def _run_negmoments(run: _Run) -> None:
    spec = run.spec
    second = []
    for eps in spec.epsilons:
        with _point(spec.kind, eps=eps, beta=spec.beta):
            cfg = _she_config(spec, eps)
            table = she_solver.ensemble_observables(cfg, _test_function(spec), workers=run.workers)
            first = she_solver.negative_moment_estimate(cfg, 1, table=table)
            two = she_solver.negative_moment_estimate(cfg, 2, table=table)
        run.row(first, 'negative_moment_1')
        run.row(two, 'negative_moment_2')
        second.append(two.value)
        run.flag('negative_moment_jensen', two.value, first.value ** 2,
                 two.value >= first.value ** 2, eps=eps)
    if second:
        spread = _max_min_ratio(second)
        run.flag('negative_moment_bounded', spread, 2.0, spread < 2.0)


def _run_crosscheck(run: _Run) -> None:
    spec = run.spec
    eps = spec.epsilons[0]
    paths = int(spec.option('paths'))
    with _point(spec.kind, eps=eps, beta=spec.beta):
        cfg = _she_config(spec, eps)
        table = she_solver.ensemble_observables(cfg, _test_function(spec), workers=run.workers)
        ensemble = she_solver.second_moment_estimate(cfg, table=table)
        path = she_solver.second_moment_path_estimate(cfg, paths, SeedStream(spec.seed, spec.replicas))
    run.row(ensemble, 'second_moment_ensemble')
    run.row(path, 'second_moment_paths')
    gap = abs(ensemble.value - path.value)
    tolerance = 3 * combined_stderr(ensemble, path)
    run.flag('second_moment_identity', gap, tolerance, gap <= tolerance, eps=eps)

    with _point(spec.kind, eps=eps, beta=spec.beta, check='feynman_kac'):
        state = she_solver.simulate(cfg, SeedStream(spec.seed, 0), record_noise=True)
        fk = she_solver.fk_partition_estimate(cfg, state.noise, paths,
                                              SeedStream(spec.seed, spec.replicas + 1))
    grid_value = state.probe()
    run.value_row('u_probe_grid', grid_value, eps=eps, replicas=1)
    run.row(fk, 'u_probe_feynman_kac', late_noise_estimate=fk.diagnostics['late_noise_estimate'],
            cutoff_time=fk.diagnostics['cutoff_time'])
    gap = abs(grid_value - fk.value)
    run.flag('feynman_kac_vs_grid', gap, 3 * fk.stderr, gap <= 3 * fk.stderr, eps=eps)


def _run_noise_cov(run: _Run) -> None:
    spec = run.spec
    m = kernels.Mollifier(spec.option('mollifier', kernels.SMOOTH_BUMP))
    for eps in spec.epsilons:
        with _point(spec.kind, eps=eps):
            report = noise_field.covariance_selftest(spec.torus(eps), m, eps, spec.dt or 1e-3,
                                                     spec.replicas, spec.seed,
                                                     workers=run.workers)
        for record in report.table.to_dict('records'):
            run.value_row('noise_covariance', record['empirical'], record['stderr'], eps=eps,
                          lag=str(record['lag']), theory_discrete=record['theory_discrete'],
                          theory_continuum=record['theory_continuum'], beta=0.0, t=spec.dt)
            run.flag(f"noise_covariance_lag_{record['lag']}", record['empirical'],
                     record['theory_continuum'], record['passed'], eps=eps)


def _run_mean_one(run: _Run) -> None:
    spec = run.spec
    eps = spec.epsilons[0]
    with _point(spec.kind, eps=eps, beta=spec.beta):
        cfg = _she_config(spec, eps)
        table = she_solver.ensemble_observables(cfg, _test_function(spec), workers=run.workers)
    for column in ('u_probe', 'u_mean'):
        values = table[column].to_numpy()
        mean = float(values.mean())
        se = float(values.std(ddof=1) / math.sqrt(values.size))
        run.value_row(f'mean_{column}', mean, se, eps=eps)
        run.flag(f'mean_one_{column}', abs(mean - 1.0), 3 * se, abs(mean - 1.0) < 3 * se, eps=eps)
    for record in she_solver.probe_stationarity(table).to_dict('records'):
        name = record['statistic']
        run.value_row(f'probe_b_{name}', record['probe_b'], eps=eps, probe_a=record['probe_a'])
        run.flag(f'stationarity_probes_{name}', record['gap'], record['tolerance'],
                 record['passed'], eps=eps)


RUNNERS = {
    'kernels-check': _run_kernels_check,
    'kr': _run_kr,
    'flimit': _run_flimit,
    'moments': _run_moments,
    'pde': _run_pde,
    'she-variance': _run_she_variance,
    'gaussianity': _run_gaussianity,
    'negmoments': _run_negmoments,
    'crosscheck': _run_crosscheck,
    'noise-cov': _run_noise_cov,
    'mean-one': _run_mean_one,
}


def output_paths(spec: ExperimentSpec) -> Tuple[str, str]:
    stem = os.path.join(spec.out, f"{spec.kind}_{spec.seed}")
    return stem + '.csv', stem + '.json'


def run_experiment(spec: ExperimentSpec, workers: int = None, write: bool = True) -> RunManifest:
    """
    Run one experiment kind and write its CSV and JSON manifest

    Returns:
    - RunManifest with reports (CSV rows) and pass/fail flags
    """
    started_at = datetime.now(timezone.utc)
    started = time.perf_counter()
    logger.info(f"🚀 Running {spec.kind} (seed {spec.seed}, replicas {spec.replicas})")
    run = _Run(spec, workers)
    RUNNERS[spec.kind](run)

    manifest = RunManifest(
        spec=spec.to_dict(),
        version=settings.__version__,
        started=started_at.isoformat(),
        finished=datetime.now(timezone.utc).isoformat(),
        wall_time=time.perf_counter() - started,
        reports=run.rows,
        flags=run.flags,
    )
    if write:
        write_outputs(spec, manifest)
    status = "✅ all flags passed" if manifest.passed else "❌ some flags failed"
    logger.info(f"{status} for {spec.kind} in {manifest.wall_time:.1f}s")
    return manifest


def write_outputs(spec: ExperimentSpec, manifest: RunManifest) -> Tuple[str, str]:
    os.makedirs(spec.out, exist_ok=True)
    csv_path, json_path = output_paths(spec)
    pd.DataFrame(manifest.reports).to_csv(csv_path, index=False, float_format=FLOAT_FORMAT)
    manifest.to_json(json_path)
    logger.info(f"📊 Results written to {csv_path} and {json_path}")
    return csv_path, json_path


def summarize(manifests: Sequence[Union[RunManifest, str]]) -> pd.DataFrame:
    """
    Merge manifests of one kind into a comparison table across eps

    Rows are grouped by (quantity, beta); within a group they are ordered by
    decreasing eps and, where a gap to a limit is available, flagged with
    whether the gap shrinks monotonically.
    """
    loaded = [RunManifest.from_json(m) if isinstance(m, str) else m for m in manifests]
    if not loaded:
        raise MergeError("Nothing to summarize")
    kinds = {m.kind for m in loaded}
    if len(kinds) > 1:
        raise MergeError(f"Cannot merge different experiment kinds: {sorted(kinds)}")
    if len(loaded) == 1:
        return pd.DataFrame(loaded[0].reports)

    table = pd.concat([pd.DataFrame(m.reports) for m in loaded], ignore_index=True)
    gap_column = next((c for c in ('relative_gap_torus', 'relative_gap') if c in table), None)
    table['monotone_gap'] = np.nan
    frames = []
    for _, group in table.groupby(['quantity', 'beta'], sort=True, dropna=False):
        group = group.sort_values('eps', ascending=False, kind='mergesort')
        if gap_column is not None and group[gap_column].notna().sum() > 1:
            gaps = group[gap_column].dropna().tolist()
            group = group.assign(monotone_gap=_monotone_shrinking(gaps))
        frames.append(group)
    return pd.concat(frames, ignore_index=True)


def main(argv: List[str] = None) -> int:
    parser = argparse.ArgumentParser(description="KPZ/EW weak-coupling verification experiments")
    parser.add_argument('kind', choices=list(KINDS) + ['summarize'])
    parser.add_argument('manifests', nargs='*', help="Manifest JSON files (summarize only)")
    parser.add_argument('--config', help="JSON experiment configuration")
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out')
    parser.add_argument('--replicas', type=int)
    parser.add_argument('--workers', type=int)
    args = parser.parse_args(argv)

    settings.setup_logging()
    try:
        if args.kind == 'summarize':
            table = summarize(args.manifests)
            print(table.to_string(index=False))
            return 0
        spec = load_spec(args.kind, args.config,
                         {'seed': args.seed, 'out': args.out, 'replicas': args.replicas})
        manifest = run_experiment(spec, workers=args.workers)
    except KpzLabError as e:
        logger.error(f"❌ {e}")
        return 2

    print(f"\n{'Flag':<40} {'Value':<24} {'Passed':<8}")
    print("-" * 72)
    for f in manifest.flags:
        print(f"{f['name']:<40} {str(f['value'])[:22]:<24} {'✅' if f['passed'] else '❌':<8}")
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
