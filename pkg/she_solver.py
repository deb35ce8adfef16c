#!/usr/bin/env python3
"""
Stochastic heat equation du = 1/2 Lap u dt + beta_eps u dW_eps (Ito) on the torus.

Lie splitting: an exact spectral heat step followed by a multiplicative
noise step whose Ito correction uses the exact discrete variance, so the
update factor has mean one in every cell. Observables work with log u
directly (Hopf-Cole); no height-form stepping is done.
"""

import math
import time
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy import ndimage, stats

import settings
from kernels import (
    Mollifier, TestFunction, beta_eps as weak_coupling, log_eps,
    sigma_t_squared, sigma_t_squared_torus,
)
from montecarlo import (
    ConfigError, NumericalFailure, EstimateReport, SeedStream, PURPOSE_NOISE,
    PURPOSE_FK_PATHS, jackknife_variance, report_from_samples, run_replicas, streams_for,
)
from noise_field import (
    TorusGrid, MollifiedSlice, check_resolution, export_grid, mollify_slice,
    sample_increment_slice, stencil_for,
)

logger = logging.getLogger(__name__)

MIN_GAUSSIANITY_REPLICAS = 100
MAX_NEGATIVE_MOMENT_BETA = 0.5
PATH_BATCH = 2048


@dataclass
class SheConfig:
    """
    Parameters of one SHE ensemble

    Parameters:
    - beta: Coupling; the solver uses beta_eps = beta / sqrt(|log eps|)
    - eps: Mollification scale
    - t_final: Final (macroscopic) time
    - grid: Torus grid, spacing <= eps/4
    - mollifier: Noise mollifier
    - dt: Time step; default min(dx^2/4, 1e-3 t_final), rounded so steps hit t_final
    - replicas: Noise replicas for ensemble estimators
    - base_seed: Seed of the replica streams
    """
    beta: float
    eps: float
    t_final: float
    grid: TorusGrid
    mollifier: Mollifier = field(default_factory=Mollifier)
    dt: Optional[float] = None
    replicas: int = 100
    base_seed: int = settings.DEFAULT_SEED
    beta_eps: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.beta_eps = weak_coupling(self.beta, self.eps)
        if not self.t_final > 0:
            raise ConfigError(f"t_final must be positive, got {self.t_final}")
        check_resolution(self.grid, self.mollifier, self.eps)
        bound = self.grid.spacing ** 2 / 4.0
        dt = self.dt if self.dt is not None else min(bound, 1e-3 * self.t_final)
        if not dt > 0:
            raise ConfigError(f"Time step must be positive, got dt={dt}")
        steps = max(1, int(math.ceil(self.t_final / dt - 1e-9)))
        self.dt = self.t_final / steps
        if self.dt > bound * (1 + 1e-12):
            logger.warning(f"⚠️ dt={self.dt:.3g} above the conservative bound dx^2/4={bound:.3g}")

    @property
    def steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def parameters(self) -> dict:
        return {
            'beta': self.beta, 'eps': self.eps, 't': self.t_final, 'dt': self.dt,
            'L': self.grid.side, 'n': self.grid.n, 'mollifier': self.mollifier.kind,
            'replicas': self.replicas, 'seed': self.base_seed,
        }


@dataclass
class FieldState:
    grid: TorusGrid
    time: float
    u: np.ndarray
    noise: Optional[List[np.ndarray]] = None

    @classmethod
    def flat(cls, grid: TorusGrid) -> 'FieldState':
        return cls(grid, 0.0, np.ones((grid.n, grid.n)))

    def probe(self, index=None) -> float:
        i, j = index or self.grid.probe_index
        return float(self.u[i, j])

    def export(self, path: str, dt: float, eps: float, seed: int, fmt: str = 'csv') -> None:
        export_grid(self.u, path, self.grid, dt, eps, seed, fmt)


@lru_cache(maxsize=32)
def _heat_multiplier(grid: TorusGrid, dt: float) -> np.ndarray:
    return np.exp(-0.5 * dt * grid.wavenumbers_squared())


def heat_halfstep(state: FieldState, dt: float) -> FieldState:
    """Exact flow of 1/2 Lap over dt: multiply torus modes by exp(-|k|^2 dt/2)"""
    u = state.u
    if np.all(u == u.flat[0]):
        return FieldState(state.grid, state.time + dt, u.copy(), state.noise)
    n = state.grid.n
    smoothed = np.fft.irfft2(np.fft.rfft2(u) * _heat_multiplier(state.grid, dt), s=(n, n))
    return FieldState(state.grid, state.time + dt, smoothed, state.noise)


def noise_multiply_step(state: FieldState, noise: MollifiedSlice, beta_eps: float) -> FieldState:
    """u <- u exp(beta_eps dV - beta_eps^2 v/2), v the exact discrete variance"""
    if noise.grid != state.grid:
        raise ConfigError("Noise slice and field live on different grids")
    if beta_eps == 0:
        return state
    factor = np.exp(beta_eps * noise.values - 0.5 * beta_eps ** 2 * noise.variance)
    return FieldState(state.grid, state.time, state.u * factor, state.noise)


def simulate(cfg: SheConfig, stream: SeedStream, record_noise: bool = False) -> FieldState:
    """
    Solve from u = 1 to t_final with the replica's own noise history

    record_noise keeps every mollified slice (oldest first) on the returned
    state for Feynman-Kac cross-checks.
    """
    state = FieldState.flat(cfg.grid)
    stencil = stencil_for(cfg.grid, cfg.mollifier, cfg.eps)
    gen = stream.generator(PURPOSE_NOISE)
    recorded = [] if record_noise else None
    skip_noise = cfg.beta_eps == 0 and not record_noise
    for _ in range(cfg.steps):
        state = heat_halfstep(state, cfg.dt)
        if skip_noise:
            continue
        noise = mollify_slice(sample_increment_slice(cfg.grid, cfg.dt, gen),
                              cfg.mollifier, cfg.eps, stencil)
        if recorded is not None:
            recorded.append(noise.values)
        state = noise_multiply_step(state, noise, cfg.beta_eps)
    state.time = cfg.t_final
    state.noise = recorded
    return state


def _check_positive(u: np.ndarray) -> None:
    if not np.all(u > 0):
        raise NumericalFailure(f"Non-positive field value {float(u.min()):.3g}; "
                               f"parameters are numerically unstable")


def observable_X(state: FieldState, g: TestFunction) -> float:
    """int log u(t,x) g(x) dx by the trapezoid rule on the torus"""
    _check_positive(state.u)
    h2 = state.grid.spacing ** 2
    return math.fsum((np.log(state.u) * g.on_grid(state.grid)).ravel()) * h2


def observable_linear(state: FieldState, g: TestFunction) -> float:
    """int (u(t,x) - 1) g(x) dx"""
    h2 = state.grid.spacing ** 2
    return math.fsum(((state.u - 1.0) * g.on_grid(state.grid)).ravel()) * h2


ENSEMBLE_COLUMNS = ['X', 'X_linear', 'u_probe', 'u_probe_b', 'u_mean']


@dataclass
class EnsembleWorker:
    cfg: SheConfig
    g: TestFunction

    def __call__(self, indices: List[int]) -> np.ndarray:
        n = self.cfg.grid.n
        second_probe = (n // 4, n // 4)
        rows = []
        for stream in streams_for(self.cfg.base_seed, indices):
            state = simulate(self.cfg, stream)
            rows.append([
                observable_X(state, self.g),
                observable_linear(state, self.g),
                state.probe(),
                state.probe(second_probe),
                float(state.u.mean()),
            ])
        return np.asarray(rows)


def ensemble_observables(cfg: SheConfig, g: TestFunction, replicas: int = None,
                         workers: int = None) -> pd.DataFrame:
    """Per-replica observables (X, X_linear, u at two probes, spatial mean of u)"""
    replicas = replicas or cfg.replicas
    started = time.perf_counter()
    rows = run_replicas(EnsembleWorker(cfg, g), replicas, workers)
    table = pd.DataFrame(rows, columns=ENSEMBLE_COLUMNS)
    table.insert(0, 'replica', np.arange(replicas))
    logger.info(f"📊 SHE ensemble beta={cfg.beta} eps={cfg.eps} t={cfg.t_final}: "
                f"{replicas} replicas x {cfg.steps} steps in {time.perf_counter() - started:.1f}s")
    return table


def _table(cfg: SheConfig, g: Optional[TestFunction], replicas: Optional[int],
           table: Optional[pd.DataFrame], workers: Optional[int]) -> pd.DataFrame:
    if table is not None:
        return table
    return ensemble_observables(cfg, g or TestFunction(), replicas, workers)


def ensemble_variance(cfg: SheConfig, g: TestFunction, replicas: int = None,
                      table: pd.DataFrame = None, workers: int = None) -> EstimateReport:
    """
    beta_eps^-2 Var X_eps(t) with jackknife standard error

    diagnostics carry the limiting sigma_t^2 on the plane and on the torus,
    the relative gaps to both, and the same statistic for the linear
    observable int (u - 1) g.
    """
    started = time.perf_counter()
    replicas = len(table) if table is not None else (replicas or cfg.replicas)
    if replicas < 2:
        raise ConfigError("Ensemble variance needs at least 2 replicas")
    params = cfg.parameters()
    params.update({'replicas': replicas, 'g_kind': g.kind, 'g_scale': g.scale})
    limit = sigma_t_squared(g, cfg.t_final, cfg.beta)
    limit_torus = sigma_t_squared_torus(g, cfg.t_final, cfg.beta, cfg.grid)
    diagnostics = {'sigma_t2': limit, 'sigma_t2_torus': limit_torus}
    if cfg.beta == 0:
        diagnostics.update({'relative_gap': 1.0, 'relative_gap_torus': 1.0})
        return EstimateReport(0.0, 0.0, replicas, params, time.perf_counter() - started,
                              diagnostics)

    data = _table(cfg, g, replicas, table, workers)
    scale = cfg.beta_eps ** 2
    variance, stderr = jackknife_variance(data['X'].to_numpy())
    linear, linear_se = jackknife_variance(data['X_linear'].to_numpy())
    value = variance / scale
    diagnostics.update({
        'relative_gap': abs(value - limit) / limit,
        'relative_gap_torus': abs(value - limit_torus) / limit_torus,
        'linear_variance': linear / scale,
        'linear_stderr': linear_se / scale,
    })
    return EstimateReport(value, stderr / scale, replicas, params,
                          time.perf_counter() - started, diagnostics)


@dataclass
class GaussianitySample:
    values: np.ndarray
    degenerate: bool
    skewness: float
    skewness_stderr: float


def skewness_stderr(n: int) -> float:
    return math.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3)))


def gaussianity_sample(cfg: SheConfig, g: TestFunction, replicas: int = None,
                       table: pd.DataFrame = None, workers: int = None) -> GaussianitySample:
    """X sample standardized by its own mean and standard deviation"""
    replicas = len(table) if table is not None else (replicas or cfg.replicas)
    if replicas < MIN_GAUSSIANITY_REPLICAS:
        raise ConfigError(f"Gaussianity needs at least {MIN_GAUSSIANITY_REPLICAS} replicas, "
                          f"got {replicas}")
    se = skewness_stderr(replicas)
    if cfg.beta == 0:
        logger.info("β=0: X is deterministic, gaussianity sample flagged degenerate")
        return GaussianitySample(np.zeros(replicas), True, 0.0, se)
    x = _table(cfg, g, replicas, table, workers)['X'].to_numpy()
    sd = float(np.std(x, ddof=1))
    if sd == 0:
        return GaussianitySample(np.zeros(replicas), True, 0.0, se)
    z = (x - x.mean()) / sd
    return GaussianitySample(z, False, float(stats.skew(z, bias=False)), se)


def probe_stationarity(table: pd.DataFrame, n_se: float = 3.0) -> pd.DataFrame:
    """
    Compare the two probe columns of an ensemble table

    Parameters:
    - table: Output of ensemble_observables
    - n_se: Tolerance in combined standard errors

    Returns:
    - DataFrame with one row per statistic (mean, second_moment)
    """
    if len(table) < 2:
        raise ConfigError("Stationarity check needs at least 2 replicas")
    a = table['u_probe'].to_numpy()
    b = table['u_probe_b'].to_numpy()
    records = []
    for statistic, power in (('mean', 1), ('second_moment', 2)):
        xa, xb = a ** power, b ** power
        se = math.sqrt((xa.var(ddof=1) + xb.var(ddof=1)) / len(table))
        gap = abs(float(xa.mean() - xb.mean()))
        records.append({
            'statistic': statistic, 'probe_a': float(xa.mean()), 'probe_b': float(xb.mean()),
            'gap': gap, 'tolerance': n_se * se, 'passed': gap <= n_se * se,
        })
    return pd.DataFrame(records)


@dataclass
class ResolutionCheck:
    statistic: float
    pvalue: float
    coarse_n: int
    fine_n: int
    replicas: int
    fine_table: pd.DataFrame = field(repr=False, default=None)


def resolution_stability(cfg: SheConfig, g: TestFunction, replicas: int = None,
                         table: pd.DataFrame = None, workers: int = None) -> ResolutionCheck:
    """Two-sample KS distance between X at grid n and at 2n, same L and dt"""
    replicas = len(table) if table is not None else (replicas or cfg.replicas)
    coarse = _table(cfg, g, replicas, table, workers)['X'].to_numpy()
    fine_cfg = replace(cfg, grid=TorusGrid(cfg.grid.side, 2 * cfg.grid.n), dt=cfg.dt)
    fine_table = ensemble_observables(fine_cfg, g, replicas, workers)
    result = stats.ks_2samp(coarse, fine_table['X'].to_numpy())
    logger.info(f"🔍 Resolution n={cfg.grid.n} vs {fine_cfg.grid.n}: "
                f"KS={result.statistic:.4f} (p={result.pvalue:.3g})")
    return ResolutionCheck(float(result.statistic), float(result.pvalue), cfg.grid.n,
                           fine_cfg.grid.n, replicas, fine_table)


def _probe_values(cfg, replicas, table, workers) -> np.ndarray:
    u = _table(cfg, None, replicas, table, workers)['u_probe'].to_numpy()
    _check_positive(u)
    return u


def negative_moment_estimate(cfg: SheConfig, n: int, replicas: int = None,
                             table: pd.DataFrame = None, workers: int = None) -> EstimateReport:
    """E u(t, x0)^-n at the torus center"""
    if n not in (1, 2, 3, 4):
        raise ConfigError(f"Negative moment order must be in 1..4, got {n}")
    if cfg.beta > MAX_NEGATIVE_MOMENT_BETA:
        raise ConfigError(f"Negative moments are only estimated for beta <= "
                          f"{MAX_NEGATIVE_MOMENT_BETA}, got {cfg.beta}")
    started = time.perf_counter()
    replicas = len(table) if table is not None else (replicas or cfg.replicas)
    params = dict(cfg.parameters(), replicas=replicas, n_moment=n)
    if cfg.beta == 0:
        return EstimateReport(1.0, 0.0, replicas, params, time.perf_counter() - started)
    u = _probe_values(cfg, replicas, table, workers)
    return report_from_samples(u ** (-float(n)), params, started)


def second_moment_estimate(cfg: SheConfig, replicas: int = None, table: pd.DataFrame = None,
                           workers: int = None) -> EstimateReport:
    """Ensemble E u(t, x0)^2"""
    started = time.perf_counter()
    replicas = len(table) if table is not None else (replicas or cfg.replicas)
    u = _probe_values(cfg, replicas, table, workers)
    return report_from_samples(u ** 2, dict(cfg.parameters(), replicas=replicas), started)


def second_moment_path_estimate(cfg: SheConfig, n_paths: int, stream: SeedStream) -> EstimateReport:
    """
    E_B exp(beta_eps^2 sum_j dt R_disc(B1 - B2 at j dt)), j = 0..N-1

    The relative path runs at speed 2 on the solver's time grid; R_disc is
    the covariance of the mollified slices, interpolated off the grid.
    """
    started = time.perf_counter()
    if n_paths < 2:
        raise ConfigError("Path estimator needs at least 2 paths")
    stencil = stencil_for(cfg.grid, cfg.mollifier, cfg.eps)
    params = dict(cfg.parameters(), n_paths=n_paths, path_seed=stream.replica_index)
    if cfg.beta_eps == 0:
        return EstimateReport(1.0, 0.0, n_paths, params, time.perf_counter() - started)
    gen = stream.generator(PURPOSE_FK_PATHS)
    sd = math.sqrt(2.0 * cfg.dt)
    values = []
    for start in range(0, n_paths, PATH_BATCH):
        count = min(PATH_BATCH, n_paths - start)
        pos = np.zeros((count, 2))
        total = np.zeros(count)
        for j in range(cfg.steps):
            if j > 0:
                pos = pos + sd * gen.standard_normal((count, 2))
            total += cfg.dt * stencil.covariance_at(pos)
        values.append(np.exp(cfg.beta_eps ** 2 * total))
    return report_from_samples(np.concatenate(values), params, started)


def fk_partition_estimate(cfg: SheConfig, noise: List[np.ndarray], n_paths: int,
                          stream: SeedStream, probe=None) -> EstimateReport:
    """
    Feynman-Kac average of exp(beta_eps sum dV(path) - beta_eps^2 sum v / 2)

    Path j-th position x0 + B_{j dt} reads slice N-1-j (time runs backward
    along the path). Slices are interpolated with periodic cubic splines.
    diagnostics['late_noise_estimate'] repeats the average using only the
    slices in the last eps^2 K_eps = 1/|log eps| of macroscopic time.
    """
    started = time.perf_counter()
    steps = cfg.steps
    if noise is None or len(noise) < steps:
        raise ConfigError(f"Feynman-Kac estimate needs {steps} stored noise slices, "
                          f"got {0 if noise is None else len(noise)}")
    grid = cfg.grid
    cutoff = 1.0 / log_eps(cfg.eps)
    j_cut = min(steps, int(math.ceil(cutoff / cfg.dt - 1e-9)))
    params = dict(cfg.parameters(), n_paths=n_paths, path_seed=stream.replica_index)
    diagnostics = {'cutoff_time': cutoff, 'late_slices': j_cut}
    if cfg.beta_eps == 0:
        diagnostics['late_noise_estimate'] = 1.0
        return EstimateReport(1.0, 0.0, n_paths, params, time.perf_counter() - started,
                              diagnostics)

    variance = cfg.dt * stencil_for(grid, cfg.mollifier, cfg.eps).unit_variance
    origin = np.zeros(2) if probe is None else np.asarray(probe, dtype=float)
    gen = stream.generator(PURPOSE_FK_PATHS)
    sd = math.sqrt(cfg.dt)
    h = grid.spacing
    full = np.zeros(n_paths)
    late = np.zeros(n_paths)
    pos = np.tile(origin, (n_paths, 1))
    for j in range(steps):
        if j > 0:
            pos = pos + sd * gen.standard_normal((n_paths, 2))
        coeffs = ndimage.spline_filter(noise[steps - 1 - j], order=3, mode='grid-wrap')
        idx = pos / h + grid.n // 2
        dv = ndimage.map_coordinates(coeffs, idx.T, order=3, mode='grid-wrap', prefilter=False)
        increment = cfg.beta_eps * dv - 0.5 * cfg.beta_eps ** 2 * variance
        full += increment
        if j < j_cut:
            late += increment
    diagnostics['late_noise_estimate'] = float(np.mean(np.exp(late)))
    return report_from_samples(np.exp(full), params, started, diagnostics)
