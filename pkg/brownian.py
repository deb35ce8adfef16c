#!/usr/bin/env python3
"""
Brownian paths, bridges and the path functionals behind the weak-coupling
limit: occupation (intersection) times, the Kallianpur-Robbins statistic,
exponential moments and the F-functional estimate of nu_eff^2.

Long horizons t/eps^2 are integrated on a time-adaptive grid: a fine
uniform step up to FINE_UNTIL, then geometrically growing steps, shrunk
whenever the walker is close to the support of R.
"""

import math
import time
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from kernels import CovarianceKernel, default_covariance, effective_variance, log_eps
from montecarlo import (
    ConfigError, QueryError, EstimateReport, SeedStream, PURPOSE_PATH, PURPOSE_ENDPOINT,
    report_from_samples, run_replicas, streams_for,
)

logger = logging.getLogger(__name__)

FINE_STEP = 0.01
FINE_UNTIL = 100.0
GROWTH = 1e-3
NORMAL_BLOCK = 512
# per-step displacement sd stays below this fraction of the distance to R's support
STEP_FRACTION = 0.25


@dataclass(frozen=True)
class PathConfig:
    horizon: float
    step: float
    dimension: int = 2

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigError(f"Path step must be positive, got {self.step}")
        if not self.horizon > 0:
            raise ConfigError(f"Path horizon must be positive, got {self.horizon}")
        if self.dimension != 2:
            raise ConfigError("Only planar paths are supported")
        ratio = self.horizon / self.step
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(f"Step {self.step} does not divide horizon {self.horizon}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))


@dataclass
class BrownianPath:
    times: np.ndarray
    positions: np.ndarray

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def mirrored(self) -> 'BrownianPath':
        return BrownianPath(self.times, -self.positions)


@dataclass(frozen=True)
class OccupationQuery:
    offset: Tuple[float, float]
    interval: Tuple[float, float]
    kernel: CovarianceKernel = field(default_factory=default_covariance)


def _uniform_times(cfg: PathConfig) -> np.ndarray:
    return np.linspace(0.0, cfg.horizon, cfg.n_steps + 1)


def _walk(cfg: PathConfig, stream: SeedStream, variance: float) -> np.ndarray:
    gen = stream.generator(PURPOSE_PATH)
    increments = gen.normal(0.0, math.sqrt(variance), size=(cfg.n_steps, 2))
    positions = np.zeros((cfg.n_steps + 1, 2))
    np.cumsum(increments, axis=0, out=positions[1:])
    return positions


def sample_path(cfg: PathConfig, stream: SeedStream) -> BrownianPath:
    """Standard planar Brownian motion on the uniform grid of cfg"""
    return BrownianPath(_uniform_times(cfg), _walk(cfg, stream, cfg.step))


def sample_relative_path(cfg: PathConfig, stream: SeedStream) -> BrownianPath:
    """Law of B1 - B2: one path with per-step variance 2*step"""
    return BrownianPath(_uniform_times(cfg), _walk(cfg, stream, 2.0 * cfg.step))


def sample_bridge(cfg: PathConfig, endpoint, stream: SeedStream) -> BrownianPath:
    """
    Brownian bridge from the origin to endpoint over [0, horizon]

    W_s - (s/T)(W_T - y) applied to a free path W; the last point is set to
    the endpoint exactly.
    """
    endpoint = np.asarray(endpoint, dtype=float)
    times = _uniform_times(cfg)
    free = _walk(cfg, stream, cfg.step)
    positions = free - np.outer(times / cfg.horizon, free[-1] - endpoint)
    positions[-1] = endpoint
    return BrownianPath(times, positions)


def frozen_path(horizon: float, step: float) -> BrownianPath:
    cfg = PathConfig(horizon, step)
    return BrownianPath(_uniform_times(cfg), np.zeros((cfg.n_steps + 1, 2)))


def occupation_functional(path: BrownianPath, q: OccupationQuery) -> float:
    """
    int_a^b R(x + path_s) ds for the piecewise-linear interpolant of the integrand

    Nodes carry the trapezoid rule; interval ends falling between nodes use
    the linear interpolant, so the functional is additive over adjacent
    intervals.
    """
    a, b = float(q.interval[0]), float(q.interval[1])
    horizon = path.horizon
    tol = 1e-12 * max(1.0, horizon)
    if a < -tol or b > horizon + tol or a > b:
        raise QueryError(f"Interval [{a}, {b}] outside path horizon [0, {horizon}]")
    a, b = max(a, 0.0), min(b, horizon)
    values = q.kernel.evaluate(np.asarray(q.offset, dtype=float) + path.positions)
    return _primitive(path.times, values, b) - _primitive(path.times, values, a)


def _primitive(times: np.ndarray, values: np.ndarray, s: float) -> float:
    steps = np.diff(times)
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * steps * (values[1:] + values[:-1]))])
    i = int(np.searchsorted(times, s, side='right')) - 1
    i = min(max(i, 0), len(times) - 1)
    if i == len(times) - 1:
        return float(cumulative[-1])
    d = s - times[i]
    slope = (values[i + 1] - values[i]) / steps[i]
    return float(cumulative[i] + values[i] * d + 0.5 * slope * d * d)


def cutoff_time(eps: float, alpha: float = 1.0) -> float:
    """K_eps = 1 / (eps^2 |log eps|^alpha)"""
    return 1.0 / (eps * eps * log_eps(eps) ** alpha)


class _NormalBuffer:
    """Per-replica normal pairs, refilled from each replica's own stream"""

    def __init__(self, generators: List[np.random.Generator], block: int = NORMAL_BLOCK):
        self.generators = generators
        self.block = block
        self.cursor = block
        self.buffer = None

    def next_pair(self) -> np.ndarray:
        if self.cursor == self.block:
            self.buffer = np.stack([g.standard_normal((self.block, 2)) for g in self.generators])
            self.cursor = 0
        pair = self.buffer[:, self.cursor, :]
        self.cursor += 1
        return pair


def adaptive_occupation(kernel: CovarianceKernel, offset, horizon: float, speed: float,
                        streams: Sequence[SeedStream], endpoints: Optional[np.ndarray] = None,
                        window_start: float = 0.0, fine_step: float = FINE_STEP,
                        fine_until: float = FINE_UNTIL, growth: float = GROWTH) -> np.ndarray:
    """
    Occupation integrals int_{window_start}^{horizon} R(offset + X_s) ds, one per stream

    Parameters:
    - kernel: Covariance kernel R
    - offset: Initial displacement added to the path
    - horizon: Final time
    - speed: Diffusivity of X (1 for B, 2 for B1 - B2, 0 for a frozen path)
    - streams: One seed stream per replica
    - endpoints: Optional (replicas, 2) array pinning X_horizon (bridges)
    - window_start: Start of the integration window; the path jumps there exactly

    Returns:
    - Array of occupation integrals in stream order
    """
    offset = np.asarray(offset, dtype=float)
    count = len(streams)
    if not horizon > 0:
        raise ConfigError(f"Horizon must be positive, got {horizon}")
    if not 0.0 <= window_start <= horizon:
        raise QueryError(f"Window start {window_start} outside [0, {horizon}]")
    if speed == 0:
        return np.full(count, (horizon - window_start) * float(kernel.evaluate(offset)))

    generators = [s.generator(PURPOSE_PATH) for s in streams]
    normals = _NormalBuffer(generators)
    pinned = endpoints is not None
    if pinned:
        endpoints = np.broadcast_to(np.asarray(endpoints, dtype=float), (count, 2))

    pos = np.zeros((count, 2))
    clock = np.zeros(count)
    total = np.zeros(count)
    support = kernel.support_radius
    near_cap = (STEP_FRACTION * support) ** 2 / speed

    if window_start > 0:
        z = normals.next_pair()
        if pinned:
            mean = endpoints * (window_start / horizon)
            sd = math.sqrt(speed * window_start * (horizon - window_start) / horizon)
        else:
            mean = 0.0
            sd = math.sqrt(speed * window_start)
        pos = mean + sd * z
        clock[:] = window_start

    f_old = kernel.evaluate(offset + pos)
    active = clock < horizon
    iterations = 0
    while active.any():
        dist = np.hypot(offset[0] + pos[:, 0], offset[1] + pos[:, 1])
        far_cap = (STEP_FRACTION * np.maximum(dist - support, 0.0)) ** 2 / speed
        dt = np.where(clock < fine_until, fine_step,
                      np.maximum(near_cap, np.minimum(growth * clock, far_cap)))
        if pinned:
            remaining = np.maximum(horizon - clock, 1e-300)
            drift = np.hypot(*(endpoints - pos).T) / remaining
            drift_cap = np.maximum(STEP_FRACTION * support,
                                   STEP_FRACTION * np.maximum(dist - support, 0.0))
            dt = np.minimum(dt, np.where(drift > 0, drift_cap / np.maximum(drift, 1e-300), np.inf))
        dt = np.where(active, np.minimum(dt, horizon - clock), 0.0)

        z = normals.next_pair()
        if pinned:
            remaining = np.maximum(horizon - clock, 1e-300)
            frac = dt / remaining
            step_mean = (endpoints - pos) * frac[:, None]
            step_var = speed * dt * (1.0 - frac)
            landing = active & (clock + dt >= horizon)
            new_pos = pos + step_mean + np.sqrt(np.maximum(step_var, 0.0))[:, None] * z
            new_pos = np.where(landing[:, None], endpoints, new_pos)
        else:
            new_pos = pos + np.sqrt(speed * dt)[:, None] * z
        new_pos = np.where(active[:, None], new_pos, pos)

        f_new = kernel.evaluate(offset + new_pos)
        total += 0.5 * dt * (f_old + f_new)
        pos, f_old = new_pos, f_new
        clock = np.where(active, np.where(clock + dt >= horizon, horizon, clock + dt), clock)
        active = clock < horizon
        iterations += 1

    logger.debug(f"Adaptive occupation: {count} replicas, horizon {horizon:.4g}, {iterations} steps")
    return total


@dataclass
class OccupationWorker:
    """Picklable replica worker returning occupation integrals for given indices"""
    kernel: CovarianceKernel
    offset: Tuple[float, float]
    horizon: float
    speed: float
    base_seed: int
    endpoint: Optional[Tuple[float, float]] = None
    endpoint_variance: Optional[float] = None
    window_start: float = 0.0

    def endpoints_for(self, streams: List[SeedStream]) -> Optional[np.ndarray]:
        if self.endpoint_variance is not None:
            sd = math.sqrt(self.endpoint_variance)
            return np.stack([sd * s.generator(PURPOSE_ENDPOINT).standard_normal(2) for s in streams])
        if self.endpoint is not None:
            return np.tile(np.asarray(self.endpoint, dtype=float), (len(streams), 1))
        return None

    def __call__(self, indices: List[int]) -> np.ndarray:
        streams = streams_for(self.base_seed, indices)
        return adaptive_occupation(self.kernel, self.offset, self.horizon, self.speed, streams,
                                   endpoints=self.endpoints_for(streams),
                                   window_start=self.window_start)


def _parameters(**kwargs) -> dict:
    return {k: (tuple(float(c) for c in v) if isinstance(v, (tuple, list, np.ndarray)) else v)
            for k, v in kwargs.items()}


def kr_sample(eps: float, ell: float, w, stream: SeedStream,
              kernel: CovarianceKernel = None, frozen: bool = False) -> float:
    """
    |log eps|^-1 int_0^{ell/eps^2} R(w + B1_s - B2_s) ds for one relative path

    Its law tends to (1/2pi) Exp(1) as eps -> 0.
    """
    scale = log_eps(eps)
    if not ell > 0:
        raise ConfigError(f"ell must be positive, got {ell}")
    kernel = kernel or default_covariance()
    occ = adaptive_occupation(kernel, w, ell / eps ** 2, 0.0 if frozen else 2.0, [stream])
    return float(occ[0]) / scale


def kr_samples(eps: float, ell: float, w, replicas: int, base_seed: int,
               workers: int = None, kernel: CovarianceKernel = None) -> np.ndarray:
    """Batch of kr_sample values for replica indices 0..replicas-1"""
    scale = log_eps(eps)
    if not ell > 0:
        raise ConfigError(f"ell must be positive, got {ell}")
    worker = OccupationWorker(kernel or default_covariance(), tuple(np.asarray(w, dtype=float)),
                              ell / eps ** 2, 2.0, base_seed)
    return run_replicas(worker, replicas, workers) / scale


def f_estimate(beta: float, eps: float, ell: float, w, replicas: int, base_seed: int,
               workers: int = None, kernel: CovarianceKernel = None) -> EstimateReport:
    """
    Monte Carlo estimate of E exp(beta^2 |log eps|^-1 int_0^{ell/eps^2} R(w + B1 - B2) ds)

    Returns:
    - EstimateReport; diagnostics carry the limit value 2pi/(2pi - beta^2)
    """
    started = time.perf_counter()
    limit = effective_variance(beta)
    scale = log_eps(eps)
    params = _parameters(beta=beta, eps=eps, ell=ell, w=w, base_seed=base_seed)
    if beta == 0:
        return EstimateReport(1.0, 0.0, replicas, params, time.perf_counter() - started,
                              {'limit': limit})
    kr = kr_samples(eps, ell, w, replicas, base_seed, workers, kernel)
    return report_from_samples(np.exp(beta * beta * kr), params, started,
                               {'limit': limit, 'log_eps': scale})


def _exp_moment(beta: float, eps: float, t: float, x, replicas: int, base_seed: int,
                endpoint=None, endpoint_variance=None, workers=None, kernel=None,
                label: str = 'free') -> EstimateReport:
    started = time.perf_counter()
    scale = log_eps(eps)
    effective_variance(beta)
    params = _parameters(beta=beta, eps=eps, t=t, x=x, base_seed=base_seed, paths=label)
    if endpoint is not None:
        params['endpoint'] = tuple(float(c) for c in endpoint)
    if beta == 0:
        return EstimateReport(1.0, 0.0, replicas, params, time.perf_counter() - started)
    worker = OccupationWorker(kernel or default_covariance(), tuple(np.asarray(x, dtype=float)),
                              t / eps ** 2, 1.0, base_seed, endpoint=endpoint,
                              endpoint_variance=endpoint_variance)
    occ = run_replicas(worker, replicas, workers)
    return report_from_samples(np.exp(beta * beta / scale * occ), params, started)


def exp_moment_estimate(beta: float, eps: float, t: float, x, bridge_endpoint=None,
                        replicas: int = 1000, base_seed: int = 0, workers: int = None,
                        kernel: CovarianceKernel = None) -> EstimateReport:
    """
    E_B exp(beta_eps^2 int_0^{t/eps^2} R(x + B_s) ds) over free paths, or over
    bridges pinned at bridge_endpoint (microscopic coordinates)
    """
    label = 'free' if bridge_endpoint is None else 'bridge'
    return _exp_moment(beta, eps, t, x, replicas, base_seed, endpoint=bridge_endpoint,
                       workers=workers, kernel=kernel, label=label)


def exp_moment_mixture_estimate(beta: float, eps: float, t: float, x, replicas: int,
                                base_seed: int, workers: int = None,
                                kernel: CovarianceKernel = None) -> EstimateReport:
    """Bridge estimate with the endpoint drawn per replica from N(0, t/eps^2 I)"""
    return _exp_moment(beta, eps, t, x, replicas, base_seed, endpoint_variance=t / eps ** 2,
                       workers=workers, kernel=kernel, label='mixture')


def occupation_moment_estimate(n: int, eps: float, t: float, x, replicas: int, base_seed: int,
                               workers: int = None, kernel: CovarianceKernel = None,
                               frozen: bool = False) -> EstimateReport:
    """E_B (int_0^{t/eps^2} R(x/eps + B_s) ds)^n for n in {1, 2, 3}"""
    if n not in (1, 2, 3):
        raise ConfigError(f"Occupation moment order must be 1, 2 or 3, got {n}")
    started = time.perf_counter()
    scale = log_eps(eps)
    x = np.asarray(x, dtype=float)
    worker = OccupationWorker(kernel or default_covariance(), tuple(x / eps), t / eps ** 2,
                              0.0 if frozen else 1.0, base_seed)
    occ = run_replicas(worker, replicas, workers)
    params = _parameters(n=n, eps=eps, t=t, x=x, base_seed=base_seed)
    return report_from_samples(occ ** n, params, started, {'log_eps': scale})


def tail_occupation_estimate(eps: float, ell: float, w, alpha: float = 1.0,
                             replicas: int = 1000, base_seed: int = 0, workers: int = None,
                             kernel: CovarianceKernel = None) -> EstimateReport:
    """
    |log eps|^-1 E int_{K_eps}^{ell/eps^2} R(w + B1 - B2) ds

    The late part of the Kallianpur-Robbins integral; it vanishes like
    log|log eps| / |log eps|, reported in diagnostics as 'reference'.
    """
    started = time.perf_counter()
    scale = log_eps(eps)
    horizon = ell / eps ** 2
    start = cutoff_time(eps, alpha)
    params = _parameters(eps=eps, ell=ell, w=w, alpha=alpha, base_seed=base_seed)
    reference = math.log(scale) / scale if scale > 1 else float('nan')
    diagnostics = {'cutoff_time': start, 'reference': reference}
    if start >= horizon:
        return EstimateReport(0.0, 0.0, replicas, params, time.perf_counter() - started, diagnostics)
    worker = OccupationWorker(kernel or default_covariance(), tuple(np.asarray(w, dtype=float)),
                              horizon, 2.0, base_seed, window_start=start)
    occ = run_replicas(worker, replicas, workers)
    return report_from_samples(occ / scale, params, started, diagnostics)


def late_window_moment_estimate(eps: float, t: float, w, replicas: int, base_seed: int,
                                workers: int = None,
                                kernel: CovarianceKernel = None) -> EstimateReport:
    """
    E[(int_{t1}^{t2} R(B_s) ds)^2 | B_{t2} = w/eps], t1 = t/(eps^2 |log eps|), t2 = t/eps^2

    diagnostics['ratio'] is the estimate over |log eps| log|log eps|, which
    stays bounded as eps -> 0.
    """
    started = time.perf_counter()
    scale = log_eps(eps)
    t1 = t / (eps ** 2 * scale)
    t2 = t / eps ** 2
    w = np.asarray(w, dtype=float)
    worker = OccupationWorker(kernel or default_covariance(), (0.0, 0.0), t2, 1.0, base_seed,
                              endpoint=tuple(w / eps), window_start=min(t1, t2))
    occ = run_replicas(worker, replicas, workers)
    bound = scale * math.log(scale) if scale > 1 else float('nan')
    report = report_from_samples(occ ** 2, _parameters(eps=eps, t=t, w=w, base_seed=base_seed),
                                 started, {'t1': t1, 't2': t2, 'bound': bound})
    report.diagnostics['ratio'] = report.value / bound if bound > 0 else None
    return report
