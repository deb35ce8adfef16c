#!/usr/bin/env python3
"""
Deterministic side of the weak-coupling limit: the covariance PDE

    dF/dt = Lap F + beta^2 |log eps|^-1 R(x) F,   F(0, x) = 1,

its mild formulation, and the variance prediction built from F that is
compared against sigma_t^2 and against Monte Carlo.

Two solvers share one result type: a 2D Strang-split spectral solver on a
torus (microscopic coordinates) and a radial finite-volume solver for the
long horizons t/eps^2 where a 2D torus of diffusive reach does not fit.
"""

import math
import time
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, special

from kernels import (
    GAUSSIAN, CovarianceKernel, TestFunction, default_covariance, effective_variance, log_eps,
    sigma_t_squared,
)
from montecarlo import ConfigError
from noise_field import TorusGrid

logger = logging.getLogger(__name__)

GROWTH_TOLERANCE = 1e-6
MIN_CHECKPOINTS = 3
MAX_SOURCE_SPACING = 0.125

# radial mesh: uniform core, then geometric cells
CORE_RADIUS = 2.0
CORE_SPACING = 0.02
CELL_RATIO = 0.02
TIME_GROWTH = 0.02


def reach_side(horizon: float) -> float:
    """Diffusive-reach rule L >= 6 sqrt(2 T) + 2"""
    return 6.0 * math.sqrt(2.0 * horizon) + 2.0


@dataclass
class FSolution:
    """
    F at a set of checkpoint times

    values[k] is a 2D field on `grid` (spectral solver) or a profile on
    `radii` (radial solver). times[0] is always 0.
    """
    beta: float
    eps: float
    times: np.ndarray
    values: List[np.ndarray]
    radii: np.ndarray
    grid: Optional[TorusGrid] = None
    kernel: CovarianceKernel = field(default_factory=default_covariance, repr=False)
    diagnostics: Dict = field(default_factory=dict)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def coupling(self) -> float:
        return self.beta ** 2 / log_eps(self.eps)

    def profile(self, k: int) -> np.ndarray:
        """Radial profile at checkpoint k on self.radii"""
        if self.grid is None:
            return self.values[k]
        c = self.grid.n // 2
        return self.values[k][c:, c]

    def center(self, k: int = -1) -> float:
        return float(self.profile(k)[0])

    def profile_at(self, t: float, r: np.ndarray) -> np.ndarray:
        """F(t, r), linear in log-time between checkpoints and in r between nodes"""
        r = np.asarray(r, dtype=float)
        if t <= 0:
            return np.ones_like(r)
        times = self.times
        if t >= times[-1]:
            return np.interp(r, self.radii, self.profile(len(times) - 1))
        k = int(np.searchsorted(times, t, side='right'))
        lo = np.interp(r, self.radii, self.profile(k - 1))
        hi = np.interp(r, self.radii, self.profile(k))
        if times[k - 1] <= 0:
            w = t / times[k]
        else:
            w = math.log(t / times[k - 1]) / math.log(times[k] / times[k - 1])
        return (1.0 - w) * lo + w * hi

    def export_csv(self, path: str) -> pd.DataFrame:
        """(time, radius, F) rows for every checkpoint"""
        frames = [pd.DataFrame({'time': t, 'radius': self.radii, 'F': self.profile(k)})
                  for k, t in enumerate(self.times)]
        df = pd.concat(frames, ignore_index=True)
        df.to_csv(path, index=False, float_format='%.17g')
        logger.info(f"📊 F checkpoints written to {path}")
        return df


def _default_checkpoints(horizon: float, count: int) -> np.ndarray:
    start = min(1.0, horizon)
    return np.unique(np.concatenate([[0.0], np.geomspace(start, horizon, count)]))


def _prepare_checkpoints(horizon: float, checkpoints: Optional[Sequence[float]], count: int):
    if horizon == 0:
        return np.zeros(1)
    if checkpoints is None:
        return _default_checkpoints(horizon, count)
    cp = np.unique(np.concatenate([[0.0], np.asarray(checkpoints, dtype=float), [horizon]]))
    if cp[0] < 0 or cp[-1] > horizon * (1 + 1e-12):
        raise ConfigError("Checkpoints must lie in [0, horizon]")
    return cp


def solve_F(beta: float, eps: float, T_micro: float, grid: Optional[TorusGrid] = None,
            dt: float = None, checkpoints: Sequence[float] = None, adaptive: bool = None,
            refine: int = 1, kernel: CovarianceKernel = None) -> FSolution:
    """
    Solve the covariance PDE up to T_micro

    Parameters:
    - beta, eps: Coupling and scale; the source is beta^2/|log eps| R
    - T_micro: Microscopic horizon (t/eps^2 for macroscopic time t)
    - grid: Torus for the 2D spectral solver; None selects the radial solver
    - dt: Initial (or fixed) time step
    - checkpoints: Output times; when given to the 2D solver, dt stays fixed
    - adaptive: Override dt growth in the 2D solver
    - refine: Radial solver resolution multiplier (mesh and time step)

    Returns:
    - FSolution
    """
    effective_variance(beta)
    log_eps(eps)
    if T_micro < 0:
        raise ConfigError(f"Horizon must be nonnegative, got {T_micro}")
    kernel = kernel or default_covariance()
    if grid is not None:
        return _solve_spectral(beta, eps, T_micro, grid, dt, checkpoints, adaptive, kernel)
    return _solve_radial(beta, eps, T_micro, dt, checkpoints, refine, kernel)


def _flat_solution(beta, eps, times, shape, radii, grid, kernel, method) -> FSolution:
    return FSolution(beta, eps, np.asarray(times, dtype=float),
                     [np.ones(shape) for _ in times], radii, grid, kernel, {'method': method})


def _solve_spectral(beta, eps, T, grid: TorusGrid, dt, checkpoints, adaptive,
                    kernel: CovarianceKernel) -> FSolution:
    needed = reach_side(T)
    if grid.side < needed:
        suggested = 2 ** math.ceil(math.log2(needed / grid.spacing))
        raise ConfigError(f"Torus side {grid.side} below diffusive reach {needed:.4g} for "
                          f"T={T:.4g}; use L >= {needed:.4g} (n={suggested} at this spacing)")
    if grid.spacing > MAX_SOURCE_SPACING:
        raise ConfigError(f"Grid spacing {grid.spacing} does not resolve R "
                          f"(need <= {MAX_SOURCE_SPACING})")

    c = grid.n // 2
    radii = np.arange(grid.n - c) * grid.spacing
    fixed = checkpoints is not None
    cp = _prepare_checkpoints(T, checkpoints, 30)
    if T == 0 or beta == 0:
        return _flat_solution(beta, eps, cp, (grid.n, grid.n), radii, grid, kernel, 'spectral')

    adaptive = (not fixed) if adaptive is None else adaptive
    coupling = beta ** 2 / log_eps(eps)
    x = grid.coordinates()
    xx, yy = np.meshgrid(x, x, indexing='ij')
    source = coupling * kernel.evaluate(np.stack([xx, yy], axis=-1))
    k2 = grid.wavenumbers_squared()
    n = grid.n

    F = np.ones((n, n))
    values = [F.copy()]
    step = dt or 0.01
    max_step = max(step, T / 20.0)
    now = 0.0
    steps = 0
    started = time.perf_counter()
    for target in cp[1:]:
        while now < target - 1e-12 * max(1.0, target):
            h = min(step, target - now)
            half = np.exp(0.5 * h * source)
            new = half * np.fft.irfft2(np.fft.rfft2(F * half) * np.exp(-h * k2), s=(n, n))
            change = float(np.max(np.abs(new - F) / F))
            F = new
            now += h
            steps += 1
            if adaptive and change < GROWTH_TOLERANCE and h == step:
                step = min(2.0 * step, max_step)
        now = target
        values.append(F.copy())

    logger.debug(f"Spectral F solve: T={T:.4g}, {steps} steps, "
                 f"{time.perf_counter() - started:.1f}s")
    return FSolution(beta, eps, cp, values, radii, grid, kernel,
                     {'method': 'spectral', 'steps': steps})


def radial_mesh(horizon: float, refine: int = 1):
    """Cell faces and centers: uniform core, geometric beyond, out to the reach radius"""
    outer = reach_side(horizon)
    h0 = CORE_SPACING / refine
    core = np.arange(0.0, min(CORE_RADIUS, outer) + 0.5 * h0, h0)
    faces = list(core)
    ratio = 1.0 + CELL_RATIO / refine
    width = h0
    while faces[-1] < outer:
        width *= ratio
        faces.append(faces[-1] + width)
    faces = np.asarray(faces)
    centers = 0.5 * (faces[1:] + faces[:-1])
    return faces, centers


def _solve_radial(beta, eps, T, dt, checkpoints, refine: int,
                  kernel: CovarianceKernel) -> FSolution:
    faces, centers = radial_mesh(max(T, 1.0), refine)
    cp = _prepare_checkpoints(T, checkpoints, 60)
    if T == 0 or beta == 0:
        return _flat_solution(beta, eps, cp, centers.shape, centers, None, kernel, 'radial')

    coupling = beta ** 2 / log_eps(eps)
    volume = 0.5 * (faces[1:] ** 2 - faces[:-1] ** 2)
    # conductance of interior faces (per radian)
    conductance = faces[1:-1] / np.diff(centers)
    source = coupling * kernel.evaluate_radius(centers)
    size = centers.size
    upper = np.zeros(size)
    lower = np.zeros(size)
    upper[:-1] = conductance
    lower[1:] = conductance

    F = np.ones(size)
    values = [F.copy()]
    dt0 = (dt or 0.01) / refine
    growth = TIME_GROWTH / refine
    now = 0.0
    steps = 0
    banded = np.zeros((3, size))
    for target in cp[1:]:
        while now < target - 1e-12 * max(1.0, target):
            h = min(max(dt0, growth * now), target - now)
            banded[0, 1:] = -upper[:-1]
            banded[1] = volume / h - volume * source + upper + lower
            banded[2, :-1] = -lower[1:]
            F = linalg.solve_banded((1, 1), banded, volume / h * F)
            now += h
            steps += 1
        now = target
        values.append(F.copy())

    logger.debug(f"Radial F solve: T={T:.4g}, {size} cells, {steps} steps")
    return FSolution(beta, eps, cp, values, centers, None, kernel,
                     {'method': 'radial', 'steps': steps, 'cells': size})


def _exponential_weights(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    int_0^1 exp(-z(1-s)) (1-s) ds and int_0^1 exp(-z(1-s)) s ds

    Product-integration weights of the left and right node when the source
    is linear between checkpoints and the heat factor is integrated exactly.
    """
    small = z < 1e-3
    zs = np.where(small, 1.0, z)
    em = np.exp(-zs)
    one_minus = -np.expm1(-zs)
    left = (one_minus - zs * em) / zs ** 2
    right = one_minus / zs - left
    left = np.where(small, 0.5 - z / 3.0 + z * z / 8.0, left)
    right = np.where(small, 0.5 - z / 6.0 + z * z / 24.0, right)
    return left, right


def _mild_integral(sol: FSolution, k: int, pad: int) -> np.ndarray:
    """c int_0^t G_{2(t-l)} * (R F(l)) dl over checkpoints 0..k, source linear in l"""
    grid = sol.grid
    n = grid.n
    size = n * pad
    x = grid.coordinates()
    xx, yy = np.meshgrid(x, x, indexing='ij')
    r_field = sol.kernel.evaluate(np.stack([xx, yy], axis=-1))
    k_axis = 2.0 * math.pi * np.fft.fftfreq(size, d=grid.spacing)
    kr_axis = 2.0 * math.pi * np.fft.rfftfreq(size, d=grid.spacing)
    kx, ky = np.meshgrid(k_axis, kr_axis, indexing='ij')
    k2 = kx ** 2 + ky ** 2

    t = sol.times[k]
    times = sol.times[:k + 1]
    spectra = [np.fft.rfft2(r_field * sol.values[j], s=(size, size)) for j in range(k + 1)]
    total = np.zeros((size, size // 2 + 1), dtype=complex)
    for j in range(k):
        h = times[j + 1] - times[j]
        if h <= 0:
            continue
        left, right = _exponential_weights(k2 * h)
        decay = np.exp(-(t - times[j + 1]) * k2)
        total += decay * h * (left * spectra[j] + right * spectra[j + 1])
    return sol.coupling * np.fft.irfft2(total, s=(size, size))[:n, :n]


def mild_residual(sol: FSolution, checkpoint: int) -> float:
    """
    max |F(t) - 1 - c int_0^t G_{2(t-l)} * (R F(l)) dl| at checkpoint index

    Uses the wrapped heat kernel of the torus; between stored checkpoints
    the source is taken linear in time.
    """
    if sol.grid is None:
        raise ConfigError("Mild residual needs a torus solution")
    k = checkpoint if checkpoint >= 0 else len(sol.times) + checkpoint
    if k + 1 < MIN_CHECKPOINTS and k > 0:
        logger.warning(f"⚠️ Mild residual from {k + 1} checkpoints is a crude quadrature")
    if k == 0 or sol.beta == 0:
        return float(np.max(np.abs(sol.values[k] - 1.0)))
    integral = _mild_integral(sol, k, 1)
    return float(np.max(np.abs(sol.values[k] - 1.0 - integral)))


def planar_kernel_gap(sol: FSolution, checkpoint: int, pad: int = 4) -> float:
    """
    Max difference of the mild integral between wrapped and planar heat kernels

    The planar kernel is realized on a torus `pad` times larger, where the
    nearest periodic image is at least (pad-1) L away.
    """
    if sol.grid is None:
        raise ConfigError("Kernel gap needs a torus solution")
    k = checkpoint if checkpoint >= 0 else len(sol.times) + checkpoint
    if k == 0 or sol.beta == 0:
        return 0.0
    return float(np.max(np.abs(_mild_integral(sol, k, 1) - _mild_integral(sol, k, pad))))


def check_F_invariants(sol: FSolution, tolerance: float = 1e-10) -> List[str]:
    """Maximum-principle heuristics; violations are logged, never raised"""
    problems = []
    for k, values in enumerate(sol.values):
        if float(values.min()) < 1.0 - tolerance:
            problems.append(f"F below 1 at t={sol.times[k]:.4g} (min {values.min():.12g})")
        if k > 0 and np.any(values < sol.values[k - 1] - tolerance):
            problems.append(f"F decreased in time before t={sol.times[k]:.4g}")
        profile = sol.profile(k)
        if np.any(np.diff(profile) > tolerance):
            problems.append(f"F not radially nonincreasing at t={sol.times[k]:.4g}")
    for problem in problems:
        logger.warning(f"⚠️ {problem}")
    return problems


@dataclass
class PredictionReport:
    epsilon: float
    beta: float
    t: float
    predicted_variance: float
    limit_variance: float
    relative_gap: float

    def to_row(self) -> Dict:
        return {
            'beta': self.beta, 'eps': self.epsilon, 't': self.t,
            'quantity': 'variance_prediction', 'estimate': self.predicted_variance,
            'limit': self.limit_variance, 'relative_gap': self.relative_gap,
        }


def _gauss_panels(edges: np.ndarray, order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    points = 0.5 * (b - a) * (nodes + 1.0) + a
    return points.ravel(), (0.5 * (b - a) * weights).ravel()


def variance_prediction(g: TestFunction, t: float, beta: float, eps: float,
                        sol: FSolution) -> PredictionReport:
    """
    int_0^t int int G_{2(t-l)}(x - y - eps w) R(w) F(l/eps^2, w) dw dl g(x) g(y) dx dy

    Evaluated in Fourier-Hankel form:
    int_0^t dl int k dk/2pi |g^(k)|^2 exp(-(t-l)k^2) H_l(eps k),
    H_l(q) = 2pi int_0^1 r R(r) F(l/eps^2, r) J0(q r) dr.
    """
    horizon = t / eps ** 2
    if abs(sol.horizon - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigError(f"F solved to {sol.horizon:.6g}, prediction needs {horizon:.6g}")
    if sol.beta != beta or sol.eps != eps:
        raise ConfigError("F solution solved at different (beta, eps)")

    k_max = (10.0 if g.kind == GAUSSIAN else 60.0) / g.scale
    k, wk = _gauss_panels(np.linspace(0.0, k_max, 17), 32)
    spectrum = wk * k * g.fourier_abs2(k) / (2.0 * math.pi)
    r, wr = _gauss_panels(np.linspace(0.0, sol.kernel.support_radius, 9), 16)
    r_weights = 2.0 * math.pi * wr * r * sol.kernel.evaluate_radius(r)
    bessel = special.j0(np.outer(eps * k, r))

    low = t * 1e-10
    ells, w_ell = _gauss_panels(np.concatenate([[0.0], np.geomspace(low, t, 48)]), 8)
    total = 0.0
    for ell, w in zip(ells, w_ell):
        profile = sol.profile_at(ell / eps ** 2, r)
        hankel = bessel @ (r_weights * profile)
        total += w * float(np.dot(spectrum * np.exp(-(t - ell) * k * k), hankel))

    limit = sigma_t_squared(g, t, beta)
    return PredictionReport(eps, beta, t, total, limit, abs(total - limit) / limit)
