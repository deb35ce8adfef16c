#!/usr/bin/env python3
"""
Deterministic kernels: mollifier, noise covariance, heat kernel, the
effective variance and the limiting Edwards-Wilkinson variance.

All objects are immutable after construction and safe to share between
processes and threads.
"""

import math
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Tuple

import numpy as np
import pandas as pd
from scipy import integrate, special
from scipy.interpolate import CubicSpline

from montecarlo import ConfigError, DomainError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
SMOOTH_BUMP = 'smooth-bump'
GRID_BOX = 'grid-box'
GAUSSIAN = 'gaussian'
BUMP = 'bump'

# Radius table for R and the polar quadrature used to build it
RADIUS_POINTS = 4096
RADIAL_NODES = 256
ANGULAR_NODES = 129


def _bump_profile(rho: np.ndarray) -> np.ndarray:
    """exp(-1/(1-rho^2)) on rho < 1, zero elsewhere"""
    rho = np.asarray(rho, dtype=float)
    inside = rho < 1.0
    safe = np.where(inside, 1.0 - rho * rho, 1.0)
    return np.where(inside, np.exp(-1.0 / safe), 0.0)


def _gauss_legendre(a: float, b: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (nodes + 1.0), half * weights


@lru_cache(maxsize=None)
def _bump_mass() -> float:
    """2*pi * int_0^1 rho exp(-1/(1-rho^2)) drho"""
    value, _ = integrate.quad(lambda r: r * math.exp(-1.0 / (1.0 - r * r)) if r < 1.0 else 0.0,
                              0.0, 1.0, epsabs=1e-15, epsrel=1e-14, limit=200)
    return TWO_PI * value


def log_eps(eps: float) -> float:
    """|log eps| for eps in (0, 1)"""
    if not 0.0 < eps < 1.0:
        raise DomainError(f"Mollification scale must lie in (0,1), got eps={eps}")
    return abs(math.log(eps))


def beta_eps(beta: float, eps: float) -> float:
    """Weak-coupling constant beta / sqrt(|log eps|)"""
    return beta / math.sqrt(log_eps(eps))


@dataclass(frozen=True)
class Mollifier:
    """
    Nonnegative smoothing kernel phi supported in |x| < 1/2 with unit mass

    Parameters:
    - kind: 'smooth-bump' (c*exp(-1/(1-(2|x|)^2))) or 'grid-box'
      (uniform on the square [-w/2, w/2)^2)
    - box_width: Side w of the grid-box square, at most 1/sqrt(2)
    """
    kind: str = SMOOTH_BUMP
    box_width: float = 0.5
    support_radius: float = 0.5
    normalization: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.kind == SMOOTH_BUMP:
            # profile in units of 2|x|: mass scales by 1/4
            norm = 4.0 / _bump_mass()
        elif self.kind == GRID_BOX:
            if not 0.0 < self.box_width <= 1.0 / math.sqrt(2.0) + 1e-15:
                raise ConfigError(f"grid-box width must be in (0, 1/sqrt(2)], got {self.box_width}")
            norm = 1.0 / self.box_width ** 2
        else:
            raise ConfigError(f"Unknown mollifier kind: {self.kind}")
        object.__setattr__(self, 'normalization', norm)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """phi at points x with trailing axis of length 2"""
        x = np.asarray(x, dtype=float)
        if self.kind == SMOOTH_BUMP:
            r = np.hypot(x[..., 0], x[..., 1])
            return self.normalization * _bump_profile(2.0 * r)
        half = 0.5 * self.box_width
        inside = ((x[..., 0] >= -half) & (x[..., 0] < half) &
                  (x[..., 1] >= -half) & (x[..., 1] < half))
        return np.where(inside, self.normalization, 0.0)

    def radial(self, r: np.ndarray) -> np.ndarray:
        if self.kind != SMOOTH_BUMP:
            raise ConfigError("Radial profile only exists for the smooth bump")
        return self.normalization * _bump_profile(2.0 * np.asarray(r, dtype=float))

    def l2_squared(self) -> float:
        """int phi^2, by one-dimensional radial quadrature"""
        if self.kind == GRID_BOX:
            return self.normalization
        value, _ = integrate.quad(lambda r: r * float(self.radial(r)) ** 2, 0.0, 0.5,
                                  epsabs=1e-14, epsrel=1e-13, limit=200)
        return TWO_PI * value


def mollifier_eval(m: Mollifier, x) -> float:
    """phi(x) for a single point or an array of points"""
    return m.evaluate(np.asarray(x, dtype=float))


@lru_cache(maxsize=8)
def _radial_covariance_table(m: Mollifier, points: int) -> Tuple[np.ndarray, np.ndarray]:
    """R(r) = int phi(y + r e1) phi(y) dy in polar coordinates around y = 0"""
    radii = np.linspace(0.0, 1.0, points)
    rho, w_rho = _gauss_legendre(0.0, m.support_radius, RADIAL_NODES)
    theta = np.linspace(0.0, math.pi, ANGULAR_NODES)
    w_theta = np.full(ANGULAR_NODES, math.pi / (ANGULAR_NODES - 1))
    w_theta[[0, -1]] *= 0.5
    # full circle is twice the half circle by reflection symmetry
    w_theta *= 2.0

    outer = w_rho * rho * m.radial(rho)
    cos_t = np.cos(theta)
    table = np.empty(points)
    for start in range(0, points, 64):
        r = radii[start:start + 64, None, None]
        dist = np.sqrt(np.maximum(rho[None, :, None] ** 2 + r ** 2
                                  + 2.0 * rho[None, :, None] * r * cos_t[None, None, :], 0.0))
        inner = (m.radial(dist) * w_theta[None, None, :]).sum(axis=2)
        table[start:start + 64] = (inner * outer[None, :]).sum(axis=1)
    table[-1] = 0.0
    return radii, table


@dataclass(frozen=True)
class CovarianceKernel:
    """
    Spatial covariance R = phi * phi(-.) of the noise, tabulated once

    Built by build_covariance(); evaluate() is vectorized and returns exact
    zeros outside the unit ball.
    """
    mollifier: Mollifier
    radii: np.ndarray = field(repr=False)
    radial_table: np.ndarray = field(repr=False)
    r0: float = 0.0
    support_radius: float = 1.0

    def __post_init__(self):
        spline = None
        if self.mollifier.kind == SMOOTH_BUMP:
            spline = CubicSpline(self.radii, self.radial_table, bc_type=((1, 0.0), (1, 0.0)))
        object.__setattr__(self, '_spline', spline)

    def __hash__(self):
        return hash((self.mollifier, self.radii.size))

    def __eq__(self, other):
        return (isinstance(other, CovarianceKernel) and other.mollifier == self.mollifier
                and other.radii.size == self.radii.size)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.mollifier.kind == GRID_BOX:
            w = self.mollifier.box_width
            tent = (np.maximum(w - np.abs(x[..., 0]), 0.0) *
                    np.maximum(w - np.abs(x[..., 1]), 0.0))
            return tent / w ** 4
        return self.evaluate_radius(np.hypot(x[..., 0], x[..., 1]))

    def evaluate_radius(self, r: np.ndarray) -> np.ndarray:
        if self.mollifier.kind == GRID_BOX:
            r = np.asarray(r, dtype=float)
            return self.evaluate(np.stack([r, np.zeros_like(r)], axis=-1))
        r = np.asarray(r, dtype=float)
        inside = r < self.support_radius
        values = self._spline(np.where(inside, r, 0.0))
        return np.where(inside, np.clip(values, 0.0, self.r0), 0.0)

    def export_csv(self, path: str) -> pd.DataFrame:
        """Write the (radius, value) table for inspection"""
        radii = self.radii
        df = pd.DataFrame({'radius': radii, 'value': self.evaluate_radius(radii)})
        df.to_csv(path, index=False, float_format='%.17g')
        logger.info(f"📊 Covariance table written to {path}")
        return df


def build_covariance(m: Mollifier = None, points: int = RADIUS_POINTS) -> CovarianceKernel:
    """Tabulate R for mollifier m (default: smooth bump)"""
    m = m or Mollifier()
    if m.kind == GRID_BOX:
        radii = np.linspace(0.0, 1.0, points)
        r0 = m.normalization
        kernel = CovarianceKernel(m, radii, np.zeros(points), r0=r0)
        object.__setattr__(kernel, 'radial_table', kernel.evaluate_radius(radii))
        return kernel
    radii, table = _radial_covariance_table(m, points)
    return CovarianceKernel(m, radii, table, r0=float(table[0]))


@lru_cache(maxsize=4)
def default_covariance() -> CovarianceKernel:
    return build_covariance(Mollifier())


def covariance_eval(k: CovarianceKernel, x) -> float:
    """R(x) by radial interpolation; exact zero for |x| >= 1"""
    return k.evaluate(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class HeatKernelQuery:
    time: float
    point: Tuple[float, float] = (0.0, 0.0)


def heat_kernel(t: float, x: np.ndarray) -> np.ndarray:
    """G_t(x) = (2 pi t)^-1 exp(-|x|^2 / 2t), vectorized over x"""
    if not t > 0:
        raise DomainError(f"Heat kernel needs positive time, got t={t}")
    x = np.asarray(x, dtype=float)
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    return np.exp(-r2 / (2.0 * t)) / (TWO_PI * t)


def heat_kernel_eval(q: HeatKernelQuery) -> float:
    return float(heat_kernel(q.time, np.asarray(q.point, dtype=float)))


def effective_variance(beta: float) -> float:
    """nu_eff^2 = 2 pi / (2 pi - beta^2) in the subcritical regime"""
    b2 = beta * beta
    if b2 >= TWO_PI:
        raise DomainError(f"Supercritical coupling: beta^2={b2:.6g} >= 2*pi")
    return TWO_PI / (TWO_PI - b2)


@dataclass(frozen=True)
class TestFunction:
    """
    Unit-mass test function g

    Parameters:
    - kind: 'gaussian' (density with standard deviation `scale`) or 'bump'
      (smooth bump supported in |x - center| < scale)
    - scale: Length scale
    - center: Center point
    """
    __test__ = False

    kind: str = GAUSSIAN
    scale: float = 1.0
    center: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, BUMP):
            raise ConfigError(f"Unknown test function kind: {self.kind}")
        if not self.scale > 0:
            raise ConfigError(f"Test function scale must be positive, got {self.scale}")

    def radial(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        s = self.scale
        if self.kind == GAUSSIAN:
            return np.exp(-r * r / (2.0 * s * s)) / (TWO_PI * s * s)
        return _bump_profile(r / s) / (s * s * _bump_mass())

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.radial(np.hypot(x[..., 0] - self.center[0], x[..., 1] - self.center[1]))

    def on_grid(self, grid) -> np.ndarray:
        """
        Periodic samples on a torus grid (minimal-image displacement)

        A center lying on a grid node is handled in integer index arithmetic
        so that shifting the center by whole cells rolls the samples exactly.
        """
        n, h = grid.n, grid.spacing
        idx = np.arange(n)
        samples = []
        for c in self.center:
            fractional = c / h + n / 2
            if abs(fractional - round(fractional)) < 1e-9:
                d = ((idx - int(round(fractional)) + n // 2) % n - n // 2) * h
            else:
                d = (idx - n / 2) * h - c
                d = (d + grid.side / 2) % grid.side - grid.side / 2
            samples.append(d)
        dx, dy = np.meshgrid(samples[0], samples[1], indexing='ij')
        return self.radial(np.hypot(dx, dy))

    def fourier_abs2(self, k: np.ndarray) -> np.ndarray:
        """|g^(k)|^2 as a function of |k|; independent of the center"""
        k = np.asarray(k, dtype=float)
        if self.kind == GAUSSIAN:
            return np.exp(-(self.scale * k) ** 2)
        r, w = _gauss_legendre(0.0, self.scale, 128)
        hat = TWO_PI * (special.j0(np.multiply.outer(k, r)) * (w * r * self.radial(r))).sum(axis=-1)
        return hat * hat


class _PeriodicBox:
    """Minimal grid description used for the spectral quadrature"""

    def __init__(self, side: float, n: int):
        self.side = side
        self.n = n
        self.spacing = side / n


def _next_pow2(x: float) -> int:
    return 1 << max(4, int(math.ceil(math.log2(max(x, 1.0)))))


def _pair_spectrum(g: TestFunction, grid) -> Tuple[np.ndarray, np.ndarray]:
    """Weights |g_k|^2 / L^2 and |k|^2 of the trapezoid-sampled g on a torus"""
    samples = g.on_grid(grid)
    h = grid.spacing
    hat = np.fft.fft2(samples) * h * h
    k = TWO_PI * np.fft.fftfreq(grid.n, d=h)
    kx, ky = np.meshgrid(k, k, indexing='ij')
    weights = (np.abs(hat) ** 2 / grid.side ** 2).ravel()
    k2 = (kx ** 2 + ky ** 2).ravel()
    keep = weights > weights.max() * 1e-30
    return weights[keep], k2[keep]


def _time_integral(weights: np.ndarray, k2: np.ndarray, t: float) -> float:
    def pair_integrand(s):
        return float(np.dot(weights, np.exp(-s * k2)))

    value, err = integrate.quad(pair_integrand, 0.0, t, epsabs=1e-13, epsrel=1e-10, limit=200)
    if err > 1e-8 * max(abs(value), 1e-300):
        logger.warning(f"⚠️ sigma_t^2 quadrature error estimate {err:.2e} above tolerance")
    return value


def sigma_t_squared(g: TestFunction, t: float, beta: float) -> float:
    """
    Limiting variance nu_eff^2 * int_0^t int int g(x1) g(x2) G_2s(x1-x2) dx1 dx2 ds

    The spatial integral is a product trapezoid truncated at 8 standard
    deviations of the pair density (evaluated through Parseval); the time
    integral is adaptive.
    """
    if t < 0:
        raise DomainError(f"Time must be nonnegative, got t={t}")
    nu2 = effective_variance(beta)
    if t == 0:
        return 0.0
    side = 16.0 * math.sqrt(g.scale ** 2 + t)
    step = g.scale / (4.0 if g.kind == GAUSSIAN else 24.0)
    box = _PeriodicBox(side, _next_pow2(side / step))
    box_center = TestFunction(g.kind, g.scale, (0.0, 0.0))
    weights, k2 = _pair_spectrum(box_center, box)
    return nu2 * _time_integral(weights, k2, t)


def sigma_t_squared_torus(g: TestFunction, t: float, beta: float, grid) -> float:
    """sigma_t^2 with the periodized heat kernel of the simulation torus"""
    if t < 0:
        raise DomainError(f"Time must be nonnegative, got t={t}")
    nu2 = effective_variance(beta)
    if t == 0:
        return 0.0
    weights, k2 = _pair_spectrum(g, grid)
    return nu2 * _time_integral(weights, k2, t)


def gaussian_sigma_oracle(t: float, beta: float = 0.0, scale: float = 1.0) -> float:
    """Closed form for a Gaussian g of standard deviation `scale`"""
    return effective_variance(beta) * math.log1p(t / scale ** 2) / (4.0 * math.pi)
