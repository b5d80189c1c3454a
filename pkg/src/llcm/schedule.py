"""Variance-preserving noise schedules.

The forward kernel is q(x_t | x_0) = N(alpha(t) x_0, sigma(t)^2 I) with
alpha(t) = sqrt(alpha_bar(t)) and sigma(t) = sqrt(1 - alpha_bar(t)).
alpha_bar is defined on the DDPM index grid t_i = i / N and interpolated in
between with a C2 cubic spline in log alpha_bar, so solvers may take arbitrary
step sizes and the SDE coefficients are smooth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

KINDS = ("vp_linear", "vp_cosine")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "vp_linear"
    N: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    cosine_s: float = 0.008
    t_max: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not 0.0 < self.beta_min < self.beta_max < 1.0:
            raise ValueError("need 0 < beta_min < beta_max < 1")
        if not 0.0 < self.t_max <= 1.0:
            raise ValueError("t_max must lie in (0, 1]")

    @property
    def t_min(self) -> float:
        return 1.0 / self.N

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ScheduleSpec:
        return cls(**d)

    @property
    def schedule_id(self) -> str:
        if self.kind == "vp_linear":
            return f"vp_linear(N={self.N},beta_min={self.beta_min},beta_max={self.beta_max})"
        return f"vp_cosine(N={self.N},s={self.cosine_s})"

    # -- discrete grid -----------------------------------------------------

    def betas(self) -> np.ndarray:
        if self.kind == "vp_linear":
            return np.linspace(self.beta_min, self.beta_max, self.N)
        i = np.arange(self.N + 1) / self.N
        f = np.cos((i + self.cosine_s) / (1 + self.cosine_s) * np.pi / 2) ** 2
        abar = f / f[0]
        return np.clip(1.0 - abar[1:] / abar[:-1], 0.0, 0.999)

    @cached_property
    def log_alpha_bar_grid(self) -> np.ndarray:
        """log alpha_bar at t_i = i / N for i = 0..N (entry 0 is exactly 0)."""
        return np.concatenate([[0.0], np.cumsum(np.log1p(-self.betas()))])

    @cached_property
    def _spline(self) -> CubicSpline:
        return CubicSpline(np.arange(self.N + 1) / self.N, self.log_alpha_bar_grid)

    @cached_property
    def _dspline(self):
        return self._spline.derivative()

    # -- continuous-time quantities -----------------------------------------

    def log_alpha_bar(self, t) -> np.ndarray:
        t = _check_t(t, 0.0, 1.0)
        return self._spline(t)

    def alpha_sigma(self, t):
        """(alpha_t, sigma_t); scalars in, scalars out."""
        lab = self.log_alpha_bar(t)
        alpha = np.exp(0.5 * lab)
        sigma = np.sqrt(-np.expm1(lab))
        if np.ndim(t) == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def drift_diffusion(self, t):
        """(f_t, g_t^2) of dx = f x dt + g dw.

        f = d log alpha / dt and g^2 = d sigma^2/dt - 2 f sigma^2 (= -2 f for VP).
        Defined for t in (0, 1]; at t = 1 the derivative is one-sided.
        """
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr <= 0.0):
            raise ValueError("drift_diffusion is undefined at t <= 0")
        _check_t(t_arr, 0.0, 1.0)
        dlab = self._dspline(t_arr)
        lab = self._spline(t_arr)
        f = 0.5 * dlab
        abar = np.exp(lab)
        sigma2 = -np.expm1(lab)
        dsigma2 = -abar * dlab
        g2 = dsigma2 - 2.0 * f * sigma2
        if np.ndim(t) == 0:
            return float(f), float(g2)
        return f, g2

    def transition(self, s, t):
        """Kernel q(x_t | x_s) = N(a x_s, v I) for s <= t; returns (a, v)."""
        if s > t:
            raise ValueError(f"transition needs s <= t, got s={s}, t={t}")
        a_s, sg_s = self.alpha_sigma(s)
        a_t, sg_t = self.alpha_sigma(t)
        a = a_t / a_s
        return a, sg_t**2 - a**2 * sg_s**2


def _check_t(t, lo: float, hi: float) -> np.ndarray:
    t_arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t_arr)) or np.any(t_arr < lo) or np.any(t_arr > hi):
        raise ValueError(f"t must lie in [{lo}, {hi}], got {t}")
    return t_arr


def perturb(s: ScheduleSpec, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """alpha(t) x0 + sigma(t) eps; ``t`` may be a scalar or per-row array."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    alpha, sigma = s.alpha_sigma(t)
    if np.ndim(alpha):
        alpha, sigma = alpha[:, None], sigma[:, None]
    return alpha * x0 + sigma * eps


def timestep_grid(s: ScheduleSpec, n_steps: int, kind: str = "uniform") -> list[float]:
    """Descending evaluation times t_max * (n - i) / n for i = 0..n-1.

    One step evaluates only t_max; with n_steps = N the grid ends at t_min.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if kind != "uniform":
        raise ValueError(f"unknown grid kind {kind!r}")
    return [s.t_max * (n_steps - i) / n_steps for i in range(n_steps)]


def integration_times(s: ScheduleSpec, n_steps: int) -> list[float]:
    """Grid plus the terminal time t_min, i.e. the n_steps solver intervals."""
    grid = timestep_grid(s, n_steps)
    if grid[-1] > s.t_min * (1 + 1e-12):
        grid.append(s.t_min)
    return grid
