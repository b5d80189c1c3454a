"""Reverse-time integrators for the probability-flow ODE and reverse SDE.

Every model passed in here only needs an ``eps(z, c, t)`` method returning
the noise prediction as an ``(n, d)`` array. Times may be scalars or per-row
arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .nn_core import NULL_TOKEN
from .schedule import ScheduleSpec, integration_times
from .toy_worlds import LatentCodec, SampleBatch, decode

SOLVERS = ("euler_maruyama", "euler_ode", "ddim", "leapfrog")


def _col(a):
    """Per-row coefficient -> column vector; scalars pass through."""
    return a[:, None] if np.ndim(a) else a


def _check_order(t, s, allow_equal: bool = False):
    t_arr, s_arr = np.asarray(t), np.asarray(s)
    bad = s_arr > t_arr if allow_equal else s_arr >= t_arr
    if np.any(bad):
        raise ValueError(f"reverse step needs s < t, got t={t}, s={s}")


@dataclass
class SamplerConfig:
    solver: str = "ddim"
    n_steps: int = 50
    omega: float = 0.0
    c: int | None = None
    seed: int = 0
    h: float = 0.5
    t_max: float = 1.0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; valid solvers: {', '.join(SOLVERS)}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.omega < 0:
            raise ValueError("guidance scale omega must be >= 0")
        if self.h <= 0:
            raise ValueError("leapfrog h must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LeapfrogState:
    x: np.ndarray
    v: np.ndarray
    t: float

    def __post_init__(self):
        if self.x.shape != self.v.shape:
            raise ValueError(f"position {self.x.shape} and velocity {self.v.shape} differ")


def cfg_noise(eps_cond, eps_uncond, omega):
    """(1 + omega) eps_cond - omega eps_uncond; omega may be per-row."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"eps_cond {eps_cond.shape} and eps_uncond {eps_uncond.shape} differ")
    w = _col(np.asarray(omega, dtype=np.float64)) if np.ndim(omega) else float(omega)
    return (1.0 + w) * eps_cond - w * eps_uncond


def guided_eps(model, z, c, omega, t):
    """CFG-combined noise; skips the unconditional call when omega is exactly 0."""
    eps_c = model.eps(z, c, t)
    if np.all(np.asarray(omega) == 0):
        return eps_c
    return cfg_noise(eps_c, model.eps(z, NULL_TOKEN, t), omega)


def predict_x0_eps(model, z, c, omega, t, schedule: ScheduleSpec):
    """(x0_hat, eps_hat) with x0_hat = (z - sigma_t eps_hat) / alpha_t."""
    alpha, sigma = schedule.alpha_sigma(t)
    if np.any(np.asarray(alpha) < 1e-8):
        raise ValueError(f"alpha_t underflow at t={t}")
    eps = guided_eps(model, z, c, omega, t)
    x0 = (z - _col(sigma) * eps) / _col(alpha)
    return x0, eps


def ode_drift(model, z, c, omega, t, schedule: ScheduleSpec):
    """h(z, t) = f(t) z + g(t)^2 / (2 sigma_t) eps_hat."""
    f, g2 = schedule.drift_diffusion(t)
    _, sigma = schedule.alpha_sigma(t)
    eps = guided_eps(model, z, c, omega, t)
    return _col(f) * z + _col(g2 / (2.0 * np.asarray(sigma))) * eps


def euler_maruyama_step(model, z, c, omega, t, s, noise, schedule: ScheduleSpec):
    """One reverse-SDE step t -> s: drift f z + g^2/sigma eps, noise g sqrt|s - t|."""
    _check_order(t, s)
    f, g2 = schedule.drift_diffusion(t)
    _, sigma = schedule.alpha_sigma(t)
    eps = guided_eps(model, z, c, omega, t)
    dt = np.asarray(s, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    drift = _col(f) * z + _col(np.asarray(g2) / np.asarray(sigma)) * eps
    return z + _col(dt) * drift + _col(np.sqrt(np.maximum(g2, 0.0) * np.abs(dt))) * noise


def euler_ode_step(model, z, c, omega, t, s, schedule: ScheduleSpec):
    _check_order(t, s)
    dt = np.asarray(s, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    return z + _col(dt) * ode_drift(model, z, c, omega, t, schedule)


def ddim_step(z, x0, eps, t, s, schedule: ScheduleSpec):
    """Deterministic DDIM update alpha_s x0 + sigma_s eps (s == t reproduces z)."""
    _check_order(t, s, allow_equal=True)
    alpha_s, sigma_s = schedule.alpha_sigma(s)
    return _col(alpha_s) * x0 + _col(sigma_s) * eps


def leapfrog_step(state: LeapfrogState, model, c, omega, s, h: float,
                  schedule: ScheduleSpec, update_velocity: bool = True) -> LeapfrogState:
    """Kick-drift step from ``state.t`` to ``s``.

    The model's (x0_hat, eps_hat) at the current point give the DDIM-style
    initial position x = alpha_s x0_hat and velocity v = sigma_s eps_hat.
    The half-step velocity 2 v drives the position x1 = x + h * 2 v, which
    equals the DDIM step at h = 0.5. The velocity is then kicked with the
    ODE drift at (x1, s).
    """
    _check_order(state.t, s)
    if h < 0:
        raise ValueError("h must be >= 0")
    x0, eps = predict_x0_eps(model, state.x, c, omega, state.t, schedule)
    alpha_s, sigma_s = schedule.alpha_sigma(s)
    x_init = _col(alpha_s) * x0
    v_half = 2.0 * _col(sigma_s) * eps
    x1 = x_init + h * v_half
    if update_velocity:
        v_next = v_half + h * ode_drift(model, x1, c, omega, s, schedule)
    else:
        v_next = v_half
    return LeapfrogState(x1, v_next, s)


def psi_solve(z, t, s, c, model, schedule: ScheduleSpec, solver: str = "leapfrog",
              h: float = 0.5) -> np.ndarray:
    """One-call solver increment z_s - z from t to s, without guidance.

    Guidance is applied by the caller as z + (1 + w) psi(c) - w psi(null).
    """
    _check_order(t, s, allow_equal=True)
    if np.all(np.asarray(s) == np.asarray(t)):
        return np.zeros_like(z)
    if np.any(np.asarray(s) == np.asarray(t)):
        raise ValueError("psi_solve: mixed empty and non-empty intervals")
    if solver == "leapfrog":
        state = LeapfrogState(z, np.zeros_like(z), t)
        return leapfrog_step(state, model, c, 0.0, s, h, schedule, update_velocity=False).x - z
    if solver == "ddim":
        x0, eps = predict_x0_eps(model, z, c, 0.0, t, schedule)
        return ddim_step(z, x0, eps, t, s, schedule) - z
    if solver == "euler_ode":
        return euler_ode_step(model, z, c, 0.0, t, s, schedule) - z
    raise ValueError(f"unknown psi solver {solver!r}")


def _labels_for(cfg: SamplerConfig, n: int, n_classes: int, rng) -> np.ndarray:
    if cfg.c is None:
        return rng.integers(0, n_classes, size=n)
    if cfg.c != NULL_TOKEN and not 0 <= cfg.c < n_classes:
        raise ValueError(f"class {cfg.c} out of range for {n_classes} classes")
    return np.full(n, cfg.c, dtype=np.int64)


def sample(model, codec: LatentCodec, cfg: SamplerConfig, n: int, schedule: ScheduleSpec,
           n_classes: int, manifest: dict | None = None) -> SampleBatch:
    """Integrate from z_T ~ N(0, I) down to t_min and decode.

    Labels are drawn uniformly per particle unless ``cfg.c`` pins them.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(cfg.seed)
    labels = _labels_for(cfg, n, n_classes, rng)
    z = rng.standard_normal((n, codec.latent_dim))
    sched = replace(schedule, t_max=cfg.t_max)
    times = integration_times(sched, cfg.n_steps)
    state = LeapfrogState(z, np.zeros_like(z), times[0])
    for t, s in zip(times[:-1], times[1:]):
        if cfg.solver == "euler_ode":
            z = euler_ode_step(model, z, labels, cfg.omega, t, s, schedule)
        elif cfg.solver == "euler_maruyama":
            z = euler_maruyama_step(model, z, labels, cfg.omega, t, s,
                                    rng.standard_normal(z.shape), schedule)
        elif cfg.solver == "ddim":
            x0, eps = predict_x0_eps(model, z, labels, cfg.omega, t, schedule)
            z = ddim_step(z, x0, eps, t, s, schedule)
        else:
            state = leapfrog_step(state, model, labels, cfg.omega, s, cfg.h, schedule)
            z = state.x
    points = decode(codec, z)
    meta = {"source": "sampler", "sampler": cfg.to_dict(), "n": n,
            "schedule": schedule.to_dict(), "schedule_id": schedule.schedule_id,
            "codec": codec.to_dict(), "times": times}
    meta.update(manifest or {})
    return SampleBatch(points, labels, meta)
