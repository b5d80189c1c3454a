"""Teacher training, the consistency head, consistency distillation and
few-step consistency sampling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn_core as nn
from .nn_core import NULL_TOKEN, MlpConfig, MlpParams, OptState, Tensor
from .samplers import ddim_step, guided_eps, predict_x0_eps, psi_solve
from .schedule import ScheduleSpec, timestep_grid
from .toy_worlds import LatentCodec, SampleBatch, ToyWorld, decode, encode, sample_world


class TrainingDivergedError(FloatingPointError):
    """NaN/Inf loss during training; carries the iteration index and trace."""

    def __init__(self, message: str, iteration: int, trace: list[float]):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


# ---------------------------------------------------------------------------
# Noise predictors
# ---------------------------------------------------------------------------


class MlpNoisePredictor:
    """eps_theta(z, c, t[, omega]) realised by the conditional MLP.

    With ``output="v"`` the raw network output u is read as a velocity and the
    noise prediction is eps = sigma_t z + alpha_t u, so x0_hat = alpha_t z - sigma_t u
    stays well conditioned where alpha_t is tiny. ``output="eps"`` returns the
    raw output unchanged.
    """

    kind = "mlp"

    def __init__(self, params: MlpParams, n_classes: int, schedule: ScheduleSpec | None = None,
                 output: str = "v"):
        if output not in ("eps", "v"):
            raise ValueError(f"unknown output parameterization {output!r}")
        if output == "v" and schedule is None:
            raise ValueError("v output parameterization needs a schedule")
        self.params = params
        self.n_classes = n_classes
        self.schedule = schedule
        self.output = output

    @property
    def config(self) -> MlpConfig:
        return self.params.config

    def inputs(self, z, c, t, omega=None):
        n = np.asarray(z).shape[0]
        cfg = self.config
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        c_arr = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        c_emb = nn.embed_condition(c_arr, self.n_classes, cfg.cond_dim)
        t_emb = nn.embed_time(t_arr, cfg.time_dim)
        w_emb = None
        if cfg.omega_dim:
            w_arr = np.broadcast_to(np.asarray(0.0 if omega is None else omega, float), (n,))
            w_emb = nn.embed_guidance(w_arr, cfg.omega_dim)
        return t_arr, c_emb, t_emb, w_emb

    def eps_tensor(self, params: MlpParams, z, c, t, omega=None) -> Tensor:
        t_arr, c_emb, t_emb, w_emb = self.inputs(z, c, t, omega)
        out = nn.mlp_forward(params, z, c_emb, t_emb, w_emb)
        if self.output == "eps":
            return out
        alpha, sigma = self.schedule.alpha_sigma(t_arr)
        return out * alpha[:, None] + sigma[:, None] * np.asarray(z, dtype=np.float64)

    def eps(self, z, c, t, omega=None) -> np.ndarray:
        return self.eps_tensor(self.params, z, c, t, omega).data

    def with_params(self, params: MlpParams) -> MlpNoisePredictor:
        return MlpNoisePredictor(params, self.n_classes, self.schedule, self.output)


# ---------------------------------------------------------------------------
# Teacher
# ---------------------------------------------------------------------------


@dataclass
class TeacherConfig:
    iterations: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    p_uncond: float = 0.1
    dataset_size: int = 20000
    output: str = "v"

    def to_dict(self) -> dict:
        return asdict(self)


def latent_dataset(world: ToyWorld, codec: LatentCodec, n: int, seed: int):
    data = sample_world(world, n, seed)
    return encode(codec, data.points), data.labels


def train_teacher(world: ToyWorld, codec: LatentCodec, schedule: ScheduleSpec,
                  mlp_config: MlpConfig, cfg: TeacherConfig, seed: int):
    """Denoising score matching for an eps-prediction MLP.

    Labels are replaced by NULL_TOKEN with probability ``p_uncond`` so the
    same network provides the unconditional branch for guidance.
    Returns (predictor, loss trace).
    """
    rng = np.random.default_rng(seed)
    z_data, c_data = latent_dataset(world, codec, cfg.dataset_size, seed + 1)
    params = nn.init_mlp(mlp_config, seed, zero_last=True)
    model = MlpNoisePredictor(params, world.n_classes, schedule, cfg.output)
    state = OptState.fresh(params, lr=cfg.lr)
    trace: list[float] = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, z_data.shape[0], cfg.batch_size)
        z0, c = z_data[idx], c_data[idx].copy()
        c[rng.random(cfg.batch_size) < cfg.p_uncond] = NULL_TOKEN
        t = rng.uniform(schedule.t_min, 1.0, cfg.batch_size)
        eps = rng.standard_normal(z0.shape)
        alpha, sigma = schedule.alpha_sigma(t)
        zt = alpha[:, None] * z0 + sigma[:, None] * eps
        try:
            pred = model.eps_tensor(params, zt, c, t)
            loss = nn.sum_rows(nn.square(pred - eps)).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise nn.NonFiniteError("non-finite loss")
            grads = nn.backward(loss, params.tensors())
            params, state = nn.adam_step(params, grads, state)
        except nn.NonFiniteError as exc:
            raise TrainingDivergedError(f"teacher training diverged at iteration {it}: {exc}",
                                        it, trace) from exc
        trace.append(value)
    return model.with_params(params), trace


# ---------------------------------------------------------------------------
# Consistency head
# ---------------------------------------------------------------------------


class ConsistencyHead:
    """f(z, w, c, t) = c_skip(t) z + c_out(t) (z - sigma_t eps(z, w, c, t)) / alpha_t.

    Coefficients use tau = timestep_scaling * N * (t - t_min), i.e. the
    schedule index measured from the boundary, so c_skip(t_min) = 1 and
    c_out(t_min) = 0 exactly.
    """

    def __init__(self, predictor: MlpNoisePredictor, schedule: ScheduleSpec,
                 sigma_data: float = 0.5, timestep_scaling: float = 10.0):
        if not predictor.config.omega_dim:
            raise ValueError("consistency head needs a guidance-conditioned network (omega_dim > 0)")
        self.predictor = predictor
        self.schedule = schedule
        self.sigma_data = sigma_data
        self.timestep_scaling = timestep_scaling

    @property
    def params(self) -> MlpParams:
        return self.predictor.params

    def with_params(self, params: MlpParams) -> ConsistencyHead:
        return ConsistencyHead(self.predictor.with_params(params), self.schedule,
                               self.sigma_data, self.timestep_scaling)

    def _tau(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.timestep_scaling * self.schedule.N * np.maximum(t - self.schedule.t_min, 0.0)

    def c_skip(self, t):
        tau = self._tau(t)
        return self.sigma_data**2 / (tau**2 + self.sigma_data**2)

    def c_out(self, t):
        tau = self._tau(t)
        return tau / np.sqrt(tau**2 + self.sigma_data**2)

    def forward_tensor(self, params: MlpParams, z, omega, c, t) -> Tensor:
        n = np.asarray(z).shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        alpha, sigma = self.schedule.alpha_sigma(t_arr)
        if np.any(alpha < 1e-8):
            raise ValueError("alpha_t underflow in consistency head")
        eps = self.predictor.eps_tensor(params, z, c, t_arr, omega)
        z = np.asarray(z, dtype=np.float64)
        x0 = (z - eps * sigma[:, None]) * (1.0 / alpha)[:, None]
        return x0 * self.c_out(t_arr)[:, None] + self.c_skip(t_arr)[:, None] * z

    def __call__(self, z, omega, c, t) -> np.ndarray:
        return self.forward_tensor(self.params, z, omega, c, t).data


def consistency_forward(head: ConsistencyHead, z, omega, c, t, schedule: ScheduleSpec | None = None):
    if schedule is not None and schedule != head.schedule:
        raise ValueError("schedule differs from the one the head was built with")
    return head(z, omega, c, t)


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    k: int = 20
    N: int = 1000
    omega_min: float = 0.0
    omega_max: float = 4.0
    ema_decay: float = 0.95
    iterations: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    lr_schedule: str = "constant"
    distance: str = "squared_l2"
    huber_c: float = 0.001
    teacher: str = "oracle"
    solver: str = "leapfrog"
    leapfrog_h: float = 0.5
    target: str = "solver"
    sigma_data: float = 0.5
    timestep_scaling: float = 10.0
    warmstart_iterations: int = 1000
    dataset_size: int = 20000
    omega_dim: int = 8
    output: str = "v"

    def __post_init__(self):
        if not 1 <= self.k <= self.N - 1:
            raise ValueError(f"k must satisfy 1 <= k <= N - 1 = {self.N - 1}, got {self.k}")
        if self.omega_min > self.omega_max or self.omega_min < 0:
            raise ValueError("need 0 <= omega_min <= omega_max")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.distance not in ("squared_l2", "huber"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.teacher not in ("oracle", "trained"):
            raise ValueError(f"unknown teacher kind {self.teacher!r}")
        if self.solver not in ("leapfrog", "ddim", "euler_ode"):
            raise ValueError(f"unknown psi solver {self.solver!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.target not in ("solver", "paired_noise"):
            raise ValueError(f"unknown target mode {self.target!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def distill_target(teacher, z_nk, t_nk, t_n, c, omega, schedule: ScheduleSpec,
                   solver: str = "leapfrog", h: float = 0.5) -> np.ndarray:
    """z + (1 + w) psi(z, t_nk, t_n, c) - w psi(z, t_nk, t_n, null)."""
    t_nk_arr, t_n_arr = np.asarray(t_nk, float), np.asarray(t_n, float)
    if np.any(t_n_arr < schedule.t_min * (1 - 1e-12)) or np.any(t_nk_arr > 1.0):
        raise ValueError("distillation times fall outside [t_min, 1]")
    psi_c = psi_solve(z_nk, t_nk, t_n, c, teacher, schedule, solver, h)
    omega_arr = np.asarray(omega, dtype=np.float64)
    if np.all(omega_arr == 0):
        return z_nk + psi_c
    psi_u = psi_solve(z_nk, t_nk, t_n, NULL_TOKEN, teacher, schedule, solver, h)
    w = omega_arr[:, None] if omega_arr.ndim else float(omega_arr)
    return z_nk + (1.0 + w) * psi_c - w * psi_u


def distance(pred: Tensor, target: np.ndarray, kind: str = "squared_l2",
             huber_c: float = 0.001) -> Tensor:
    """Batch mean of d(pred_i, target_i)."""
    sq = nn.sum_rows(nn.square(pred - target))
    if kind == "squared_l2":
        return sq.mean()
    c = huber_c * math.sqrt(pred.shape[1])
    return (nn.sqrt(sq + c * c) - c).mean()


def sample_indices(rng, batch: int, cfg: DistillConfig):
    """n ~ U{1..N-k} and omega ~ U[omega_min, omega_max] per sample."""
    n = rng.integers(1, cfg.N - cfg.k + 1, size=batch)
    omega = rng.uniform(cfg.omega_min, cfg.omega_max, size=batch)
    return n, omega


def cd_loss(head: ConsistencyHead, ema_head: ConsistencyHead, batch, schedule: ScheduleSpec,
            cfg: DistillConfig, rng, teacher, params: MlpParams | None = None):
    """Consistency distillation loss on one minibatch.

    ``batch`` is (z, c) in latent space. Returns (loss tensor, info dict);
    the target branch is computed on plain arrays, so no gradient reaches
    the EMA or teacher parameters.
    """
    z, c = batch
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if cfg.k >= schedule.N:
        raise ValueError(f"k = {cfg.k} must be < N = {schedule.N}")
    params = head.params if params is None else params
    bsz = z.shape[0]
    n, omega = sample_indices(rng, bsz, cfg)
    t_n = n / schedule.N
    t_nk = (n + cfg.k) / schedule.N
    eps = rng.standard_normal(z.shape)
    a_nk, s_nk = schedule.alpha_sigma(t_nk)
    a_n, s_n = schedule.alpha_sigma(t_n)
    z_nk = a_nk[:, None] * z + s_nk[:, None] * eps
    z_n = a_n[:, None] * z + s_n[:, None] * eps

    if cfg.target == "solver":
        z_hat = distill_target(teacher, z_nk, t_nk, t_n, c, omega, schedule,
                               cfg.solver, cfg.leapfrog_h)
    else:
        z_hat = z_n
    target = ema_head(z_hat, omega, c, t_n)
    pred = head.forward_tensor(params, z_nk, omega, c, t_nk)
    loss = distance(pred, target, cfg.distance, cfg.huber_c)
    info = {"n": n, "omega": omega, "eps": eps, "z_n": z_n, "z_nk": z_nk,
            "t_n": t_n, "t_nk": t_nk, "z_hat": z_hat, "target": target}
    return loss, info


def student_config(teacher, n_classes: int, dim: int, cfg: DistillConfig,
                   base: MlpConfig | None = None) -> MlpConfig:
    if isinstance(teacher, MlpNoisePredictor):
        base = teacher.config
    base = base or MlpConfig(point_dim=dim, cond_dim=n_classes)
    return replace(base, omega_dim=cfg.omega_dim)


def init_student_from_teacher(teacher: MlpNoisePredictor, cfg: DistillConfig) -> MlpParams:
    """Copy teacher weights; guidance-embedding input rows start at zero."""
    s_cfg = replace(teacher.config, omega_dim=cfg.omega_dim)
    arrays = [a.copy() for a in teacher.params.arrays()]
    arrays[0] = np.concatenate([arrays[0], np.zeros((cfg.omega_dim, arrays[0].shape[1]))])
    return MlpParams.from_arrays(s_cfg, arrays)


def warm_start_student(teacher, params: MlpParams, n_classes: int, z_data, c_data,
                       schedule: ScheduleSpec, cfg: DistillConfig, rng):
    """Regress eps_theta(z, w, c, t) onto the teacher's guided noise.

    Used when the teacher has no weights to copy (analytic oracle).
    """
    model = MlpNoisePredictor(params, n_classes, schedule, cfg.output)
    state = OptState.fresh(params, lr=cfg.lr)
    trace = []
    for _ in range(cfg.warmstart_iterations):
        idx = rng.integers(0, z_data.shape[0], cfg.batch_size)
        z0, c = z_data[idx], c_data[idx]
        n, omega = sample_indices(rng, cfg.batch_size, cfg)
        t = n / schedule.N
        alpha, sigma = schedule.alpha_sigma(t)
        zt = alpha[:, None] * z0 + sigma[:, None] * rng.standard_normal(z0.shape)
        target = guided_eps(teacher, zt, c, omega, t)
        pred = model.eps_tensor(params, zt, c, t, omega)
        loss = nn.sum_rows(nn.square(pred - target)).mean()
        trace.append(loss.item())
        grads = nn.backward(loss, params.tensors())
        params, state = nn.adam_step(params, grads, state)
    return params, trace


def learning_rate(cfg: DistillConfig, it: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * it / max(cfg.iterations, 1)))


@dataclass
class LLCMResult:
    student: ConsistencyHead
    ema: ConsistencyHead
    loss_trace: list[float]
    warmstart_trace: list[float] = field(default_factory=list)
    initial_student: ConsistencyHead | None = None


def train_llcm(teacher, world: ToyWorld, codec: LatentCodec, schedule: ScheduleSpec,
               cfg: DistillConfig, seed: int, mlp_config: MlpConfig | None = None,
               callback: Callable[[int, dict], None] | None = None) -> LLCMResult:
    """Consistency distillation with a jumping step of ``cfg.k`` schedule intervals."""
    if schedule.N != cfg.N:
        raise ValueError(f"schedule N = {schedule.N} but DistillConfig N = {cfg.N}")
    rng = np.random.default_rng(seed)
    z_data, c_data = latent_dataset(world, codec, cfg.dataset_size, seed + 1)

    warm_trace: list[float] = []
    if isinstance(teacher, MlpNoisePredictor):
        params = init_student_from_teacher(teacher, cfg)
        output = teacher.output
    else:
        output = cfg.output
        s_cfg = student_config(teacher, world.n_classes, codec.latent_dim, cfg, mlp_config)
        params = nn.init_mlp(s_cfg, seed, zero_last=True)
        params, warm_trace = warm_start_student(teacher, params, world.n_classes, z_data,
                                                c_data, schedule, cfg, rng)

    head = ConsistencyHead(MlpNoisePredictor(params, world.n_classes, schedule, output), schedule,
                           cfg.sigma_data, cfg.timestep_scaling)
    initial = head.with_params(params.copy())
    ema = nn.EmaParams(params.copy(), cfg.ema_decay)
    state = OptState.fresh(params, lr=cfg.lr)
    trace: list[float] = []
    for it in range(cfg.iterations):
        state.lr = learning_rate(cfg, it)
        idx = rng.integers(0, z_data.shape[0], cfg.batch_size)
        batch = (z_data[idx], c_data[idx])
        try:
            loss, info = cd_loss(head, head.with_params(ema.params), batch, schedule, cfg, rng,
                                 teacher, params)
            value = loss.item()
            if not math.isfinite(value):
                raise nn.NonFiniteError("non-finite loss")
            grads = nn.backward(loss, params.tensors())
            params, state = nn.adam_step(params, grads, state)
        except nn.NonFiniteError as exc:
            raise TrainingDivergedError(f"distillation diverged at iteration {it}: {exc}",
                                        it, trace) from exc
        trace.append(value)
        ema = nn.ema_update(ema, params)
        head = head.with_params(params)
        if callback is not None:
            callback(it, {"loss": value, "params": params, "ema": ema.params, **info})

    return LLCMResult(head, head.with_params(ema.params), trace, warm_trace, initial)


# ---------------------------------------------------------------------------
# Inference and probes
# ---------------------------------------------------------------------------


def consistency_sample(head: ConsistencyHead, codec: LatentCodec, n_steps: int, omega: float,
                       c, n: int, seed: int, schedule: ScheduleSpec | None = None,
                       n_classes: int | None = None) -> SampleBatch:
    """Few-step sampling: denoise at t = 1, then re-noise and denoise down the grid.

    ``c = None`` draws one label per particle uniformly over ``n_classes``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    schedule = schedule or head.schedule
    rng = np.random.default_rng(seed)
    n_classes = n_classes or head.predictor.n_classes
    if c is None:
        labels = rng.integers(0, n_classes, size=n)
    else:
        labels = np.full(n, c, dtype=np.int64)
    grid = timestep_grid(schedule, n_steps)
    z = rng.standard_normal((n, codec.latent_dim))
    x0 = head(z, omega, labels, grid[0])
    for tau in grid[1:]:
        alpha, sigma = schedule.alpha_sigma(tau)
        z = alpha * x0 + sigma * rng.standard_normal(x0.shape)
        x0 = head(z, omega, labels, tau)
    meta = {"source": "consistency", "n_steps": n_steps, "omega": omega, "c": c, "seed": seed,
            "n": n, "grid": grid, "schedule": schedule.to_dict(),
            "schedule_id": schedule.schedule_id, "codec": codec.to_dict()}
    return SampleBatch(decode(codec, x0), labels, meta)


def teacher_trajectories(teacher, schedule: ScheduleSpec, z_T, c, omega, times, substeps: int = 20):
    """Integrate the guided teacher PF-ODE with fine DDIM steps, recording ``times``.

    ``times`` must be descending and start at 1.
    """
    states = [z_T]
    z = z_T
    for t, s in zip(times[:-1], times[1:]):
        fine = np.linspace(t, s, substeps + 1)
        for a, b in zip(fine[:-1], fine[1:]):
            x0, eps = predict_x0_eps(teacher, z, c, omega, a, schedule)
            z = ddim_step(z, x0, eps, a, b, schedule)
        states.append(z)
    return states


def self_consistency_gap(head: ConsistencyHead, teacher, schedule: ScheduleSpec, n: int,
                         omega: float, seed: int, times=None, n_classes: int | None = None) -> float:
    """Mean pairwise l2 gap of f along teacher ODE trajectories."""
    rng = np.random.default_rng(seed)
    n_classes = n_classes or head.predictor.n_classes
    times = list(times or [1.0, 0.8, 0.6, 0.4, 0.2, 0.05])
    labels = rng.integers(0, n_classes, size=n)
    z_T = rng.standard_normal((n, head.predictor.config.point_dim))
    states = teacher_trajectories(teacher, schedule, z_T, labels, omega, times)
    outs = [head(z, omega, labels, t) for z, t in zip(states, times)]
    gaps = []
    for i in range(len(outs)):
        for j in range(i + 1, len(outs)):
            gaps.append(np.linalg.norm(outs[i] - outs[j], axis=1).mean())
    return float(np.mean(gaps))
