"""Finite-difference verification of every autodiff rule and of the MLP loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn_core as nn
from .nn_core import MlpConfig, Tensor

H = 1e-5
REL_TOL = 1e-4


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """d f / d x by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x.copy())
        x[idx] = orig - h
        down = f(x.copy())
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


@dataclass
class Check:
    name: str
    rel_err: float
    passed: bool
    detail: str = ""


@dataclass
class GradcheckReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            extra = f" ({c.detail})" if c.detail else ""
            out.append(f"{status} {c.name}: rel_err={c.rel_err:.2e}{extra}")
        return out


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def _check_op(name: str, build: Callable[..., Tensor], shapes, rng, positive=False) -> Check:
    """Check d/dx of sum(build(*xs) * probe) for every input."""
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    probe_shape = build(*[Tensor(x) for x in xs]).shape
    probe = rng.standard_normal(probe_shape)
    tensors = [Tensor(x, requires_grad=True) for x in xs]
    grads = nn.backward((build(*tensors) * probe).sum(), tensors)
    worst = 0.0
    for i, x in enumerate(xs):
        def f(v, i=i):
            args = [Tensor(v if j == i else xs[j]) for j in range(len(xs))]
            return float((build(*args).data * probe).sum())

        worst = max(worst, _rel_err(grads[i], central_difference(f, x)))
    return Check(name, worst, worst < REL_TOL)


def _mlp_checks(rng) -> list[Check]:
    cfg = MlpConfig(point_dim=2, cond_dim=3, time_dim=4, omega_dim=2, hidden=(6, 5))
    params = nn.init_mlp(cfg, 0, zero_last=False)
    x = rng.standard_normal((5, 2))
    c = rng.standard_normal((5, 3))
    t = rng.standard_normal((5, 4))
    w = rng.standard_normal((5, 2))
    target = rng.standard_normal((5, 2))

    def loss_of(p):
        return nn.sum_rows(nn.square(nn.mlp_forward(p, x, c, t, w) - target)).mean()

    grads = nn.backward(loss_of(params), params.tensors())
    checks = []
    for i, name in enumerate(params.names()):
        def f(v, i=i):
            arrays = [a.copy() for a in params.arrays()]
            arrays[i] = v
            return loss_of(nn.MlpParams.from_arrays(cfg, arrays)).item()

        err = _rel_err(grads[i], central_difference(f, params.arrays()[i]))
        ok = err < REL_TOL
        checks.append(Check(f"mlp_loss[{name}]", err, ok, "" if ok else f"mismatch in {name}"))
    return checks


def run_gradcheck(seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    cases = [
        ("add", lambda a, b: a + b, [(3, 4), (1, 4)], False),
        ("sub", lambda a, b: a - b, [(3, 4), (3, 1)], False),
        ("mul", lambda a, b: a * b, [(3, 4), (4,)], False),
        ("matmul", lambda a, b: a @ b, [(3, 4), (4, 2)], False),
        ("gelu", nn.gelu, [(3, 4)], False),
        ("tanh", nn.tanh, [(3, 4)], False),
        ("square", nn.square, [(3, 4)], False),
        ("sqrt", nn.sqrt, [(3, 4)], True),
        ("sum", lambda a: a.sum(), [(3, 4)], False),
        ("mean", lambda a: a.mean(), [(3, 4)], False),
        ("sum_rows", nn.sum_rows, [(3, 4)], False),
        ("concat", lambda a, b: nn.concat([a, b]), [(3, 2), (3, 3)], False),
    ]
    for name, build, shapes, positive in cases:
        report.checks.append(_check_op(name, build, shapes, rng, positive))
    report.checks.extend(_mlp_checks(rng))
    return report
