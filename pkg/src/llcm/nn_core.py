"""Deterministic float64 numerical core.

A small reverse-mode autodiff engine over a fixed operator set, a conditional
MLP built on it, Adam, EMA, the time/condition embeddings, and the checkpoint
format (JSON manifest + little-endian float64 blob).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NULL_TOKEN = -1
CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data: np.ndarray, what: str) -> None:
    # any NaN/Inf entry makes the sum non-finite; the full scan only rules out overflow
    if not math.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------------------
# Autodiff
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array that records the operations applied to it."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_ctx", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor's reflected method

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "Tensor()")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op: type[Function] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._ctx: dict = {}
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return Add.apply(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other):
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other):
        return Mul.apply(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return Mul.apply(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return MatMul.apply(self, as_tensor(other))

    def sum(self):
        return Sum.apply(self)

    def mean(self):
        return Mean.apply(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward(ctx, *arrays, **kw)`` and
    ``backward(ctx, grad) -> tuple of parent gradients``.
    """

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx: dict = {}
        data = cls.forward(ctx, *(t.data for t in inputs), **kwargs)
        _check_finite(data, cls.__name__)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        if out.requires_grad:
            out._op = cls
            out._parents = inputs
            out._ctx = ctx
        else:
            out._op, out._parents, out._ctx = None, (), {}
        return out

    @staticmethod
    def forward(ctx, *arrays, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):  # pragma: no cover - abstract
        raise NotImplementedError


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return grad @ b.T, a.T @ grad


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """tanh approximation of GELU."""

    @staticmethod
    def forward(ctx, x):
        x2 = x * x
        th = x2 * (0.044715 * _GELU_C)
        th += _GELU_C
        th *= x
        np.tanh(th, out=th)
        ctx["x"], ctx["x2"], ctx["th"] = x, x2, th
        out = th + 1.0
        out *= x
        out *= 0.5
        return out

    @staticmethod
    def backward(ctx, grad):
        x, x2, th = ctx["x"], ctx["x2"], ctx["th"]
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3 a x^2)
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        d *= x
        d *= 1.0 - th * th
        d += 1.0 + th
        d *= 0.5
        d *= grad
        return (d,)


class Tanh(Function):
    @staticmethod
    def forward(ctx, x):
        y = np.tanh(x)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        return (grad * (1.0 - ctx["y"] ** 2),)


class Square(Function):
    @staticmethod
    def forward(ctx, x):
        ctx["x"] = x
        return x * x

    @staticmethod
    def backward(ctx, grad):
        return (2.0 * grad * ctx["x"],)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, x):
        if np.any(x < 0):
            raise ValueError("sqrt of negative input")
        y = np.sqrt(x)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        return (grad * 0.5 / ctx["y"],)


class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None):
        ctx["shape"], ctx["axis"] = x.shape, axis
        return np.asarray(x.sum(axis=axis, keepdims=axis is not None))

    @staticmethod
    def backward(ctx, grad):
        return (np.broadcast_to(grad, ctx["shape"]).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.mean())

    @staticmethod
    def backward(ctx, grad):
        shape = ctx["shape"]
        n = int(np.prod(shape)) if shape else 1
        return (np.full(shape, float(grad) / n),)


class Concat(Function):
    """Concatenate along the last axis."""

    @staticmethod
    def forward(ctx, *arrays):
        ctx["widths"] = [a.shape[-1] for a in arrays]
        return np.concatenate(arrays, axis=-1)

    @staticmethod
    def backward(ctx, grad):
        splits = np.cumsum(ctx["widths"])[:-1]
        return tuple(np.split(grad, splits, axis=-1))


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as width 1."""
    return Sum.apply(x, axis=-1)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*tensors)


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns d loss / d w for every tensor in ``wrt`` (zeros for tensors the
    loss does not depend on). ``.grad`` is also populated on every node.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._op is None or node.grad is None:
            continue
        grads = node._op.backward(node._ctx, node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g

    out = []
    for w in wrt:
        in_graph = id(w) in seen
        out.append(w.grad.copy() if in_graph and w.grad is not None else np.zeros_like(w.data))
    return out


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def _fourier(values: np.ndarray, dim: int, lo: float, hi: float) -> np.ndarray:
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    freqs = math.pi * np.geomspace(lo, hi, dim // 2)
    ang = values[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def embed_time(t, dim: int = 16) -> np.ndarray:
    """Fourier features of t in [0, 1]; returns (batch, dim)."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise ValueError(f"time must lie in [0, 1], got range [{t_arr.min()}, {t_arr.max()}]")
    return _fourier(t_arr, dim, 0.5, 16.0)


def embed_guidance(omega, dim: int = 8, scale: float = 4.0) -> np.ndarray:
    """Fourier features of the guidance scale (omega / scale, low frequencies)."""
    w = np.atleast_1d(np.asarray(omega, dtype=np.float64)) / scale
    return _fourier(w, dim, 0.25, 2.0)


def embed_condition(c, n_classes: int, dim: int | None = None) -> np.ndarray:
    """One-hot class embedding zero-padded to ``dim``; NULL_TOKEN -> zeros."""
    dim = n_classes if dim is None else dim
    if dim < n_classes:
        raise ValueError(f"condition dim {dim} smaller than n_classes {n_classes}")
    c_arr = np.atleast_1d(np.asarray(c)).astype(np.int64)
    bad = (c_arr != NULL_TOKEN) & ((c_arr < 0) | (c_arr >= n_classes))
    if np.any(bad):
        raise ValueError(f"class id out of range: {c_arr[bad][0]} (n_classes={n_classes})")
    out = np.zeros((c_arr.shape[0], dim))
    rows = np.nonzero(c_arr != NULL_TOKEN)[0]
    out[rows, c_arr[rows]] = 1.0
    return out


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    point_dim: int = 2
    cond_dim: int = 4
    time_dim: int = 16
    omega_dim: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "gelu"

    @property
    def input_dim(self) -> int:
        return self.point_dim + self.cond_dim + self.time_dim + self.omega_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden, self.point_dim]
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MlpConfig:
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (128, 128, 128)))
        return cls(**d)


_ACTIVATIONS = {"gelu": gelu, "tanh": tanh}


@dataclass
class MlpParams:
    config: MlpConfig
    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.weights)):
            out += [f"layer{i}.weight", f"layer{i}.bias"]
        return out

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def copy(self) -> MlpParams:
        return MlpParams.from_arrays(self.config, [a.copy() for a in self.arrays()])

    @classmethod
    def from_arrays(cls, config: MlpConfig, arrays: Sequence[np.ndarray]) -> MlpParams:
        shapes = config.layer_shapes()
        if len(arrays) != 2 * len(shapes):
            raise ValueError(f"expected {2 * len(shapes)} arrays, got {len(arrays)}")
        ws, bs = [], []
        for i, (fan_in, fan_out) in enumerate(shapes):
            w, b = np.asarray(arrays[2 * i], float), np.asarray(arrays[2 * i + 1], float)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"layer{i} has shapes {w.shape}/{b.shape}, expected "
                                 f"{(fan_in, fan_out)}/{(fan_out,)}")
            ws.append(Tensor(w, requires_grad=True, name=f"layer{i}.weight"))
            bs.append(Tensor(b, requires_grad=True, name=f"layer{i}.bias"))
        return cls(config, ws, bs)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def init_mlp(config: MlpConfig, seed: int, zero_last: bool = True) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; biases zero."""
    rng = np.random.default_rng(seed)
    arrays = []
    shapes = config.layer_shapes()
    for i, (fan_in, fan_out) in enumerate(shapes):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if zero_last and i == len(shapes) - 1:
            w = np.zeros_like(w)
        arrays += [w, np.zeros(fan_out)]
    return MlpParams.from_arrays(config, arrays)


def mlp_forward(params: MlpParams, x, c_embed, t_embed, w_embed=None) -> Tensor:
    """Evaluate the MLP on the concatenated [x, c_embed, t_embed(, w_embed)] input."""
    cfg = params.config
    parts = {"x": as_tensor(x), "c_embed": as_tensor(c_embed), "t_embed": as_tensor(t_embed)}
    expected = {"x": cfg.point_dim, "c_embed": cfg.cond_dim, "t_embed": cfg.time_dim}
    if cfg.omega_dim:
        if w_embed is None:
            raise ValueError("w_embed required: network was built with omega_dim > 0")
        parts["w_embed"] = as_tensor(w_embed)
        expected["w_embed"] = cfg.omega_dim
    elif w_embed is not None:
        raise ValueError("w_embed given but network has omega_dim = 0")

    batch = parts["x"].shape[0] if parts["x"].data.ndim == 2 else None
    for key, t in parts.items():
        if t.data.ndim != 2 or t.shape[1] != expected[key]:
            raise ValueError(f"{key} has shape {t.shape}, expected (batch, {expected[key]})")
        if t.shape[0] != batch:
            raise ValueError(f"{key} batch size {t.shape[0]} does not match x batch size {batch}")

    act = _ACTIVATIONS[cfg.activation]
    h = concat(list(parts.values()))
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# Optimizer / EMA
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> OptState:
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], [z.copy() for z in zeros], 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: Sequence[np.ndarray], state: OptState
              ) -> tuple[MlpParams, OptState]:
    arrays = params.arrays()
    names = params.names()
    if len(grads) != len(arrays):
        raise ValueError(f"got {len(grads)} gradients for {len(arrays)} parameters")
    for name, a, g in zip(names, arrays, grads):
        if g.shape != a.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_arrays.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptState(new_m, new_v, step, state.lr, b1, b2, state.eps)
    return MlpParams.from_arrays(params.config, new_arrays), new_state


@dataclass
class EmaParams:
    params: MlpParams
    decay: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")


def ema_update(ema: EmaParams, online: MlpParams) -> EmaParams:
    if online.config.layer_shapes() != ema.params.config.layer_shapes():
        raise ValueError("EMA and online parameter shapes differ")
    mu = ema.decay
    arrays = [mu * s + (1.0 - mu) * o for s, o in zip(ema.params.arrays(), online.arrays())]
    return EmaParams(MlpParams.from_arrays(online.config, arrays), mu)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: MlpParams, meta: dict | None = None) -> Path:
    """Write ``path`` (JSON manifest) and ``path.bin`` (float64 LE blob)."""
    path = Path(path)
    blob = np.ascontiguousarray(params.flat(), dtype="<f8").tobytes()
    blob_path = path.with_name(path.name + ".bin")
    blob_path.write_bytes(blob)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "mlp": params.config.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)}
                    for n, a in zip(params.names(), params.arrays())],
        "blob": blob_path.name,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        **(meta or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[MlpParams, dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format_version')}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValueError(f"{path}: blob hash mismatch")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    arrays, offset = [], 0
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"]))
        arrays.append(flat[offset:offset + size].reshape(entry["shape"]))
        offset += size
    if offset != flat.size:
        raise ValueError(f"{path}: blob has {flat.size} values, manifest describes {offset}")
    config = MlpConfig.from_dict(manifest["mlp"])
    return MlpParams.from_arrays(config, arrays), manifest
