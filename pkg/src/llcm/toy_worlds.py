"""Toy data distributions, their exact time-t scores, and the latent codec."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .nn_core import NULL_TOKEN
from .schedule import ScheduleSpec

WORLD_NAMES = ("gmm_grid", "two_moons", "checkerboard", "rings")


@dataclass
class SampleBatch:
    points: np.ndarray
    labels: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.labels.shape != (self.points.shape[0],):
            raise ValueError(f"points {self.points.shape} / labels {self.labels.shape} mismatch")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(self.dim)] + ["label"])
        for p, lab in zip(self.points, self.labels):
            writer.writerow([repr(float(v)) for v in p] + [int(lab)])
        return buf.getvalue()

    def write(self, path: str | Path) -> Path:
        """Write CSV at ``path`` and the manifest as a JSON sidecar next to it."""
        path = Path(path)
        path.write_text(self.to_csv_text())
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> SampleBatch:
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty CSV")
        header = rows[0]
        if not header or header[-1] != "label" or any(
            h != f"x{i}" for i, h in enumerate(header[:-1])
        ):
            raise ValueError(f"{path}: header must be x0,...,x{{d-1}},label; got {header}")
        body = [r for r in rows[1:] if r]
        dim = len(header) - 1
        points = np.array([[float(v) for v in r[:dim]] for r in body]).reshape(len(body), dim)
        labels = np.array([int(r[dim]) for r in body], dtype=np.int64)
        sidecar = path.with_suffix(".json")
        manifest = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(points, labels, manifest)


@dataclass
class ToyWorld:
    """A labelled 2-D (or d-D) distribution.

    For ``gmm_grid`` the class-conditional densities are isotropic Gaussian
    mixtures: ``means[c, k]``, ``variances[c, k]`` and ``weights[c, k]``.
    """

    name: str
    dim: int
    n_classes: int
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    weights: np.ndarray | None = None
    class_probs: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in WORLD_NAMES:
            raise ValueError(f"unknown world {self.name!r}; expected one of {WORLD_NAMES}")
        if self.class_probs is None:
            self.class_probs = np.full(self.n_classes, 1.0 / self.n_classes)
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.is_mixture:
            self.means = np.asarray(self.means, dtype=np.float64)
            self.variances = np.asarray(self.variances, dtype=np.float64)
            self.weights = np.asarray(self.weights, dtype=np.float64)
            n_c, n_k, d = self.means.shape
            if n_c != self.n_classes or d != self.dim:
                raise ValueError("means must have shape (n_classes, n_components, dim)")
            if self.variances.shape != (n_c, n_k) or self.weights.shape != (n_c, n_k):
                raise ValueError("variances and weights must have shape (n_classes, n_components)")
            if np.any(self.variances <= 0):
                raise ValueError("component variances must be positive")
            if not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-12):
                raise ValueError("mixture weights must sum to 1 within each class")

    @property
    def is_mixture(self) -> bool:
        return self.name == "gmm_grid"

    def to_dict(self) -> dict:
        d = {"name": self.name, "dim": self.dim, "n_classes": self.n_classes,
             "params": self.params}
        if self.is_mixture:
            d.update(means=self.means.tolist(), variances=self.variances.tolist(),
                     weights=self.weights.tolist())
        return d


def gmm_world(means, variances, weights=None) -> ToyWorld:
    """Mixture world from explicit per-class component parameters."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim == 2:
        means = means[:, None, :]
    n_c, n_k, d = means.shape
    variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), (n_c, n_k)).copy()
    if weights is None:
        weights = np.full((n_c, n_k), 1.0 / n_k)
    return ToyWorld("gmm_grid", d, n_c, means, variances, np.asarray(weights, float))


def make_world(name: str = "gmm_grid", **params) -> ToyWorld:
    """Named world factory.

    ``gmm_grid`` defaults: 4 classes, each a column of 2 components on a
    unit-spaced 4 x 2 grid centred at the origin, std 0.15.
    """
    if name == "gmm_grid":
        n_classes = int(params.get("n_classes", 4))
        n_comp = int(params.get("n_components", 2))
        spacing = float(params.get("spacing", 1.0))
        std = float(params.get("std", 0.15))
        xs = (np.arange(n_classes) - (n_classes - 1) / 2) * spacing
        ys = (np.arange(n_comp) - (n_comp - 1) / 2) * spacing
        means = np.array([[[x, y] for y in ys] for x in xs])
        w = gmm_world(means, std**2)
        w.params = {"n_classes": n_classes, "n_components": n_comp, "spacing": spacing, "std": std}
        return w
    if name == "two_moons":
        return ToyWorld(name, 2, 2, params={"noise": float(params.get("noise", 0.08))})
    if name == "checkerboard":
        return ToyWorld(name, 2, 2, params={"cells": int(params.get("cells", 4))})
    if name == "rings":
        return ToyWorld(name, 2, 2, params={"radii": list(params.get("radii", [0.5, 1.5])),
                                            "noise": float(params.get("noise", 0.05))})
    raise ValueError(f"unknown world {name!r}; expected one of {WORLD_NAMES}")


def world_from_dict(d: dict) -> ToyWorld:
    if d["name"] == "gmm_grid" and "means" in d:
        w = gmm_world(d["means"], d["variances"], d["weights"])
        w.params = d.get("params", {})
        return w
    return make_world(d["name"], **d.get("params", {}))


def sample_world(w: ToyWorld, n: int, seed: int, labels=None) -> SampleBatch:
    """Draw ``n`` labelled points. Labels follow ``class_probs`` unless given."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = rng.choice(w.n_classes, size=n, p=w.class_probs)
    else:
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,)).copy()
    if w.name == "gmm_grid":
        comp = np.empty(n, dtype=np.int64)
        for c in range(w.n_classes):
            idx = np.nonzero(labels == c)[0]
            comp[idx] = rng.choice(w.weights.shape[1], size=idx.size, p=w.weights[c])
        noise = rng.standard_normal((n, w.dim))
        pts = w.means[labels, comp] + np.sqrt(w.variances[labels, comp])[:, None] * noise
    elif w.name == "two_moons":
        theta = rng.uniform(0.0, math.pi, n)
        upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        pts = np.where((labels == 0)[:, None], upper, lower) - np.array([0.5, 0.25])
        pts = pts + w.params["noise"] * rng.standard_normal((n, 2))
    elif w.name == "checkerboard":
        cells = w.params["cells"]
        pts = np.empty((n, 2))
        for i in range(n):
            # rejection onto squares of the label's colour
            while True:
                p = rng.uniform(0.0, cells, 2)
                if (int(p[0]) + int(p[1])) % 2 == labels[i]:
                    break
            pts[i] = p
        pts = (pts - cells / 2) / (cells / 4)
    else:
        radii = np.asarray(w.params["radii"])
        theta = rng.uniform(0.0, 2 * math.pi, n)
        r = radii[labels] + w.params["noise"] * rng.standard_normal(n)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    manifest = {"source": "world", "world": w.to_dict(), "n": n, "seed": seed}
    return SampleBatch(pts, labels, manifest)


def _mixture_params(w: ToyWorld, c: np.ndarray):
    """Per-row component means / variances / log weights for condition ``c``."""
    n_c, n_k, d = w.means.shape
    means_all = w.means.reshape(n_c * n_k, d)
    var_all = w.variances.reshape(n_c * n_k)
    logw_uncond = np.log((w.class_probs[:, None] * w.weights).reshape(-1))
    logw = np.full((c.shape[0], n_c * n_k), -np.inf)
    null = c == NULL_TOKEN
    logw[null] = logw_uncond
    for cls in range(n_c):
        rows = np.nonzero(c == cls)[0]
        if rows.size:
            block = np.full(n_c * n_k, -np.inf)
            block[cls * n_k:(cls + 1) * n_k] = np.log(w.weights[cls])
            logw[rows] = block
    return means_all, var_all, logw


def _as_labels(c, n: int, n_classes: int) -> np.ndarray:
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
    bad = (c != NULL_TOKEN) & ((c < 0) | (c >= n_classes))
    if np.any(bad):
        raise ValueError(f"class id out of range: {c[bad][0]}")
    return c


def _noised_terms(w: ToyWorld, s: ScheduleSpec, x, c, t):
    if not w.is_mixture:
        raise ValueError(f"world {w.name!r} has no closed-form score (mixture worlds only)")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if np.any(t_arr < s.t_min * (1 - 1e-12)) or np.any(t_arr > 1.0):
        raise ValueError(f"t must lie in [t_min={s.t_min}, 1]")
    alpha, sigma = s.alpha_sigma(t_arr)
    c = _as_labels(c, n, w.n_classes)
    means_all, var_all, logw = _mixture_params(w, c)
    # per row, per component: mean alpha*mu_k, variance alpha^2 var_k + sigma^2
    mu = alpha[:, None, None] * means_all[None]
    v = alpha[:, None] ** 2 * var_all[None] + sigma[:, None] ** 2
    diff = x[:, None, :] - mu
    d = x.shape[1]
    logp = logw - 0.5 * (diff**2).sum(-1) / v - 0.5 * d * np.log(2 * np.pi * v)
    return x, diff, v, logp, sigma


def log_density(w: ToyWorld, s: ScheduleSpec, x, c, t) -> np.ndarray:
    """log q_t(x | c) of the noised mixture."""
    _, _, _, logp, _ = _noised_terms(w, s, x, c, t)
    return logsumexp(logp, axis=1)


def analytic_score(w: ToyWorld, s: ScheduleSpec, x, c, t) -> np.ndarray:
    """Exact grad_x log q_t(x | c); ``c`` = NULL_TOKEN gives the marginal over classes."""
    _, diff, v, logp, _ = _noised_terms(w, s, x, c, t)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return -(resp[:, :, None] * diff / v[:, :, None]).sum(axis=1)


def oracle_eps(w: ToyWorld, s: ScheduleSpec, x, c, t) -> np.ndarray:
    """Optimal noise prediction eps* = -sigma_t * score."""
    _, diff, v, logp, sigma = _noised_terms(w, s, x, c, t)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    score = -(resp[:, :, None] * diff / v[:, :, None]).sum(axis=1)
    return -sigma[:, None] * score


class OracleTeacher:
    """Noise predictor backed by the closed-form mixture score."""

    kind = "oracle"

    def __init__(self, world: ToyWorld, schedule: ScheduleSpec):
        if not world.is_mixture:
            raise ValueError(f"oracle teacher needs a mixture world, got {world.name!r}")
        self.world = world
        self.schedule = schedule

    def eps(self, z, c, t, omega=None) -> np.ndarray:
        return oracle_eps(self.world, self.schedule, z, c, t)


# ---------------------------------------------------------------------------
# Latent codec
# ---------------------------------------------------------------------------


@dataclass
class LatentCodec:
    """Affine bijection z = E (x - b_enc), x = D z + b_dec."""

    enc_matrix: np.ndarray
    enc_bias: np.ndarray
    dec_matrix: np.ndarray
    dec_bias: np.ndarray
    seed: int | None = None

    @property
    def latent_dim(self) -> int:
        return self.enc_matrix.shape[0]

    @property
    def data_dim(self) -> int:
        return self.enc_matrix.shape[1]

    @classmethod
    def identity(cls, dim: int) -> LatentCodec:
        eye = np.eye(dim)
        return cls(eye, np.zeros(dim), eye.copy(), np.zeros(dim), None)

    @classmethod
    def random_rotation(cls, dim: int, seed: int, shift_scale: float = 0.5) -> LatentCodec:
        rng = np.random.default_rng(seed)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        shift = shift_scale * rng.standard_normal(dim)
        return cls(q, shift, q.T.copy(), shift.copy(), seed)

    def is_orthogonal(self) -> bool:
        m = self.enc_matrix
        return m.shape[0] == m.shape[1] and np.allclose(m @ m.T, np.eye(m.shape[0]), atol=1e-12)

    def to_dict(self) -> dict:
        if self.seed is not None:
            return {"kind": "rotation", "seed": self.seed, "dim": self.data_dim}
        return {"kind": "identity", "dim": self.data_dim}


def codec_from_dict(d: dict, shift_scale: float = 0.5) -> LatentCodec:
    if d["kind"] == "identity":
        return LatentCodec.identity(d["dim"])
    return LatentCodec.random_rotation(d["dim"], d["seed"], shift_scale)


def encode(codec: LatentCodec, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != codec.data_dim:
        raise ValueError(f"encode: input dim {x.shape[1]} != codec data dim {codec.data_dim}")
    return (x - codec.enc_bias) @ codec.enc_matrix.T


def decode(codec: LatentCodec, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != codec.latent_dim:
        raise ValueError(f"decode: input dim {z.shape[1]} != codec latent dim {codec.latent_dim}")
    return z @ codec.dec_matrix.T + codec.dec_bias


def encode_world(w: ToyWorld, codec: LatentCodec) -> ToyWorld:
    """The same mixture expressed in latent coordinates (orthogonal codecs only)."""
    if not w.is_mixture:
        raise ValueError("only mixture worlds can be pushed through the codec in closed form")
    if not codec.is_orthogonal():
        raise ValueError("codec must be orthogonal to keep components isotropic")
    n_c, n_k, d = w.means.shape
    means = encode(codec, w.means.reshape(-1, d)).reshape(n_c, n_k, d)
    out = gmm_world(means, w.variances, w.weights)
    out.class_probs = w.class_probs.copy()
    out.params = dict(w.params, encoded_with=codec.to_dict())
    return out
