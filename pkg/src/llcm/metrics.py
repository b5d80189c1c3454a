"""Sample-quality metrics on raw / latent coordinates.

The Fréchet distance is the FID formula applied directly to point clouds:
||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .toy_worlds import SampleBatch

REPORT_KEYS = ("frechet_distance", "mmd2", "n_a", "n_b", "dims", "bandwidth")


def _points(a) -> np.ndarray:
    pts = a.points if isinstance(a, SampleBatch) else np.asarray(a, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"expected an (n, d) point array, got shape {pts.shape}")
    return pts


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """Fréchet distance between N(mu_a, cov_a) and N(mu_b, cov_b).

    Tr (S_a S_b)^{1/2} is computed as Tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}, which is
    symmetric PSD, with negative eigenvalues clamped at 0. The cross term is
    averaged over both argument orders so the result is symmetric.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)

    def cross(s1, s2):
        r = _psd_sqrt(s1)
        w = np.linalg.eigvalsh(r @ s2 @ r)
        return float(np.sqrt(np.clip(w, 0.0, None)).sum())

    tr_cross = 0.5 * (cross(cov_a, cov_b) + cross(cov_b, cov_a))
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(fd, 0.0)


def frechet_distance(a, b) -> float:
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    d = pa.shape[1]
    for name, p in (("a", pa), ("b", pb)):
        if p.shape[0] < d + 1:
            raise ValueError(f"batch {name} has {p.shape[0]} points; need at least dim + 1 = {d + 1}")
    return frechet_from_moments(pa.mean(0), np.cov(pa, rowvar=False),
                                pb.mean(0), np.cov(pb, rowvar=False))


def median_bandwidth(a, b, max_points: int = 1000) -> float:
    """Median pairwise distance of the pooled (leading) points."""
    pts = np.concatenate([_points(a)[:max_points], _points(b)[:max_points]])
    sq = (pts**2).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * pts @ pts.T, 0.0)
    iu = np.triu_indices(pts.shape[0], k=1)
    return float(np.sqrt(np.median(d2[iu])))


def _kernel_sum(x, y, gamma: float, same: bool, block: int = 2048) -> float:
    total = 0.0
    sy = (y**2).sum(1)
    for i in range(0, x.shape[0], block):
        xb = x[i:i + block]
        d2 = (xb**2).sum(1)[:, None] + sy[None, :] - 2 * xb @ y.T
        k = np.exp(-gamma * np.maximum(d2, 0.0))
        if same:
            rows = np.arange(xb.shape[0])
            k[rows, i + rows] = 0.0
        total += float(k.sum())
    return total


def mmd(a, b, bandwidth: float | None = None) -> float:
    """Unbiased Gaussian-kernel MMD^2 (median-heuristic bandwidth by default)."""
    x, y = _points(a), _points(b)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("mmd needs at least 2 points per batch")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    gamma = 1.0 / (2.0 * bandwidth**2)
    m, n = x.shape[0], y.shape[0]
    kxx = _kernel_sum(x, x, gamma, True) / (m * (m - 1))
    kyy = _kernel_sum(y, y, gamma, True) / (n * (n - 1))
    kxy = 0.5 * (_kernel_sum(x, y, gamma, False) + _kernel_sum(y, x, gamma, False)) / (m * n)
    return kxx + kyy - 2.0 * kxy


def moment_report(a, b) -> dict:
    """Per-dimension mean gaps (b - a) and covariance gaps (entrywise)."""
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    mean_gap = pb.mean(0) - pa.mean(0)
    cov_gap = np.atleast_2d(np.cov(pb, rowvar=False)) - np.atleast_2d(np.cov(pa, rowvar=False))
    return {"mean_gap": mean_gap, "cov_gap": cov_gap}


@dataclass
class MetricReport:
    frechet_distance: float
    mmd2: float
    n_a: int
    n_b: int
    dims: int
    bandwidth: float
    mean_gap: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cov_gap: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")


def evaluate(a, b, bandwidth: float | None = None, mmd_points: int = 4000) -> MetricReport:
    """Full report; MMD uses the leading ``mmd_points`` of each batch."""
    pa, pb = _points(a), _points(b)
    fd = frechet_distance(pa, pb)
    if bandwidth is None:
        bandwidth = median_bandwidth(pa, pb)
    m2 = mmd(pa[:mmd_points], pb[:mmd_points], bandwidth)
    moments = moment_report(pa, pb)
    return MetricReport(fd, m2, pa.shape[0], pb.shape[0], pa.shape[1], bandwidth,
                        moments["mean_gap"], moments["cov_gap"],
                        {"mmd_points": mmd_points})
