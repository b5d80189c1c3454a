import math

import numpy as np
import pytest

from llcm.nn_core import NULL_TOKEN
from llcm.schedule import ScheduleSpec
from llcm.toy_worlds import (LatentCodec, SampleBatch, analytic_score, codec_from_dict, decode,
                             encode, encode_world, gmm_world, log_density, make_world,
                             oracle_eps, sample_world)

S = ScheduleSpec()


def _fd_grad(fun, x, h=1e-5):
    g = np.zeros_like(x)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        g[:, j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def test_single_gaussian_sample_mean():
    w = gmm_world(np.zeros((1, 2)), 1.0)
    n = 20_000
    b = sample_world(w, n, 3)
    assert np.all(np.abs(b.points.mean(0)) < 4 / math.sqrt(n))


def test_sampling_deterministic_and_labelled():
    w = make_world("gmm_grid")
    a, b = sample_world(w, 500, 11), sample_world(w, 500, 11)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=4)
    assert counts.min() > 90


@pytest.mark.parametrize("name", ["gmm_grid", "two_moons", "checkerboard", "rings"])
def test_every_world_samples(name):
    b = sample_world(make_world(name), 200, 0)
    assert b.points.shape == (200, 2) and np.all(np.isfinite(b.points))


def test_zero_samples_rejected():
    with pytest.raises(ValueError):
        sample_world(make_world("gmm_grid"), 0, 0)


def test_unknown_world_rejected():
    with pytest.raises(ValueError):
        make_world("spirals")


def test_default_gmm_grid_layout():
    w = make_world("gmm_grid")
    assert w.means.shape == (4, 2, 2)
    np.testing.assert_allclose(w.variances, 0.15**2)
    np.testing.assert_allclose(w.weights.sum(1), 1.0)
    xs = sorted({m[0] for m in w.means.reshape(-1, 2)})
    assert np.allclose(np.diff(xs), 1.0)


def test_mixture_validation():
    with pytest.raises(ValueError):
        gmm_world(np.zeros((1, 2, 2)), [[0.1, -0.1]])
    with pytest.raises(ValueError):
        gmm_world(np.zeros((1, 2, 2)), 0.1, [[0.3, 0.3]])


def test_single_component_score_closed_form():
    mu0, var0 = np.array([0.7, -1.2]), 0.3**2
    w = gmm_world(mu0[None], var0)
    x = np.random.default_rng(0).standard_normal((10, 2))
    for t in (0.01, 0.2, 0.7, 1.0):
        a, s = S.alpha_sigma(t)
        expected = -(x - a * mu0) / (a**2 * var0 + s**2)
        np.testing.assert_allclose(analytic_score(w, S, x, 0, t), expected, rtol=1e-12)
        np.testing.assert_allclose(oracle_eps(w, S, x, 0, t), -s * expected, rtol=1e-12)


def test_score_limit_small_variance():
    mu0 = np.array([0.2, 0.4])
    w = gmm_world(mu0[None], 1e-12)
    x = np.random.default_rng(1).standard_normal((5, 2))
    a, s = S.alpha_sigma(S.t_min)
    np.testing.assert_allclose(analytic_score(w, S, x, 0, S.t_min), -(x - a * mu0) / s**2,
                               rtol=1e-6)


@pytest.mark.parametrize("c", [0, 2, NULL_TOKEN])
@pytest.mark.parametrize("t", [0.001, 0.05, 0.3, 0.9])
def test_mixture_score_matches_log_density_differences(c, t):
    w = make_world("gmm_grid")
    x = np.random.default_rng(2).uniform(-2, 2, (20, 2))
    score = analytic_score(w, S, x, c, t)
    fd = _fd_grad(lambda y: log_density(w, S, y, c, t), x)
    rel = np.abs(score - fd).max() / np.abs(fd).max()
    assert rel < 1e-5


def test_score_finite_on_whole_range():
    w = make_world("gmm_grid")
    x = np.random.default_rng(3).uniform(-30, 30, (200, 2))
    for t in np.linspace(S.t_min, 1.0, 50):
        assert np.all(np.isfinite(analytic_score(w, S, x, NULL_TOKEN, t)))


def test_per_row_conditions():
    w = make_world("gmm_grid")
    x = np.random.default_rng(4).standard_normal((4, 2))
    c = np.array([0, 1, NULL_TOKEN, 3])
    rows = analytic_score(w, S, x, c, 0.3)
    for i in range(4):
        np.testing.assert_allclose(rows[i], analytic_score(w, S, x[i:i + 1], c[i], 0.3)[0])


def test_score_rejects_non_mixture_world():
    with pytest.raises(ValueError, match="mixture"):
        analytic_score(make_world("two_moons"), S, np.zeros((1, 2)), 0, 0.5)


def test_oracle_minimises_dsm_loss():
    # eps* = E[eps | z_t]; any other predictor (here perturbed/shrunk versions) does worse
    w = gmm_world(np.array([[0.5, -0.3]]), 0.2**2)
    rng = np.random.default_rng(5)
    n = 10_000
    x0 = sample_world(w, n, 6).points
    t = rng.uniform(S.t_min, 1.0, n)
    eps = rng.standard_normal((n, 2))
    a, s = S.alpha_sigma(t)
    z = a[:, None] * x0 + s[:, None] * eps
    star = oracle_eps(w, S, z, 0, t)
    loss = lambda p: ((p - eps) ** 2).sum(1).mean()  # noqa: E731
    base = loss(star)
    assert base < loss(0.9 * star) and base < loss(star + 0.05) and base < loss(z)


def test_identity_codec():
    c = LatentCodec.identity(2)
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(encode(c, x), x)


def test_rotation_codec_preserves_norm_and_roundtrips():
    c = LatentCodec.random_rotation(3, 4)
    x = np.random.default_rng(1).standard_normal((50, 3)) * 5
    z = encode(c, x)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), np.linalg.norm(x - c.enc_bias, axis=1),
                               rtol=1e-12)
    assert np.abs(decode(c, z) - x).max() < 1e-8


def test_codec_dim_mismatch():
    c = LatentCodec.identity(2)
    with pytest.raises(ValueError):
        encode(c, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        decode(c, np.zeros((2, 3)))


def test_codec_serialisation_roundtrip():
    c = LatentCodec.random_rotation(2, 9)
    d = codec_from_dict(c.to_dict())
    np.testing.assert_array_equal(d.enc_matrix, c.enc_matrix)


def test_encoded_world_matches_encoded_samples():
    w = make_world("gmm_grid")
    c = LatentCodec.random_rotation(2, 7)
    lw = encode_world(w, c)
    np.testing.assert_allclose(lw.means, encode(c, w.means.reshape(-1, 2)).reshape(w.means.shape),
                               atol=1e-12)
    a = encode(c, sample_world(w, 20_000, 1).points)
    b = sample_world(lw, 20_000, 2).points
    np.testing.assert_allclose(a.mean(0), b.mean(0), atol=0.05)
    np.testing.assert_allclose(np.cov(a, rowvar=False), np.cov(b, rowvar=False), atol=0.05)


def test_sample_batch_csv_roundtrip(tmp_path):
    b = sample_world(make_world("gmm_grid"), 30, 2)
    path = b.write(tmp_path / "s.csv")
    text = path.read_text().splitlines()
    assert text[0] == "x0,x1,label"
    back = SampleBatch.read(path)
    np.testing.assert_array_equal(back.points, b.points)
    np.testing.assert_array_equal(back.labels, b.labels)
    assert back.manifest["seed"] == 2
