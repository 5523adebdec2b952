import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import davies_bouldin_score

from mcgen import tensor as T
from mcgen.codebook import one_hot
from mcgen.errors import DegenerateClusteringError, ShapeError
from mcgen.metrics import (
    FeatureStats,
    bits_per_dim,
    davies_bouldin,
    feature_stats,
    format_metric,
    frechet_distance,
    inception_score,
    model_checksum,
    nll_report,
    parse_metrics,
    psd_sqrt,
)
from mcgen.models import McGlow, McMlpVae, McPixelCNN
from mcgen.models.vae import bce
from mcgen.rng import Stream
from mcgen.tensor import Tensor


def _stats(mean, cov):
    return FeatureStats(np.atleast_1d(np.asarray(mean, dtype=float)), np.atleast_2d(np.asarray(cov, dtype=float)), 10)


# -- inception score ------------------------------------------------------------

@pytest.mark.parametrize("c", [2, 7, 32])
def test_is_uniform_rows_is_one(c):
    mean, std = inception_score(np.full((100, c), 1 / c), splits=5)
    assert abs(mean - 1) < 1e-9 and std < 1e-9


@pytest.mark.parametrize("c", [2, 7, 32])
def test_is_balanced_one_hot_is_c(c):
    probs = np.eye(c)[np.arange(10 * c) % c]
    mean, _ = inception_score(probs, splits=1)
    assert abs(mean - c) < 1e-9


def test_is_single_class_is_one():
    assert abs(inception_score(np.eye(5)[np.zeros(20, int)], splits=2)[0] - 1) < 1e-9


@given(seed=st.integers(0, 10**5), c=st.integers(2, 12), splits=st.integers(1, 4))
def test_is_within_jensen_bounds(seed, c, splits):
    probs = np.random.default_rng(seed).dirichlet(np.full(c, 0.3), 40)
    mean, _ = inception_score(probs, splits)
    assert 1 - 1e-9 <= mean <= c + 1e-9


def test_is_input_checks():
    with pytest.raises(ValueError):
        inception_score(np.full((4, 2), 0.6))
    with pytest.raises(ValueError):
        inception_score(np.full((4, 2), 0.5), splits=5)
    with pytest.raises(ShapeError):
        inception_score(np.ones(3))


# -- Fréchet distance -----------------------------------------------------------

def test_frechet_1d_mean_shift():
    assert abs(frechet_distance(_stats(0, 1), _stats(1, 1)) - 1) < 1e-8


def test_frechet_diagonal_scales():
    assert abs(frechet_distance(_stats([0, 0], np.diag([4.0, 4.0])), _stats([0, 0], np.eye(2))) - 2) < 1e-8
    assert abs(frechet_distance(_stats(0, 4), _stats(0, 1)) - 1) < 1e-8


def _random_psd(rng, d, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T / d


@pytest.mark.parametrize("seed", range(10))
def test_frechet_matches_scipy_sqrtm(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 12))
    a = _stats(rng.standard_normal(d), _random_psd(rng, d))
    b = _stats(rng.standard_normal(d), _random_psd(rng, d))
    root = scipy.linalg.sqrtm(a.cov @ b.cov).real
    diff = a.mean - b.mean
    expected = diff @ diff + np.trace(a.cov + b.cov - 2 * root)
    assert frechet_distance(a, b) == pytest.approx(expected, rel=1e-8, abs=1e-8)


def test_frechet_self_is_exactly_zero():
    rng = np.random.default_rng(0)
    s = feature_stats(rng.standard_normal((50, 6)))
    assert frechet_distance(s, s) == 0.0


@given(seed=st.integers(0, 10**5))
def test_frechet_symmetric_and_monotone_in_shift(seed):
    rng = np.random.default_rng(seed)
    d = 4
    ca, cb = _random_psd(rng, d), _random_psd(rng, d, rank=2)
    mu = rng.standard_normal(d)
    a, b = _stats(mu, ca), _stats(mu + 0.1, cb)
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8
    direction = rng.standard_normal(d)
    dists = [frechet_distance(a, _stats(mu + t * direction, ca)) for t in (0.5, 1.0, 2.0)]
    assert dists[0] < dists[1] < dists[2]


@given(seed=st.integers(0, 10**5), d=st.integers(1, 10))
def test_psd_sqrt_squares_back(seed, d):
    c = _random_psd(np.random.default_rng(seed), d)
    r = psd_sqrt(c)
    assert np.linalg.norm(r @ r - c) <= 1e-6 * max(np.linalg.norm(c), 1e-12)


def test_feature_stats_covariance_is_symmetric():
    s = feature_stats(np.random.default_rng(1).standard_normal((30, 5)))
    assert np.array_equal(s.cov, s.cov.T)
    assert np.linalg.eigvalsh(s.cov).min() > -1e-12


def test_frechet_errors():
    with pytest.raises(ShapeError):
        frechet_distance(_stats([0, 0], np.eye(2)), _stats([0], [[1]]))
    with pytest.raises(ValueError):
        frechet_distance(_stats([np.nan], [[1]]), _stats([0], [[1]]))
    with pytest.raises(ShapeError):
        FeatureStats(np.zeros(2), np.eye(3), 1)


# -- Davies-Bouldin -------------------------------------------------------------

def test_dbi_hand_case():
    x = np.array([-1.0, 1.0, 3.0, 5.0])
    assert abs(davies_bouldin(x, [0, 0, 1, 1]) - 0.5) < 1e-12


def test_dbi_point_clusters_are_zero():
    assert davies_bouldin(np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 2.0], [2.0, 2.0]]), [0, 0, 1, 1]) == 0.0
    assert davies_bouldin(np.array([[0.0], [1.0], [5.0]]), [0, 1, 2]) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_dbi_matches_sklearn(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 8))
    labels = np.repeat(np.arange(k), int(rng.integers(2, 10)))
    x = rng.standard_normal((len(labels), 5)) + rng.standard_normal((k, 5))[labels] * 3
    assert davies_bouldin(x, labels) == pytest.approx(davies_bouldin_score(x, labels), rel=1e-12)


@given(seed=st.integers(0, 10**5), alpha=st.floats(1e-3, 1e3))
def test_dbi_scale_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 5)
    x = rng.standard_normal((15, 3)) + labels[:, None]
    assert davies_bouldin(alpha * x, labels) == pytest.approx(davies_bouldin(x, labels), rel=1e-9)


def test_dbi_degenerate_clusterings():
    with pytest.raises(DegenerateClusteringError):
        davies_bouldin(np.array([[-1.0], [1.0], [-2.0], [2.0]]), [0, 0, 1, 1])
    with pytest.raises(DegenerateClusteringError):
        davies_bouldin(np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(ShapeError):
        davies_bouldin(np.zeros((3, 2)), [0, 1])


# -- likelihoods ----------------------------------------------------------------

def test_uniform_over_256_levels_is_8_bits():
    assert bits_per_dim(64 * math.log(256), 64) == pytest.approx(8.0, rel=1e-15)


def test_standard_normal_at_zero():
    assert bits_per_dim(0.5 * math.log(2 * math.pi), 1) == pytest.approx(1.3257480647361593, abs=1e-12)


def test_pixelcnn_with_flat_logits_reports_log_levels():
    m = McPixelCNN(2, size=4, levels=16, features=4, layers=1, dtype="f64")
    for p in m.logits.parameters():
        p.data[...] = 0
    x = np.random.default_rng(0).integers(0, 16, (3, 1, 4, 4))
    report = nll_report(m, x, one_hot([0, 1, 0], 2), Stream(0))
    assert report.bits_per_dim == pytest.approx(4.0, rel=1e-12)
    assert not report.is_bound and report.failures == 0


def test_flow_overflow_is_counted_not_averaged():
    m = McGlow(2, size=4, hidden=4, depth=1, dtype="f64")
    x = np.random.default_rng(0).integers(0, 256, (3, 1, 4, 4))
    h = one_hot([0, 1, 0], 2)
    clean = nll_report(m, x, h, Stream(0))
    # a fresh flow is the identity: the density is a standard normal over the centred values
    assert clean.failures == 0 and np.isfinite(clean.bits_per_dim)
    m.couplings[0].nn_out.bias.data[...] = 1e308
    m.couplings[0].nn_out.weight.data[...] = 1e308
    with np.errstate(over="ignore", invalid="ignore"):
        broken = nll_report(m, x, h, Stream(0))
    assert broken.failures == 3 and broken.excluded == [0, 1, 2] and broken.n == 0


def _quadrature_nll(model, x, h, half_width=8.0, points=801):
    """-log ∫ p(x|z) N(z; 0, I) dz on a dense 2-D grid."""
    g = np.linspace(-half_width, half_width, points)
    dz = g[1] - g[0]
    zz = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    log_prior = -0.5 * (zz**2).sum(1) - math.log(2 * math.pi)
    with T.no_grad():
        probs = model.decode(Tensor(zz), np.repeat(h, len(zz), 0))
        log_lik = -bce(probs, np.repeat(x, len(zz), 0)).data
    a = log_lik + log_prior
    top = a.max()
    return -(top + math.log(np.exp(a - top).sum() * dz * dz))


@pytest.mark.parametrize("seed", range(3))
def test_vae_bound_exceeds_exact_nll(seed):
    m = McMlpVae(2, 2, hidden=16, latent_dim=2, seed=seed, dtype="f64")
    rng = np.random.default_rng(seed)
    for p in m.parameters():
        p.data[...] = rng.standard_normal(p.data.shape)
    m.eval()
    for point, mode in (([0.2, 0.7], 0), ([0.8, 0.3], 1), ([0.5, 0.5], 1)):
        x = np.array([point])
        h = one_hot([mode], 2)
        exact = _quadrature_nll(m, x, h)
        draws = np.array([m.nll(x, h, Stream(seed, k))[0] for k in range(300)])
        stderr = draws.std() / math.sqrt(len(draws))
        assert draws.mean() - exact > 5 * stderr
    report = nll_report(m, x, h, Stream(0))
    assert report.is_bound


# -- report formatting ----------------------------------------------------------

def test_metric_lines_round_trip():
    text = format_metric("fid", 12.5, 0.25, 800, 3) + format_metric("is", 7.0)
    assert text.splitlines()[0] == "metric=fid value=12.5 std=0.25 n=800 seed=3"
    assert parse_metrics(text) == {"fid": {"value": 12.5, "std": 0.25, "n": 800, "seed": 3}, "is": {"value": 7.0, "std": 0.0, "n": 0, "seed": 0}}


def test_checksum_pins_parameters():
    a = McMlpVae(2, 3, latent_dim=2, seed=0)
    b = McMlpVae(2, 3, latent_dim=2, seed=0)
    assert model_checksum(a) == model_checksum(b)
    b.out.bias.data[0] += 1
    assert model_checksum(a) != model_checksum(b)
