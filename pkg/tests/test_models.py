import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcgen import tensor as T
from mcgen.codebook import one_hot
from mcgen.creation import create_modality, crossover_view, dirichlet_creations, resample_view
from mcgen.errors import NonFiniteError, SelectorError
from mcgen.models import (
    MODELS,
    McCoupling,
    McGan,
    McGatedBlock,
    McGlow,
    McMlpVae,
    McPixelCNN,
    McVae,
    bce,
    build_model,
    gaussian_kl,
    hinge_d_loss,
    hinge_g_loss,
    sample,
)
from mcgen.models.base import EMBED_DIM
from mcgen.rng import Stream
from mcgen.tensor import Tensor

from _oracles import (
    GRAD_TOL,
    MODEL_KINDS,
    REDUCIBLE,
    glow_logdet_error,
    glow_roundtrip_error,
    model_gradcheck,
    parity_report,
    pixelcnn_causality,
    reduction_mismatches,
)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_model_gradients_match_finite_differences(kind, seed):
    assert model_gradcheck(kind, seed) < GRAD_TOL


@pytest.mark.parametrize("kind", REDUCIBLE)
@pytest.mark.parametrize("seed", [0, 1])
def test_all_ones_books_reduce_to_backbone(kind, seed):
    assert reduction_mismatches(kind, seed) == []


@pytest.mark.parametrize("row", parity_report(), ids=lambda r: r[0])
def test_parameter_parity(row):
    _, count, backbone, extra = row
    assert count - backbone == extra


def test_build_model_by_name():
    assert set(MODELS) >= {"mcvae", "mcgan", "mcpixelcnn", "mcglow", "cvae", "cgan"}
    m = build_model("cgan", 4, size=8, g_widths=(8, 4), d_widths=(4, 8))
    assert m.conditioning == "embed" and m.num_modes == 4
    with pytest.raises(ValueError):
        build_model("stylegan", 4)


# -- VAE ------------------------------------------------------------------------

def test_kl_hand_case():
    kl = gaussian_kl(Tensor(np.array([[1.0, 0.0]])), Tensor(np.zeros((1, 2))))
    assert kl.data[0] == 0.5


def test_kl_vanishes_at_prior():
    assert np.all(gaussian_kl(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4)))).data == 0)


@given(seed=st.integers(0, 10**5))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    mu, logvar = rng.normal(0, 2, (2, 4, 3))
    assert np.all(gaussian_kl(Tensor(mu), Tensor(logvar)).data >= -1e-12)


def test_bce_finite_at_saturated_probabilities():
    probs = Tensor(np.array([[0.0, 1.0, 0.0, 1.0]]))
    x = np.array([[1.0, 0.0, 0.0, 1.0]])
    out = bce(probs, x).data
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(-2 * np.log(1e-6) - 2 * np.log1p(-1e-6))


def test_bce_minimum_is_entropy():
    x = np.array([[0.2, 0.7, 1.0]])
    p = np.clip(x, 1e-6, 1 - 1e-6)
    entropy = -(x * np.log(p) + (1 - x) * np.log(1 - p)).sum()
    assert bce(Tensor(x), x).data[0] == pytest.approx(entropy, rel=1e-12)


def test_bce_rejects_targets_outside_unit_interval():
    with pytest.raises(ValueError):
        bce(Tensor(np.full((1, 2), 0.5)), np.array([[1.2, 0.0]]))


def test_vae_shapes_and_latent_mask_after_reparameterization():
    m = McVae(3, size=8, latent_dim=6, widths=(4, 6, 8), seed=1, dtype="f64")
    h = one_hot([0, 1, 2, 0], 3)
    x = np.random.default_rng(0).uniform(0, 1, (4, 1, 8, 8))
    probs, mu, _ = m(Tensor(x), h, np.ones((4, 6)))
    assert probs.shape == x.shape
    # mu is unmasked; masking happens on z before decoding
    assert np.all(mu.data != 0)
    off = m.latent_ctrl.book.rows[[0, 1, 2, 0]] == 0
    z = m.latent_ctrl(m.reparameterize(mu, mu * 0, np.ones((4, 6))), h).data
    assert np.all(z[off] == 0)


# -- GAN ------------------------------------------------------------------------

@pytest.mark.parametrize(
    "real,fake,d_loss,g_loss",
    [(0.5, -0.3, 1.2, 0.3), (0.0, 0.0, 2.0, 0.0), (2.0, -2.0, 0.0, 2.0), (1.0, -1.0, 0.0, 1.0)],
)
def test_hinge_losses_by_hand(real, fake, d_loss, g_loss):
    r = Tensor(np.full(4, real))
    f = Tensor(np.full(4, fake))
    assert hinge_d_loss(r, f).data == pytest.approx(d_loss, abs=1e-15)
    assert hinge_g_loss(f).data == pytest.approx(g_loss, abs=1e-15)


def test_gan_output_ranges():
    m = McGan(3, size=8, latent_dim=5, g_widths=(8, 4), d_widths=(4, 8), seed=0, dtype="f64")
    h = one_hot([0, 1, 2], 3)
    m.losses(np.zeros((3, 1, 8, 8)), h, Stream(1))  # populate batch-norm stats
    img = m.generate(h, Stream(0))
    assert img.shape == (3, 1, 8, 8) and img.min() >= 0 and img.max() <= 1
    raw = m.generator(Tensor(np.random.default_rng(0).normal(0, 30, (3, 5))), h).data
    assert np.abs(raw).max() <= 1
    assert m.discriminator(Tensor(raw), h).shape == (3,)


def test_discriminator_scores_fakes_with_the_requested_mode():
    m = McGan(3, size=8, latent_dim=5, g_widths=(8, 4), d_widths=(4, 8), seed=0, dtype="f64")
    seen = []
    forward = m.discriminator.forward

    def spy(x, h):
        seen.append(np.array(h))
        return forward(x, h)

    m.discriminator.forward = spy
    h = one_hot([2, 0, 1], 3)
    m.losses(np.zeros((3, 1, 8, 8)), h, Stream(0))
    assert len(seen) == 2 and all(np.array_equal(s, h) for s in seen)


def test_ablation_removes_one_players_controllers():
    for ablate, player in (("g", "generator"), ("d", "discriminator")):
        m = McGan(3, ablate=ablate, size=8, g_widths=(8, 4), d_widths=(4, 8))
        names = [n for n, _ in m.controllers()]
        assert names and not any(n.startswith(player) for n in names)
    with pytest.raises(ValueError):
        McGan(3, ablate="both")


# -- PixelCNN -------------------------------------------------------------------

def test_gated_stack_is_causal_on_6x6():
    leaks, blind = pixelcnn_causality(seed=0)
    assert leaks == 0 and blind == 0


def test_gated_block_zero_input_gives_zero():
    block = McGatedBlock(1, 4, 5, "A", None, Stream(0), "f64")
    assert np.all(block(Tensor(np.zeros((2, 1, 6, 6)))).data == 0)


def test_gated_block_masks_only_the_tanh_branch():
    m = McPixelCNN(3, size=6, features=5, layers=2, seed=2, dtype="f64")
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 5, 6, 6)))
    block = m.blocks[1]
    h = one_hot([1], 3)
    row = block.controller.book.rows[1]
    with T.no_grad():
        f = T.tanh(block.conv_f(x)).data * row[None, :, None, None]
        expected = x.data + block.proj(Tensor(f * T.sigmoid(block.conv_g(x)).data)).data
        np.testing.assert_allclose(block(x, h).data, expected, atol=1e-14)


def test_pixelcnn_rejects_even_kernels():
    from mcgen.errors import ShapeError
    from mcgen.models.pixelcnn import causal_mask

    with pytest.raises(ShapeError):
        causal_mask(1, 1, 4, "A")
    with pytest.raises(ShapeError):
        causal_mask(1, 1, 3, "C")


# -- Glow -----------------------------------------------------------------------

@pytest.mark.parametrize("depth", range(1, 7))
def test_coupling_stack_round_trip(depth):
    assert glow_roundtrip_error(depth) < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_log_det_matches_dense_jacobian(seed):
    assert glow_logdet_error(seed) < 1e-6


def test_fresh_coupling_is_identity():
    unit = McCoupling(4, 6, False, lambda w, n: None, Stream(0), "f64")
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 3, 3)))
    y, log_det = unit(x, None)
    assert np.array_equal(y.data, x.data) and np.all(log_det.data == 0)


def test_coupling_overflow_is_signalled():
    unit = McCoupling(4, 6, True, lambda w, n: None, Stream(0), "f64")
    for p in unit.parameters():
        p.data[...] = 1e200
    with pytest.raises(NonFiniteError), np.errstate(over="ignore", invalid="ignore"):
        unit(Tensor(np.ones((1, 4, 2, 2))), None)


def test_coupling_needs_even_channels():
    from mcgen.errors import ShapeError

    with pytest.raises(ShapeError):
        McCoupling(3, 4, False, lambda w, n: None, Stream(0))


def test_embedding_baselines_not_offered_for_flows():
    with pytest.raises(ValueError):
        McGlow(3, "embed")
    with pytest.raises(ValueError):
        McPixelCNN(3, "embed")


# -- sampling and conditioning --------------------------------------------------

def _warm(m):
    """One training-mode pass so batch norm has running statistics to sample with."""
    x = np.random.default_rng(0).uniform(0, 1, (8, 1, m.size, m.size))
    m.losses(x, one_hot(np.arange(8) % m.num_modes, m.num_modes), Stream(0))
    return m


def _small_vae(conditioning="mc", seed=0):
    return _warm(McVae(4, conditioning, size=8, latent_dim=6, widths=(4, 6, 8), seed=seed, dtype="f64"))


def _small_gan(conditioning="mc", seed=0):
    return _warm(McGan(4, conditioning, size=8, g_widths=(8, 4), d_widths=(4, 8), seed=seed, dtype="f64"))


def test_sample_is_deterministic_and_mode_major():
    m = _small_vae()
    a, labels = sample(m, [2, 0], 3, Stream(5))
    b, _ = sample(m, [2, 0], 3, Stream(5))
    assert np.array_equal(a, b)
    assert labels.tolist() == [2, 2, 2, 0, 0, 0]


def test_sample_unknown_mode():
    with pytest.raises(SelectorError):
        sample(_small_vae(), [4], 1, Stream(0))


def test_all_ones_model_ignores_the_mode():
    m = _small_vae("ones")
    a, _ = sample(m, [0], 4, Stream(1))
    b, _ = sample(m, [3], 4, Stream(1))
    assert np.array_equal(a, b)


def test_embedding_one_hot_and_midpoint():
    m = _small_vae("embed")
    table = m.embedding.data
    np.testing.assert_array_equal(m.embed(m.embedding, one_hot([2], 4)).data[0], table[2])
    mid = m.embed(m.embedding, np.array([[0.5, 0.5, 0, 0]])).data[0]
    np.testing.assert_allclose(mid, (table[0] + table[1]) / 2, rtol=0, atol=1e-15)
    assert table.shape == (4, EMBED_DIM)


def test_embedding_one_hot_weights_equal_class_conditional_generation():
    m = _small_vae("embed")
    h = one_hot([1, 3], 4)
    assert np.array_equal(m.generate(h, Stream(2)), m.generate(h.astype(float), Stream(2)))


def test_negative_mode_weights_rejected():
    with pytest.raises(SelectorError):
        _small_vae("embed").generate(np.array([[1.5, -0.5, 0, 0]]), Stream(0))


def test_dirichlet_creations_are_seeded():
    m = _small_gan("embed")
    a, la, wa = dirichlet_creations(m, 3, 2, Stream(7))
    b, lb, wb = dirichlet_creations(m, 3, 2, Stream(7))
    assert np.array_equal(a, b) and np.array_equal(wa, wb)
    np.testing.assert_allclose(wa.sum(axis=1), 1)
    assert la.tolist() == [0, 0, 1, 1, 2, 2]


# -- creation -------------------------------------------------------------------

def test_crossover_endpoints_reproduce_source_and_target():
    m = _small_gan(seed=3)
    view = crossover_view(m, 1, 3, 5, Stream(0))
    assert view.num_modes == 6
    for step, mode in ((0, 1), (5, 3)):
        created, _ = sample(view, [step], 3, Stream(4))
        original, _ = sample(m, [mode], 3, Stream(4))
        assert np.array_equal(created, original)


def test_creation_views_share_parameters():
    m = _small_vae()
    view = resample_view(m, 5, Stream(1))
    assert all(p is q for p, q in zip(m.parameters(), view.parameters()))
    assert view.num_modes == 5 and m.num_modes == 4
    assert all(view.codebooks()[k] != b for k, b in m.codebooks().items())


def test_resample_is_seeded():
    m = _small_vae()
    _, a, la = create_modality(m, "resample", Stream(3), 2, num_new=4)
    _, b, lb = create_modality(m, "resample", Stream(3), 2, num_new=4)
    assert np.array_equal(a, b) and np.array_equal(la, lb)


def test_crossover_between_a_mode_and_itself():
    m = _small_vae()
    view = crossover_view(m, 2, 2, 3, Stream(0))
    for book, orig in zip(view.codebooks().values(), m.codebooks().values()):
        assert np.all(book.rows == orig.rows[2])


def test_creation_method_requirements():
    with pytest.raises(ValueError):
        create_modality(_small_vae("embed"), "resample", Stream(0), 1)
    with pytest.raises(ValueError):
        create_modality(_small_vae(), "dirichlet", Stream(0), 1)
    with pytest.raises(ValueError):
        crossover_view(_small_vae(), 0, 4, 2, Stream(0))
    with pytest.raises(ValueError):
        create_modality(_small_vae(), "mutate", Stream(0), 1)


def test_mlp_vae_embed_widening():
    m = McMlpVae(3, 4, "embed", hidden=5, latent_dim=2)
    assert m.enc.inner.in_features == 4 + EMBED_DIM
