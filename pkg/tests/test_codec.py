import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occ4d import codec as K
from occ4d import tensor as T
from occ4d.errors import (
    ChannelLayoutMismatch,
    FormatError,
    PatchSizeIndivisible,
    ShapeMismatch,
    TableShapeMismatch,
)
from occ4d.grid import GridSpec, SemanticGrid


def spec(x=8, y=8, z=4):
    return GridSpec(x, y, z, 0.4, (0, 0.4 * x), (0, 0.4 * y), (0, 0.4 * z))


def rand_grid(rng, s, frames=2):
    return SemanticGrid(s, rng.integers(0, s.num_classes, (frames,) + s.sizes))


# ---------------------------------------------------------------- embedding + fold

def test_full_size_geometry_gives_128_channels():
    g = SemanticGrid.empty(GridSpec(), 1)
    table = K.EmbeddingTable.semi_orthogonal(11, 8)
    assert K.embed_fold(g, table).shape == (128, 1, 200, 200)


def test_constant_grid_repeats_the_row():
    s = spec(2, 2, 3)
    table = K.EmbeddingTable.semi_orthogonal(11, 8, seed=3)
    g = SemanticGrid(s, np.full((1, 2, 2, 3), 4, np.uint8))
    x = K.embed_fold(g, table)
    for iz in range(3):
        np.testing.assert_array_equal(x[iz * 8:(iz + 1) * 8, 0, 1, 0], table.table[4])


def test_one_hot_table_fold_brute_force(rng):
    s = spec(2, 2, 2)
    g = rand_grid(rng, s, 1)
    x = K.embed_fold(g, K.EmbeddingTable(np.eye(11)))
    for c, ix, iy in itertools.product(range(22), range(2), range(2)):
        want = g.ids[0, ix, iy, c // 11] == c % 11
        assert (x[c, 0, ix, iy] != 0) == want


def test_table_rows_must_match_classes():
    with pytest.raises(TableShapeMismatch):
        K.embed_fold(SemanticGrid.empty(spec(), 1), K.EmbeddingTable(np.eye(5)))


@given(st.integers(0, 2**32 - 1))
def test_fold_is_linear_in_the_table(seed):
    rng = np.random.default_rng(seed)
    g = rand_grid(rng, spec(2, 2, 2), 1)
    a, b = rng.standard_normal((2, 11, 3))
    lhs = K.embed_fold(g, K.EmbeddingTable(a + b))
    rhs = K.embed_fold(g, K.EmbeddingTable(a)) + K.embed_fold(g, K.EmbeddingTable(b))
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_semi_orthogonal_columns():
    t = K.EmbeddingTable.semi_orthogonal(11, 8).table.astype(np.float64)
    np.testing.assert_allclose(t.T @ t, np.eye(8), atol=1e-5)
    small = K.EmbeddingTable.semi_orthogonal(4, 8).table.astype(np.float64)
    np.testing.assert_allclose(small @ small.T, np.eye(4), atol=1e-5)


# ---------------------------------------------------------------- reparameterize

def test_reparameterize_cases():
    mu, noise = np.array([1.0, 2.0]), np.array([2.0, -2.0])
    np.testing.assert_array_equal(K.reparameterize(mu, np.full(2, 0.5), noise), [2.0, 1.0])
    np.testing.assert_array_equal(K.reparameterize(mu, np.zeros(2), noise), mu)
    np.testing.assert_array_equal(K.reparameterize(np.zeros(2), np.ones(2), noise), noise)
    with pytest.raises(ShapeMismatch):
        K.reparameterize(mu, np.ones(3), noise)


def test_reparameterize_gradient_wrt_mu_is_identity(rng):
    sigma, noise = rng.random(5), rng.standard_normal(5)
    f = lambda m: T.sum_(T.mul(K.reparameterize(m, T.Tensor(sigma), T.Tensor(noise)),
                               np.arange(1, 6, dtype=np.float32)))
    mu = T.Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
    f(mu).backward()
    np.testing.assert_allclose(mu.grad, np.arange(1, 6))
    assert T.grad_check(f, mu.data) < 1e-4


# ---------------------------------------------------------------- patchify

def test_full_size_token_count():
    tok = K.patchify(np.zeros((16, 8, 28, 28), np.float32), 2)
    assert tok.shape == (8, 196, 64)


def test_patchify_tile_layout(rng):
    x = rng.standard_normal((3, 2, 4, 6))
    tok = K.patchify(x, 2)
    for f, i, j, c, a, b in itertools.product(range(2), range(2), range(3), range(3), range(2), range(2)):
        assert tok[f, i * 3 + j, c * 4 + a * 2 + b] == x[c, f, i * 2 + a, j * 2 + b]


def test_patch_one_is_a_reshape(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(K.unpatchify(K.patchify(x, 1), 1, 4, 4), x)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3))
def test_patchify_round_trip(seed, p, a, b):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 2, a * p, b * p)).astype(np.float32)
    np.testing.assert_array_equal(K.unpatchify(K.patchify(x, p), p, a * p, b * p), x)
    t = K.patchify_t(T.Tensor(x), p)
    np.testing.assert_array_equal(t.data, K.patchify(x, p))
    np.testing.assert_array_equal(K.unpatchify_t(t, p, a * p, b * p).data, x)


def test_patchify_rejects_indivisible():
    with pytest.raises(PatchSizeIndivisible):
        K.patchify(np.zeros((1, 1, 5, 4)), 2)


# ---------------------------------------------------------------- reference codec

@pytest.mark.parametrize("seed", range(100))
def test_reference_codec_lossless(seed):
    rng = np.random.default_rng(seed)
    g = SemanticGrid(spec(8, 8, 4), rng.integers(0, 11, (1, 8, 8, 4)))
    c = K.ReferenceCodec(g.spec)
    assert c.decode(c.encode(g)) == g


def test_majority_vote_tile():
    s = spec(2, 2, 1)
    ids = np.array([7, 7, 7, 1], np.uint8).reshape(1, 2, 2, 1)
    c = K.ReferenceCodec(s, 2)
    assert np.all(c.decode(c.encode(SemanticGrid(s, ids))).ids == 7)


@pytest.mark.parametrize("ds", [1, 2, 4])
def test_free_grid_survives_any_downsample(ds):
    g = SemanticGrid.empty(spec(), 2)
    c = K.ReferenceCodec(g.spec, ds)
    assert c.decode(c.encode(g)) == g


def test_reference_decode_checks_layout():
    c = K.ReferenceCodec(spec())
    with pytest.raises(ChannelLayoutMismatch):
        c.decode(np.zeros((5, 1, 8, 8)))


# ---------------------------------------------------------------- tiny VAE

def test_vae_kl_closed_form():
    kl = K.kl_standard_normal(np.array([1.0]), np.array([1.0]))
    assert float(kl.data[0]) == pytest.approx(0.5)
    sig = np.array([0.5])
    want = 0.5 * (0.0 + 0.25 - 1 - 2 * np.log(0.5))
    assert float(K.kl_standard_normal(np.zeros(1), sig).data[0]) == pytest.approx(want, rel=1e-6)


def test_vae_loss_near_zero_for_confident_logits(rng):
    s = spec(4, 4, 2)
    g = rand_grid(rng, s, 1)
    logits = 50.0 * np.eye(11, dtype=np.float32)[g.ids]
    z = np.zeros((2, 1, 2, 2), np.float32)
    assert float(K.vae_loss(logits, g, z, np.ones_like(z), 1.0).data) < 1e-6
    ce = float(K.vae_loss(logits * 0, g, z, np.ones_like(z), 0.0).data)
    assert ce == pytest.approx(np.log(11), rel=1e-6)


def test_vae_shapes_and_gradients():
    cfg = K.VAEConfig(depth_bins=2, expansion=4, downsample=2, latent_channels=3, hidden=8)
    s = spec(4, 4, 2)
    g = rand_grid(np.random.default_rng(0), s, 2)
    x = K.embed_fold(g, K.EmbeddingTable.semi_orthogonal(11, 4))
    params = K.init_vae(cfg, 0)
    mu, sigma = K.vae_encode(x, params, cfg)
    assert mu.shape == sigma.shape == (3, 2, 2, 2)
    logits = K.vae_decode(mu, params, cfg)
    assert logits.shape == (2, 4, 4, 2, 11)
    loss = K.vae_loss(logits, g, mu, sigma, 0.1)
    loss.backward()
    assert all(p.grad is not None for p in params.values())
    assert K.vae_decode_grid(mu.data, params, cfg, s).ids.shape == g.ids.shape


def test_vae_loss_rejects_negative_beta():
    with pytest.raises(ValueError):
        K.vae_loss(np.zeros((1, 11)), np.zeros(1, int), np.zeros(1), np.ones(1), -1)


# ---------------------------------------------------------------- OCCL

def test_occl_round_trip(tmp_path, rng):
    z = rng.standard_normal((4, 3, 2, 2)).astype(np.float32)
    data = K.encode_latent(z)
    assert data[:4] == b"OCCL" and len(data) == 20 + z.size * 4
    np.testing.assert_array_equal(K.decode_latent(data), z)
    assert K.encode_latent(K.decode_latent(data)) == data
    K.save_latent(tmp_path / "z.occl", z)
    np.testing.assert_array_equal(K.load_latent(tmp_path / "z.occl"), z)
    with pytest.raises(FormatError):
        K.decode_latent(data[:-2])
