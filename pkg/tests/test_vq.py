import numpy as np
import pytest

from glare import tensor as T
from glare.tensor import Tensor, gradcheck, precision
from glare.vq import (
    Codebook,
    EncoderDecoderConfig,
    Stage1Weights,
    VQAutoencoder,
    codebook_loss,
    nearest_codes,
    quantize,
    reinit_dead_codes,
    stage1_loss,
    usage_entropy,
)


def brute_force(vectors, codes):
    idx, dist = [], []
    for v in vectors:
        best, best_d = 0, float("inf")
        for k, c in enumerate(codes):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, c))
            if d < best_d:
                best, best_d = k, d
        idx.append(best)
        dist.append(best_d**0.5)
    return np.array(idx), np.array(dist)


def test_nearest_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    codes = rng.normal(size=(64, 3))
    queries = rng.normal(size=(1000, 3))
    idx, dist = nearest_codes(queries, codes)
    ref_idx, ref_dist = brute_force(queries, codes)
    np.testing.assert_array_equal(idx, ref_idx)
    np.testing.assert_allclose(dist, ref_dist, rtol=1e-12)


def test_ties_pick_lowest_index():
    codes = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    idx, _ = nearest_codes(np.zeros((1, 3)), codes)
    assert idx[0] == 0
    idx, _ = nearest_codes(np.array([[2.0, 0, 0]]), codes)
    assert idx[0] == 0  # rows 0 and 3 are identical
    idx, _ = nearest_codes(np.array([[0.5, 0.5, 0]]), codes[[2, 0]])
    assert idx[0] == 0


def test_quantize_values_are_codebook_rows():
    rng = np.random.default_rng(1)
    cb = Codebook(64, 3, rng)
    z = Tensor(rng.normal(0, 0.05, (2, 3, 4, 4)))
    q = quantize(z, cb)
    rows = cb.codes.data[q.indices.reshape(-1)]
    np.testing.assert_array_equal(q.z_q.data.transpose(0, 2, 3, 1).reshape(-1, 3), rows)
    assert q.usage_histogram.sum() == 32
    assert q.indices.shape == (2, 4, 4)


def test_straight_through_gradient_is_downstream_gradient():
    rng = np.random.default_rng(2)
    cb = Codebook(16, 3, rng)
    z = Tensor(rng.normal(0, 0.1, (1, 3, 4, 4)), requires_grad=True)
    w = rng.normal(size=(1, 3, 4, 4))
    q = quantize(z, cb)
    downstream = lambda t: T.sum(T.square(t) * Tensor(w))  # noqa: E731
    downstream(q.z_q).backward()
    leaf = Tensor(q.z_q.data.copy(), requires_grad=True)
    downstream(leaf).backward()
    np.testing.assert_array_equal(z.grad, leaf.grad)
    assert cb.codes.grad is None


def test_codebook_loss_routes_gradients():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        cb = Codebook(8, 3, rng)
        z = Tensor(rng.normal(0, 0.2, (1, 3, 2, 2)), requires_grad=True)
        q = quantize(z, cb)
        diff = z.data - q.codes.data
        n = diff.size

        # codebook term only: reaches codes, not the encoder output
        cb.codes.grad = z.grad = None
        codebook_loss(z, q.codes, beta_commit=0.0).backward()
        assert z.grad is None or np.all(z.grad == 0)
        expect = np.zeros_like(cb.codes.data)
        flat = (-2 * diff / n).transpose(0, 2, 3, 1).reshape(-1, 3)
        np.add.at(expect, q.indices.reshape(-1), flat)
        np.testing.assert_allclose(cb.codes.grad, expect, atol=1e-12)

        # commitment term only: reaches the encoder output, not the codes
        q = quantize(z, cb)
        cb.codes.grad = z.grad = None
        (codebook_loss(z, q.codes, 0.25) - codebook_loss(z, q.codes, 0.0)).backward()
        assert cb.codes.grad is None or np.allclose(cb.codes.grad, 0)
        np.testing.assert_allclose(z.grad, 0.25 * 2 * diff / n, atol=1e-12)


def test_codebook_loss_finite_differences():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        cb = Codebook(8, 3, rng)
        z = Tensor(rng.normal(0, 0.2, (1, 3, 2, 2)), requires_grad=True)
        idx = quantize(z, cb).indices

        def loss():
            codes = T.transpose(T.reshape(T.take_rows(cb.codes, idx.reshape(-1)), (1, 2, 2, 3)), (0, 3, 1, 2))
            return T.mean(T.square(z - codes))

        assert gradcheck(loss, [z, cb.codes]) < 1e-6


def test_dead_codes_reinitialised_from_latents():
    rng = np.random.default_rng(5)
    cb = Codebook(4, 3, rng)
    latents = rng.normal(size=(1, 3, 2, 2))
    hist = np.array([5, 0, 2, 0])
    assert reinit_dead_codes(cb, hist, latents, 1, np.random.default_rng(0)) == 2
    vectors = latents.transpose(0, 2, 3, 1).reshape(-1, 3).astype(np.float32)
    for k in (1, 3):
        assert any(np.array_equal(cb.codes.data[k], v) for v in vectors)
    assert reinit_dead_codes(cb, np.ones(4), latents, 1, np.random.default_rng(0)) == 0


def test_usage_entropy():
    assert usage_entropy(np.array([1, 1, 1, 1])) == pytest.approx(np.log(4))
    assert usage_entropy(np.array([3, 0, 0])) == 0.0


def test_autoencoder_shapes_and_loss_components_sum():
    cfg = EncoderDecoderConfig(base_channels=8)
    model = VQAutoencoder(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).uniform(size=(2, 3, 32, 32)))
    rec, z, q = model(x)
    assert rec.shape == x.shape
    assert z.shape == (2, cfg.latent_dim, 8, 8)
    total, parts = stage1_loss(x, rec, z, q.codes, Stage1Weights())
    assert float(total.data) == pytest.approx(sum(parts.values()), rel=1e-5)
    assert set(parts) == {"rec", "code", "ssim", "per"}


def test_encoder_rejects_sizes_not_divisible_by_four():
    model = VQAutoencoder(EncoderDecoderConfig(base_channels=8), np.random.default_rng(0))
    with pytest.raises(ValueError):
        model.encode(Tensor(np.zeros((1, 3, 18, 18))))


def test_only_two_downsamplings_supported():
    with pytest.raises(ValueError):
        EncoderDecoderConfig(downsample_count=3)
