"""Stage I: normal-light VQ autoencoder with a learnable nearest-neighbour codebook."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import l1_loss, ms_ssim_loss, perceptual_proxy_loss
from .nn import Decoder, Encoder, Module, param
from .tensor import Tensor


@dataclass
class EncoderDecoderConfig:
    base_channels: int = 16
    downsample_count: int = 2
    residual_blocks_per_level: int = 2
    attention_at_bottleneck: bool = True
    latent_dim: int = 3
    num_codes: int = 64

    def __post_init__(self):
        if self.downsample_count != 2:
            raise ValueError("downsample_count is fixed at 2 (latent grid H/4 x W/4)")
        if self.base_channels <= 0 or self.latent_dim <= 0 or self.num_codes <= 0:
            raise ValueError("channel counts and codebook size must be positive")


class Codebook(Module):
    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator):
        self.codes = param(rng.uniform(-1.0 / num_codes, 1.0 / num_codes, (num_codes, dim)))

    @property
    def num_codes(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


@dataclass
class QuantizationResult:
    z_q: Tensor  # straight-through: values are codebook rows, gradient goes to z
    codes: Tensor  # gathered rows with gradient into the codebook
    indices: np.ndarray  # B x h x w (or h x w for unbatched input)
    usage_histogram: np.ndarray
    distances: np.ndarray  # distance from each latent vector to its chosen code


def nearest_codes(vectors: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest code per row (ties -> lowest index) and its L2 distance."""
    d2 = np.square(vectors[:, None, :] - codes[None, :, :]).sum(axis=-1)
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(len(idx)), idx])


def straight_through(z: Tensor, z_q: Tensor) -> Tensor:
    """Forward value of ``z_q`` exactly; gradient passes to ``z`` unchanged."""
    if z.shape != z_q.shape:
        raise ValueError("straight_through: shape mismatch")
    return Tensor._make(z_q.data.copy(), (z,), lambda g: (g,), "straight_through")


def quantize(z: Tensor, codebook: Codebook) -> QuantizationResult:
    """Replace each latent vector by its nearest codebook row.

    ``z`` is ``d x h x w`` or ``B x d x h x w``.
    """
    if codebook.num_codes == 0:
        raise ValueError("quantize: empty codebook")
    batched = z.ndim == 4
    z4 = z if batched else T.reshape(z, (1, *z.shape))
    B, d, h, w = z4.shape
    if d != codebook.dim:
        raise ValueError(f"quantize: latent has {d} channels, codebook dim is {codebook.dim}")
    flat = z4.data.transpose(0, 2, 3, 1).reshape(-1, d)
    idx, dist = nearest_codes(flat, codebook.codes.data)
    gathered = T.take_rows(codebook.codes, idx)  # (B*h*w, d)
    codes = T.transpose(T.reshape(gathered, (B, h, w, d)), (0, 3, 1, 2))
    if not batched:
        codes = T.reshape(codes, (d, h, w))
    hist = np.bincount(idx, minlength=codebook.num_codes)
    shape = (B, h, w) if batched else (h, w)
    return QuantizationResult(
        z_q=straight_through(z, codes),
        codes=codes,
        indices=idx.reshape(shape),
        usage_histogram=hist,
        distances=dist.reshape(shape),
    )


def codebook_loss(z_nl: Tensor, z_q: Tensor, beta_commit: float = 0.25) -> Tensor:
    """Codebook term (pulls codes) plus weighted commitment term (pulls encoder).

    ``z_q`` must carry gradient into the codebook (``QuantizationResult.codes``).
    Squared norms are averaged over elements.
    """
    if z_nl.shape != z_q.shape:
        raise ValueError(f"codebook_loss: shape mismatch {z_nl.shape} vs {z_q.shape}")
    code_term = T.mean(T.square(T.stop_gradient(z_nl) - z_q))
    commit = T.mean(T.square(T.stop_gradient(z_q) - z_nl))
    return code_term + beta_commit * commit


def reinit_dead_codes(
    codebook: Codebook,
    usage_histogram: np.ndarray,
    batch_latents: np.ndarray,
    min_usage: int,
    rng: np.random.Generator,
) -> int:
    """Overwrite codes used fewer than ``min_usage`` times with random latents.

    ``batch_latents`` is ``B x d x h x w`` or an ``n x d`` array of vectors.
    """
    dead = np.flatnonzero(np.asarray(usage_histogram) < min_usage)
    if dead.size == 0:
        return 0
    lat = np.asarray(batch_latents)
    vectors = lat.transpose(0, 2, 3, 1).reshape(-1, codebook.dim) if lat.ndim == 4 else lat.reshape(-1, codebook.dim)
    pick = rng.choice(len(vectors), size=dead.size, replace=dead.size > len(vectors))
    codebook.codes.data[dead] = vectors[pick]
    return int(dead.size)


def usage_entropy(hist: np.ndarray) -> float:
    p = np.asarray(hist, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


@dataclass
class Stage1Weights:
    code: float = 1.0
    per: float = 0.01
    ssim: float = 0.2
    adv: float = 0.0005
    beta_commit: float = 0.25
    ssim_scales: int = 3


class VQAutoencoder(Module):
    """Normal-light encoder, codebook, and decoder (the NLD)."""

    def __init__(self, cfg: EncoderDecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        args = (cfg.latent_dim, cfg.base_channels, cfg.residual_blocks_per_level, cfg.attention_at_bottleneck)
        self.encoder = Encoder(*args, rng)
        self.codebook = Codebook(cfg.num_codes, cfg.latent_dim, rng)
        self.decoder = Decoder(*args, rng)

    def encode(self, image: Tensor) -> Tensor:
        return encode_nl(self, image)

    def decode(self, z_q: Tensor) -> tuple[Tensor, list[Tensor]]:
        return decode_nl(self, z_q)

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, QuantizationResult]:
        z = self.encode(image)
        q = quantize(z, self.codebook)
        rec, _ = self.decode(q.z_q)
        return rec, z, q


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1, *x.shape)), False
    return x, True


def encode_nl(model: VQAutoencoder, image: Tensor) -> Tensor:
    """``3 x H x W`` (or batched) image -> ``d x H/4 x W/4`` latent."""
    x, batched = _batched(image)
    z, _ = model.encoder(x)
    return z if batched else T.reshape(z, z.shape[1:])


def decode_nl(model: VQAutoencoder, z_q: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Latent -> image in [0, 1] plus per-level decoder features (quarter -> full)."""
    z, batched = _batched(z_q)
    img, feats = model.decoder(z)
    return (img if batched else T.reshape(img, img.shape[1:])), feats


class PatchDiscriminator(Module):
    """Small patch discriminator producing per-patch logits."""

    def __init__(self, rng: np.random.Generator, ch: int = 16):
        from .nn import Conv2d

        self.c1 = Conv2d(3, ch, 3, rng, stride=1)
        self.c2 = Conv2d(ch, 2 * ch, 3, rng, stride=1)
        self.c3 = Conv2d(2 * ch, 1, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.resample(T.leaky_relu(self.c1(x)), "avg_down2")
        h = T.resample(T.leaky_relu(self.c2(h)), "avg_down2")
        return self.c3(h)


def generator_adv_loss(logits: Tensor) -> Tensor:
    """Mean of -log D(x) with D = sigmoid(logits)."""
    return T.mean(T.softplus(-logits))


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return T.mean(T.softplus(-real_logits)) + T.mean(T.softplus(fake_logits))


def stage1_loss(
    I_nl: Tensor,
    I_rec: Tensor,
    z_nl: Tensor,
    z_q: Tensor,
    weights: Stage1Weights | None = None,
    disc: PatchDiscriminator | None = None,
    seed: int = 0,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted Stage I objective.

    Returns the total and its weighted components (``rec``, ``code``, ``ssim``,
    ``per`` and, when a discriminator is given, ``adv``), which sum to the total.
    """
    w = weights or Stage1Weights()
    terms = {
        "rec": l1_loss(I_nl, I_rec),
        "code": w.code * codebook_loss(z_nl, z_q, w.beta_commit),
        "ssim": w.ssim * ms_ssim_loss(I_nl, I_rec, w.ssim_scales),
        "per": w.per * perceptual_proxy_loss(I_nl, I_rec, seed),
    }
    if disc is not None:
        terms["adv"] = w.adv * generator_adv_loss(disc(I_rec))
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total, {k: float(v.data) for k, v in terms.items()}
