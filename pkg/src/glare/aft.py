"""Stage III: adaptive mix-up, deformable feature warping, and the fusion decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import l1_loss, ms_ssim_loss, perceptual_proxy_loss
from .nn import Conv2d, Decoder, Module, param
from .tensor import Tensor

TAPS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
CENTER_TAP = 4


def mix_weight(theta: Tensor, beta: float) -> Tensor:
    """``beta * sigmoid(theta)``, clamped to [0, 1] when ``beta`` pushes it past 1."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    w = T.sigmoid(theta) * float(beta)
    return T.clamp(w, 0.0, 1.0) if np.any(w.data > 1.0) else w


def adaptive_mixup(F_c: Tensor, F_mf: Tensor, theta: Tensor, beta: float = 1.0) -> Tensor:
    """``w * F_c + (1 - w) * F_mf`` with ``w = beta * sigmoid(theta)`` (clamped to [0, 1])."""
    if F_c.shape != F_mf.shape:
        raise ValueError(f"adaptive_mixup: shape mismatch {F_c.shape} vs {F_mf.shape}")
    if beta == 0:
        return F_mf
    w = mix_weight(theta, beta)
    return w * F_c + (1.0 - w) * F_mf


def base_grid(h: int, w: int, dtype) -> np.ndarray:
    """``9 x 2 x h x w`` sampling positions of a plain 3x3 neighbourhood."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid = np.empty((len(TAPS), 2, h, w), dtype=dtype)
    for k, (dy, dx) in enumerate(TAPS):
        grid[k, 0] = yy + dy
        grid[k, 1] = xx + dx
    return grid


def deform_sample(F: Tensor, offsets: Tensor) -> Tensor:
    """Bilinearly sample each 3x3 tap of ``F`` at its displaced position.

    ``F`` is ``B x C x H x W``; ``offsets`` is ``B x 18 x H x W`` holding a
    (row, column) displacement per tap.  Returns ``B x 9C x H x W`` ordered
    channel-major, matching a flattened ``C x 3 x 3`` conv weight.
    """
    B, C, H, W = F.shape
    if offsets.shape != (B, 2 * len(TAPS), H, W):
        raise ValueError(f"deform_sample: offsets {offsets.shape} do not match features {F.shape}")
    grid = Tensor(np.broadcast_to(base_grid(H, W, F.dtype).reshape(1, 18, H, W), (B, 18, H, W)), dtype=F.dtype)
    coords = grid + offsets
    # (B, 9, 2, H, W) -> (B, 2, 9, H, W) -> coordinates over a 9H x W sampling grid
    coords = T.reshape(T.transpose(T.reshape(coords, (B, 9, 2, H, W)), (0, 2, 1, 3, 4)), (B, 2, 9 * H, W))
    sampled = T.bilinear_sample(F, coords)  # B x C x 9H x W
    return T.reshape(sampled, (B, C * 9, H, W))


class DeformWarp(Module):
    """Offsets predicted from ``concat(F_nl, F_t)``; taps of ``F_nl`` combined by a 3x3 weight."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.offset = Conv2d(2 * channels, 2 * len(TAPS), 3, rng, zero=True)
        w = np.zeros((channels, channels, 3, 3))
        w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        self.weight = param(w)
        self.bias = param(np.zeros(channels))

    def __call__(self, F_nl: Tensor, F_t: Tensor) -> Tensor:
        return deform_warp(self, F_nl, F_t)


def deform_warp(warp: DeformWarp, F_nl: Tensor, F_t: Tensor) -> Tensor:
    if F_nl.shape[0] != F_t.shape[0] or F_nl.shape[2:] != F_t.shape[2:]:
        raise ValueError(f"deform_warp: spatial mismatch {F_nl.shape} vs {F_t.shape}")
    offsets = warp.offset(T.concat([F_nl, F_t], axis=1))
    return warp_with_offsets(warp, F_nl, offsets)


def warp_with_offsets(warp: DeformWarp, F_nl: Tensor, offsets: Tensor) -> Tensor:
    B, C, H, W = F_nl.shape
    cols = deform_sample(F_nl, offsets)
    Cout = warp.weight.shape[0]
    wm = T.reshape(warp.weight, (Cout, C * 9, 1, 1))
    return T.conv2d(cols, wm, warp.bias)


class FusionDecoder(Module):
    """Multi-scale fusion decoder (MFD): an NLD-shaped trunk plus per-level AMB and warp."""

    def __init__(self, latent_dim: int, base: int, res_blocks: int, attention: bool, rng: np.random.Generator):
        self.trunk = Decoder(latent_dim, base, res_blocks, attention, rng)
        chans = self.trunk.channels
        self.theta = [param(np.zeros(())) for _ in chans]
        self.warps = [DeformWarp(c, rng) for c in chans]
        self.fuse = [Conv2d(c, c, 1, rng, zero=True) for c in chans]

    def __call__(
        self,
        z: Tensor,
        F_c: list[Tensor],
        F_nl: list[Tensor],
        beta: float = 1.0,
    ) -> Tensor:
        return mfd_decode(self, z, F_c, F_nl, beta)


def mfd_decode(mfd: FusionDecoder, z: Tensor, F_c: list[Tensor], F_nl: list[Tensor], beta: float = 1.0) -> Tensor:
    """Decode ``z`` while fusing warped NLD features at every level.

    ``F_c`` is ordered full -> quarter resolution (encoder order); ``F_nl`` is
    ordered quarter -> full (decoder order).
    """
    n = len(mfd.warps)
    if len(F_c) != n or len(F_nl) != n:
        raise ValueError(f"mfd_decode: expected {n} levels, got F_c={len(F_c)} F_nl={len(F_nl)}")
    enc = F_c[::-1]

    def hook(i: int, F_mf: Tensor) -> Tensor:
        if enc[i].shape != F_mf.shape or F_nl[i].shape != F_mf.shape:
            raise ValueError(f"mfd_decode: level {i} shapes {enc[i].shape}, {F_nl[i].shape}, {F_mf.shape} differ")
        F_t = adaptive_mixup(enc[i], F_mf, mfd.theta[i], beta)
        F_d = mfd.warps[i](F_nl[i], F_t)
        return F_mf + mfd.fuse[i](F_d)

    img, _ = mfd.trunk(z, hook)
    return img


def stage3_loss(pred: Tensor, gt: Tensor, lambda_ssim: float = 0.2, lambda_per: float = 0.01, ssim_scales: int = 3, seed: int = 0) -> tuple[Tensor, dict[str, float]]:
    """L1 + weighted MS-SSIM loss + weighted perceptual proxy; weighted components sum to the total."""
    terms = {
        "l1": l1_loss(pred, gt),
        "ssim": lambda_ssim * ms_ssim_loss(pred, gt, ssim_scales),
        "per": lambda_per * perceptual_proxy_loss(pred, gt, seed),
    }
    total = terms["l1"] + terms["ssim"] + terms["per"]
    return total, {k: float(v.data) for k, v in terms.items()}
