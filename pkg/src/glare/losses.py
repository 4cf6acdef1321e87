"""Differentiable image losses and float64 evaluation metrics.

Losses operate on ``B x 3 x H x W`` tensors in [0, 1].  Metrics take plain
arrays (``3 x H x W`` or ``B x 3 x H x W``) and never touch the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03
WINDOW, SIGMA = 11, 1.5
MIN_WINDOW = 7
PSNR_CAP = 100.0


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    return T.mean(T.abs(a - b))


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse_loss: shape mismatch {a.shape} vs {b.shape}")
    return T.mean(T.square(a - b))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _window_for(extent: int) -> int:
    size = min(WINDOW, extent if extent % 2 else extent - 1)
    if size < MIN_WINDOW:
        raise ValueError(f"image extent {extent} too small for a {MIN_WINDOW}-px SSIM window")
    return size


def _ssim_terms(a: Tensor, b: Tensor, size: int) -> tuple[Tensor, Tensor]:
    """Per-(image, channel) mean luminance and contrast-structure terms."""
    B, C, H, W = a.shape
    stack = T.concat([a, b, T.square(a), T.square(b), a * b], axis=0)
    flat = T.reshape(stack, (5 * B * C, 1, H, W))
    win = Tensor(gaussian_window(size)[None, None])
    filt = T.reshape(T.conv2d(flat, win), (5, B, C, H - size + 1, W - size + 1))
    mu_a, mu_b, aa, bb, ab = (filt[i] for i in range(5))
    c1, c2 = K1**2, K2**2
    mu_aa, mu_bb, mu_ab = T.square(mu_a), T.square(mu_b), mu_a * mu_b
    var_a, var_b, cov = aa - mu_aa, bb - mu_bb, ab - mu_ab
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum = (2.0 * mu_ab + c1) / (mu_aa + mu_bb + c1)
    return T.mean(lum * cs, axes=(2, 3)), T.mean(cs, axes=(2, 3))


def ms_ssim(a: Tensor, b: Tensor, scales: int = 3) -> Tensor:
    """Mean multi-scale SSIM over the batch and channels.

    Per-scale weights are the standard five truncated to ``scales`` and
    renormalised.  The Gaussian window shrinks below 11 px at scales whose
    extent is smaller than the window.
    """
    if a.shape != b.shape or a.ndim != 4:
        raise ValueError(f"ms_ssim: need equal 4-d shapes, got {a.shape}, {b.shape}")
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ValueError(f"ms_ssim: scales must be in [1, {len(MSSSIM_WEIGHTS)}]")
    H, W = a.shape[-2:]
    coarse = min(H, W) // 2 ** (scales - 1)
    if min(H, W) % 2 ** (scales - 1) or coarse < MIN_WINDOW:
        raise ValueError(f"ms_ssim: {H}x{W} image too small for {scales} scales")
    w = np.array(MSSSIM_WEIGHTS[:scales])
    w = w / w.sum()
    total = None
    for s in range(scales):
        size = _window_for(min(a.shape[-2:]))
        full, cs = _ssim_terms(a, b, size)
        term = full if s == scales - 1 else cs
        # negative structure terms would make the fractional power undefined
        term = T.power(T.clamp(term, 1e-6, None), float(w[s]))
        total = term if total is None else total * term
        if s < scales - 1:
            a, b = T.resample(a, "avg_down2"), T.resample(b, "avg_down2")
    return T.mean(total)


def ms_ssim_loss(a: Tensor, b: Tensor, scales: int = 3) -> Tensor:
    return 1.0 - ms_ssim(a, b, scales)


@lru_cache(maxsize=8)
def _proxy_weights(seed: int, dtype: str) -> tuple[tuple[np.ndarray, np.ndarray, int], ...]:
    rng = np.random.default_rng(seed)
    layers = []
    for cin, cout, stride in ((3, 8, 1), (8, 16, 1), (16, 16, 1)):
        w = rng.normal(0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3)).astype(dtype)
        b = rng.normal(0, 0.05, cout).astype(dtype)
        layers.append((w, b, stride))
    return tuple(layers)


def perceptual_features(x: Tensor, seed: int = 0) -> list[Tensor]:
    """Activations of a fixed random 3-layer conv stack (stand-in for VGG features)."""
    feats = []
    h = x
    for i, (w, b, stride) in enumerate(_proxy_weights(seed, x.dtype.str)):
        h = T.leaky_relu(T.conv2d(h, Tensor(w, dtype=w.dtype), Tensor(b, dtype=b.dtype), stride=stride, pad=1))
        feats.append(h)
        if i == 0 and min(h.shape[-2:]) % 2 == 0:
            h = T.resample(h, "avg_down2")
    return feats


def perceptual_proxy_loss(a: Tensor, b: Tensor, seed: int = 0) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"perceptual_proxy_loss: shape mismatch {a.shape} vs {b.shape}")
    total = None
    for fa, fb in zip(perceptual_features(a, seed), perceptual_features(b, seed)):
        term = T.mean(T.square(fa - fb))
        total = term if total is None else total + term
    return total


# -- metrics -----------------------------------------------------------------


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(-2, -1))
    return np.einsum("...ij,ij->...", view, win)


def ssim(a, b) -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5) averaged over channels and pixels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    win = gaussian_window(_window_for(min(a.shape[-2:])))
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    c1, c2 = K1**2, K2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, name: str, pred, gt) -> None:
        self.names.append(name)
        self.psnr.append(psnr(pred, gt))
        self.ssim.append(ssim(pred, gt))

    @property
    def psnr_db(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def lines(self) -> list[str]:
        out = [f"{n}\tpsnr_db={p:.4f}\tssim={s:.6f}" for n, p, s in zip(self.names, self.psnr, self.ssim)]
        out.append(f"mean\tpsnr_db={self.psnr_db:.4f}\tssim={self.mean_ssim:.6f}")
        return out

    def to_dict(self) -> dict:
        return {
            "images": [{"name": n, "psnr_db": p, "ssim": s} for n, p, s in zip(self.names, self.psnr, self.ssim)],
            "psnr_db": self.psnr_db,
            "ssim": self.mean_ssim,
        }
