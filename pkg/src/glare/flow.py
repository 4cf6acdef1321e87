"""Stage II: conditional encoder and invertible latent normalizing flow.

All flow layers act on ``B x d x h x w`` latents (no squeeze) and return
``(output, logdet)`` with ``logdet`` of shape ``(B,)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensor as T
from .nn import Conv2d, Encoder, Module, param
from .tensor import Tensor

LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class ConditionOutputs:
    c_ll: Tensor
    z_ll: Tensor
    features: list[Tensor]


class ConditionEncoder(Module):
    """Low-light encoder (same structure as the NL encoder) plus cond/feat heads."""

    def __init__(
        self,
        latent_dim: int,
        base: int,
        res_blocks: int,
        attention: bool,
        cond_channels: int,
        rng: np.random.Generator,
    ):
        self.encoder = Encoder(latent_dim, base, res_blocks, attention, rng)
        self.cond_conv = Conv2d(latent_dim, cond_channels, 3, rng)
        self.feat_conv = Conv2d(cond_channels, latent_dim, 3, rng)

    def __call__(self, image: Tensor) -> ConditionOutputs:
        return condition_encode(self, image)


def condition_encode(enc: ConditionEncoder, image: Tensor) -> ConditionOutputs:
    batched = image.ndim == 4
    x = image if batched else T.reshape(image, (1, *image.shape))
    h, feats = enc.encoder(x)
    c_ll = enc.cond_conv(h)
    z_ll = enc.feat_conv(c_ll)
    if not batched:
        c_ll = T.reshape(c_ll, c_ll.shape[1:])
        z_ll = T.reshape(z_ll, z_ll.shape[1:])
    return ConditionOutputs(c_ll, z_ll, feats)


# -- flow layers -------------------------------------------------------------


class ActNorm(Module):
    """Per-channel ``z' = s * (z + b)`` with ``s = exp(logs)``."""

    def __init__(self, channels: int, scale=None, bias=None):
        if scale is not None and np.any(np.asarray(scale) == 0):
            raise ValueError("ActNorm: zero scale is not invertible")
        logs = np.zeros(channels) if scale is None else np.log(np.abs(np.asarray(scale, dtype=np.float64)))
        self.logs = param(logs.reshape(1, channels, 1, 1))
        self.bias = param(np.zeros((1, channels, 1, 1)) if bias is None else np.asarray(bias).reshape(1, channels, 1, 1))

    def data_init(self, z: np.ndarray, eps: float = 1e-6) -> None:
        """Set bias/scale so that the output over ``z`` is zero-mean, unit-variance per channel."""
        mean = z.mean(axis=(0, 2, 3), keepdims=True)
        std = z.std(axis=(0, 2, 3), keepdims=True)
        self.bias.data[...] = -mean
        self.logs.data[...] = -np.log(std + eps)

    def __call__(self, z: Tensor, reverse: bool = False) -> tuple[Tensor, Tensor]:
        hw = z.shape[2] * z.shape[3]
        ld = T.sum(self.logs) * float(hw)
        if not reverse:
            out = (z + self.bias) * T.exp(self.logs)
            return out, ld
        return z * T.exp(-self.logs) - self.bias, -ld


class InvertibleChannelMix(Module):
    """Per-position ``z' = M z`` (an invertible 1x1 convolution)."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, matrix=None):
        if matrix is None:
            if rng is None:
                matrix = np.eye(channels)
            else:
                q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
                matrix = q * np.sign(np.diag(r))
        self.weight = param(matrix)

    def _check(self) -> None:
        det = np.linalg.det(self.weight.data.astype(np.float64))
        if abs(det) < 1e-12:
            raise ValueError(f"InvertibleChannelMix: |det M| = {abs(det):.3g} is singular")

    def inverse_matrix(self) -> np.ndarray:
        self._check()
        m = self.weight.data.astype(np.float64)
        lu, piv = scipy.linalg.lu_factor(m)
        return scipy.linalg.lu_solve((lu, piv), np.eye(m.shape[0])).astype(self.weight.dtype)

    def __call__(self, z: Tensor, reverse: bool = False) -> tuple[Tensor, Tensor]:
        self._check()
        C = z.shape[1]
        hw = z.shape[2] * z.shape[3]
        ld = T.logabsdet(self.weight) * float(hw)
        if not reverse:
            return T.conv2d(z, T.reshape(self.weight, (C, C, 1, 1))), ld
        inv = Tensor(self.inverse_matrix().reshape(C, C, 1, 1), dtype=z.dtype)
        return T.conv2d(z, inv), -ld


class CondAffineCoupling(Module):
    """Affine coupling: one channel group is scaled/shifted from the other plus ``c_ll``.

    The first ``ceil(d/2)`` channels of the input rolled by ``roll`` stay
    fixed; giving successive couplings successive rolls means every channel
    gets transformed within one flow layer.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int, rng: np.random.Generator, roll: int = 0):
        self.n_keep = (channels + 1) // 2
        self.n_change = channels - self.n_keep
        self._roll = roll % channels
        self.conv1 = Conv2d(self.n_keep + cond_channels, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, hidden, 1, rng)
        self.conv_out = Conv2d(hidden, 2 * self.n_change, 3, rng, zero=True)

    def _split(self, z: Tensor) -> tuple[Tensor, Tensor]:
        r = self._roll
        if r:
            z = T.concat([z[:, r:], z[:, :r]], axis=1)
        return z[:, : self.n_keep], z[:, self.n_keep :]

    def _join(self, keep: Tensor, change: Tensor) -> Tensor:
        z = T.concat([keep, change], axis=1)
        r = z.shape[1] - self._roll
        if self._roll:
            z = T.concat([z[:, r:], z[:, :r]], axis=1)
        return z

    def scale_shift(self, keep: Tensor, c_ll: Tensor) -> tuple[Tensor, Tensor]:
        h = T.silu(self.conv1(T.concat([keep, c_ll], axis=1)))
        h = T.silu(self.conv2(h))
        out = self.conv_out(h)
        s_raw = out[:, : self.n_change]
        shift = out[:, self.n_change :]
        return T.tanh(s_raw), shift

    def __call__(self, z: Tensor, c_ll: Tensor, reverse: bool = False) -> tuple[Tensor, Tensor]:
        keep, change = self._split(z)
        log_scale, shift = self.scale_shift(keep, c_ll)
        ld = T.sum(log_scale, axes=(1, 2, 3))
        if not reverse:
            changed = change * T.exp(log_scale) + shift
            return self._join(keep, changed), ld
        restored = (change - shift) * T.exp(-log_scale)
        return self._join(keep, restored), -ld


@dataclass
class FlowConfig:
    latent_dim: int = 3
    cond_channels: int = 16
    couplings: int = 4
    flow_layers: int = 2
    hidden: int = 32


class FlowModel(Module):
    """Flow layers of [ActNorm, InvertibleChannelMix, CondAffineCoupling x K]."""

    def __init__(self, cfg: FlowConfig, rng: np.random.Generator, random_mix: bool = True):
        self.cfg = cfg
        self.layers = []
        d = cfg.latent_dim
        for _ in range(cfg.flow_layers):
            self.layers.append(ActNorm(d))
            self.layers.append(InvertibleChannelMix(d, rng if random_mix else None))
            for k in range(cfg.couplings):
                self.layers.append(CondAffineCoupling(d, cfg.cond_channels, cfg.hidden, rng, roll=k))

    def _apply(self, layer, h: Tensor, c_ll: Tensor, reverse: bool) -> tuple[Tensor, Tensor]:
        if isinstance(layer, CondAffineCoupling):
            return layer(h, c_ll, reverse)
        return layer(h, reverse)

    def forward_layers(self, z: Tensor, c_ll: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Forward pass returning the per-layer log-determinants."""
        h = z
        lds = []
        for layer in self.layers:
            h, ld = self._apply(layer, h, c_ll, False)
            lds.append(ld)
        return h, lds

    def data_init(self, z: np.ndarray, c_ll: np.ndarray) -> None:
        """Data-dependent ActNorm initialisation from one batch."""
        with T.no_grad():
            h = Tensor(z, dtype=z.dtype)
            c = Tensor(c_ll, dtype=c_ll.dtype)
            for layer in self.layers:
                if isinstance(layer, ActNorm):
                    layer.data_init(h.data)
                h, _ = self._apply(layer, h, c, False)


def _batched(*xs: Tensor) -> tuple[list[Tensor], bool]:
    if xs[0].ndim == 3:
        return [T.reshape(x, (1, *x.shape)) for x in xs], False
    return list(xs), True


def flow_forward(flow: FlowModel, z_nl: Tensor, c_ll: Tensor) -> tuple[Tensor, Tensor]:
    """``v = f(z_nl; c_ll)`` and the total log|det| per sample (scalar if unbatched)."""
    (z, c), batched = _batched(z_nl, c_ll)
    v, lds = flow.forward_layers(z, c)
    total = _sum_logdets(lds, z.shape[0], z.dtype)
    if not batched:
        return T.reshape(v, v.shape[1:]), T.reshape(total, ())
    return v, total


def flow_inverse(flow: FlowModel, v: Tensor, c_ll: Tensor) -> Tensor:
    """``z = f^-1(v; c_ll)``."""
    (h, c), batched = _batched(v, c_ll)
    for layer in reversed(flow.layers):
        h, _ = flow._apply(layer, h, c, True)
    return h if batched else T.reshape(h, h.shape[1:])


def flow_inverse_logdet(flow: FlowModel, v: Tensor, c_ll: Tensor) -> tuple[Tensor, Tensor]:
    (h, c), batched = _batched(v, c_ll)
    lds = []
    for layer in reversed(flow.layers):
        h, ld = flow._apply(layer, h, c, True)
        lds.append(ld)
    total = _sum_logdets(lds, h.shape[0], h.dtype)
    if not batched:
        return T.reshape(h, h.shape[1:]), T.reshape(total, ())
    return h, total


def _sum_logdets(lds: list[Tensor], batch: int, dtype) -> Tensor:
    total = Tensor(np.zeros(batch), dtype=dtype)
    for ld in lds:
        total = total + ld
    return total


def latent_log_prob(v: Tensor, z_ll: Tensor) -> Tensor:
    """Log-density of ``N(z_ll, I)`` at ``v``; per sample for batched input."""
    if v.shape != z_ll.shape:
        raise ValueError(f"latent_log_prob: shape mismatch {v.shape} vs {z_ll.shape}")
    axes = tuple(range(1, v.ndim)) if v.ndim == 4 else None
    D = int(np.prod(v.shape[1:])) if v.ndim == 4 else v.size
    return -0.5 * T.sum(T.square(v - z_ll), axes=axes) - 0.5 * D * LOG_2PI


def nll(flow: FlowModel, z_nl: Tensor, c_ll: Tensor, z_ll: Tensor) -> Tensor:
    """Negative log-likelihood of ``z_nl`` in nats per latent dimension (batch mean)."""
    v, logdet = flow_forward(flow, z_nl, c_ll)
    D = int(np.prod(z_nl.shape[1:])) if z_nl.ndim == 4 else z_nl.size
    return T.mean(-(latent_log_prob(v, z_ll) + logdet)) * (1.0 / D)


def sample_latent(z_ll: Tensor, tau: float = 0.0, seed: int = 0) -> Tensor:
    """``v = z_ll + tau * eps`` with ``eps ~ N(0, I)`` from a seeded generator."""
    if tau < 0:
        raise ValueError("sample_latent: tau must be non-negative")
    if tau == 0:
        return Tensor(z_ll.data, dtype=z_ll.dtype)
    eps = np.random.default_rng(seed).standard_normal(z_ll.shape)
    return Tensor(z_ll.data + tau * eps, dtype=z_ll.dtype)
