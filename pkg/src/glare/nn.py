"""Parameter containers and the convolutional building blocks shared by all stages."""

from __future__ import annotations

import hashlib
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set at
    construction; sub-modules may be attributes or live inside lists.
    Names are dotted paths in attribute insertion order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and getattr(value, "name", None) == "param":
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.name == "param":
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data[...] = arr

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True, name="param")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, zero: bool = False):
        bound = 1.0 / np.sqrt(cin * k * k)
        if zero:
            self.weight = param(np.zeros((cout, cin, k, k)))
            self.bias = param(np.zeros(cout))
        else:
            self.weight = param(rng.uniform(-bound, bound, (cout, cin, k, k)))
            self.bias = param(rng.uniform(-bound, bound, cout))
        self._stride = stride
        self._pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(T.silu(x))
        h = self.conv2(T.silu(h))
        return (self.skip(x) if self.skip is not None else x) + h


class AttnBlock(Module):
    """Single-head spatial self-attention with a residual connection."""

    def __init__(self, ch: int, rng: np.random.Generator):
        self.q = Conv2d(ch, ch, 1, rng)
        self.k = Conv2d(ch, ch, 1, rng)
        self.v = Conv2d(ch, ch, 1, rng)
        self.proj = Conv2d(ch, ch, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        q = T.transpose(T.reshape(self.q(x), (B, C, H * W)), (0, 2, 1))
        k = T.reshape(self.k(x), (B, C, H * W))
        v = T.reshape(self.v(x), (B, C, H * W))
        attn = T.softmax(T.matmul(q, k) * (1.0 / np.sqrt(C)), axis=-1)
        out = T.matmul(v, T.transpose(attn, (0, 2, 1)))
        return x + self.proj(T.reshape(out, (B, C, H, W)))


def level_channels(base: int) -> list[int]:
    """Encoder channel widths at full, half, and quarter resolution."""
    return [base, 2 * base, 2 * base]


class Encoder(Module):
    """Three-level convolutional encoder with two 2x downsamplings (f = 4).

    Returns the ``d``-channel latent and the post-activation feature of each
    resolution level, ordered full -> quarter resolution.
    """

    def __init__(self, latent_dim: int, base: int, res_blocks: int, attention: bool, rng: np.random.Generator):
        ch = level_channels(base)
        self.conv_in = Conv2d(3, ch[0], 3, rng)
        self.levels = []
        self.down = []
        cin = ch[0]
        for i, c in enumerate(ch):
            blocks = []
            for _ in range(res_blocks):
                blocks.append(ResBlock(cin, c, rng))
                cin = c
            self.levels.append(LevelBlocks(blocks))
            if i < len(ch) - 1:
                self.down.append(Conv2d(c, ch[i + 1], 3, rng))
                cin = ch[i + 1]
        self.attn = AttnBlock(ch[-1], rng) if attention else None
        self.conv_out = Conv2d(ch[-1], latent_dim, 3, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        H, W = x.shape[-2:]
        if H % 4 or W % 4:
            raise ValueError(f"image extents must be divisible by 4, got {H}x{W}")
        h = self.conv_in(x)
        feats = []
        for i, level in enumerate(self.levels):
            h = level(h)
            if i == len(self.levels) - 1 and self.attn is not None:
                h = self.attn(h)
            feats.append(T.silu(h))
            if i < len(self.down):
                h = self.down[i](T.resample(h, "avg_down2"))
        return self.conv_out(feats[-1]), feats


class LevelBlocks(Module):
    def __init__(self, blocks: list[ResBlock]):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


LevelHook = Callable[[int, Tensor], Tensor]


class Decoder(Module):
    """Mirror of :class:`Encoder`: latent at 1/4 resolution -> sigmoid image.

    ``hook(level, feature)`` may replace the trunk feature after each level's
    residual blocks (levels ordered quarter -> full resolution); the fusion
    decoder uses it to inject warped features before upsampling.
    """

    def __init__(self, latent_dim: int, base: int, res_blocks: int, attention: bool, rng: np.random.Generator):
        ch = level_channels(base)[::-1]
        self.conv_in = Conv2d(latent_dim, ch[0], 3, rng)
        self.attn = AttnBlock(ch[0], rng) if attention else None
        self.levels = []
        self.up = []
        cin = ch[0]
        for i, c in enumerate(ch):
            blocks = []
            for _ in range(res_blocks):
                blocks.append(ResBlock(cin, c, rng))
                cin = c
            self.levels.append(LevelBlocks(blocks))
            if i < len(ch) - 1:
                self.up.append(Conv2d(c, ch[i + 1], 3, rng))
                cin = ch[i + 1]
        self.conv_out = Conv2d(ch[-1], 3, 3, rng)

    @property
    def channels(self) -> list[int]:
        return [lv.blocks[-1].conv2.weight.shape[0] for lv in self.levels]

    def __call__(self, z: Tensor, hook: LevelHook | None = None) -> tuple[Tensor, list[Tensor]]:
        h = self.conv_in(z)
        if self.attn is not None:
            h = self.attn(h)
        feats = []
        for i, level in enumerate(self.levels):
            h = level(h)
            feats.append(h)
            if hook is not None:
                h = hook(i, h)
            if i < len(self.up):
                h = self.up[i](T.resample(h, "nearest_up2"))
        return T.sigmoid(self.conv_out(T.silu(h))), feats
