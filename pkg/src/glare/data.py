"""Synthetic low-light / normal-light pairs, PNG I/O, manifests, and batching."""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .tensor import Tensor

MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "# glare dataset manifest v1"
VAL_FRACTION = 0.125
DEFAULT_RANGES = {"gamma": (1.5, 2.5), "gain": (0.25, 0.6), "sigma": (0.0, 0.02)}


@dataclass
class ImagePair:
    ll: np.ndarray
    nl: np.ndarray
    meta: dict


@dataclass
class Entry:
    nl: str
    ll: str
    gamma: float
    gain: float
    sigma: float
    seed: int
    split: str

    def meta(self) -> dict:
        return {"gamma": self.gamma, "gain": self.gain, "noise_sigma": self.sigma, "seed": self.seed}


@dataclass
class DatasetManifest:
    root: Path
    entries: list[Entry]
    seed: int
    size: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def split(self, name: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == name]

    def pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """``(ll, nl)`` float32 arrays for entry ``i`` (cached)."""
        if i not in self._cache:
            e = self.entries[i]
            self._cache[i] = (read_png(self.root / e.ll), read_png(self.root / e.nl))
        return self._cache[i]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split(split)
        pairs = [self.pair(i) for i in idx]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# -- degradation & generation ------------------------------------------------


def synth_degrade(nl: np.ndarray, gamma: float, gain: float, noise_sigma: float, seed: int) -> np.ndarray:
    """``clamp(gain * nl**gamma + noise, 0, 1)`` with seeded Gaussian noise."""
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if not 0 < gain <= 1:
        raise ValueError(f"gain must be in (0, 1], got {gain}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    nl = np.asarray(nl, dtype=np.float64)
    out = gain * nl**gamma
    if noise_sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sigma, nl.shape)
    return np.clip(out, 0.0, 1.0)


def procedural_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth two-colour gradient, random rectangles/ellipses, and mild texture noise."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[:, mask] = color[:, None]
    coarse = rng.normal(0, 0.04, (3, size // 4 + 1, size // 4 + 1))
    texture = np.repeat(np.repeat(coarse, 4, axis=1), 4, axis=2)[:, :size, :size]
    return np.clip(img + texture, 0.0, 1.0)


def quantize8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255.0) / 255.0


def gen_dataset(root, count: int = 128, size: int = 32, param_ranges: dict | None = None, seed: int = 0) -> DatasetManifest:
    """Write ``count`` procedural pairs under ``root`` and return their manifest."""
    if count < 2:
        raise ValueError("count must be >= 2")
    ranges = {**DEFAULT_RANGES, **(param_ranges or {})}
    root = Path(root)
    (root / "nl").mkdir(parents=True, exist_ok=True)
    (root / "ll").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(count * VAL_FRACTION)))
    val = set(rng.permutation(count)[:n_val].tolist())
    entries = []
    for i in range(count):
        irng = np.random.default_rng([seed, i])
        nl = quantize8(procedural_image(size, irng))
        gamma = float(irng.uniform(*ranges["gamma"]))
        gain = float(irng.uniform(*ranges["gain"]))
        sigma = float(irng.uniform(*ranges["sigma"]))
        nseed = int(irng.integers(0, 2**31 - 1))
        ll = synth_degrade(nl, gamma, gain, sigma, nseed)
        e = Entry(f"nl/{i:05d}.png", f"ll/{i:05d}.png", gamma, gain, sigma, nseed, "val" if i in val else "train")
        save_image(nl, root / e.nl)
        save_image(ll, root / e.ll)
        entries.append(e)
    manifest = DatasetManifest(root, entries, seed, size)
    write_manifest(manifest)
    return manifest


# -- manifest text format ----------------------------------------------------


def write_manifest(m: DatasetManifest) -> Path:
    lines = [MANIFEST_HEADER, f"seed = {m.seed}", f"size = {m.size}", f"count = {len(m.entries)}"]
    for e in m.entries:
        lines.append(
            f"entry nl={e.nl} ll={e.ll} gamma={e.gamma!r} gain={e.gain!r} sigma={e.sigma!r} seed={e.seed} split={e.split}"
        )
    path = Path(m.root) / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    header: dict[str, str] = {}
    entries = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("entry "):
            kv = dict(tok.split("=", 1) for tok in line.split()[1:])
            entries.append(
                Entry(kv["nl"], kv["ll"], float(kv["gamma"]), float(kv["gain"]), float(kv["sigma"]), int(kv["seed"]), kv["split"])
            )
        else:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
    root = path.parent
    for e in entries:
        for f in (e.nl, e.ll):
            if not (root / f).exists():
                raise FileNotFoundError(f"manifest references missing file {root / f}")
    return DatasetManifest(root, entries, int(header.get("seed", 0)), int(header.get("size", 0)))


# -- image I/O ---------------------------------------------------------------


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ValueError(f"{path}: expected an RGB image, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as err:
        raise ValueError(f"cannot read image {path}: {err}") from None
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def load_image(path) -> Tensor:
    """8-bit RGB PNG -> ``3 x H x W`` tensor in [0, 1]."""
    arr = read_png(path)
    return Tensor(arr, dtype=arr.dtype)


def save_image(image, path) -> None:
    """Write a ``3 x H x W`` array/tensor in [0, 1] as an 8-bit RGB PNG."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"save_image: expected 3 x H x W, got {arr.shape}")
    u8 = np.round(np.clip(arr.astype(np.float64), 0, 1) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# -- batching ----------------------------------------------------------------


def epoch_plan(n: int, batch_size: int, crop: int, size: int, shuffle_seed: int, epoch: int):
    """Shuffled order and per-item crop origins for one epoch (pure function of its arguments)."""
    rng = np.random.default_rng([shuffle_seed, epoch])
    order = rng.permutation(n)
    span = size - crop
    origins = rng.integers(0, span + 1, size=(n, 2)) if span > 0 else np.zeros((n, 2), dtype=np.int64)
    return [(order[i : i + batch_size], origins[i : i + batch_size]) for i in range(0, n, batch_size)]


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _assemble(manifest: DatasetManifest, idx: list[int], chosen, origins, crop: int):
    lls, nls = [], []
    for j, (oy, ox) in zip(chosen, origins):
        ll, nl = manifest.pair(idx[j])
        lls.append(ll[:, oy : oy + crop, ox : ox + crop])
        nls.append(nl[:, oy : oy + crop, ox : ox + crop])
    return np.stack(lls), np.stack(nls)


def batch_at(manifest: DatasetManifest, split: str, batch_size: int, crop: int, shuffle_seed: int, step: int):
    """The ``step``-th batch of the endless epoch sequence; used for resumable training."""
    idx = manifest.split(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    nb = batches_per_epoch(len(idx), batch_size)
    plan = epoch_plan(len(idx), batch_size, crop, manifest.size, shuffle_seed, step // nb)
    chosen, origins = plan[step % nb]
    return _assemble(manifest, idx, chosen, origins, crop)


def batch_iter(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    crop: int | None = None,
    shuffle_seed: int = 0,
    epoch: int = 0,
    prefetch: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(ll, nl)`` batches covering ``split`` once, with aligned random crops.

    ``prefetch > 0`` loads batches on a helper thread through a bounded queue;
    the sequence is identical either way.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = manifest.split(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    crop = crop or manifest.size
    plan = epoch_plan(len(idx), batch_size, crop, manifest.size, shuffle_seed, epoch)
    if prefetch <= 0:
        for chosen, origins in plan:
            yield _assemble(manifest, idx, chosen, origins, crop)
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()

    def worker():
        for chosen, origins in plan:
            q.put(_assemble(manifest, idx, chosen, origins, crop))
        q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while (item := q.get()) is not done:
        yield item
    t.join()
