"""Training configuration in line-oriented ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

SEED_ENV = "GLARE_SEED"


@dataclass
class DataSection:
    root: str = "data"  # dataset directory holding manifest.txt
    count: int = 128  # pairs produced by gen-data
    size: int = 32  # image side length for gen-data


@dataclass
class TrainSection:
    seed: int = 0  # global seed; GLARE_SEED overrides
    batch_size: int = 4  # training pairs per step
    crop: int = 32  # aligned random crop side (multiple of 4)
    out_dir: str = "runs"  # checkpoints and CSV logs
    val_every: int = 250  # iterations between validation passes (0 = start/end only)


@dataclass
class ModelSection:
    base_channels: int = 16  # channels at full resolution (x2 at H/2 and H/4)
    res_blocks: int = 2  # residual blocks per resolution level
    attention: bool = True  # self-attention block at H/4
    latent_dim: int = 3  # channels of the H/4 latent
    num_codes: int = 64  # codebook size
    cond_channels: int = 16  # channels of c_ll
    couplings: int = 4  # affine couplings per flow layer
    flow_layers: int = 2  # [ActNorm, channel mix, couplings] groups
    coupling_hidden: int = 32  # width of each coupling's condition network


@dataclass
class Stage1Section:
    iterations: int = 2000  # Stage I optimizer steps
    lr: float = 1e-4  # constant Adam step size
    lambda_code: float = 1.0  # codebook + commitment term weight
    lambda_per: float = 0.01  # perceptual proxy weight
    lambda_ssim: float = 0.2  # MS-SSIM loss weight
    lambda_adv: float = 0.0005  # adversarial weight (only with discriminator = true)
    beta_commit: float = 0.25  # commitment weight inside the codebook loss
    discriminator: bool = False  # train a patch discriminator alongside Stage I
    min_code_usage: int = 1  # codes used fewer times per epoch are re-initialised


@dataclass
class Stage2Section:
    iterations: int = 2000  # Stage II optimizer steps
    lr: float = 1e-4  # halved at 50% and again at 75% of iterations


@dataclass
class Stage3Section:
    iterations: int = 1000  # Stage III optimizer steps
    lr: float = 5e-5  # cosine decay start
    lr_min: float = 5e-6  # cosine decay end
    lambda_ssim: float = 0.2  # MS-SSIM loss weight
    lambda_per: float = 0.01  # perceptual proxy weight
    beta: float = 1.0  # mix-up knob during training


@dataclass
class AdamSection:
    beta1: float = 0.9  # first-moment decay
    beta2: float = 0.99  # second-moment decay
    eps: float = 1e-8  # denominator guard


@dataclass
class TrainConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    stage3: Stage3Section = field(default_factory=Stage3Section)
    adam: AdamSection = field(default_factory=AdamSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for section in ("stage1", "stage3"):
            for f in dataclasses.fields(getattr(self, section)):
                if f.name.startswith("lambda_") and getattr(getattr(self, section), f.name) < 0:
                    raise ValueError(f"{section}.{f.name} must be >= 0")
        if self.train.crop % 4:
            raise ValueError("train.crop must be a multiple of 4")
        if self.train.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        if not hasattr(self, section) or not name:
            raise KeyError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise KeyError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(fields[name].type, value, key))

    def dumps(self) -> str:
        lines = []
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                lines.append(f"{sec.name}.{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return self.train.seed


def _coerce(kind, value: str, key: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            v = value.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return v in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value.strip()
    except ValueError:
        raise ValueError(f"{key}: cannot parse {value!r} as {kind}") from None


def loads(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {n}: expected 'section.key = value', got {raw!r}")
        cfg.set(key.strip(), value.strip())
    cfg.validate()
    return cfg


def load(path=None, env: dict | None = None) -> TrainConfig:
    """Read a config file (defaults when ``path`` is None) and apply ``GLARE_SEED``."""
    cfg = loads(Path(path).read_text()) if path else TrainConfig()
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.train.seed = int(env[SEED_ENV])
    return cfg


def documented_defaults() -> str:
    """Default config with each key's comment, suitable as a starting file."""
    import inspect

    cfg = TrainConfig()
    out = []
    for sec in dataclasses.fields(cfg):
        cls = type(getattr(cfg, sec.name))
        comments = {}
        for line in inspect.getsource(cls).splitlines():
            s = line.strip()
            if ":" in s and "#" in s and "=" in s:
                comments[s.split(":", 1)[0]] = s.split("#", 1)[1].strip()
        for f in dataclasses.fields(cls):
            v = getattr(getattr(cfg, sec.name), f.name)
            text = f"{sec.name}.{f.name} = {str(v).lower() if isinstance(v, bool) else v}"
            if f.name in comments:
                text += f"  # {comments[f.name]}"
            out.append(text)
    return "\n".join(out) + "\n"
