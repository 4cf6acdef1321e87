"""Three-stage training, optimizer, schedules, checkpoint wiring, and inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .aft import FusionDecoder, mfd_decode, stage3_loss
from .checkpoint import CheckpointError, check_names, checkpoint_load, checkpoint_save
from .config import TrainConfig
from .data import DatasetManifest, batch_at, read_png, save_image
from .flow import ConditionEncoder, FlowConfig, FlowModel, condition_encode, flow_inverse, nll, sample_latent
from .losses import MetricReport, psnr
from .nn import Module
from .tensor import Tensor, TensorError
from .vq import (
    EncoderDecoderConfig,
    PatchDiscriminator,
    Stage1Weights,
    VQAutoencoder,
    discriminator_loss,
    quantize,
    reinit_dead_codes,
    stage1_loss,
)

log = logging.getLogger(__name__)

STAGE_COMPONENTS = {1: ("vq",), 2: ("vq", "cond", "flow"), 3: ("vq", "cond", "flow", "mfd")}
EVAL_BATCH = 8


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; parameters without gradients are skipped."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {p.grad.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * p.grad
        v *= beta2
        v += (1 - beta2) * p.grad * p.grad
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)


def lr_schedule(stage: int, it: int, cfg: TrainConfig) -> float:
    if it < 0:
        raise ValueError("iteration must be >= 0")
    if stage == 1:
        return cfg.stage1.lr
    if stage == 2:
        n = cfg.stage2.iterations
        if it < 0.5 * n:
            return cfg.stage2.lr
        if it < 0.75 * n:
            return cfg.stage2.lr * 0.5
        return cfg.stage2.lr * 0.25
    if stage == 3:
        n = max(cfg.stage3.iterations, 1)
        t = min(it, n) / n
        lo, hi = cfg.stage3.lr_min, cfg.stage3.lr
        return lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * t))
    raise ValueError(f"unknown stage {stage}")


# -- pipeline ------------------------------------------------------------------


class Pipeline(Module):
    """All trainable components; which ones are live depends on the stage."""

    def __init__(self, cfg: TrainConfig):
        m = cfg.model
        seed = cfg.train.seed
        self.vq = VQAutoencoder(
            EncoderDecoderConfig(m.base_channels, 2, m.res_blocks, m.attention, m.latent_dim, m.num_codes),
            np.random.default_rng([seed, 1]),
        )
        args = (m.latent_dim, m.base_channels, m.res_blocks, m.attention)
        self.cond = ConditionEncoder(*args, m.cond_channels, np.random.default_rng([seed, 2]))
        self.flow = FlowModel(
            FlowConfig(m.latent_dim, m.cond_channels, m.couplings, m.flow_layers, m.coupling_hidden),
            np.random.default_rng([seed, 3]),
        )
        self.mfd = FusionDecoder(*args, np.random.default_rng([seed, 4]))

    def names_for(self, stage: int) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.split(".", 1)[0] in STAGE_COMPONENTS[stage]]

    def params_for(self, components) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if n.split(".", 1)[0] in components}

    def component_checksums(self) -> dict[str, str]:
        return {c: getattr(self, c).checksum() for c in ("vq", "cond", "flow", "mfd")}


def save_stage(path, pipe: Pipeline, stage: int, it: int, cfg: TrainConfig, opt: AdamState, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
    tensors = {n: p.data for n, p in pipe.named_parameters() if n in set(pipe.names_for(stage))}
    for n, arr in opt.m.items():
        tensors[f"opt.m.{n}"] = arr
    for n, arr in opt.v.items():
        tensors[f"opt.v.{n}"] = arr
    for n, arr in (extra or {}).items():
        tensors[f"state.{n}"] = arr
    md = {"stage": stage, "iteration": it, "config_hash": cfg.hash(), "seed": cfg.train.seed, "adam_step": opt.step}
    md.update(meta or {})
    return checkpoint_save(path, tensors, md)


def load_stage(path, pipe: Pipeline, stage: int | None = None) -> tuple[dict, AdamState, dict[str, np.ndarray]]:
    """Load parameters for the checkpoint's stage (or ``stage``), validating names."""
    tensors, meta = checkpoint_load(path)
    stage = stage or int(meta.get("stage", 0))
    if stage not in STAGE_COMPONENTS:
        raise CheckpointError(f"{path}: unknown stage {meta.get('stage')}")
    params = {n: a for n, a in tensors.items() if not n.startswith(("opt.", "state."))}
    check_names(pipe.names_for(stage), params, str(path))
    own = dict(pipe.named_parameters())
    for n, arr in params.items():
        if own[n].shape != arr.shape:
            raise CheckpointError(f"{n}: shape {arr.shape} != expected {own[n].shape}")
        own[n].data[...] = arr
    opt = AdamState(step=int(meta.get("adam_step", 0)))
    for n, arr in tensors.items():
        if n.startswith("opt.m."):
            opt.m[n[6:]] = arr.astype(np.float32)
        elif n.startswith("opt.v."):
            opt.v[n[6:]] = arr.astype(np.float32)
    extra = {n[6:]: a for n, a in tensors.items() if n.startswith("state.")}
    return meta, opt, extra


# -- shared helpers --------------------------------------------------------------


@dataclass
class StageResult:
    pipeline: Pipeline
    checkpoint: Path
    history: list[dict]
    summary: dict


class CsvLog:
    """Append-only CSV with a fixed column set; missing values are left blank."""

    def __init__(self, path: Path, fields: list[str], append: bool):
        self.path = path
        self.fields = fields
        if not append and path.exists():
            path.unlink()

    def write(self, row: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        with self.path.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.fields, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow(row)


LOG_FIELDS = {
    1: ["iter", "lr", "loss", "rec", "code", "ssim", "per", "adv", "replaced", "val_psnr"],
    2: ["iter", "lr", "nll", "val_nll"],
    3: ["iter", "lr", "loss", "l1", "ssim", "per", "mix0", "mix1", "mix2", "val_psnr"],
}


def _zero(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _step_loss(fn, it: int, stage: int):
    try:
        return fn()
    except TensorError as err:
        raise RuntimeError(f"stage {stage} iteration {it}: non-finite value ({err}); aborting") from err


def _freeze(pipe: Pipeline, trainable) -> None:
    for comp in ("vq", "cond", "flow", "mfd"):
        getattr(pipe, comp).requires_grad_(comp in trainable)


def _verify_frozen(pipe: Pipeline, before: dict[str, str], frozen, stage: int) -> None:
    now = pipe.component_checksums()
    drift = [c for c in frozen if now[c] != before[c]]
    if drift:
        raise RuntimeError(f"stage {stage}: frozen components changed: {drift}")


def _chunks(n: int, size: int = EVAL_BATCH):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def _out(cfg: TrainConfig, name: str) -> Path:
    return Path(cfg.train.out_dir) / name


# -- evaluation --------------------------------------------------------------------


def reconstruct(pipe: Pipeline, nl: np.ndarray) -> np.ndarray:
    outs = []
    with T.no_grad():
        for s in _chunks(len(nl)):
            rec, _, _ = pipe.vq(Tensor(nl[s]))
            outs.append(rec.data)
    return np.concatenate(outs)


def mean_psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(np.mean([psnr(p, g) for p, g in zip(pred, gt)]))


def stage2_latents(pipe: Pipeline, ll: np.ndarray, tau: float = 0.0, seed: int = 0):
    """Conditional outputs and generated clean latents ``z'_ll`` for a batch."""
    co = condition_encode(pipe.cond, Tensor(ll))
    v = sample_latent(co.z_ll, tau, seed)
    return co, flow_inverse(pipe.flow, v, co.c_ll)


def enhance_stage2(pipe: Pipeline, ll: np.ndarray, tau: float = 0.0, seed: int = 0) -> np.ndarray:
    """Stage-II-only enhancement: generated latent -> nearest codes -> NL decoder."""
    outs = []
    with T.no_grad():
        for s in _chunks(len(ll)):
            _, z = stage2_latents(pipe, ll[s], tau, seed)
            img, _ = pipe.vq.decoder(quantize(z, pipe.vq.codebook).z_q)
            outs.append(img.data)
    return np.concatenate(outs)


def _stage3_forward(pipe: Pipeline, ll: np.ndarray, beta: float, tau: float = 0.0, seed: int = 0) -> Tensor:
    with T.no_grad():
        co, z = stage2_latents(pipe, ll, tau, seed)
        _, F_nl = pipe.vq.decoder(quantize(z, pipe.vq.codebook).z_q)
    return mfd_decode(pipe.mfd, z, co.features, F_nl, beta)


def enhance_full(pipe: Pipeline, ll: np.ndarray, beta: float = 1.0, tau: float = 0.0, seed: int = 0) -> np.ndarray:
    outs = []
    with T.no_grad():
        for s in _chunks(len(ll)):
            outs.append(_stage3_forward(pipe, ll[s], beta, tau, seed).data)
    return np.concatenate(outs)


def val_nll(pipe: Pipeline, ll: np.ndarray, nl: np.ndarray) -> float:
    vals = []
    with T.no_grad():
        for s in _chunks(len(ll)):
            z_nl = pipe.vq.encode(Tensor(nl[s]))
            co = condition_encode(pipe.cond, Tensor(ll[s]))
            vals.append(float(nll(pipe.flow, z_nl, co.c_ll, co.z_ll).data) * (s.stop - s.start))
    return float(np.sum(vals) / len(ll))


def code_distances(pipe: Pipeline, ll: np.ndarray) -> tuple[float, float]:
    """Mean nearest-code distance of (Stage I encoder on LL, generated z'_ll)."""
    base, gen = [], []
    with T.no_grad():
        for s in _chunks(len(ll)):
            base.append(quantize(pipe.vq.encode(Tensor(ll[s])), pipe.vq.codebook).distances.ravel())
            _, z = stage2_latents(pipe, ll[s])
            gen.append(quantize(z, pipe.vq.codebook).distances.ravel())
    return float(np.mean(np.concatenate(base))), float(np.mean(np.concatenate(gen)))


# -- stage I -----------------------------------------------------------------------


def train_stage1(cfg: TrainConfig, manifest: DatasetManifest, resume=None, iterations: int | None = None) -> StageResult:
    """Train the NL encoder, codebook and decoder; writes ``stage1.glrc``."""
    pipe = Pipeline(cfg)
    s1 = cfg.stage1
    total = s1.iterations if iterations is None else iterations
    weights = Stage1Weights(s1.lambda_code, s1.lambda_per, s1.lambda_ssim, s1.lambda_adv, s1.beta_commit)
    disc = PatchDiscriminator(np.random.default_rng([cfg.train.seed, 5])) if s1.discriminator else None
    _freeze(pipe, ("vq",))
    params = pipe.params_for(("vq",))
    opt, dopt = AdamState(), AdamState()
    start = 0
    usage = np.zeros(pipe.vq.codebook.num_codes)
    summary: dict = {}
    if resume is not None:
        meta, opt, extra = load_stage(resume, pipe, 1)
        start = int(meta["iteration"])
        usage = extra.get("usage", usage).astype(np.float64)
        summary = dict(meta.get("summary", {}))
        if disc is not None:
            _restore_disc(disc, dopt, extra)
    _, val_nl = manifest.arrays("val")
    if "val_psnr_init" not in summary:
        summary["val_psnr_init"] = mean_psnr(reconstruct(pipe, val_nl), val_nl)
    ntrain = len(manifest.split("train"))
    per_epoch = -(-ntrain // cfg.train.batch_size)
    logger = CsvLog(_out(cfg, "stage1_log.csv"), LOG_FIELDS[1], append=resume is not None)
    history = []
    replaced = 0
    for it in range(start, total):
        _, nl = batch_at(manifest, "train", cfg.train.batch_size, cfg.train.crop, cfg.train.seed, it)
        x = Tensor(nl)

        def step():
            rec, z, q = pipe.vq(x)
            loss, parts = stage1_loss(x, rec, z, q.codes, weights, disc, seed=cfg.train.seed)
            _zero(params)
            loss.backward()
            return rec, z, q, float(loss.data), parts

        rec, z, q, loss, parts = _step_loss(step, it, 1)
        lr = lr_schedule(1, it, cfg)
        adam_step(params, opt, lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps)
        if disc is not None:
            dparams = dict(disc.named_parameters())
            dl = discriminator_loss(disc(x), disc(Tensor(rec.data)))
            _zero(dparams)
            dl.backward()
            adam_step(dparams, dopt, lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps)
        usage += q.usage_histogram
        if (it + 1) % per_epoch == 0:
            rng = np.random.default_rng([cfg.train.seed, 11, it])
            replaced = reinit_dead_codes(pipe.vq.codebook, usage, z.data, s1.min_code_usage, rng)
            usage[:] = 0
        row = {"iter": it, "lr": lr, "loss": loss, **parts, "replaced": replaced}
        if _val_due(cfg, it, total):
            row["val_psnr"] = mean_psnr(reconstruct(pipe, val_nl), val_nl)
        history.append(row)
        logger.write(row)
    summary["val_psnr_final"] = mean_psnr(reconstruct(pipe, val_nl), val_nl)
    extra = {"usage": usage.astype(np.float32)}
    if disc is not None:
        extra.update(_disc_state(disc, dopt))
    path = save_stage(_out(cfg, "stage1.glrc"), pipe, 1, total, cfg, opt, extra, {"summary": summary})
    log.info("stage 1 done: val PSNR %.2f -> %.2f dB", summary["val_psnr_init"], summary["val_psnr_final"])
    return StageResult(pipe, path, history, summary)


def _val_due(cfg: TrainConfig, it: int, total: int) -> bool:
    return cfg.train.val_every > 0 and (it + 1) % cfg.train.val_every == 0 and it + 1 < total


def _disc_state(disc: PatchDiscriminator, opt: AdamState) -> dict[str, np.ndarray]:
    out = {f"disc.{n}": p.data for n, p in disc.named_parameters()}
    out.update({f"disc_m.{n}": a for n, a in opt.m.items()})
    out.update({f"disc_v.{n}": a for n, a in opt.v.items()})
    out["disc_step"] = np.array([opt.step], dtype=np.float32)
    return out


def _restore_disc(disc: PatchDiscriminator, opt: AdamState, extra: dict[str, np.ndarray]) -> None:
    disc.load_state_dict({n[5:]: a for n, a in extra.items() if n.startswith("disc.")})
    opt.m = {n[7:]: a for n, a in extra.items() if n.startswith("disc_m.")}
    opt.v = {n[7:]: a for n, a in extra.items() if n.startswith("disc_v.")}
    opt.step = int(extra["disc_step"][0]) if "disc_step" in extra else 0


# -- stage II ----------------------------------------------------------------------


def train_stage2(cfg: TrainConfig, stage1_ckpt, manifest: DatasetManifest, resume=None, iterations: int | None = None) -> StageResult:
    """Train the conditional encoder and flow on NLL with the Stage I model frozen."""
    pipe = Pipeline(cfg)
    total = cfg.stage2.iterations if iterations is None else iterations
    start = 0
    if resume is not None:
        meta, opt, _ = load_stage(resume, pipe, 2)
        start = int(meta["iteration"])
        summary = dict(meta.get("summary", {}))
    else:
        meta1, _, _ = load_stage(stage1_ckpt, pipe, 1)
        if int(meta1.get("stage", 0)) != 1:
            raise CheckpointError(f"{stage1_ckpt}: expected a stage 1 checkpoint")
        opt = AdamState()
        summary = {}
        # the conditional encoder starts from the NL encoder weights
        pipe.cond.encoder.load_state_dict(pipe.vq.encoder.state_dict())
        ll0, nl0 = batch_at(manifest, "train", cfg.train.batch_size, cfg.train.crop, cfg.train.seed, 0)
        with T.no_grad():
            z0 = pipe.vq.encode(Tensor(nl0))
            c0 = condition_encode(pipe.cond, Tensor(ll0)).c_ll
        pipe.flow.data_init(z0.data, c0.data)
    _freeze(pipe, ("cond", "flow"))
    params = pipe.params_for(("cond", "flow"))
    before = pipe.component_checksums()
    val_ll, val_nl = manifest.arrays("val")
    if "val_nll_init" not in summary:
        summary["val_nll_init"] = val_nll(pipe, val_ll, val_nl)
        summary["val_psnr_input"] = mean_psnr(val_ll, val_nl)
    logger = CsvLog(_out(cfg, "stage2_log.csv"), LOG_FIELDS[2], append=resume is not None)
    history = []
    for it in range(start, total):
        ll, nl = batch_at(manifest, "train", cfg.train.batch_size, cfg.train.crop, cfg.train.seed, it)

        def step():
            with T.no_grad():
                z_nl = pipe.vq.encode(Tensor(nl))
            co = condition_encode(pipe.cond, Tensor(ll))
            loss = nll(pipe.flow, z_nl, co.c_ll, co.z_ll)
            _zero(params)
            loss.backward()
            return float(loss.data)

        loss = _step_loss(step, it, 2)
        lr = lr_schedule(2, it, cfg)
        adam_step(params, opt, lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps)
        row = {"iter": it, "lr": lr, "nll": loss}
        if _val_due(cfg, it, total):
            row["val_nll"] = val_nll(pipe, val_ll, val_nl)
        history.append(row)
        logger.write(row)
    _verify_frozen(pipe, before, ("vq",), 2)
    summary["val_nll_final"] = val_nll(pipe, val_ll, val_nl)
    summary["val_psnr_stage2"] = mean_psnr(enhance_stage2(pipe, val_ll), val_nl)
    d_base, d_gen = code_distances(pipe, val_ll)
    summary["code_dist_ll_encoder"] = d_base
    summary["code_dist_generated"] = d_gen
    summary["frozen_checksums"] = {"vq": before["vq"]}
    path = save_stage(_out(cfg, "stage2.glrc"), pipe, 2, total, cfg, opt, None, {"summary": summary})
    log.info("stage 2 done: val NLL %.3f -> %.3f", summary["val_nll_init"], summary["val_nll_final"])
    return StageResult(pipe, path, history, summary)


# -- stage III ---------------------------------------------------------------------


def train_stage3(cfg: TrainConfig, stage2_ckpt, manifest: DatasetManifest, resume=None, iterations: int | None = None) -> StageResult:
    """Train the fusion decoder, mix-up coefficients and warps with everything else frozen."""
    pipe = Pipeline(cfg)
    s3 = cfg.stage3
    total = s3.iterations if iterations is None else iterations
    start = 0
    if resume is not None:
        meta, opt, _ = load_stage(resume, pipe, 3)
        start = int(meta["iteration"])
        summary = dict(meta.get("summary", {}))
    else:
        meta2, _, _ = load_stage(stage2_ckpt, pipe, 2)
        if int(meta2.get("stage", 0)) != 2:
            raise CheckpointError(f"{stage2_ckpt}: expected a stage 2 checkpoint")
        opt = AdamState()
        summary = {}
        # the fusion trunk starts as a copy of the NL decoder
        pipe.mfd.trunk.load_state_dict(pipe.vq.decoder.state_dict())
    _freeze(pipe, ("mfd",))
    params = pipe.params_for(("mfd",))
    before = pipe.component_checksums()
    val_ll, val_nl = manifest.arrays("val")
    if "val_psnr_stage2" not in summary:
        summary["val_psnr_stage2"] = mean_psnr(enhance_stage2(pipe, val_ll), val_nl)
        summary["val_psnr_init"] = mean_psnr(enhance_full(pipe, val_ll, s3.beta), val_nl)
    logger = CsvLog(_out(cfg, "stage3_log.csv"), LOG_FIELDS[3], append=resume is not None)
    history = []
    for it in range(start, total):
        ll, nl = batch_at(manifest, "train", cfg.train.batch_size, cfg.train.crop, cfg.train.seed, it)

        def step():
            pred = _stage3_forward(pipe, ll, s3.beta)
            loss, parts = stage3_loss(pred, Tensor(nl), s3.lambda_ssim, s3.lambda_per, seed=cfg.train.seed)
            _zero(params)
            loss.backward()
            return float(loss.data), parts

        loss, parts = _step_loss(step, it, 3)
        lr = lr_schedule(3, it, cfg)
        adam_step(params, opt, lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps)
        row = {"iter": it, "lr": lr, "loss": loss, **parts}
        row.update({f"mix{i}": float(T.sigmoid(t).data) for i, t in enumerate(pipe.mfd.theta)})
        if _val_due(cfg, it, total):
            row["val_psnr"] = mean_psnr(enhance_full(pipe, val_ll, s3.beta), val_nl)
        history.append(row)
        logger.write(row)
    _verify_frozen(pipe, before, ("vq", "cond", "flow"), 3)
    summary["val_psnr_final"] = mean_psnr(enhance_full(pipe, val_ll, s3.beta), val_nl)
    summary["mix_weights"] = [float(T.sigmoid(t).data) for t in pipe.mfd.theta]
    summary["frozen_checksums"] = {c: before[c] for c in ("vq", "cond", "flow")}
    path = save_stage(_out(cfg, "stage3.glrc"), pipe, 3, total, cfg, opt, None, {"summary": summary})
    log.info("stage 3 done: val PSNR %.2f (stage II only %.2f)", summary["val_psnr_final"], summary["val_psnr_stage2"])
    return StageResult(pipe, path, history, summary)


def train_stage(stage: int, cfg: TrainConfig, manifest: DatasetManifest, resume=None) -> StageResult:
    if stage == 1:
        return train_stage1(cfg, manifest, resume)
    prev = _out(cfg, f"stage{stage - 1}.glrc")
    if resume is None and not prev.exists():
        raise FileNotFoundError(f"stage {stage} needs {prev}; train stage {stage - 1} first")
    if stage == 2:
        return train_stage2(cfg, prev, manifest, resume)
    if stage == 3:
        return train_stage3(cfg, prev, manifest, resume)
    raise ValueError(f"unknown stage {stage}")


# -- inference -----------------------------------------------------------------------


def load_pipeline(ckpt, cfg: TrainConfig | None = None) -> tuple[Pipeline, dict]:
    pipe = Pipeline(cfg or TrainConfig())
    meta, _, _ = load_stage(ckpt, pipe)
    return pipe, meta


def _pad4(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    H, W = img.shape[-2:]
    ph, pw = (-H) % 4, (-W) % 4
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, (H, W)


def enhance(ckpt, input_path, output_path, beta: float = 1.0, tau: float = 0.0, seed: int = 0, gt_path=None, cfg: TrainConfig | None = None) -> MetricReport | None:
    """Enhance one PNG with a full Stage III checkpoint; returns metrics when ``gt_path`` is given."""
    pipe, meta = load_pipeline(ckpt, cfg)
    if int(meta.get("stage", 0)) != 3:
        raise CheckpointError(f"{ckpt}: enhancement needs a stage 3 checkpoint, got stage {meta.get('stage')}")
    img, (H, W) = _pad4(read_png(input_path))
    out = enhance_full(pipe, img[None], beta, tau, seed)[0][:, :H, :W]
    save_image(out, output_path)
    if gt_path is None:
        return None
    report = MetricReport()
    from .data import quantize8

    report.add(Path(input_path).name, quantize8(out), read_png(gt_path))
    return report
