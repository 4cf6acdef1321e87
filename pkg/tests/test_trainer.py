import csv
import math

import numpy as np
import pytest
from conftest import tiny_config

from glare.checkpoint import CheckpointError, checkpoint_load
from glare.config import TrainConfig
from glare.tensor import Tensor
from glare.train import (
    AdamState,
    Pipeline,
    adam_step,
    enhance,
    load_pipeline,
    lr_schedule,
    train_stage,
    train_stage1,
    train_stage2,
    train_stage3,
)


def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.3, -5.0, 1e-3], dtype=np.float32)
    adam_step({"p": p}, AdamState(), lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-4)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=5), requires_grad=True)
    ref = p.data.astype(np.float64).copy()
    m = np.zeros(5)
    v = np.zeros(5)
    st = AdamState()
    for t in range(1, 6):
        g = rng.normal(size=5)
        p.grad = g.astype(np.float32)
        adam_step({"p": p}, st, 1e-2, 0.9, 0.99, 1e-8)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        ref -= 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, atol=1e-5)


def test_lr_schedules():
    cfg = TrainConfig()
    assert lr_schedule(1, 0, cfg) == lr_schedule(1, 1999, cfg) == 1e-4
    assert lr_schedule(2, 0, cfg) == 1e-4
    assert lr_schedule(2, 1000, cfg) == 5e-5
    assert lr_schedule(2, 1999, cfg) == 2.5e-5
    assert lr_schedule(3, 0, cfg) == pytest.approx(5e-5)
    assert lr_schedule(3, 500, cfg) == pytest.approx(2.75e-5)
    assert lr_schedule(3, 1000, cfg) == pytest.approx(5e-6)
    values = [lr_schedule(3, i, cfg) for i in range(0, 1001, 50)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_schedule(4, 0, cfg)


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out, tiny_data.root)
    r1 = train_stage1(cfg, tiny_data)
    r2 = train_stage2(cfg, r1.checkpoint, tiny_data)
    r3 = train_stage3(cfg, r2.checkpoint, tiny_data)
    return cfg, r1, r2, r3


def _losses(history, key="loss"):
    return [h[key] for h in history]


def test_stage_outputs_and_logs(trained):
    cfg, r1, r2, r3 = trained
    for n, r in ((1, r1), (2, r2), (3, r3)):
        tensors, meta = checkpoint_load(r.checkpoint)
        assert meta["stage"] == n and meta["iteration"] == 6 and meta["config_hash"] == cfg.hash()
        rows = list(csv.DictReader(open(f"{cfg.train.out_dir}/stage{n}_log.csv")))
        assert len(rows) == 6
        assert any(row.get("val_psnr") or row.get("val_nll") for row in rows)
    assert all(math.isfinite(m) for m in r3.summary["mix_weights"])


def test_frozen_components_unchanged(trained):
    _, r1, r2, r3 = trained
    assert r2.pipeline.vq.checksum() == r1.pipeline.vq.checksum()
    assert r3.pipeline.vq.checksum() == r1.pipeline.vq.checksum()
    assert r3.pipeline.cond.checksum() == r2.pipeline.cond.checksum()
    assert r3.pipeline.flow.checksum() == r2.pipeline.flow.checksum()
    assert r3.summary["frozen_checksums"]["flow"] == r2.pipeline.flow.checksum()


def test_loss_curves_are_deterministic(trained, tiny_data, tmp_path):
    cfg, r1, r2, _ = trained
    cfg2 = tiny_config(tmp_path, tiny_data.root)
    a1 = train_stage1(cfg2, tiny_data)
    assert _losses(a1.history) == _losses(r1.history)
    a2 = train_stage2(cfg2, a1.checkpoint, tiny_data)
    assert _losses(a2.history, "nll") == _losses(r2.history, "nll")
    a, _ = checkpoint_load(a2.checkpoint)
    b, _ = checkpoint_load(r2.checkpoint)
    assert all(a[k].tobytes() == b[k].tobytes() for k in b)


def test_different_seed_changes_curve(trained, tiny_data, tmp_path):
    _, r1, _, _ = trained
    cfg = tiny_config(tmp_path, tiny_data.root)
    cfg.train.seed = 5
    assert _losses(train_stage1(cfg, tiny_data).history) != _losses(r1.history)


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_resume_equivalence(trained, tiny_data, tmp_path, stage):
    cfg, r1, r2, r3 = trained
    full = {1: r1, 2: r2, 3: r3}[stage]
    cfg2 = tiny_config(tmp_path, tiny_data.root)
    prev = {2: r1.checkpoint, 3: r2.checkpoint}.get(stage)
    fns = {1: lambda **k: train_stage1(cfg2, tiny_data, **k), 2: lambda **k: train_stage2(cfg2, prev, tiny_data, **k), 3: lambda **k: train_stage3(cfg2, prev, tiny_data, **k)}
    half = fns[stage](iterations=3)
    resumed = fns[stage](resume=half.checkpoint)
    key = "nll" if stage == 2 else "loss"
    assert _losses(half.history, key) + _losses(resumed.history, key) == _losses(full.history, key)
    a, _ = checkpoint_load(resumed.checkpoint)
    b, _ = checkpoint_load(full.checkpoint)
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_stage_checkpoint_validation(trained, tiny_data, tmp_path):
    cfg, r1, _, r3 = trained
    with pytest.raises(CheckpointError):
        train_stage3(tiny_config(tmp_path, tiny_data.root), r1.checkpoint, tiny_data)
    bigger = tiny_config(tmp_path, tiny_data.root)
    bigger.model.base_channels = 8
    with pytest.raises(CheckpointError):
        load_pipeline(r3.checkpoint, bigger)
    cfg3 = tiny_config(tmp_path / "fresh", tiny_data.root)
    with pytest.raises(FileNotFoundError):
        train_stage(2, cfg3, tiny_data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts(tiny_data, tmp_path):
    cfg = tiny_config(tmp_path, tiny_data.root)
    cfg.stage1.lr = 1e30
    with pytest.raises(RuntimeError, match="non-finite"):
        train_stage1(cfg, tiny_data)


def test_enhance_pads_and_crops(trained, tiny_data, tmp_path):
    cfg, r1, _, r3 = trained
    from glare.data import read_png, save_image

    ll, nl = tiny_data.pair(0)
    save_image(ll[:, :30, :29], tmp_path / "in.png")
    save_image(nl[:, :30, :29], tmp_path / "gt.png")
    report = enhance(r3.checkpoint, tmp_path / "in.png", tmp_path / "out.png", beta=0.5, gt_path=tmp_path / "gt.png", cfg=cfg)
    assert read_png(tmp_path / "out.png").shape == (3, 30, 29)
    assert math.isfinite(report.psnr_db)
    assert enhance(r3.checkpoint, tmp_path / "in.png", tmp_path / "o2.png", cfg=cfg) is None
    with pytest.raises(CheckpointError):
        enhance(r1.checkpoint, tmp_path / "in.png", tmp_path / "o3.png", cfg=cfg)


def test_beta_zero_is_pure_fusion_decoder_path(trained, tiny_data):
    from glare import tensor as T
    from glare.train import _stage3_forward

    _, _, _, r3 = trained
    pipe = r3.pipeline
    ll, _ = tiny_data.arrays("val")
    theta = [t.data.copy() for t in pipe.mfd.theta]
    with T.no_grad():
        a = _stage3_forward(pipe, ll, beta=0.0).data
        for t in pipe.mfd.theta:
            t.data[...] = 5.0
        b = _stage3_forward(pipe, ll, beta=0.0).data
    for t, v in zip(pipe.mfd.theta, theta):
        t.data[...] = v
    np.testing.assert_array_equal(a, b)


def test_pipeline_names_partition_by_stage():
    pipe = Pipeline(TrainConfig())
    n1, n2, n3 = (set(pipe.names_for(s)) for s in (1, 2, 3))
    assert n1 < n2 < n3
    assert all(n.startswith("vq.") for n in n1)
