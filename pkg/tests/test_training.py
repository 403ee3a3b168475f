import dataclasses
import json

import numpy as np
import pytest

from ppgmamba import pipeline, training
from ppgmamba.models import DPNetConfig, HRPConfig, init_params
from ppgmamba.training import (Adam, AdamState, Checkpoint, CheckpointError, ConfigDriftError,
                               TrainConfig, TrainData, adam_step)

TINY = dict(dpnet=DPNetConfig(D=4, n_blocks=1, state_dim=2, expand=1),
            hrp=HRPConfig(D=4, n_blocks=1, state_dim=2, expand=1, hidden=8))


@pytest.fixture(scope="module")
def small_data():
    segs, _ = pipeline.prepare_synthetic(30, seed=1)
    motion = pipeline.prepare_motion(pipeline.synthetic_motion_records(1, count=2, duration=20))
    segs, _ = pipeline.contaminate(segs, "paper-default", 1, motion)
    tr = TrainData.from_segments(segs, "train")
    va = TrainData.from_segments(segs, "val")
    return tr, va


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_is_null_update():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState(lr=0.1))
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0])]
    s = AdamState(lr=0.1)
    adam_step(p, [np.array([1.0])], s)
    assert p[0][0] == pytest.approx(0.9, abs=1e-6)
    assert s.t == 1 and s.m[0].shape == (1,)


def test_adam_matches_hand_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 3))
    p = [np.zeros(3)]
    s = AdamState(lr=0.01)
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step(p, [g], s)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p[0], ref, rtol=1e-12, atol=1e-15)
    assert s.t == 5


def test_adam_shape_errors():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(lr=0.1))
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [], AdamState(lr=0.1))


def test_adam_wrapper_clips_and_clears():
    from ppgmamba.autodiff import Tensor
    t = Tensor(np.zeros(2), requires_grad=True)
    t.grad = np.array([3.0, 4.0])
    opt = Adam([t], lr=0.1, clip_norm=1.0)
    assert opt.step() == pytest.approx(5.0)
    assert t.grad is None or not np.any(t.grad)
    assert np.allclose(t.data, [-0.1, -0.1], atol=1e-6)


# ---------------------------------------------------------------- config

def test_full_and_desk_presets():
    p = TrainConfig.paper()
    assert (p.lr, p.batch, p.hrp_epochs, p.dpnet_epochs, p.E_w, p.lam1, p.lam2) == \
           (1e-5, 64, 200, 600, 300, 1e-4, 1e-3)
    d = TrainConfig.desk()
    assert (d.lr, d.hrp_epochs, d.dpnet_epochs, d.E_w) == (1e-3, 50, 80, 40)
    assert (d.dpnet.D, d.dpnet.n_blocks, d.dpnet.state_dim) == (16, 2, 8)
    assert d.hrp_batch == 16 and p.hrp_batch is None
    assert json.loads(json.dumps(d.to_dict()))["dpnet"]["D"] == 16


@pytest.mark.parametrize("kw", [{"batch": 0}, {"hrp_epochs": -1}, {"lr": 0.0}, {"dtype": "float16"},
                                {"lam2": -1.0}, {"clip_norm": 0.0}, {"hrp_batch": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_accepts_model_dicts():
    c = TrainConfig(dpnet={"D": 8}, hrp={"hidden": 4})
    assert c.dpnet.D == 8 and c.hrp.hidden == 4


# ---------------------------------------------------------------- checkpoints

def _ckpt(cfg=TINY["dpnet"], seed=3):
    p = init_params(cfg, seed=seed, dtype=np.float32)
    return Checkpoint(cfg, training.snapshot(p), 7, {"val_mse": 0.25})


def test_checkpoint_round_trip_bit_identical(tmp_path):
    ck = _ckpt()
    training.save_checkpoint(tmp_path / "a.ckpt", ck)
    back = training.load_checkpoint(tmp_path / "a.ckpt")
    assert back.epoch == 7 and back.metrics == {"val_mse": 0.25}
    assert back.config == ck.config
    for k, v in ck.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes()
    p = back.params(np.float32)
    assert all(t.data.tobytes() == ck.tensors[k].tobytes() for k, t in p.tensors().items())


def test_checkpoint_header(tmp_path):
    training.save_checkpoint(tmp_path / "a.ckpt", _ckpt())
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:4] == b"DPNC"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert raw[8:40] == _ckpt().digest


@pytest.mark.parametrize("cut", [3, 20, 41, -1, -100])
def test_truncated_checkpoint(tmp_path, cut):
    training.save_checkpoint(tmp_path / "a.ckpt", _ckpt())
    p = tmp_path / "a.ckpt"
    p.write_bytes(p.read_bytes()[:cut])
    with pytest.raises(CheckpointError):
        training.load_checkpoint(p)


def test_checkpoint_bad_magic_version_and_trailing(tmp_path):
    training.save_checkpoint(tmp_path / "a.ckpt", _ckpt())
    p = tmp_path / "a.ckpt"
    raw = p.read_bytes()
    for bad in (b"NOPE" + raw[4:], raw[:4] + (9).to_bytes(4, "little") + raw[8:], raw + b"x"):
        p.write_bytes(bad)
        with pytest.raises(CheckpointError):
            training.load_checkpoint(p)


def test_config_drift_detected(tmp_path):
    training.save_checkpoint(tmp_path / "a.ckpt", _ckpt())
    with pytest.raises(ConfigDriftError):
        training.load_checkpoint(tmp_path / "a.ckpt", config=dataclasses.replace(TINY["dpnet"], D=5))
    training.load_checkpoint(tmp_path / "a.ckpt", config=TINY["dpnet"])


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        training.load_checkpoint(tmp_path / "none.ckpt")


# ---------------------------------------------------------------- protocol

def test_batches_cover_everything_and_depend_on_epoch():
    a = training.batches(10, 4, 0, 0)
    assert [len(b) for b in a] == [4, 4, 2]
    assert sorted(np.concatenate(a)) == list(range(10))
    assert not np.array_equal(np.concatenate(a), np.concatenate(training.batches(10, 4, 0, 1)))
    assert np.array_equal(np.concatenate(a), np.concatenate(training.batches(10, 4, 0, 0)))


def test_empty_split_rejected(small_data):
    tr, va = small_data
    empty = TrainData(np.zeros((0, 750)), np.zeros((0, 750)), np.zeros(0))
    cfg = TrainConfig(hrp_epochs=1, **TINY)
    with pytest.raises(ValueError):
        training.train_hrp(empty, va, cfg)
    with pytest.raises(ValueError):
        training.train_dpnet(tr, va, None, cfg)


def test_train_hrp_reduces_loss_and_keeps_best(small_data, tmp_path):
    tr, va = small_data
    cfg = TrainConfig(lr=3e-3, batch=8, hrp_epochs=6, checkpoint_dir=str(tmp_path), **TINY)
    res = training.train_hrp(tr, va, cfg)
    h = res.history
    assert h[-1]["l_mse"] < h[0]["l_mse"]
    assert res.checkpoint.metrics["val_hr_mae"] == min(r["val_hr_mae"] for r in h)
    assert res.checkpoint.metrics["val_hr_mae"] <= h[0]["val_hr_mae"]
    assert (tmp_path / "hrp_best.ckpt").exists()


def test_hrp_batch_sets_steps_per_epoch(small_data):
    tr, va = small_data
    cfg = TrainConfig(lr=1e-3, batch=64, hrp_epochs=1, **TINY)
    steps = []
    for hb in (None, 4):
        res = training.train_hrp(tr, va, dataclasses.replace(cfg, hrp_batch=hb))
        steps.append(res.params.w2.data.copy())
    assert not np.array_equal(*steps)
    assert len(training.batches(len(tr), 4, 0, 0)) == -(-len(tr) // 4)


def test_train_dpnet_schedule_and_frozen_hrp(small_data, tmp_path):
    tr, va = small_data
    cfg = TrainConfig(lr=1e-3, batch=8, hrp_epochs=1, dpnet_epochs=4, E_w=2, lam1=1e-2, lam2=1e-1,
                      **TINY)
    hrp = training.train_hrp(tr, va, cfg).checkpoint
    before = {k: v.tobytes() for k, v in hrp.tensors.items()}
    rows = []
    res = training.train_dpnet(tr, va, hrp, cfg, log=rows.append, log_path=tmp_path / "log.jsonl")
    assert {k: v.tobytes() for k, v in hrp.tensors.items()} == before
    assert [r["hr_term"] for r in rows] == [False, False, True, True]
    assert all(r["l_mae"] == 0.0 for r in rows[:2])
    assert all(r["l_mae"] > 0.0 for r in rows[2:])
    assert all(r["hrp_grad_max"] == 0.0 for r in rows)
    assert rows == res.history
    logged = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert logged == json.loads(json.dumps(rows))
    for key in ("epoch", "l_mse", "l_sisdr", "l_mae", "val_mse", "val_hr_mae"):
        assert key in logged[0]
    best = min(rows, key=lambda r: (r["val_mse"], r["val_hr_mae"]))
    assert res.checkpoint.epoch == best["epoch"]


def test_double_precision_runs_are_identical(small_data):
    tr, va = small_data
    cfg = TrainConfig(lr=1e-3, batch=8, hrp_epochs=1, dpnet_epochs=2, E_w=1, **TINY)
    curves = []
    for _ in range(2):
        hrp = training.train_hrp(tr, va, cfg)
        dp = training.train_dpnet(tr, va, hrp.checkpoint, cfg)
        curves.append((hrp.history, dp.history, {k: t.data.tobytes() for k, t in dp.params.tensors().items()}))
    assert curves[0] == curves[1]


def test_micro_batches_split_and_weights():
    parts = training.micro_batches(np.arange(10), 4)
    assert [list(i) for i, _ in parts] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    assert [w for _, w in parts] == [0.4, 0.4, 0.2]
    assert training.micro_batches(np.arange(5), None)[0][1] is None
    assert training.micro_batches(np.arange(5), 8)[0][1] is None
    assert TrainConfig.paper().micro_batch == 8 and TrainConfig.desk().micro_batch is None
    with pytest.raises(ValueError):
        TrainConfig(micro_batch=0)


def test_gradient_accumulation_matches_whole_batch(small_data):
    tr, va = small_data
    cfg = TrainConfig(lr=1e-3, batch=8, hrp_epochs=1, dpnet_epochs=2, E_w=1, lam1=1e-2, lam2=1e-1, **TINY)
    hrp = training.train_hrp(tr, va, cfg)
    hrp_m = training.train_hrp(tr, va, dataclasses.replace(cfg, micro_batch=3))
    assert hrp_m.history == pytest.approx(hrp.history, rel=1e-9)
    whole = training.train_dpnet(tr, va, hrp.checkpoint, cfg)
    parts = training.train_dpnet(tr, va, hrp.checkpoint, dataclasses.replace(cfg, micro_batch=3))
    for a, b in zip(whole.history, parts.history):
        for k in ("l_mse", "l_sisdr", "l_mae", "val_mse", "val_hr_mae"):
            assert b[k] == pytest.approx(a[k], rel=1e-9, abs=1e-12), k
    for k, t in whole.params.tensors().items():
        assert np.allclose(parts.params.tensors()[k].data, t.data, rtol=1e-9, atol=1e-12), k


def test_resume_from_branch_is_exact(small_data):
    tr, va = small_data
    cfg = TrainConfig(lr=1e-3, batch=8, hrp_epochs=1, dpnet_epochs=3, E_w=1, **TINY)
    hrp = training.train_hrp(tr, va, cfg).checkpoint
    base = training.train_dpnet(tr, va, hrp, dataclasses.replace(cfg, lam2=0.0), branch_at=1)
    resumed = training.train_dpnet(tr, va, hrp, cfg, resume=base.state)
    direct = training.train_dpnet(tr, va, hrp, cfg)
    assert resumed.history == direct.history
    for k, t in direct.params.tensors().items():
        assert resumed.params.tensors()[k].data.tobytes() == t.data.tobytes()
