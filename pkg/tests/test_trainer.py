import json
import math

import numpy as np
import pytest

from maskclip import corpus
from maskclip.config import ConfigError, TrainConfig
from maskclip.numerics import NonFiniteError
from maskclip.trainer import (
    AdamW,
    CheckpointError,
    Schedule,
    Trainer,
    decays,
    decode_checkpoint,
    encode_checkpoint,
    epoch_order,
    load_model,
    make_schedule,
    read_checkpoint,
    run,
)
from maskclip.numerics import Tensor

from conftest import small_config

OVERFIT_SEED = 0  # 32 records, 32 distinct captions


@pytest.fixture(scope="module")
def data():
    return corpus.build_corpus(12, 0)


# ---------------------------------------------------------------- schedule


def test_lr_schedule_points():
    s = Schedule(3e-3, 1e-5, 10, 110)
    assert s.lr_at(0) == 0.0
    assert s.lr_at(5) == pytest.approx(1.5e-3, abs=1e-18)
    assert s.lr_at(10) == 3e-3
    assert abs(s.lr_at(110) - 1e-5) <= 1e-12
    mid = 1e-5 + (3e-3 - 1e-5) * 0.5 * (1 + math.cos(math.pi * 0.5))
    assert s.lr_at(60) == pytest.approx(mid, rel=1e-14)
    with pytest.raises(ValueError):
        s.lr_at(111)


def test_schedule_from_config():
    s = make_schedule(TrainConfig(epochs=3, batch_size=4, warmup_epochs=1.0), 10)
    assert (s.warmup_steps, s.total_steps) == (3, 9)
    s = make_schedule(TrainConfig(epochs=3, batch_size=4, max_steps=5), 10)
    assert s.total_steps == 5


def test_epoch_order_depends_only_on_seed_and_epoch():
    assert np.array_equal(epoch_order(3, 2, 50), epoch_order(3, 2, 50))
    assert not np.array_equal(epoch_order(3, 2, 50), epoch_order(3, 1, 50))
    assert sorted(epoch_order(3, 2, 50).tolist()) == list(range(50))


# ---------------------------------------------------------------- optimizer


def adamw_oracle(p0, grads, lrs, b1, b2, eps, wd, decay, scaled=True):
    """Scalar-by-scalar reference for one parameter tensor."""
    p = list(p0)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            if decay:
                p[i] *= 1 - (lr * wd if scaled else wd)
            p[i] -= lr * (m[i] / (1 - b1 ** t)) / (math.sqrt(v[i] / (1 - b2 ** t)) + eps)
    return p


@pytest.mark.parametrize("scaled", [True, False])
def test_adamw_matches_scalar_oracle(scaled):
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    w0, b0 = w.data.ravel().tolist(), b.data.tolist()
    opt = AdamW([("layer.weight", w), ("layer.bias", b)], 0.9, 0.98, 1e-8, 0.1 if scaled else 1e-3, scaled)
    gw, gb, lrs = [], [], [1e-2, 2e-2, 5e-3, 1e-2]
    for lr in lrs:
        w.grad = rng.standard_normal(w.shape)
        b.grad = rng.standard_normal(b.shape)
        gw.append(w.grad.ravel().tolist())
        gb.append(b.grad.tolist())
        opt.step(lr)
    wd = 0.1 if scaled else 1e-3
    np.testing.assert_allclose(w.data.ravel(), adamw_oracle(w0, gw, lrs, 0.9, 0.98, 1e-8, wd, True, scaled),
                               rtol=1e-12)
    np.testing.assert_allclose(b.data, adamw_oracle(b0, gb, lrs, 0.9, 0.98, 1e-8, wd, False, scaled), rtol=1e-12)


def test_decay_exclusion_set():
    m = Trainer(small_config(), corpus.build_corpus(2, 0)).optimizer
    exempt = {k for k, d in m.decay.items() if not d}
    assert {"log_temperature", "mask_token", "visual.pos_embed", "visual.cls_token", "text.pos_embed",
            "visual.blocks.0.ln1.weight", "visual.blocks.0.attn.q_bias"} <= exempt
    assert m.decay["visual.patch_embed.weight"] and m.decay["text.token_embed"]
    assert not decays("x.bias", np.zeros(3)) and decays("x.weight", np.zeros((2, 2)))


def test_independent_decay_shrinks_at_zero_lr(data):
    cfg = small_config(lr=0.0, final_lr=0.0, weight_decay=0.01, decay_mode="independent", batch_size=4)
    tr = Trainer(cfg, data)
    before = tr.model.state_dict()
    losses0 = tr.model.losses(tr.images[:4], tr.ids[:4], tr.eos[:4], np.random.default_rng(0))["total"].data
    tr.train_step(np.arange(4))
    after = tr.model.state_dict()
    for k, _ in tr.optimizer.params:
        want = before[k] * 0.99 if tr.optimizer.decay[k] else before[k]
        assert after[k].tobytes() == want.tobytes(), k
    losses1 = tr.model.losses(tr.images[:4], tr.ids[:4], tr.eos[:4], np.random.default_rng(0))["total"].data
    assert losses1 != losses0


def test_scaled_decay_is_inert_at_zero_lr(data):
    cfg = small_config(lr=0.0, final_lr=0.0, weight_decay=0.1, batch_size=4)
    tr = Trainer(cfg, data)
    before = tr.model.state_dict()
    tr.train_step(np.arange(4))
    after = tr.model.state_dict()
    for k, _ in tr.optimizer.params:
        assert after[k].tobytes() == before[k].tobytes()


# ---------------------------------------------------------------- train step


def test_identical_runs_give_identical_metrics(data):
    def stream():
        tr = Trainer(small_config(batch_size=4, epochs=2), data)
        rows = []
        while not tr.finished():
            rows += tr.run_epoch()
        return json.dumps(rows, sort_keys=True)

    assert stream() == stream()


def test_step_metrics_fields(data):
    row = Trainer(small_config(batch_size=4), data).train_step(np.arange(4))
    assert {"L_I", "L_T", "L_Dist", "total", "sigma", "alpha", "lr", "step"} <= set(row)
    assert row["step"] == 1 and row["alpha"] == 0.999
    clip = Trainer(small_config("clip", batch_size=4), data).train_step(np.arange(4))
    assert "L_Dist" not in clip and clip["alpha"] is None


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_lambda_zero_leaves_decoder_alone(data, wd):
    cfg = small_config(lambda_dist=0.0, weight_decay=wd, batch_size=4, epochs=2)
    tr = Trainer(cfg, data)
    before = tr.model.state_dict()
    lrs = []
    while not tr.finished():
        lrs += [r["lr"] for r in tr.run_epoch()]
    shrink = np.prod([1.0 - lr * wd for lr in lrs])
    after = tr.model.state_dict()
    for k in before:
        if not (k.startswith("decoder.") or k == "mask_token"):
            continue
        if wd and tr.optimizer.decay[k]:
            np.testing.assert_allclose(after[k], before[k] * shrink, rtol=1e-12)
            assert not np.array_equal(after[k], before[k])
        else:
            assert after[k].tobytes() == before[k].tobytes(), k


def test_teacher_is_pure_ema_of_updated_student(data):
    tr = Trainer(small_config(batch_size=4), data)
    m = tr.model
    t0 = m.teacher.state_dict()
    row = tr.train_step(np.arange(4))
    s1, t1 = m.visual.state_dict(), m.teacher.state_dict()
    a = row["alpha"]
    for k in t0:
        # the update uses the post-step student, and nothing else moves the teacher
        assert t1[k].tobytes() == (a * t0[k] + (1 - a) * s1[k]).tobytes(), k
    assert all(p.grad is None or not p.grad.any() for p in m.teacher.parameters())


def test_non_finite_loss_names_the_term(data):
    tr = Trainer(small_config(batch_size=4), data)
    tr.model.decoder.blocks[0].mlp.fc2.weight.data[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="L_Dist"):
        tr.train_step(np.arange(4))


def test_temperature_stays_clamped(data):
    cfg = small_config(batch_size=4, model={"init_temperature": 0.0101}, lr=0.5, grad_clip=0.0)
    tr = Trainer(cfg, data)
    for _ in range(3):
        row = tr.train_step(np.arange(4))
        assert 0.01 - 1e-12 <= row["sigma"] <= 100.0


# ---------------------------------------------------------------- runs and checkpoints


def test_log_line_count_and_checkpoints(tmp_path, data):
    cfg = small_config(batch_size=5, epochs=2)
    run(cfg, tmp_path, data=data)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    steps = 2 * 3
    assert len(lines) == steps + 2
    kinds = [json.loads(x)["type"] for x in lines]
    assert kinds == ["step"] * 3 + ["epoch"] + ["step"] * 3 + ["epoch"]
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch_0001.ckpt", "epoch_0002.ckpt", "final.ckpt"]


def test_resume_is_bitwise(tmp_path, data):
    cfg = small_config(batch_size=5, epochs=3)
    run(cfg, tmp_path / "full", data=data)
    run(cfg, tmp_path / "part", data=data, stop_after_epoch=1)
    run(cfg, tmp_path / "part", data=data, resume=tmp_path / "part" / "epoch_0001.ckpt")
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "part" / "final.ckpt").read_bytes()


def test_resume_after_crash_mid_log(tmp_path, data):
    cfg = small_config(batch_size=5, epochs=3)
    run(cfg, tmp_path / "full", data=data)
    run(cfg, tmp_path / "part", data=data, stop_after_epoch=2)
    # resume from an older checkpoint than the log reaches
    run(cfg, tmp_path / "part", data=data, resume=tmp_path / "part" / "epoch_0001.ckpt")
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()


def test_checkpoint_round_trip_is_byte_identical(tmp_path, data):
    tr = Trainer(small_config(batch_size=4), data)
    tr.train_step(np.arange(4))
    blob = encode_checkpoint(tr.cfg, tr.header_state(), tr.arrays())
    ck = decode_checkpoint(blob)
    assert encode_checkpoint(ck.config, ck.state, ck.arrays) == blob
    tr2 = Trainer(small_config(batch_size=4), data)
    tr2.restore(ck)
    assert encode_checkpoint(tr2.cfg, tr2.header_state(), tr2.arrays()) == blob


def test_checkpoint_layout(tmp_path, data):
    tr = Trainer(small_config("clip", batch_size=4), data)
    tr.save(tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:4] == b"MCLP" and int.from_bytes(raw[4:8], "little") == 1
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + hlen])
    names = [a["name"] for a in header["arrays"]]
    assert names == sorted(names)
    assert not any("teacher" in n or "decoder" in n or "mask_token" in n for n in names)
    assert header["config"]["objective"] == "clip"
    last = header["arrays"][-1]
    assert 16 + hlen + last["offset"] + last["nbytes"] == len(raw)


def test_corrupt_checkpoints_are_rejected(tmp_path, data):
    tr = Trainer(small_config(batch_size=4), data)
    blob = encode_checkpoint(tr.cfg, tr.header_state(), tr.arrays())
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-10])
    hlen = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16:16 + hlen])
    header["config"]["mask_ratio"] = 2.0
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with pytest.raises(ConfigError):
        decode_checkpoint(blob[:8] + len(h).to_bytes(8, "little") + h + blob[16 + hlen:])


def test_restore_refuses_other_config(data):
    tr = Trainer(small_config(batch_size=4), data)
    ck = decode_checkpoint(encode_checkpoint(tr.cfg, tr.header_state(), tr.arrays()))
    with pytest.raises(CheckpointError):
        Trainer(small_config(batch_size=4, seed=1), data).restore(ck)


def test_load_model_restores_parameters(tmp_path, data):
    tr = Trainer(small_config(batch_size=4), data)
    tr.train_step(np.arange(4))
    tr.save(tmp_path / "c.ckpt")
    m = load_model(tmp_path / "c.ckpt")
    for k, v in tr.model.state_dict().items():
        assert m.state_dict()[k].tobytes() == v.tobytes()
    assert read_checkpoint(tmp_path / "c.ckpt").state["step"] == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(decay_mode="sometimes")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": "many"})


# ---------------------------------------------------------------- short overfit


def test_three_hundred_step_overfit():
    data = corpus.build_corpus(32, OVERFIT_SEED)
    assert len(set(data.captions)) == 32
    cfg = TrainConfig(epochs=300, batch_size=32, precision="float32")
    tr = Trainer(cfg, data)
    rows = []
    while not tr.finished():
        rows += tr.run_epoch()
    pair = np.array([r["L_I"] + r["L_T"] for r in rows])
    windows = pair.reshape(6, 50).mean(axis=1)
    assert pair[-50:].mean() < 2 * math.log(32)
    assert np.all(np.diff(windows) < 0), windows
