import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ladder_siam import losses as L
from ladder_siam import tensor as T
from ladder_siam.augment import AugPolicy, view_batch
from ladder_siam.dataio import encode_checkpoint, read_metrics, synth_dataset
from ladder_siam.nn import ArchConfig, ParamStore
from ladder_siam.optim import (OptState, cosine_lr, lars_step, lars_trust_ratio, lars_update,
                               sgd_momentum_step, sgd_momentum_update)
from ladder_siam.tensor import Tensor
from ladder_siam.train import (GradientLeak, TrainConfig, TrainingDiverged, TrainState, pretrain_run,
                               state_from_checkpoint, to_checkpoint, train_step)

TINY = ArchConfig(input_size=16, stem_channels=8, channels=(8, 16, 16, 32), blocks_per_stage=1)


def tiny_cfg(preset="ladder_byol", w=0.5, **kw):
    lad = L.LadderConfig.preset(preset, 4, w, hidden_dim=32, out_dim=16)
    base = dict(arch=TINY, ladder=lad, aug=AugPolicy(out_size=16), epochs=1, batch_size=16, lr=0.1)
    base.update(kw)
    return TrainConfig(**base)


def batch(cfg, n=16, seed=0, epoch=0):
    ds = synth_dataset(64, 10, seed)
    return view_batch(ds.images, np.arange(n), cfg.aug, seed, epoch)


# ---------------------------------------------------------------- schedules and optimizers


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 0.5) == 0.5
    assert cosine_lr(100, 100, 0.5) == 0.0
    assert cosine_lr(50, 100, 0.5) == pytest.approx(0.25, abs=1e-16)
    lrs = [cosine_lr(s, 41, 1.0) for s in range(42)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_sgd_examples():
    th, v = np.array([1.0]), np.array([0.0])
    sgd_momentum_update(th, np.array([2.0]), v, lr=0.1, mu=0.9, wd=0.0)
    assert v[0] == 2.0 and th[0] == pytest.approx(0.8, abs=1e-16)

    th = np.array([1.0, -3.0])
    sgd_momentum_update(th, np.zeros(2), np.zeros(2), 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(th, [1.0, -3.0])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.0, 0.99), st.floats(1e-4, 1.0), st.floats(0, 0.1))
def test_sgd_two_steps_match_unrolled_recurrence(th0, g, mu, lr, wd):
    th, v = np.array([th0]), np.array([0.0])
    sgd_momentum_update(th, np.array([g]), v, lr, mu, wd)
    sgd_momentum_update(th, np.array([g]), v, lr, mu, wd)
    # hand unrolled
    v1 = g + wd * th0
    t1 = th0 - lr * v1
    v2 = mu * v1 + g + wd * t1
    t2 = t1 - lr * v2
    assert th[0] == pytest.approx(t2, rel=1e-12, abs=1e-12)
    assert v[0] == pytest.approx(v2, rel=1e-12, abs=1e-12)


def test_lars_examples():
    th = np.array([2.0])
    r = lars_update(th, np.array([1.0]), np.zeros(1), lr=0.1, mu=0.0, wd=0.0)
    # eps = 1e-9 in the denominator moves r off 2 by about 2e-9
    assert r == pytest.approx(2.0, rel=1e-8) and th[0] == pytest.approx(1.8, rel=1e-8)
    assert lars_trust_ratio(np.zeros(3), np.ones(3)) == 1.0
    assert lars_trust_ratio(np.ones(3), np.zeros(3)) == 1.0


@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_lars_ratio_homogeneous(seed, c):
    rng = np.random.default_rng(seed)
    th, g = rng.standard_normal(7), rng.standard_normal(7)
    assert lars_trust_ratio(th * c, g * c, eps=0.0) == pytest.approx(lars_trust_ratio(th, g, eps=0.0), rel=1e-12)


def test_lars_step_exempts_norm_free_params():
    w = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    bvec = Tensor(np.full(2, 3.0), requires_grad=True)
    w.grad, bvec.grad = np.ones((2, 2)), np.ones(2)
    store = ParamStore({"fc.weight": w, "bn.scale": bvec})
    ratios = lars_step(store, OptState(), lr=0.1, mu=0.0, wd=0.5)
    assert ratios["bn.scale"] == 1.0
    np.testing.assert_allclose(bvec.data, 3.0 - 0.1)  # no decay, no adaptation
    gp = 1 + 0.5 * 3.0
    r = 6.0 / (np.sqrt(4) * gp + 1e-9)
    assert ratios["fc.weight"] == pytest.approx(r, rel=1e-12)
    np.testing.assert_allclose(w.data, 3.0 - 0.1 * r * gp, rtol=1e-12)


def test_optimizer_shape_mismatch():
    t = Tensor(np.zeros(3), requires_grad=True)
    t.grad = np.zeros(4)
    with pytest.raises(ValueError):
        sgd_momentum_step(ParamStore({"x": t}), OptState(), 0.1)


def test_optimizer_skips_params_without_grad():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    a.grad = np.ones(2)
    st_ = OptState()
    sgd_momentum_step(ParamStore({"a": a, "b": b}), st_, 0.1, 0.9, 0.1)
    np.testing.assert_array_equal(b.data, 1.0)
    assert "b" not in st_.momentum and st_.step == 1


# ---------------------------------------------------------------- train step


def test_train_step_target_is_convex_combination():
    cfg = tiny_cfg()
    state = TrainState.fresh(cfg, 10)
    xa, xb = batch(cfg)
    for _ in range(3):
        before = {n: t.data.copy() for n, t in state.target.items()}
        rec = train_step(state, xa, xb, cfg)
        tau = rec["tau"]
        for n, t in state.target.items():
            o = state.online[n].data
            np.testing.assert_allclose(t.data, tau * before[n] + (1 - tau) * o, rtol=1e-5, atol=1e-6)
            assert t.grad is None
    assert state.step == 3
    assert set(state.target.names()) == {n for n in state.online.names() if ".pred." not in n}


def test_zero_weights_step_bit_identical_to_plain_byol():
    cfg = tiny_cfg(w=0.0)
    assert cfg.ladder.weights == (0.0, 0.0, 0.0, 1.0)
    s1, s2 = TrainState.fresh(cfg, 10), TrainState.fresh(cfg, 10)
    xa, xb = batch(cfg)
    r1 = train_step(s1, xa, xb, cfg, "ladder")
    r2 = train_step(s2, xa, xb, cfg, "byol")
    assert r1["total"] == r2["total"]
    for n in s1.online.names():
        assert s1.online[n].data.tobytes() == s2.online[n].data.tobytes(), n
    for n in s1.target.names():
        assert s1.target[n].data.tobytes() == s2.target[n].data.tobytes(), n
    for k in s1.online.buffers:
        assert s1.online.buffers[k].tobytes() == s2.online.buffers[k].tobytes()


def test_first_step_loss_within_range():
    cfg = tiny_cfg("ladder_dense_byol")
    state = TrainState.fresh(cfg, 10)
    rec = train_step(state, *batch(cfg), cfg)
    assert math.isfinite(rec["total"]) and 0 <= rec["total"] <= 4 * sum(cfg.ladder.weights)
    assert sorted(rec["levels"]) == [1, 2, 3, 4]


def test_lars_training_step_runs():
    cfg = tiny_cfg(optimizer="lars", lr=0.05)
    state = TrainState.fresh(cfg, 5)
    w0 = state.online["stem.conv.weight"].data.copy()
    train_step(state, *batch(cfg), cfg)
    assert not np.array_equal(w0, state.online["stem.conv.weight"].data)


def test_divergence_reports_step():
    cfg = tiny_cfg()
    state = TrainState.fresh(cfg, 5)
    state.online["stage2.block1.conv1.weight"].data[0, 0, 0, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="step 0"):
        train_step(state, *batch(cfg), cfg)


def test_gradient_leak_guard():
    cfg = tiny_cfg()
    state = TrainState.fresh(cfg, 5)

    def leaky(on_out, tgt_out, st_, c, om, tm):
        loss, per = L.ladder_total_loss(on_out, tgt_out, st_.online, st_.target, c.ladder, om, tm)
        st_.target["stem.conv.weight"].grad = np.ones_like(st_.target["stem.conv.weight"].data)
        return loss, per

    with pytest.raises(GradientLeak):
        train_step(state, *batch(cfg), cfg, leaky)


def test_symmetrize_off_runs_one_direction():
    cfg = tiny_cfg(ladder=L.LadderConfig.preset("byol", 4, hidden_dim=32, out_dim=16, symmetrize=False))
    state = TrainState.fresh(cfg, 5)
    rec = train_step(state, *batch(cfg), cfg)
    assert list(rec["levels"]) == [4]


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(epochs=0)
    with pytest.raises(ValueError):
        tiny_cfg(weight_decay=-1)
    with pytest.raises(ValueError):
        tiny_cfg(optimizer="adam")
    with pytest.raises(ValueError):
        TrainConfig(arch=TINY, ladder=L.LadderConfig.preset("byol", 3))


# ---------------------------------------------------------------- full runs


def test_pretrain_step_count_and_checkpoint_resume(tmp_path):
    cfg = tiny_cfg(batch_size=256, epochs=1)
    ds = synth_dataset(512, 10, 0)
    ckpt, metrics = pretrain_run(cfg, ds, tmp_path)
    rows = read_metrics(metrics)
    assert [r["step"] for r in rows] == ["0", "1"]
    assert float(rows[0]["lr"]) == cfg.lr and float(rows[-1]["lr"]) < cfg.lr
    total0 = float(rows[0]["total_loss"])
    assert math.isfinite(total0) and total0 <= 4 * sum(cfg.ladder.weights)
    assert (tmp_path / "final.ckpt").exists()
    st_ = state_from_checkpoint(ckpt)
    assert st_.step == 2 and st_.total_steps == 2
    assert ckpt.meta["ladder.weights"] == "0.0625,0.125,0.25,1.0"


def test_checkpoint_cadence(tmp_path):
    cfg = tiny_cfg(batch_size=32, epochs=3, ckpt_every=1)
    pretrain_run(cfg, synth_dataset(64, 10, 0), tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch001.ckpt", "epoch002.ckpt", "final.ckpt"]


def test_pretrain_runs_are_bit_identical(tmp_path):
    cfg = tiny_cfg(batch_size=16, epochs=2)
    ds = synth_dataset(48, 10, 0)
    c1, m1 = pretrain_run(cfg, ds, tmp_path / "a")
    c2, m2 = pretrain_run(tiny_cfg(batch_size=16, epochs=2, workers=3), ds, tmp_path / "b")
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()
    assert m1.read_bytes() == m2.read_bytes()


def test_checkpoint_state_roundtrip():
    cfg = tiny_cfg()
    state = TrainState.fresh(cfg, 10)
    train_step(state, *batch(cfg), cfg)
    ck = to_checkpoint(state, cfg, 0)
    back = state_from_checkpoint(ck)
    assert encode_checkpoint(to_checkpoint(back, cfg, 0)) == encode_checkpoint(ck)


def test_smoke_training_loss_decreases(tmp_path):
    # synthetic stand-in for the CIFAR smoke run: 50-step moving average must fall
    cfg = tiny_cfg(batch_size=64, epochs=20, lr=0.2)
    ds = synth_dataset(640, 10, 0, size=16)
    losses = []
    ckpt, _ = pretrain_run(cfg, ds, tmp_path, on_step=lambda s, rec: losses.append(rec["total"]))
    assert len(losses) == 200
    ma = np.convolve(losses, np.ones(50) / 50, mode="valid")
    print(f"smoke curve: first MA {ma[0]:.4f}, last MA {ma[-1]:.4f}")
    assert ma[-1] < 0.8 * ma[0]
    # the healthy checkpoint must not trip the collapse flag
    from ladder_siam.analysis import collapse_metric, top_embeddings
    assert not collapse_metric(top_embeddings(ckpt, ds.images)).collapsed
