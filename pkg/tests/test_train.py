import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lffn import imaging, oracles
from lffn.arch import NetworkSpec
from lffn.ops import l1_loss
from lffn.tensor import Tape, Tensor, backward
from lffn.train import (AdamState, TrainConfig, TrainingError, adam_step, augment, clip_gradients,
                        load_corpus, lr_schedule, sample_batch, train_loop, write_loss_csv)

TINY = NetworkSpec(blocks=1, modules=1, scale=2)


# --- config ---------------------------------------------------------------------

def test_config_defaults_and_json(tmp_path):
    cfg = TrainConfig()
    assert (cfg.batch, cfg.lr_patch, cfg.lr0, cfg.halve_every) == (16, 32, 8e-4, 20)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)
    p = tmp_path / "cfg.json"
    p.write_text(TrainConfig(batch=3, seed=9).to_json())
    assert TrainConfig.from_json(p) == TrainConfig(batch=3, seed=9)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"batchsize": 2})
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)


# --- sampling --------------------------------------------------------------------

def test_batch_shapes(rng):
    corpus = [rng.uniform(0, 1, (70, 66, 3))]
    lr, hr = sample_batch(corpus, 2, TrainConfig(), rng)
    assert lr.shape == (16, 3, 32, 32) and hr.shape == (16, 3, 64, 64)
    assert lr.dtype == hr.dtype == np.float32


def test_identity_augmentation_matches_direct_bicubic(rng):
    img = rng.uniform(0, 1, (20, 24, 3))
    cfg = TrainConfig(batch=40, lr_patch=4)
    lr, hr, meta = sample_batch([img], 3, cfg, np.random.default_rng(0), return_meta=True)
    hits = [i for i, m in enumerate(meta) if m[1] == 0]
    assert hits
    for i in hits:
        _, _, top, left = meta[i]
        crop = img[top:top + 12, left:left + 12]
        np.testing.assert_array_equal(hr[i], crop.transpose(2, 0, 1).astype(np.float32))
        np.testing.assert_array_equal(lr[i], imaging.bicubic_resize(crop, 1, 3).transpose(2, 0, 1))


def test_augmentations_are_the_dihedral_group(rng):
    x = rng.standard_normal((5, 5, 3))
    np.testing.assert_array_equal(augment(augment(x, 4), 4), x)
    outs = [augment(x, k) for k in range(8)]
    assert len({o.tobytes() for o in outs}) == 8
    np.testing.assert_array_equal(augment(x, 1), np.rot90(x))


def test_augmentation_frequencies():
    cfg = TrainConfig(batch=10000, lr_patch=2)
    _, _, meta = sample_batch([np.zeros((4, 4, 3))], 2, cfg, np.random.default_rng(3), return_meta=True)
    freq = np.bincount([m[1] for m in meta], minlength=8) / 10000
    assert np.all(np.abs(freq - 0.125) < 0.02)


def test_sampling_errors():
    with pytest.raises(ValueError):
        sample_batch([], 2, TrainConfig(), np.random.default_rng())
    with pytest.raises(ValueError):
        sample_batch([np.zeros((10, 10, 3))], 2, TrainConfig(), np.random.default_rng())


# --- loss ------------------------------------------------------------------------

def test_l1_examples(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    assert l1_loss(Tensor(a), Tensor(a)).item() == 0.0
    assert l1_loss(Tensor(a + 0.5), Tensor(a)).item() == pytest.approx(0.5)


def test_l1_gradient_is_sign_over_n(rng):
    p = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    t = Tensor(rng.standard_normal((1, 2, 3, 3)), dtype=np.float64)
    with Tape() as tape:
        loss = l1_loss(p, t)
    g = backward(loss, tape)[p]
    np.testing.assert_array_equal(g, np.sign(p.data - t.data) / p.size)
    num = oracles.numeric_grad(lambda: l1_loss(p, t).item(), p.data, 1e-6)
    assert oracles.rel_error(g, num) < 1e-6


def test_l1_tie_subgradient_is_zero():
    p = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = l1_loss(p, Tensor(np.ones((1, 1, 2, 2))))
    assert np.all(backward(loss, tape)[p] == 0)


# --- clipping ----------------------------------------------------------------------

def test_clip_examples():
    p = Tensor(np.zeros(3))
    out = clip_gradients({p: np.array([600.0, -600.0, 10.0])}, 8e-4, 0.4)[p]
    assert out.tolist() == [500.0, -500.0, 10.0]
    g = np.array([1.0, -2.0])
    assert clip_gradients({p: g}, 8e-4, 0.4)[p].tolist() == g.tolist()
    big = {p: np.array([1e9])}
    assert clip_gradients(big, 4e-4, 0.4)[p][0] == 2 * clip_gradients(big, 8e-4, 0.4)[p][0]
    with pytest.raises(ValueError):
        clip_gradients(big, 0.0, 0.4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, 6, elements=st.floats(-1e6, 1e6, width=32)),
       st.floats(1e-6, 1.0), st.floats(1e-4, 10.0))
def test_clip_never_exceeds_bound(g, lr, theta):
    p = Tensor(np.zeros(6, np.float32))
    assert np.all(np.abs(clip_gradients({p: g}, lr, theta)[p]) <= theta / lr)


# --- Adam ---------------------------------------------------------------------------

def test_adam_first_step():
    p = Tensor(np.zeros(5))
    adam_step([p], {p: np.ones(5)}, AdamState(), 8e-4)
    assert np.all(np.abs(p.data + 8e-4) < 1e-6 * 8e-4)


def test_adam_zero_gradient_is_stationary(rng):
    p = Tensor(rng.standard_normal(4))
    before = p.data.copy()
    state = AdamState()
    for _ in range(20):
        adam_step([p], {p: np.zeros(4)}, state, 1e-3)
    np.testing.assert_array_equal(p.data, before)


def test_adam_is_deterministic(rng):
    grads = [rng.standard_normal(3) for _ in range(10)]

    def run():
        p, s = Tensor(np.ones(3)), AdamState()
        for g in grads:
            adam_step([p], {p: g}, s, 1e-3)
        return p.data.tobytes()

    assert run() == run()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-100, 100)), st.integers(1, 5))
def test_adam_is_odd(g, steps):
    a, b = Tensor(np.zeros(4), dtype=np.float64), Tensor(np.zeros(4), dtype=np.float64)
    sa, sb = AdamState(), AdamState()
    for _ in range(steps):
        adam_step([a], {a: g}, sa, 1e-3)
        adam_step([b], {b: -g}, sb, 1e-3)
    np.testing.assert_allclose(a.data, -b.data, atol=1e-15)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        adam_step([p], {p: np.zeros(4)}, AdamState(), 1e-3)


# --- schedule ----------------------------------------------------------------------------

def test_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 8e-4
    assert lr_schedule(20, cfg) == 4e-4
    assert lr_schedule(59, cfg) == 2e-4
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 400))
def test_schedule_non_increasing_piecewise_constant(e):
    cfg = TrainConfig()
    assert lr_schedule(e + 1, cfg) <= lr_schedule(e, cfg)
    assert lr_schedule(e, cfg) == lr_schedule(20 * (e // 20), cfg)


# --- loop ---------------------------------------------------------------------------------

def small_cfg(**kw):
    base = dict(batch=2, lr_patch=8, iterations=6, iters_per_epoch=3, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_loop_trace_and_determinism(rng):
    corpus = [imaging.synthetic_scene(24, 24, 0)]
    a = train_loop(TINY, corpus, small_cfg())
    b = train_loop(TINY, corpus, small_cfg())
    assert len(a.trace) == 6
    assert a.trace == b.trace
    assert a.store.to_bytes() == b.store.to_bytes()
    assert [r[1] for r in a.trace] == [0, 0, 0, 1, 1, 1]
    c = train_loop(TINY, corpus, small_cfg(seed=5))
    assert c.trace != a.trace


def test_loop_checkpoints_and_resume(tmp_path):
    corpus = [imaging.synthetic_scene(24, 24, 1)]
    res = train_loop(TINY, corpus, small_cfg(), checkpoint_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["best.lffn", "epoch_0000.lffn", "epoch_0001.lffn"]
    resumed = train_loop(TINY, corpus, small_cfg(iterations=0), init=res.store)
    assert resumed.store.to_bytes() == res.store.to_bytes()


def test_loop_reports_non_finite(monkeypatch):
    import lffn.train as train_mod

    def poisoned(*a, **k):
        lr, hr = sample_batch(*a, **k)
        hr[0, 0, 0, 0] = np.inf
        return lr, hr

    monkeypatch.setattr(train_mod, "sample_batch", poisoned)
    with pytest.raises(TrainingError, match="iteration 0"):
        train_loop(TINY, [imaging.synthetic_scene(24, 24, 0)], small_cfg())


def test_loss_csv(tmp_path):
    write_loss_csv([(0, 0, 8e-4, 0.5), (1, 0, 8e-4, 0.25)], tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines == ["iter,epoch,lr,loss", "0,0,0.0008,0.5", "1,0,0.0008,0.25"]


def test_corpus_errors_name_the_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nowhere")
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path)
    imaging.save_png(np.zeros((8, 8, 3)), tmp_path / "small.png")
    with pytest.raises(ValueError, match="small.png"):
        load_corpus(tmp_path, 64)
    (tmp_path / "broken.png").write_bytes(b"xx")
    with pytest.raises(OSError, match="broken.png"):
        load_corpus(tmp_path)


def test_config_json_is_plain_fields():
    d = json.loads(TrainConfig().to_json())
    assert "FINE_TUNE_LR" not in d and d["lr0"] == 8e-4


# --- smoke run (shared session fixture) ------------------------------------------------

def test_smoke_trace_length(smoke):
    assert len(smoke.trace) == 500


def test_smoke_loss_drops_tenfold(smoke):
    assert smoke.trace[-1][3] < 0.1 * smoke.trace[0][3]


def test_smoke_psnr_exceeds_bicubic(smoke, smoke_crop):
    from lffn import cli
    rows = cli.evaluate_image_array(smoke_crop, 2, lambda lr: cli.super_resolve(smoke.net, lr))
    by = {r["method"]: r["psnr_db"] for r in rows}
    assert by["lffn"] > by["bicubic"]
