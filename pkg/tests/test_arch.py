import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lffn import ops, oracles
from lffn.arch import (SFFM, NetworkSpec, build_module, build_network, build_residual_baseline,
                       build_spindle_block, build_upsampler, init_weights, spec_from_store)
from lffn.tensor import ShapeError, Tape, Tensor, backward
from lffn.weights import FormatError, WeightStore


def conv_params(cin, cout, k, groups=1):
    return k * k * (cin // groups) * cout + cout


# Counts worked out by hand from the layer list, independent of the code.
SPINDLE = conv_params(48, 64, 1) + 7 * conv_params(16, 16, 3) + 6 * 16 + conv_params(64, 48, 1)
SPINDLE_DW = conv_params(48, 64, 1) + 7 * conv_params(16, 16, 3, 16) + 6 * 16 + conv_params(64, 48, 1)
RESIDUAL = 2 * conv_params(64, 64, 3) + 64


def tiny(**kw):
    return NetworkSpec(blocks=1, modules=2, scale=2).with_(**kw)


def randomized(layer, seed=0):
    store = WeightStore(layer.named_parameters())
    init_weights(store, seed)
    rng = np.random.default_rng(seed + 1)
    for name, t in store.items():
        if name.endswith(".bias"):
            t.data[...] = rng.uniform(-0.1, 0.1, t.shape)
    return store


def zero_all(layer, keep=()):
    for name, t in layer.named_parameters():
        if not name.startswith(keep):
            t.data[...] = 0


# --- spec ---------------------------------------------------------------

def test_spec_invariants():
    assert NetworkSpec.preset("lffn") == NetworkSpec(blocks=4, modules=15)
    s = NetworkSpec.preset("lffn-s", 2)
    assert (s.blocks, s.modules, s.depthwise, s.scale) == (4, 4, True, 2)
    for bad in (dict(scale=5), dict(variant="nope"), dict(extended_channels=60), dict(backbone_channels=64)):
        with pytest.raises(ValueError):
            NetworkSpec(**bad)
    with pytest.raises(ValueError):
        NetworkSpec.preset("lffn-xl")


# --- spindle block --------------------------------------------------------

def test_spindle_block_hand_count():
    assert SPINDLE == 22592
    assert build_spindle_block(NetworkSpec()).num_params() == SPINDLE
    assert build_spindle_block(NetworkSpec(depthwise=True)).num_params() == SPINDLE_DW


def test_residual_block_hand_count():
    assert build_residual_baseline().num_params() == RESIDUAL == 73920


def test_spindle_ratio_near_claim():
    ratio = SPINDLE / RESIDUAL
    assert abs(100 * ratio - 30.21) < 2.0


def test_spindle_zero_body_is_identity(rng):
    blk = build_spindle_block(NetworkSpec())
    randomized(blk)
    zero_all(blk, keep=("explore.b1.prelu", "explore.b2.prelu", "explore.b3.prelu"))
    x = Tensor(rng.standard_normal((1, 48, 5, 5)).astype(np.float32))
    np.testing.assert_array_equal(blk(x).data, x.data)


def test_spindle_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        build_spindle_block(NetworkSpec())(Tensor(np.zeros((1, 64, 4, 4))))


def test_branch_depths_and_linearity():
    blk = build_spindle_block(NetworkSpec())
    names = [n for n, _ in blk.named_parameters()]
    for b, depth in (("b0", 1), ("b1", 1), ("b2", 2), ("b3", 3)):
        assert sum(n.startswith(f"explore.{b}.conv") and n.endswith("weight") for n in names) == depth
    assert not any(n.startswith("explore.b0.prelu") for n in names)
    assert not any(n.startswith(("extend.prelu", "refine.prelu")) for n in names)


def test_spindle_branches_see_their_own_groups(rng):
    blk = build_spindle_block(NetworkSpec())
    randomized(blk)
    x = Tensor(rng.standard_normal((1, 48, 6, 6)).astype(np.float32))
    ext = blk.extend(x).data
    for i, (lo, hi) in enumerate(blk.ranges):
        got = blk.branches[i](Tensor(ext[:, lo:hi])).data
        assert got.shape == (1, 16, 6, 6)
    assert blk.ranges == [(0, 16), (16, 32), (32, 48), (48, 64)]


def test_depthwise_mode_touches_only_block_3x3():
    net = build_network(NetworkSpec(blocks=1, modules=1, scale=2, depthwise=True))
    st_ = net.store
    assert st_["head.weight"].shape == (48, 3, 3, 3)
    assert st_["module.0.block.0.explore.b3.conv2.weight"].shape == (16, 1, 3, 3)
    assert st_["module.0.block.0.extend.weight"].shape == (64, 48, 1, 1)


# --- residual baseline / module ------------------------------------------

def test_residual_zero_body_is_identity(rng):
    blk = build_residual_baseline()
    randomized(blk)
    zero_all(blk, keep=("prelu",))
    x = Tensor(rng.standard_normal((1, 64, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(blk(x).data, x.data)


def test_module_zero_fusion_is_identity(rng):
    mod = build_module(NetworkSpec(blocks=1))
    randomized(mod)
    zero_all(mod, keep=("block",))
    x = Tensor(rng.standard_normal((1, 48, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(mod(x).data, x.data)


def test_module_concat_width_and_count():
    mod = build_module(NetworkSpec(blocks=4))
    assert mod.concat_width == 192
    assert mod.num_params() == 4 * SPINDLE + conv_params(192, 48, 1)


# --- SFFM ------------------------------------------------------------------

def test_sffm_single_level_is_passthrough(rng):
    sffm = SFFM(1, 4)
    sffm.alphas[0].data[...] = rng.standard_normal((4, 4))
    x = Tensor(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
    np.testing.assert_allclose(sffm([x]).data, x.data, atol=1e-7)
    assert np.all(sffm.last_weights == 1)


def test_sffm_zero_alpha_is_mean(rng):
    sffm = SFFM(3, 4)
    levels = [Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32)) for _ in range(3)]
    out = sffm(levels).data
    np.testing.assert_allclose(out, np.mean([t.data for t in levels], axis=0), atol=1e-6)
    np.testing.assert_allclose(sffm.last_weights, 1 / 3, atol=1e-7)


def test_sffm_matches_scalar_oracle(rng):
    sffm = SFFM(4, 6)
    for a in sffm.alphas:
        a.data[...] = rng.standard_normal(a.shape)
    levels = [rng.standard_normal((2, 6, 5, 4)).astype(np.float32) for _ in range(4)]
    got = sffm([Tensor(v) for v in levels]).data
    ref, w = oracles.sffm_loops(levels, [a.data for a in sffm.alphas])
    assert np.abs(got - ref).max() < 1e-5
    assert np.abs(sffm.last_weights - w).max() < 1e-6


def test_sffm_shape_errors():
    sffm = SFFM(2, 4)
    with pytest.raises(ShapeError):
        sffm([Tensor(np.zeros((1, 4, 2, 2)))])
    with pytest.raises(ShapeError):
        sffm([Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 4, 3, 2)))])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2 ** 20))
def test_sffm_convexity(m, c, seed):
    r = np.random.default_rng(seed)
    sffm = SFFM(m, c, np.float64)
    for a in sffm.alphas:
        a.data[...] = r.standard_normal(a.shape) * 3
    levels = [r.standard_normal((2, c, 3, 3)) for _ in range(m)]
    out = sffm([Tensor(v, dtype=np.float64) for v in levels]).data
    w = sffm.last_weights
    assert np.all(w > 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    stack = np.stack(levels)
    assert np.all(out >= stack.min(axis=0) - 1e-9)
    assert np.all(out <= stack.max(axis=0) + 1e-9)


# --- upsampler / network ---------------------------------------------------

@pytest.mark.parametrize("scale,count", [(2, conv_params(48, 192, 1)), (3, conv_params(48, 432, 1)),
                                         (4, 2 * (48 * 192 + 192))])
def test_upsampler_shapes_and_counts(scale, count):
    up = build_upsampler(scale)
    assert up.num_params() == count
    out = up(Tensor(np.zeros((1, 48, 8, 8))))
    assert out.shape == (1, 48, 8 * scale, 8 * scale)
    with pytest.raises(ValueError):
        build_upsampler(5)


def test_scale2_expands_to_192():
    assert build_upsampler(2).convs[0].spec.out_channels == 192


@pytest.mark.parametrize("variant", ["full", "no_sffm", "residual_baseline"])
@pytest.mark.parametrize("scale", [2, 3, 4])
def test_network_output_extent(variant, scale):
    net = build_network(tiny(variant=variant, scale=scale))
    init_weights(net.store, 0)
    y = net(Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 5, 7))))
    assert y.shape == (1, 3, 5 * scale, 7 * scale)


def test_network_rejects_non_rgb():
    net = build_network(tiny())
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 1, 4, 4))))


def test_zero_body_network_is_head_upsample_tail(rng):
    net = build_network(tiny())
    init_weights(net.store, 3)
    for name, t in net.named_parameters():
        if name.startswith(("module.", "fuse.", "sffm.")):
            t.data[...] = 0
    x = Tensor(rng.uniform(0, 1, (1, 3, 6, 6)).astype(np.float32))
    direct = net.tail(net.upsample(net.head(x))).data
    np.testing.assert_allclose(net(x).data, direct, atol=1e-6)


def test_forward_is_bit_deterministic(rng):
    net = build_network(tiny())
    init_weights(net.store, 1)
    x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    assert net(x).data.tobytes() == net(x).data.tobytes()


@pytest.mark.parametrize("variant", ["full", "no_sffm", "residual_baseline"])
def test_every_parameter_receives_gradient(variant, rng):
    net = build_network(NetworkSpec(blocks=1, modules=2, scale=2, variant=variant))
    randomized(net, 5)
    if net.sffm is not None:
        for a in net.sffm.alphas:
            a.data[...] = rng.standard_normal(a.shape) * 0.1
    x = Tensor(rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32))
    target = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32))
    with Tape() as tape:
        loss = ops.l1_loss(net(x), target)
    grads = backward(loss, tape)
    dead = [n for n, t in net.named_parameters() if np.abs(grads.get(t, 0)).sum() == 0]
    assert not dead


@pytest.mark.parametrize("preset,target,tol", [("lffn", 1531e3, 0.02), ("lffn-s", 183e3, 0.05),
                                               ("lffn-nf", 1497e3, 0.05), ("lffn-ns", 4770e3, 0.05)])
def test_network_param_counts(preset, target, tol):
    n = build_network(NetworkSpec.preset(preset, 4)).num_params()
    assert abs(n - target) / target < tol


# --- init -------------------------------------------------------------------

def test_init_is_deterministic_and_he_scaled():
    a = init_weights(build_network(tiny()).store, 7)
    b = init_weights(build_network(tiny()).store, 7)
    assert a.to_bytes() == b.to_bytes()
    c = init_weights(build_network(tiny()).store, 8)
    assert a.to_bytes() != c.to_bytes()
    for name, t in a.items():
        if name.endswith(".bias"):
            assert np.all(t.data == 0)
        if name.endswith(".slope"):
            assert np.all(t.data == 0.25)


def test_init_variance_of_64_channel_kernel():
    blk = build_residual_baseline()
    init_weights(WeightStore(blk.named_parameters()), 0)
    w = blk.conv1.weight.data
    assert w.size == 36864
    target = 2 / (3 * 3 * 64)
    assert abs(w.var() - target) / target < 0.10
    assert abs(w.mean()) < 3 * np.sqrt(target / w.size)


def test_init_rejects_unknown_parameter():
    with pytest.raises(KeyError):
        init_weights(WeightStore(mystery=Tensor(np.zeros(2))), 0)


# --- weight container ---------------------------------------------------------

def test_container_roundtrip_is_bit_exact(tmp_path):
    store = init_weights(build_network(tiny(depthwise=True)).store, 2)
    path = tmp_path / "w.lffn"
    store.save(path)
    back = WeightStore.load(path)
    assert list(back) == list(store)
    for name in store:
        assert back[name].data.tobytes() == store[name].data.tobytes()
    assert back.to_bytes() == path.read_bytes()


def test_container_layout():
    store = WeightStore(a=Tensor(np.array([[1.0, 2.0, 3.0]], np.float32)))
    raw = store.to_bytes()
    expected = (b"LFFN" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (1).to_bytes(2, "little")
                + b"a" + bytes([2]) + (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
                + np.array([1, 2, 3], "<f4").tobytes())
    assert raw == expected


def test_container_rejects_damage():
    raw = init_weights(build_network(tiny()).store, 0).to_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0", raw[:4] + (9).to_bytes(4, "little") + raw[8:]):
        with pytest.raises(FormatError):
            WeightStore.from_bytes(bad)


def test_store_names_are_unique_and_complete():
    net = build_network(NetworkSpec.preset("lffn", 4))
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert net.store.num_elements() == net.num_params()
    assert "module.3.block.1.explore.b2.conv1.weight" in names


@pytest.mark.parametrize("spec", [tiny(), tiny(scale=3), tiny(scale=4, depthwise=True),
                                  tiny(variant="no_sffm"), tiny(variant="residual_baseline")])
def test_spec_recovered_from_store(spec):
    assert spec_from_store(build_network(spec).store) == spec


def test_load_into_checks_names():
    src = build_network(tiny()).store
    with pytest.raises(KeyError):
        src.load_into(build_network(tiny(variant="no_sffm")).store)
