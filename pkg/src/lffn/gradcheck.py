"""Finite-difference checks of tape gradients.

All checks run in float64 with central differences (step 1e-3).  A
non-scalar output is reduced with a fixed random projection so that
symmetric reductions (e.g. a softmax summing to one) cannot hide errors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from lffn import ops
from lffn.arch import NetworkSpec, build_network, build_residual_baseline, build_spindle_block, init_weights
from lffn.arch import SFFM
from lffn.oracles import numeric_grad, rel_error
from lffn.tensor import Tape, Tensor, backward

OP_TOL = 1e-3
COMPOSITE_TOL = 1e-2
STEP = 1e-3


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
              step: float = STEP, max_probes: int | None = None) -> float:
    """Worst relative error over every input that requires grad.

    ``fn(*inputs)`` may return any shape; it is projected onto a random
    direction drawn once from ``rng``.  With ``max_probes`` only that many
    random entries of each larger input are differenced, skipping
    entries that sit on a kink of the function.
    """
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)

    def scalar():
        return float(ops.weighted_sum(fn(*inputs), proj).data)

    with Tape() as tape:
        loss = ops.weighted_sum(fn(*inputs), proj)
    grads = backward(loss, tape)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        ana_full = grads.get(t, np.zeros(t.shape))
        if max_probes is None or t.size <= max_probes:
            worst = max(worst, rel_error(ana_full, numeric_grad(scalar, t.data, step)))
            continue
        ana, num = _smooth_probes(scalar, t, ana_full, step, max_probes, rng)
        worst = max(worst, rel_error(ana, num))
    return worst


def _smooth_probes(scalar, t: Tensor, ana_full, step, count, rng):
    """Central differences at ``count`` random entries where f is smooth.

    An entry whose difference at ``step`` disagrees with the one at
    ``step / 4`` straddles a PReLU kink and is replaced by another; more
    than ``count`` rejections is reported as a failure.
    """
    ana, num, rejected = [], [], 0
    for flat in rng.permutation(t.size):
        idx = np.unravel_index(flat, t.shape)
        coarse = numeric_grad(scalar, t.data, step, [idx])[idx]
        fine = numeric_grad(scalar, t.data, step / 4, [idx])[idx]
        if abs(coarse - fine) > 1e-3 * (abs(coarse) + abs(fine)) + 1e-9:
            rejected += 1
            if rejected > count:
                raise AssertionError(f"{t.name or 'tensor'}: too many non-smooth probes")
            continue
        ana.append(ana_full[idx])
        num.append(coarse)
        if len(ana) == count:
            break
    return np.array(ana), np.array(num)


def _t(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def op_checks(seed: int = 0) -> list[GradCheck]:
    """One check per differentiable primitive on 1x4x5x5-scale operands."""
    rng = np.random.default_rng(seed)
    res = []

    def add(name, fn, inputs):
        res.append(GradCheck(name, gradcheck(fn, inputs, rng), OP_TOL))

    s = ops.ConvSpec(4, 3, 3, 1, 1)
    add("conv2d", lambda x, w, b: ops.conv2d(x, w, b, s), [_t(rng, 1, 4, 5, 5), _t(rng, 3, 4, 3, 3), _t(rng, 3)])
    s2 = ops.ConvSpec(4, 4, 3, 1, 1, groups=4)
    add("conv2d_depthwise", lambda x, w, b: ops.conv2d(x, w, b, s2),
        [_t(rng, 1, 4, 5, 5), _t(rng, 4, 1, 3, 3), _t(rng, 4)])
    s3 = ops.ConvSpec(4, 6, 3, 2, 1, groups=2)
    add("conv2d_grouped_stride2", lambda x, w, b: ops.conv2d(x, w, b, s3),
        [_t(rng, 1, 4, 5, 5), _t(rng, 6, 2, 3, 3), _t(rng, 6)])
    s4 = ops.ConvSpec(4, 5, 1, 1, 0)
    add("conv2d_1x1", lambda x, w, b: ops.conv2d(x, w, b, s4), [_t(rng, 2, 4, 5, 5), _t(rng, 5, 4, 1, 1), _t(rng, 5)])
    add("dense", lambda x, w: ops.dense(x, w), [_t(rng, 2, 4), _t(rng, 3, 4)])
    add("dense_bias", ops.dense, [_t(rng, 4), _t(rng, 3, 4), _t(rng, 3)])
    # keep inputs away from the kink so the +-step probe stays on one side
    xp = rng.standard_normal((1, 4, 5, 5))
    xp = np.where(np.abs(xp) < 0.05, 0.5, xp)
    add("prelu", ops.prelu, [Tensor(xp, True, dtype=np.float64), _t(rng, 4)])
    add("softmax", lambda x: ops.softmax(x, axis=1), [_t(rng, 2, 5, 3)])
    add("global_avg_pool", ops.global_avg_pool, [_t(rng, 1, 4, 5, 5)])
    add("pixel_shuffle", lambda x: ops.pixel_shuffle(x, 2), [_t(rng, 1, 8, 3, 3)])
    add("pixel_unshuffle", lambda x: ops.pixel_unshuffle(x, 2), [_t(rng, 1, 2, 4, 4)])
    add("concat_channels", lambda a, b: ops.concat_channels([a, b]), [_t(rng, 1, 2, 5, 5), _t(rng, 1, 3, 5, 5)])
    add("slice_channels", lambda x: ops.concat_channels(ops.slice_channels(x, [(2, 4), (0, 2)])),
        [_t(rng, 1, 4, 5, 5)])
    add("stack_take", lambda a, b: ops.take(ops.stack([a, b], axis=1), 1, axis=1), [_t(rng, 2, 4), _t(rng, 2, 4)])
    add("add", ops.add, [_t(rng, 1, 4, 5, 5), _t(rng, 1, 4, 5, 5)])
    add("scale_channels", ops.scale_channels, [_t(rng, 1, 4, 5, 5), _t(rng, 4)])
    add("scale_channels_per_sample", ops.scale_channels, [_t(rng, 2, 4, 5, 5), _t(rng, 2, 4)])
    target = Tensor(rng.standard_normal((1, 4, 5, 5)), dtype=np.float64)
    add("l1_loss", lambda x: ops.l1_loss(x, target), [_t(rng, 1, 4, 5, 5)])
    return res


def _params_checked(layer, fn, x: Tensor, rng, probes: int) -> float:
    params = layer.parameters()
    return gradcheck(lambda xx, *ps: fn(xx), [x, *params], rng, max_probes=probes)


def _randomise(store, rng):
    init_weights(store, int(rng.integers(1 << 31)))
    for name, t in store.items():
        if name.endswith((".bias", ".slope")):
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape) if name.endswith(".bias") else rng.uniform(0.05, 0.5, t.shape)


def _store(layer):
    from lffn.weights import WeightStore
    return WeightStore(layer.named_parameters())


def composite_checks(seed: int = 0, probes: int = 4) -> list[GradCheck]:
    """Spindle block, residual block, SFFM and a B1M2 network on 8x8 input."""
    rng = np.random.default_rng(seed)
    res = []
    spec = NetworkSpec(blocks=1, modules=2, scale=2)
    for name, layer in [("spindle_block", build_spindle_block(spec, np.float64)),
                        ("spindle_block_depthwise", build_spindle_block(spec.with_(depthwise=True), np.float64)),
                        ("residual_block", build_residual_baseline(64, np.float64))]:
        _randomise(_store(layer), rng)
        x = _t(rng, 1, layer.in_channels, 4, 4)
        res.append(GradCheck(name, _params_checked(layer, layer, x, rng, probes), COMPOSITE_TOL))

    sffm = SFFM(3, 6, np.float64)
    for a in sffm.alphas:
        a.data[...] = rng.standard_normal(a.shape)
    levels = [_t(rng, 2, 6, 4, 4) for _ in range(3)]
    err = gradcheck(lambda *ts: sffm(list(ts[:3])), [*levels, *sffm.alphas], rng)
    res.append(GradCheck("sffm", err, COMPOSITE_TOL))

    for variant in ("full", "no_sffm", "residual_baseline"):
        net = build_network(spec.with_(variant=variant), np.float64)
        _randomise(net.store, rng)
        x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)), requires_grad=True, dtype=np.float64)
        res.append(GradCheck(f"network_B1M2_{variant}", _params_checked(net, net, x, rng, probes), COMPOSITE_TOL))
    return res


def all_checks(seed: int = 0) -> list[GradCheck]:
    return op_checks(seed) + composite_checks(seed)
