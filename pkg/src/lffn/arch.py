"""LFFN topology: spindle blocks, fusion modules, softmax feature fusion,
sub-pixel upsampling, and He initialisation.

Layers are small callables holding named :class:`~lffn.tensor.Tensor`
parameters.  ``named_parameters()`` yields dotted names such as
``module.3.block.1.explore.b2.conv1.weight`` in a fixed order, which is
the order used by :class:`~lffn.weights.WeightStore`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from lffn import ops
from lffn.ops import ConvSpec
from lffn.tensor import DEFAULT_DTYPE, ShapeError, Tensor

VARIANTS = ("full", "no_sffm", "residual_baseline")
SCALES = (2, 3, 4)


@dataclass(frozen=True)
class NetworkSpec:
    blocks: int = 4
    modules: int = 15
    scale: int = 4
    depthwise: bool = False
    variant: str = "full"
    backbone_channels: int = 48
    extended_channels: int = 64
    group_width: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.scale not in SCALES:
            raise ValueError(f"unsupported scale {self.scale}; expected one of {SCALES}")
        if self.blocks < 1 or self.modules < 1:
            raise ValueError("blocks and modules must be positive")
        if self.extended_channels != 4 * self.group_width:
            raise ValueError("extended_channels must equal 4 * group_width")
        if self.backbone_channels >= self.extended_channels:
            raise ValueError("backbone_channels must be narrower than extended_channels")

    @property
    def width(self) -> int:
        """Channel count carried between blocks.

        The residual-baseline ablation runs its whole backbone at the
        extended width, like a plain 64-filter residual network.
        """
        if self.variant == "residual_baseline":
            return self.extended_channels
        return self.backbone_channels

    @classmethod
    def preset(cls, name: str, scale: int = 4) -> "NetworkSpec":
        try:
            kw = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(scale=scale, **kw)

    def with_(self, **changes) -> "NetworkSpec":
        return replace(self, **changes)


PRESETS = {
    "lffn": dict(blocks=4, modules=15),
    "lffn-s": dict(blocks=4, modules=4, depthwise=True),
    "lffn-nf": dict(blocks=4, modules=15, variant="no_sffm"),
    "lffn-ns": dict(blocks=4, modules=15, variant="residual_baseline"),
}


class Layer:
    """Container of parameters and child layers with stable naming."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Layer] = {}

    def add_param(self, name: str, shape, dtype) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())


class Conv(Layer):
    def __init__(self, spec: ConvSpec, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        self.weight = self.add_param("weight", spec.weight_shape, dtype)
        self.bias = self.add_param("bias", (spec.out_channels,), dtype) if spec.bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class PReLU(Layer):
    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.slope = self.add_param("slope", (channels,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.slope)


def conv3x3(cin: int, cout: int, groups: int = 1) -> ConvSpec:
    return ConvSpec(cin, cout, (3, 3), 1, 1, groups)


def conv1x1(cin: int, cout: int) -> ConvSpec:
    return ConvSpec(cin, cout, (1, 1), 1, 0, 1)


class Branch(Layer):
    """``depth`` stacked 3x3 convs; PReLU after each unless ``linear``."""

    def __init__(self, width: int, depth: int, linear: bool, depthwise: bool, dtype=DEFAULT_DTYPE):
        super().__init__()
        groups = width if depthwise else 1
        self.stages = []
        for i in range(depth):
            conv = self.add_child(f"conv{i}", Conv(conv3x3(width, width, groups), dtype))
            act = None if linear else self.add_child(f"prelu{i}", PReLU(width, dtype))
            self.stages.append((conv, act))

    def __call__(self, x: Tensor) -> Tensor:
        for conv, act in self.stages:
            x = conv(x)
            if act is not None:
                x = act(x)
        return x


class SpindleBlock(Layer):
    """x + refine(explore(extend(x))).

    extend: linear 1x1 widening to the extended width.  explore: split
    into four groups; group 0 passes one linear 3x3 conv, groups 1..3
    pass 1, 2, 3 stacked (3x3 conv, PReLU) stages.  refine: linear 1x1
    back to the backbone width.
    """

    def __init__(self, spec: NetworkSpec, dtype=DEFAULT_DTYPE):
        super().__init__()
        c, e, gw = spec.backbone_channels, spec.extended_channels, spec.group_width
        self.in_channels = c
        self.extend = self.add_child("extend", Conv(conv1x1(c, e), dtype))
        explore = self.add_child("explore", Layer())
        self.branches = [
            explore.add_child("b0", Branch(gw, 1, True, spec.depthwise, dtype)),
            explore.add_child("b1", Branch(gw, 1, False, spec.depthwise, dtype)),
            explore.add_child("b2", Branch(gw, 2, False, spec.depthwise, dtype)),
            explore.add_child("b3", Branch(gw, 3, False, spec.depthwise, dtype)),
        ]
        self.ranges = [(i * gw, (i + 1) * gw) for i in range(4)]
        self.refine = self.add_child("refine", Conv(conv1x1(e, c), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"spindle block expects {self.in_channels} channels, got {x.shape}")
        parts = ops.slice_channels(self.extend(x), self.ranges)
        explored = ops.concat_channels([br(p) for br, p in zip(self.branches, parts)])
        return ops.add(x, self.refine(explored))


class ResidualBlock(Layer):
    """conv3x3 - PReLU - conv3x3 plus identity skip."""

    def __init__(self, width: int = 64, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_channels = width
        self.conv1 = self.add_child("conv1", Conv(conv3x3(width, width), dtype))
        self.act = self.add_child("prelu", PReLU(width, dtype))
        self.conv2 = self.add_child("conv2", Conv(conv3x3(width, width), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"residual block expects {self.in_channels} channels, got {x.shape}")
        return ops.add(x, self.conv2(self.act(self.conv1(x))))


class FusionModule(Layer):
    """B blocks in sequence; all block outputs concatenated, fused by a
    1x1 conv, plus the module input."""

    def __init__(self, spec: NetworkSpec, dtype=DEFAULT_DTYPE):
        super().__init__()
        w = spec.width
        self.in_channels = w
        self.blocks = []
        for k in range(spec.blocks):
            blk = (ResidualBlock(w, dtype) if spec.variant == "residual_baseline"
                   else SpindleBlock(spec, dtype))
            self.blocks.append(self.add_child(f"block.{k}", blk))
        self.fuse = self.add_child("fuse", Conv(conv1x1(spec.blocks * w, w), dtype))

    @property
    def concat_width(self) -> int:
        return self.fuse.spec.in_channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"module expects {self.in_channels} channels, got {x.shape}")
        outs, h = [], x
        for blk in self.blocks:
            h = blk(h)
            outs.append(h)
        return ops.add(self.fuse(ops.concat_channels(outs)), x)


class SFFM(Layer):
    """Softmax feature fusion over M same-shaped levels.

    Each level is pooled to a channel vector, passed through its own
    bias-free dense layer, and the per-channel scores are normalised
    across levels with a softmax.  The output is the per-channel convex
    combination of the levels.  ``last_weights`` keeps the most recent
    (n, M, C) weights for inspection.
    """

    def __init__(self, levels: int, channels: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.alphas = [self.add_child(f"level.{i}", Layer()).add_param("weight", (channels, channels), dtype)
                       for i in range(levels)]
        self.last_weights: np.ndarray | None = None

    def __call__(self, levels: list[Tensor]) -> Tensor:
        if len(levels) != len(self.alphas):
            raise ShapeError(f"SFFM built for {len(self.alphas)} levels, got {len(levels)}")
        ref = levels[0].shape
        if any(t.shape != ref for t in levels):
            raise ShapeError("SFFM levels must share a shape")
        scores = [ops.dense(ops.global_avg_pool(m), a) for m, a in zip(levels, self.alphas)]
        weights = ops.softmax(ops.stack(scores, axis=1), axis=1)  # n, M, C
        self.last_weights = weights.data.copy()
        out = None
        for i, m in enumerate(levels):
            term = ops.scale_channels(m, ops.take(weights, i, axis=1))
            out = term if out is None else ops.add(out, term)
        return out


class Upsampler(Layer):
    """1x1 conv to C*r*r channels then pixel shuffle; x4 is two x2 stages."""

    def __init__(self, scale: int, channels: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        if scale not in SCALES:
            raise ValueError(f"unsupported scale {scale}")
        self.factors = [2, 2] if scale == 4 else [scale]
        self.convs = [self.add_child(str(i), Conv(conv1x1(channels, channels * r * r), dtype))
                      for i, r in enumerate(self.factors)]

    def __call__(self, x: Tensor) -> Tensor:
        for conv, r in zip(self.convs, self.factors):
            x = ops.pixel_shuffle(conv(x), r)
        return x


class LFFN(Layer):
    def __init__(self, spec: NetworkSpec, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        w = spec.width
        self.head = self.add_child("head", Conv(conv3x3(3, w), dtype))
        self.modules = [self.add_child(f"module.{d}", FusionModule(spec, dtype)) for d in range(spec.modules)]
        self.sffm = (self.add_child("sffm", SFFM(spec.modules, w, dtype))
                     if spec.variant != "no_sffm" else None)
        self.fuse = self.add_child("fuse", Conv(conv1x1(w, w), dtype))
        self.upsample = self.add_child("upsample", Upsampler(spec.scale, w, dtype))
        self.tail = self.add_child("tail", Conv(conv1x1(w, 3), dtype))

    def features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (M_0, fused features R) for an RGB batch."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"LFFN expects an (n, 3, h, w) RGB batch, got {x.shape}")
        m0 = self.head(x)
        levels, h = [], m0
        for mod in self.modules:
            h = mod(h)
            levels.append(h)
        r = self.sffm(levels) if self.sffm is not None else levels[-1]
        return m0, r

    def __call__(self, x: Tensor) -> Tensor:
        m0, r = self.features(x)
        return self.tail(self.upsample(ops.add(self.fuse(r), m0)))

    @property
    def store(self):
        from lffn.weights import WeightStore
        return WeightStore(self.named_parameters())


def build_spindle_block(spec: NetworkSpec, dtype=DEFAULT_DTYPE) -> SpindleBlock:
    return SpindleBlock(spec, dtype)


def build_residual_baseline(width: int = 64, dtype=DEFAULT_DTYPE) -> ResidualBlock:
    return ResidualBlock(width, dtype)


def build_module(spec: NetworkSpec, dtype=DEFAULT_DTYPE) -> FusionModule:
    return FusionModule(spec, dtype)


def build_upsampler(scale: int, channels: int = 48, dtype=DEFAULT_DTYPE) -> Upsampler:
    return Upsampler(scale, channels, dtype)


def build_network(spec: NetworkSpec, dtype=DEFAULT_DTYPE) -> LFFN:
    return LFFN(spec, dtype)


def he_std(shape: tuple) -> float:
    """sqrt(2 / fan_in) for a conv weight (o, i/g, kh, kw) or dense (o, i)."""
    fan_in = int(np.prod(shape[1:]))
    return float(np.sqrt(2.0 / fan_in))


def init_weights(store, seed: int = 0):
    """He-normal weights, zero biases, PReLU slopes 0.25; in place.

    Draws happen in store order from one generator, so the result depends
    only on the topology and ``seed``.
    """
    rng = np.random.default_rng(seed)
    for name, t in store.items():
        if name.endswith(".weight"):
            t.data[...] = rng.standard_normal(t.shape) * he_std(t.shape)
        elif name.endswith(".bias"):
            t.data[...] = 0
        elif name.endswith(".slope"):
            t.data[...] = 0.25
        else:
            raise KeyError(f"no initialiser for parameter {name!r}")
    return store


def spec_from_store(store) -> NetworkSpec:
    """Recover the NetworkSpec a weight store was built from (by names and shapes)."""
    names = list(store)
    try:
        width = store["head.weight"].shape[0]
        up = [n for n in names if n.startswith("upsample.") and n.endswith(".weight")]
        if len(up) == 2:
            scale = 4
        else:
            scale = int(round(np.sqrt(store["upsample.0.weight"].shape[0] / width)))
        modules = 1 + max(int(n.split(".")[1]) for n in names if n.startswith("module."))
        blocks = 1 + max(int(n.split(".")[3]) for n in names if n.startswith("module.0.block."))
    except (KeyError, ValueError, IndexError) as exc:
        raise ValueError(f"weight store does not describe an LFFN network: {exc}") from None
    if "module.0.block.0.conv1.weight" in store:
        variant = "residual_baseline"
    elif "sffm.level.0.weight" in store:
        variant = "full"
    else:
        variant = "no_sffm"
    depthwise = False
    if variant != "residual_baseline":
        depthwise = store["module.0.block.0.explore.b0.conv0.weight"].shape[1] == 1
    spec = NetworkSpec(blocks=blocks, modules=modules, scale=scale, depthwise=depthwise, variant=variant)
    if spec.width != width:
        raise ValueError(f"unexpected backbone width {width} for variant {variant}")
    return spec
