"""Parameter and Mult-Adds accounting, plus SFFM weight extraction."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lffn.arch import (LFFN, SFFM, Conv, Layer, NetworkSpec, PReLU, build_network, build_residual_baseline,
                       build_spindle_block)
from lffn.imaging import ImagePlane
from lffn.ops import ConvSpec
from lffn.tensor import Tensor


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    mult_adds: int


@dataclass
class CostReport:
    rows: list[CostRow]
    hr_resolution: tuple[int, int] | None = None
    lr_resolution: tuple[int, int] | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_mult_adds(self) -> int:
        return sum(r.mult_adds for r in self.rows)

    def header(self) -> list[str]:
        out = []
        if self.hr_resolution:
            out.append("HR %dx%d, backbone evaluated at LR %dx%d" % (*self.hr_resolution, *self.lr_resolution))
        return out + self.notes

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"# {h}" for h in self.header()]
        lines.append(f"{'layer':<{width}}  {'params':>10}  {'mult_adds':>16}")
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>10d}  {r.mult_adds:>16d}")
        lines.append(f"{'TOTAL':<{width}}  {self.total_params:>10d}  {self.total_mult_adds:>16d}")
        lines.append(f"# params {self.total_params / 1e3:.1f}K, mult-adds {self.total_mult_adds / 1e9:.1f}G")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "mult_adds"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.mult_adds])
        w.writerow(["TOTAL", self.total_params, self.total_mult_adds])
        return buf.getvalue()


def _named_layers(layer: Layer, prefix: str = ""):
    yield prefix.rstrip("."), layer
    for name, child in layer._children.items():
        yield from _named_layers(child, f"{prefix}{name}.")


def count_params(spec: NetworkSpec | Layer) -> CostReport:
    """One row per named parameter tensor (weights, biases, PReLU slopes)."""
    net = build_network(spec) if isinstance(spec, NetworkSpec) else spec
    return CostReport([CostRow(n, t.size, 0) for n, t in net.named_parameters()])


def lr_extent(hr_w: int, hr_h: int, scale: int) -> tuple[int, int]:
    return hr_w // scale, hr_h // scale


def conv_mult_adds(cs: ConvSpec, h: int, w: int) -> int:
    """kh * kw * (c_in / groups) * c_out per output pixel of an h x w input."""
    kh, kw = cs.kernel
    ho, wo = cs.output_hw(h, w)
    return kh * kw * (cs.in_channels // cs.groups) * cs.out_channels * ho * wo


def count_mult_adds(spec: NetworkSpec, hr_w: int = 1280, hr_h: int = 720) -> CostReport:
    """Multiply-accumulates of one forward pass producing an hr_w x hr_h image.

    Convs cost kh*kw*(c_in/groups)*c_out per output pixel, dense layers
    c_in*c_out per level; activations, additions, pooling and softmax are
    free.  Rows carry the parameter count of the layer's weight tensors
    so that the report doubles as a per-layer parameter table.
    """
    net = build_network(spec)
    lw, lh = lr_extent(hr_w, hr_h, spec.scale)
    rows = []
    for name, layer in _named_layers(net):
        if isinstance(layer, Conv):
            h, w = lh, lw
            if name.startswith("upsample."):
                stage = int(name.split(".")[1])
                mult = int(np.prod(net.upsample.factors[:stage]))
                h, w = lh * mult, lw * mult
            elif name == "tail":
                h, w = lh * spec.scale, lw * spec.scale
            rows.append(CostRow(name, layer.num_params(), conv_mult_adds(layer.spec, h, w)))
        elif isinstance(layer, SFFM):
            for i, a in enumerate(layer.alphas):
                rows.append(CostRow(f"{name}.level.{i}", a.size, a.shape[0] * a.shape[1]))
        elif isinstance(layer, PReLU):
            rows.append(CostRow(name, layer.num_params(), 0))
    notes = []
    if hr_w % spec.scale or hr_h % spec.scale:
        notes.append(f"LR extents floored: {hr_w}/{spec.scale} -> {lw}, {hr_h}/{spec.scale} -> {lh}")
    return CostReport(rows, (hr_w, hr_h), (lw, lh), notes)


def block_param_ratio(depthwise: bool = False, spec: NetworkSpec | None = None) -> float:
    """params(spindle block) / params(64-wide residual block)."""
    spec = (spec or NetworkSpec()).with_(depthwise=depthwise)
    spindle = build_spindle_block(spec).num_params()
    residual = build_residual_baseline(spec.extended_channels).num_params()
    return spindle / residual


def dump_sffm_weights(net: LFFN, image) -> np.ndarray:
    """(M, C) matrix of fusion weights w_ij for one RGB image (h, w, 3).

    Column j holds the level distribution of channel j and sums to 1.
    """
    if net.sffm is None:
        raise ValueError(f"variant {net.spec.variant!r} has no softmax fusion weights")
    px = image.data if isinstance(image, ImagePlane) else np.asarray(image)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected an RGB image (h, w, 3), got {px.shape}")
    net.features(Tensor(px.transpose(2, 0, 1)[None], dtype=net.dtype))
    return net.sffm.last_weights[0].astype(np.float64)


def write_sffm_csv(weights: np.ndarray, path) -> None:
    m, c = weights.shape
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level"] + [f"ch{j}" for j in range(c)])
        for i in range(m):
            w.writerow([i] + [repr(float(v)) for v in weights[i]])
