"""Training recipe: dihedral-augmented patch sampling, L1 loss, Adam,
adjustable gradient clipping and a step-halving learning rate."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from lffn import imaging
from lffn.arch import LFFN, NetworkSpec, build_network, init_weights
from lffn.ops import l1_loss
from lffn.tensor import NonFiniteError, ShapeError, Tape, Tensor, backward
from lffn.weights import WeightStore

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "AdamState", "TrainResult", "TrainingError",
    "augment", "sample_batch", "l1_loss", "clip_gradients", "adam_step",
    "lr_schedule", "train_loop", "load_corpus", "write_loss_csv",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch: int = 16
    lr_patch: int = 32
    lr0: float = 8e-4
    halve_every: int = 20
    iters_per_epoch: int = 1000
    iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_theta: float = 0.01
    seed: int = 0

    FINE_TUNE_LR = 4e-4

    def __post_init__(self):
        for name in ("batch", "lr_patch", "halve_every", "iters_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if min(self.lr0, self.clip_theta, self.eps) <= 0:
            raise ValueError("lr0, clip_theta and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ------------------------------------------------------------------ sampling

def augment(px: np.ndarray, k: int) -> np.ndarray:
    """Dihedral transform k in 0..7: rotate by 90*(k % 4), then mirror if k >= 4."""
    out = np.rot90(px, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return out


def load_corpus(directory, min_size: int = 0) -> list[tuple[str, np.ndarray]]:
    """All PNGs under ``directory`` as (name, RGB array), sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {directory}")
    items = []
    for p in sorted(directory.glob("*.png")):
        img = imaging.load_png(p)
        px = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
        if min(px.shape[:2]) < min_size:
            raise ValueError(f"{p}: {px.shape[1]}x{px.shape[0]} is smaller than the {min_size}px HR patch")
        items.append((p.name, px))
    if not items:
        raise FileNotFoundError(f"no PNG images in {directory}")
    return items


def sample_batch(hr_corpus: Sequence[np.ndarray], scale: int, cfg: TrainConfig,
                 rng: np.random.Generator, return_meta: bool = False):
    """Draw ``cfg.batch`` (LR, HR) patch pairs as NCHW float32 arrays.

    Each sample picks an image, a dihedral augmentation and an HR crop of
    ``lr_patch * scale``; the LR patch is its bicubic downscale.  With
    ``return_meta`` a list of (image, aug, top, left) is returned too.
    """
    if not len(hr_corpus):
        raise ValueError("empty training corpus")
    hp, lp = cfg.lr_patch * scale, cfg.lr_patch
    lr = np.empty((cfg.batch, 3, lp, lp), dtype=np.float32)
    hr = np.empty((cfg.batch, 3, hp, hp), dtype=np.float32)
    meta = []
    for i in range(cfg.batch):
        idx = int(rng.integers(len(hr_corpus)))
        k = int(rng.integers(8))
        img = augment(hr_corpus[idx], k)
        h, w = img.shape[:2]
        if h < hp or w < hp:
            raise ValueError(f"corpus image {idx} ({w}x{h}) is smaller than the {hp}px HR patch")
        top = int(rng.integers(h - hp + 1))
        left = int(rng.integers(w - hp + 1))
        patch = img[top:top + hp, left:left + hp]
        hr[i] = patch.transpose(2, 0, 1)
        lr[i] = imaging.bicubic_resize(patch, 1, scale).transpose(2, 0, 1)
        meta.append((idx, k, top, left))
    return (lr, hr, meta) if return_meta else (lr, hr)


# ------------------------------------------------------------- optimisation

def clip_gradients(grads: dict, lr_current: float, theta: float) -> dict:
    """Clamp every element to +-theta / lr_current."""
    if lr_current <= 0:
        raise ValueError("learning rate must be positive")
    bound = theta / lr_current
    out = {}
    for p, g in grads.items():
        b = g.dtype.type(bound)
        if b > bound:
            b = np.nextafter(b, g.dtype.type(0))
        out[p] = np.clip(g, -b, b)
    return out


class AdamState:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[Tensor, np.ndarray] = {}
        self.v: dict[Tensor, np.ndarray] = {}
        self.t = 0


def adam_step(params: Sequence[Tensor], grads: dict, state: AdamState, lr: float) -> Sequence[Tensor]:
    """Bias-corrected Adam update applied in place; params without a
    gradient are left alone."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m = state.m.get(p)
        if m is None:
            m = state.m[p] = np.zeros_like(p.data)
            state.v[p] = np.zeros_like(p.data)
        v = state.v[p]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


# --------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    net: LFFN
    store: WeightStore
    trace: list  # (iter, epoch, lr, loss)


def train_loop(spec: NetworkSpec, corpus: Sequence[np.ndarray], cfg: TrainConfig,
               init: WeightStore | None = None, checkpoint_dir=None,
               callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run ``cfg.iterations`` sample/forward/L1/backward/clip/Adam steps.

    ``init`` resumes from existing weights (fine-tuning); otherwise the
    network is He-initialised from ``cfg.seed``.  With ``checkpoint_dir``
    the weights are written at every epoch end and on each new best loss.
    """
    net = build_network(spec)
    store = net.store
    if init is not None:
        init.load_into(store)
    else:
        init_weights(store, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    params = list(store.values())
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    best = np.inf
    trace = []
    for it in range(cfg.iterations):
        epoch = it // cfg.iters_per_epoch
        lr = lr_schedule(epoch, cfg)
        lr_b, hr_b = sample_batch(corpus, spec.scale, cfg, rng)
        try:
            with Tape() as tape:
                loss = l1_loss(net(Tensor(lr_b)), Tensor(hr_b))
            grads = backward(loss, tape)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite values at iteration {it} (epoch {epoch}, lr {lr:g}): {exc}") from exc
        grads = clip_gradients(grads, lr, cfg.clip_theta)
        adam_step(params, grads, state, lr)
        value = loss.item()
        trace.append((it, epoch, lr, value))
        if callback is not None:
            callback(it, value)
        if ckpt is not None:
            if value < best:
                best = value
                store.save(ckpt / "best.lffn")
            if (it + 1) % cfg.iters_per_epoch == 0:
                store.save(ckpt / f"epoch_{epoch:04d}.lffn")
        if it % 100 == 0:
            log.info("iter %d epoch %d lr %.2e loss %.5f", it, epoch, lr, value)
    return TrainResult(net, store, trace)


def write_loss_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "epoch", "lr", "loss"])
        for it, epoch, lr, loss in trace:
            w.writerow([it, epoch, repr(float(lr)), repr(float(loss))])
