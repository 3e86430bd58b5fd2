"""Command-line entry point: ``lffn <command> [options]``.

Commands: train, eval, sr, analyze, dump-sffm, selftest.

Option precedence: command-line flags override values from ``--config``
(a JSON document with TrainConfig field names), which override the
built-in defaults.  Exit status is 0 on success, 1 on internal or
numerical failure and 2 on usage or path errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from lffn import analysis, imaging
from lffn.arch import PRESETS, NetworkSpec, build_network, spec_from_store
from lffn.tensor import Tensor
from lffn.train import TrainConfig, load_corpus, train_loop, write_loss_csv
from lffn.weights import FormatError, WeightStore

log = logging.getLogger("lffn")


class UsageError(Exception):
    """Bad arguments or paths; mapped to exit status 2."""


def worker_count() -> int:
    raw = os.environ.get("LFFN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"LFFN_THREADS must be an integer, got {raw!r}") from None


# ------------------------------------------------------------------ helpers

def _spec_from_args(args, default_preset: str = "lffn") -> NetworkSpec:
    try:
        spec = NetworkSpec.preset(args.preset or default_preset, args.scale or 4)
        changes = {}
        if args.blocks is not None:
            changes["blocks"] = args.blocks
        if args.modules is not None:
            changes["modules"] = args.modules
        if args.depthwise:
            changes["depthwise"] = True
        if args.variant is not None:
            changes["variant"] = args.variant
        return spec.with_(**changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_weights(path) -> WeightStore:
    if path is None:
        raise UsageError("--weights is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"weights file not found: {p}")
    try:
        return WeightStore.load(p)
    except FormatError as exc:
        raise UsageError(f"{p}: {exc}") from None


def load_model(args):
    """Network built to match the weight file; flags, if given, must agree."""
    store = _load_weights(args.weights)
    spec = spec_from_store(store)
    if args.scale is not None and args.scale != spec.scale:
        raise UsageError(f"weights are for x{spec.scale}, but --scale {args.scale} was requested")
    net = build_network(spec)
    store.load_into(net.store)
    return net


def super_resolve(net, lr_px: np.ndarray) -> np.ndarray:
    """RGB (h, w, 3) in [0, 1] -> clamped RGB (h*s, w*s, 3)."""
    out = net(Tensor(lr_px.transpose(2, 0, 1)[None]))
    return np.clip(out.data[0].transpose(1, 2, 0), 0.0, 1.0)


def _rgb(img: imaging.ImagePlane) -> np.ndarray:
    return img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)


def _input_image(path) -> np.ndarray:
    if path is None:
        raise UsageError("--input is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input image not found: {p}")
    return _rgb(imaging.load_png(p))


# ----------------------------------------------------------------- commands

def train_config(args) -> TrainConfig:
    values = {}
    if args.resume:
        values["lr0"] = TrainConfig.FINE_TUNE_LR
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        values.update(json.loads(p.read_text()))
    for flag in ("batch", "iterations", "iters_per_epoch", "lr0", "clip_theta", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def cmd_train(args) -> int:
    cfg = train_config(args)
    corpus_dir = Path(args.corpus) if args.corpus else None
    if corpus_dir is None or not corpus_dir.is_dir():
        raise UsageError(f"corpus directory not found: {corpus_dir}")
    if args.out is None:
        raise UsageError("--out (output directory) is required")
    out = Path(args.out)
    init = None
    if args.resume:
        init = _load_weights(args.resume)
        spec = spec_from_store(init)
    else:
        spec = _spec_from_args(args)
    try:
        corpus = [px for _, px in load_corpus(corpus_dir, cfg.lr_patch * spec.scale)]
    except (FileNotFoundError, ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    ckpt = out / "checkpoints" if args.checkpoints else None
    result = train_loop(spec, corpus, cfg, init=init, checkpoint_dir=ckpt)
    result.store.save(out / "weights.lffn")
    write_loss_csv(result.trace, out / "loss.csv")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    print(f"trained {len(result.trace)} iterations; final loss {result.trace[-1][3]:.6f}" if result.trace
          else "no iterations run")
    return 0


def evaluate_image(path: Path, scale: int, sr_fn: Callable[[np.ndarray], np.ndarray]) -> list[dict]:
    """Metrics of the model and of plain bicubic for one HR image."""
    return evaluate_image_array(_rgb(imaging.load_png(path)), scale, sr_fn, Path(path).name)


def evaluate_image_array(hr: np.ndarray, scale: int, sr_fn, name: str = "image") -> list[dict]:
    hr = imaging.modcrop(hr, scale)
    lr = imaging.bicubic_resize(hr, 1, scale)
    hr_y = imaging.rgb_to_ycbcr_y(hr)
    rows = []
    for method, up in (("lffn", sr_fn(lr)), ("bicubic", imaging.bicubic_resize(lr, scale, 1))):
        if up.shape != hr.shape:
            raise ValueError(f"output {up.shape} does not match HR {hr.shape}")
        y = imaging.rgb_to_ycbcr_y(imaging.quantize(up))
        rows.append(dict(image=name, scale=scale, method=method,
                         psnr_db=imaging.psnr_y(y, hr_y, scale), ssim=imaging.ssim_y(y, hr_y, scale)))
    return rows


def evaluate_dir(directory, scale: int, sr_fn, workers: int = 1) -> list[dict]:
    """Per-image rows (sorted by filename) followed by per-method averages."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise UsageError(f"no PNG images in {directory}")

    def one(p):
        try:
            return evaluate_image(p, scale, sr_fn)
        except (ValueError, OSError) as exc:
            log.warning("%s: %s", p.name, exc)
            return [dict(image=p.name, scale=scale, error=str(exc))]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_image = list(pool.map(one, paths))
    rows = [r for rs in per_image for r in rs]
    for method in ("lffn", "bicubic"):
        ok = [r for r in rows if r.get("method") == method]
        if ok:
            rows.append(dict(image="average", scale=scale, method=method,
                             psnr_db=float(np.mean([r["psnr_db"] for r in ok])),
                             ssim=float(np.mean([r["ssim"] for r in ok]))))
    return rows


def cmd_eval(args) -> int:
    if not args.corpus or not Path(args.corpus).is_dir():
        raise UsageError(f"HR image directory not found: {args.corpus}")
    net = load_model(args)
    rows = evaluate_dir(args.corpus, net.spec.scale, lambda lr: super_resolve(net, lr), worker_count())
    text = json.dumps(rows, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_sr(args) -> int:
    net = load_model(args)
    lr = _input_image(args.input)
    if args.out is None:
        raise UsageError("--out (output PNG) is required")
    imaging.save_png(super_resolve(net, lr), args.out)
    return 0


def cmd_analyze(args) -> int:
    spec = _spec_from_args(args)
    report = analysis.count_mult_adds(spec, args.hr_width, args.hr_height)
    text = report.to_text()
    ratios = (f"# block ratio spindle/residual {100 * analysis.block_param_ratio(False):.2f}%, "
              f"depthwise spindle/residual {100 * analysis.block_param_ratio(True):.2f}%")
    if args.out:
        body = report.to_csv() if str(args.out).endswith(".csv") else text + "\n" + ratios + "\n"
        Path(args.out).write_text(body)
    print(f"{spec}\n{text}\n{ratios}")
    return 0


def cmd_dump_sffm(args) -> int:
    net = load_model(args)
    img = _input_image(args.input)
    if args.out is None:
        raise UsageError("--out (CSV path) is required")
    try:
        weights = analysis.dump_sffm_weights(net, img)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    analysis.write_sffm_csv(weights, args.out)
    return 0


def cmd_selftest(args) -> int:
    from lffn.selftest import run
    return 0 if run(verbose=True) else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sr": cmd_sr,
    "analyze": cmd_analyze,
    "dump-sffm": cmd_dump_sffm,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lffn", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS))
    net = parser.add_argument_group("network")
    net.add_argument("--preset", choices=sorted(PRESETS))
    net.add_argument("--scale", type=int, choices=(2, 3, 4))
    net.add_argument("--blocks", type=int, metavar="B")
    net.add_argument("--modules", type=int, metavar="M")
    net.add_argument("--depthwise", action="store_true")
    net.add_argument("--variant", choices=("full", "no_sffm", "residual_baseline"))
    io = parser.add_argument_group("paths")
    io.add_argument("--weights", help="weight container (.lffn)")
    io.add_argument("--corpus", help="directory of HR PNGs (train/eval)")
    io.add_argument("--input", help="input PNG (sr, dump-sffm)")
    io.add_argument("--out", help="output file or directory")
    io.add_argument("--config", help="JSON training config")
    io.add_argument("--resume", metavar="WEIGHTS", help="fine-tune from weights (lr0 defaults to 4e-4)")
    io.add_argument("--checkpoints", action="store_true", help="write per-epoch and best-loss checkpoints")
    tr = parser.add_argument_group("training overrides")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--iters-per-epoch", dest="iters_per_epoch", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--lr0", type=float)
    tr.add_argument("--clip-theta", dest="clip_theta", type=float)
    an = parser.add_argument_group("analysis")
    an.add_argument("--hr-width", type=int, default=1280)
    an.add_argument("--hr-height", type=int, default=720)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lffn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"lffn {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
