"""Command-line interface: ``evdnet <command> [options]``.

Exit codes: 0 success, 1 contract/config error, 2 I/O error.
Settings resolve as command-line flag > ``--config`` file > default.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    MANIFEST,
    IngestError,
    load_dataset,
    make_toy_dataset,
    read_rgb,
    save_clips,
    synthesize_dataset,
    window_indices,
    write_rgb,
)
from .joint import (
    JointConfig,
    TreeNet,
    TreeSpec,
    assemble_tree,
    build_head,
    class_scores,
    detection_samples,
    train_head,
    tree_map,
    two_step_train,
)
from .models import TABLE1_SPECS, Checkpoint, CheckpointError, FusionSpec, build, load_checkpoint, save_checkpoint
from .tensor import ContractError
from .trainer import TrainConfig, TrainingError, evaluate, format_bench, fusion_bench, predict_clip, train

log = logging.getLogger("evdnet")

COMMANDS = ("synth", "toygen", "train", "dehaze", "eval", "fusion-bench", "joint-train", "joint-eval", "info")


class ConfigError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def read_config(path):
    """Plain ``key=value`` lines; ``#`` starts a comment; dashes become underscores."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    return values


def _global_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value config file (overridden by flags)")
    p.add_argument("--seed", type=int, help="master seed for all randomness (default 0)")
    p.add_argument("--precision", choices=("f32", "f64"), help="arithmetic precision (default f64)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return p


def _train_flags(p):
    p.add_argument("--spec", help="fusion spec: single, I:5, K2:5, J:3, ... (default K2:5)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")
    p.add_argument("--weight-decay", type=float, help="weight decay (default 1e-4)")
    p.add_argument("--batch", type=int, help="batch size (default 8)")
    p.add_argument("--iters", dest="max_iters", type=int, help="SGD iterations (default 1000)")
    p.add_argument("--crop", type=int, help="training crop size (default 64)")
    p.add_argument("--eval-every", type=int, help="evaluate every N iterations (0 = end only)")


def make_parser():
    g = _global_flags()
    parser = _Parser(prog="evdnet", description="End-to-end video dehazing and joint detection.",
                     parents=[g])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("toygen", parents=[g], help="write a procedural hazy video dataset")
    p.add_argument("--train", type=int, help="number of training videos (default 8)")
    p.add_argument("--test", type=int, help="number of test videos (default 2)")
    p.add_argument("--frames", type=int, help="frames per video (default 60)")
    p.add_argument("--size", type=int, help="frame height/width in pixels (default 64)")
    p.add_argument("--shapes", type=int, help="moving shapes per video (default 3)")

    p = sub.add_parser("synth", parents=[g], help="synthesize hazy frames for an RGB-D dataset")
    p.add_argument("--data", required=True, help="dataset root with manifest.txt")
    p.add_argument("--depth-scale", type=float, help="depth units per metre (default 5000)")

    p = sub.add_parser("train", parents=[g], help="train a dehazing network")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--init", help="checkpoint to resume or split-initialize from")
    _train_flags(p)

    p = sub.add_parser("dehaze", parents=[g], help="dehaze a directory of frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, help="frame directory (or video dir with hazy/)")

    p = sub.add_parser("eval", parents=[g], help="PSNR/SSIM of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split to score (default test)")

    p = sub.add_parser("fusion-bench", parents=[g], help="compare fusion structures")
    p.add_argument("--data", help="dataset root (default: procedural toy data)")
    p.add_argument("--specs", help="'table1' or comma-separated specs (default table1)")
    p.add_argument("--frames", help="comma-separated window sizes kept from the spec list")
    p.add_argument("--seeds", type=int, help="number of seeds (default 3)")
    p.add_argument("--pretrain-iters", type=int, help="single-frame pretraining iterations")
    p.add_argument("--no-single", action="store_true", help="omit the single-frame baseline row")
    _train_flags(p)

    p = sub.add_parser("joint-train", parents=[g], help="two-step joint dehazing+detection training")
    p.add_argument("--data", required=True)
    p.add_argument("--low-window", type=int, help="dehazing window WL (default 5)")
    p.add_argument("--high-window", type=int, help="detection window WH (default 3)")
    p.add_argument("--grid", type=int, help="detection grid size S (default 6)")
    p.add_argument("--budget", type=int, help="joint iterations (default 1000)")
    p.add_argument("--dehaze-iters", type=int, help="dehazing pretraining iterations (default 1000)")
    p.add_argument("--head-iters", type=int, help="single-frame head pretraining iterations (default 1000)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    p.add_argument("--batch", type=int, help="batch size (default 8)")
    p.add_argument("--mse-weight", type=float, help="auxiliary dehazing MSE weight in phase 2 (default 0)")

    p = sub.add_parser("joint-eval", parents=[g], help="toy MAP of a joint checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--overlays", action="store_true", help="also write PNG overlays")

    p = sub.add_parser("info", parents=[g], help="describe a checkpoint")
    p.add_argument("--checkpoint", required=True)
    return parser


def _resolve(args, defaults, keys):
    """Merge defaults < config file < explicit flags for ``keys``."""
    cfg = read_config(args.config) if args.config else {}
    out = dict(defaults)
    for k in keys:
        if k in cfg:
            out[k] = cfg[k]
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    out["seed"] = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out["precision"] = args.precision or cfg.get("precision", "f64")
    return out


def _out_dir(args, required=True):
    if args.out is None:
        if required:
            raise ConfigError("--out is required for this command")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out, command, resolved):
    if out is None:
        return
    lines = [f"command={command}"] + [f"{k}={v}" for k, v in sorted(resolved.items())]
    (out / "run_manifest.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_toygen(args):
    r = _resolve(args, {"train": 8, "test": 2, "frames": 60, "size": 64, "shapes": 3},
                 ("train", "test", "frames", "size", "shapes"))
    out = _out_dir(args)
    clips = make_toy_dataset(int(r["train"]), int(r["test"]), int(r["frames"]), int(r["size"]),
                             r["seed"], int(r["shapes"]))
    save_clips(out, clips)
    _write_run_manifest(out, "toygen", r)
    print(f"wrote {len(clips)} videos to {out}")
    return 0


def cmd_synth(args):
    r = _resolve(args, {"depth_scale": 5000.0}, ("depth_scale",))
    out = _out_dir(args)
    src = Path(args.data)
    if out.resolve() == src.resolve():
        raise ConfigError("--out must differ from --data (inputs are never modified)")
    records = synthesize_dataset(src, float(r["depth_scale"]), out)
    for rec in records:
        for sub in ("rgb", "depth", "labels"):
            d = src / rec.id / sub
            if d.is_dir():
                shutil.copytree(d, out / rec.id / sub, dirs_exist_ok=True)
    _write_run_manifest(out, "synth", r)
    print(f"synthesized {len(records)} videos into {out}")
    return 0


_TRAIN_KEYS = ("spec", "lr", "momentum", "weight_decay", "batch", "max_iters", "crop", "eval_every")


def _train_config(r):
    return TrainConfig.from_dict({k: r.get(k) for k in _TRAIN_KEYS + ("seed", "precision")})


def cmd_train(args):
    r = _resolve(args, {}, _TRAIN_KEYS)
    out = _out_dir(args)
    config = replace(_train_config(r), out_dir=str(out))
    clips = load_dataset(args.data)
    train_clips = [c for c in clips if c.split == "train"]
    val = [c for c in clips if c.split != "train"] or None
    init = load_checkpoint(args.init) if args.init else None
    progress = None
    if args.verbose:
        progress = lambda it, loss, t: log.info("iter %d loss %.6f psnr %.3f ssim %.4f", it, loss, t.mean_psnr, t.mean_ssim)
    res = train(config, train_clips, init=init, val_clips=val, progress=progress)
    save_checkpoint(res.final, out / "final.evdn")
    save_checkpoint(res.best, out / "best.evdn")
    res.log.to_csv(out / "train_log.csv")
    _write_run_manifest(out, "train", config.as_dict())
    last = res.log.evals()[-1] if res.log.evals() else None
    print(f"trained {config.spec.label}: {len(res.log.rows)} iterations"
          + (f", PSNR {last['psnr']:.3f} SSIM {last['ssim']:.4f}" if last else ""))
    return 0


def _load_net(path, precision=None):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("spec", "").startswith("tree:"):
        raise ConfigError(f"{path} is a joint checkpoint; use joint-eval")
    return ckpt.to_net(precision)


def _frame_paths(directory):
    d = Path(directory)
    if (d / "hazy").is_dir():
        d = d / "hazy"
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise IngestError(f"no frames found in {d}")
    return paths


def cmd_dehaze(args):
    r = _resolve(args, {}, ())
    out = _out_dir(args)
    net = _load_net(args.checkpoint, r["precision"])
    paths = _frame_paths(args.input)
    frames = np.stack([read_rgb(p) for p in paths])
    T = len(frames)
    for t, p in enumerate(paths):
        idx = window_indices(T, t, net.window)
        window = [frames[i][None].astype(net.dtype) for i in idx]
        write_rgb(out / (p.stem + ".png"), net.dehaze(window)[0])
    _write_run_manifest(out, "dehaze", {**r, "checkpoint": args.checkpoint, "input": args.input})
    print(f"dehazed {T} frames into {out}")
    return 0


def cmd_eval(args):
    r = _resolve(args, {"split": "test"}, ("split",))
    out = _out_dir(args, required=False)
    net = _load_net(args.checkpoint, r["precision"])
    clips = load_dataset(args.data, split=r["split"])
    if not clips:
        raise ConfigError(f"no videos in split {r['split']!r}")
    table = evaluate(net, clips)
    print(table.format())
    if out:
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["video", "psnr", "ssim", "frames"])
            w.writerows(table.rows)
        _write_run_manifest(out, "eval", {**r, "checkpoint": args.checkpoint})
    return 0


def bench_specs(text, frames=None):
    if text in (None, "", "table1"):
        specs = list(TABLE1_SPECS)
    else:
        specs = [FusionSpec.parse(s) for s in text.split(",") if s.strip()]
    if frames:
        keep = {int(f) for f in str(frames).split(",")}
        specs = [s for s in specs if s.window in keep]
    return specs


def cmd_fusion_bench(args):
    keys = _TRAIN_KEYS + ("specs", "frames", "seeds", "pretrain_iters")
    r = _resolve(args, {"specs": "table1", "seeds": 3, "max_iters": 500, "lr": 0.01, "crop": 32}, keys)
    out = _out_dir(args, required=False)
    specs = bench_specs(r["specs"], r.get("frames"))
    if not args.no_single and FusionSpec.single() not in specs:
        specs = [FusionSpec.single()] + specs
    if args.data:
        clips = load_dataset(args.data)
    else:
        clips = make_toy_dataset(8, 2, 60, 64, r["seed"])
    config = _train_config({**r, "spec": "single"})
    pre = int(r["pretrain_iters"]) if r.get("pretrain_iters") is not None else None
    progress = None
    if args.verbose:
        progress = lambda seed, spec, t: log.info("seed %d %s: PSNR %.4f SSIM %.4f", seed, spec.key, t.mean_psnr, t.mean_ssim)
    rows = fusion_bench(specs, clips, config, int(r["seeds"]), pre, progress)
    print(format_bench(rows))
    if out:
        with open(out / "fusion_bench.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "spec", "params", "psnr_mean", "psnr_sd", "ssim_mean", "ssim_sd", "error"])
            for row in rows:
                stats = row.stats() if row.psnr else ("", "", "", "")
                w.writerow([row.spec.label, row.spec.key, row.params, *stats, row.error or ""])
        _write_run_manifest(out, "fusion-bench", {**r, "specs": ",".join(s.key for s in specs)})
    return 0


def joint_pipeline(clips, spec, config, dehaze_iters=1000, head_iters=1000, precision="f64", progress=None):
    """Pretrain single-frame dehazer and head, split both into a tree, then
    run the two-step schedule. Returns the :class:`~evdnet.joint.TwoStepResult`."""
    train_clips = [c for c in clips if c.split == "train"]
    size = train_clips[0].clean.shape[2]
    if size % spec.grid:
        raise ConfigError(f"grid {spec.grid} does not divide frame size {size}")
    dcfg = TrainConfig(spec=FusionSpec.single(), lr=config.lr, batch=config.batch, max_iters=dehaze_iters,
                       seed=config.seed, crop=size, precision=precision)
    dehaze_single = train(dcfg, train_clips).net
    head = build_head(1, size // spec.grid, config.seed, precision)
    train_head(head, train_clips, head_iters, config.lr, config.batch, config.seed)
    tree = assemble_tree(spec, dehaze_single, head)
    if spec.dehaze_spec != FusionSpec.single() and dehaze_iters:
        tcfg = replace(dcfg, spec=spec.dehaze_spec, max_iters=max(1, dehaze_iters // 2))
        tree.dehaze = train(tcfg, train_clips, init=tree.dehaze).net
    return two_step_train(tree, train_clips, config)


def cmd_joint_train(args):
    keys = ("low_window", "high_window", "grid", "budget", "dehaze_iters", "head_iters", "lr", "batch", "mse_weight")
    r = _resolve(args, {"low_window": 5, "high_window": 3, "grid": 6, "budget": 1000, "dehaze_iters": 1000,
                        "head_iters": 1000, "lr": 0.01, "batch": 8, "mse_weight": 0.0}, keys)
    out = _out_dir(args)
    spec = TreeSpec(int(r["low_window"]), int(r["high_window"]), grid=int(r["grid"]))
    config = JointConfig(lr=float(r["lr"]), batch=int(r["batch"]), budget=int(r["budget"]), seed=r["seed"],
                         mse_weight=float(r["mse_weight"]))
    clips = load_dataset(args.data)
    if any(c.classes is None for c in clips):
        raise ConfigError("joint training needs label maps (<video>/labels)")
    res = joint_pipeline(clips, spec, config, int(r["dehaze_iters"]), int(r["head_iters"]), r["precision"])
    save_checkpoint(res.checkpoint, out / "joint.evdn")
    save_checkpoint(res.after_phase1, out / "joint_phase1.evdn")
    _write_run_manifest(out, "joint-train", r)
    result = tree_map(res.tree, clips)
    print(f"{spec.key}: toy MAP {result.map:.4f} " + " ".join(f"AP[{c}]={v:.4f}" for c, v in result.ap.items()))
    return 0


def _draw_cells(img, mask, color):
    img = img.copy()
    S = mask.shape[0]
    ph, pw = img.shape[1] // S, img.shape[2] // S
    for y, x in zip(*np.nonzero(mask)):
        y0, x0 = y * ph, x * pw
        for c in range(3):
            img[c, y0, x0:x0 + pw] = color[c]
            img[c, y0 + ph - 1, x0:x0 + pw] = color[c]
            img[c, y0:y0 + ph, x0] = color[c]
            img[c, y0:y0 + ph, x0 + pw - 1] = color[c]
    return img


def cmd_joint_eval(args):
    r = _resolve(args, {}, ())
    out = _out_dir(args, required=False)
    tree = TreeNet.from_checkpoint(load_checkpoint(args.checkpoint))
    clips = load_dataset(args.data, split="test") or load_dataset(args.data)
    result = tree_map(tree, clips)
    print(f"toy MAP {result.map:.4f} " + " ".join(f"AP[{c}]={v:.4f}" for c, v in result.ap.items()))
    if out:
        with open(out / "grid_predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["video", "frame", "cell_y", "cell_x", "objectness"]
                       + [f"class{c}" for c in range(tree.spec.num_classes)])
            for clip in clips:
                t = 0
                for frames, obj, cls in detection_samples([clip], tree.spec.overall, tree.spec.grid, 16):
                    logits, cache = tree.forward(frames)
                    scores = class_scores(logits)
                    p_obj = 1 / (1 + np.exp(-logits[:, 0]))
                    for b in range(logits.shape[0]):
                        for y in range(tree.spec.grid):
                            for x in range(tree.spec.grid):
                                w.writerow([clip.id, t + b, y, x, repr(float(p_obj[b, y, x]))]
                                           + [repr(float(v)) for v in scores[b, :, y, x]])
                        if args.overlays:
                            centre = np.clip(cache.dehazed[tree.spec.high_window // 2][b], 0, 1)
                            img = _draw_cells(centre, p_obj[b] > 0.5, (1.0, 1.0, 0.0))
                            write_rgb(out / "overlays" / clip.id / f"{t + b:04d}.png", img)
                    t += logits.shape[0]
        _write_run_manifest(out, "joint-eval", {**r, "checkpoint": args.checkpoint})
    return 0


def cmd_info(args):
    ckpt = load_checkpoint(args.checkpoint)
    n = sum(v.size for v in ckpt.tensors.values())
    spec = ckpt.meta.get("spec", "?")
    print(f"spec: {spec}")
    if not spec.startswith("tree:"):
        fs = FusionSpec.parse(spec)
        print(f"structure: {fs.label}")
        print(f"W: {fs.window}")
    print(f"parameters: {n}")
    print(f"iteration: {ckpt.meta.get('iteration', 0)}")
    for k in sorted(ckpt.meta):
        if k not in ("spec", "iteration", "W"):
            print(f"{k}: {ckpt.meta[k]}")
    _write_run_manifest(_out_dir(args, required=False), "info",
                        {**_resolve(args, {}, ()), "checkpoint": args.checkpoint})
    return 0


HANDLERS = {
    "toygen": cmd_toygen,
    "synth": cmd_synth,
    "train": cmd_train,
    "dehaze": cmd_dehaze,
    "eval": cmd_eval,
    "fusion-bench": cmd_fusion_bench,
    "joint-train": cmd_joint_train,
    "joint-eval": cmd_joint_eval,
    "info": cmd_info,
}


def run(argv=None):
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return HANDLERS[args.command](args)
    except (ContractError, TrainingError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
