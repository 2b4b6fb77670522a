"""Training loop, evaluation and the fusion-structure benchmark."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataset import WindowSampler, window_indices
from .metrics import psnr, ssim
from .models import Checkpoint, EVDNet, FusionSpec, build, load_params, save_checkpoint, split_init
from .tensor import ContractError, MomentumState, mse_loss, resolve_dtype

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    spec: FusionSpec = field(default_factory=lambda: FusionSpec("K", 5, 2))
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 8
    max_iters: int = 1000
    seed: int = 0
    eval_every: int = 0
    crop: int = 64
    precision: str = "f64"
    output_bias: float = 1.0
    target_psnr: float | None = None  # stop once the eval PSNR reaches this
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.spec, str):
            self.spec = FusionSpec.parse(self.spec)
        for name in ("lr", "batch", "crop"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay", "max_iters", "eval_every"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative, got {getattr(self, name)}")
        resolve_dtype(self.precision)

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.key if isinstance(v, FusionSpec) else v
        return out

    @classmethod
    def from_dict(cls, values):
        """Build from string values (config files / CLI), ignoring unknown keys."""
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in kinds or v is None:
                continue
            if k == "spec":
                kw[k] = FusionSpec.parse(v) if isinstance(v, str) else v
            elif k in ("precision", "out_dir"):
                kw[k] = str(v)
            elif k in ("batch", "max_iters", "seed", "eval_every", "crop"):
                kw[k] = int(v)
            elif k == "target_psnr":
                kw[k] = None if str(v).lower() in ("", "none") else float(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # dicts: iteration, loss, psnr, ssim
    wall_clock: float = 0.0
    best_iteration: int | None = None
    best_ssim: float = -math.inf

    def add(self, iteration, loss, psnr_=None, ssim_=None):
        if self.rows and iteration < self.rows[-1]["iteration"]:
            raise ContractError("log iterations must be non-decreasing")
        self.rows.append({"iteration": iteration, "loss": loss, "psnr": psnr_, "ssim": ssim_})

    @property
    def losses(self):
        return [r["loss"] for r in self.rows if r["loss"] is not None]

    def evals(self):
        return [r for r in self.rows if r["ssim"] is not None]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "psnr", "ssim"])
            for r in self.rows:
                w.writerow([r["iteration"]] + ["" if r[k] is None else repr(r[k]) for k in ("loss", "psnr", "ssim")])


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: TrainLog
    net: EVDNet


def _init_net(config, init):
    spec = config.spec
    dtype = resolve_dtype(config.precision)
    if init is None:
        return build(spec, config.seed, dtype, config.output_bias), MomentumState()
    if isinstance(init, EVDNet):
        init = Checkpoint.from_net(init)
    src_spec = FusionSpec.parse(init.meta["spec"])
    if src_spec == spec:
        net = init.to_net(dtype)
        return net, init.momentum_state()
    if src_spec == FusionSpec.single():
        return split_init(init.to_net(dtype), spec), MomentumState()
    raise ContractError(f"init checkpoint spec {src_spec} incompatible with training spec {spec}")


def train(config, clips, init=None, val_clips=None, progress=None):
    """Run ``config.max_iters`` SGD steps on random windows from ``clips``.

    ``init`` may be a checkpoint/network of the same spec (training resumes
    with its momentum) or a single-frame one (split-initialized). Returns a
    :class:`TrainResult` with the best-validation-SSIM and final checkpoints;
    without ``val_clips`` the training clips are scored.
    """
    train_clips = [c for c in clips if c.split == "train"] or list(clips)
    if not train_clips:
        raise ContractError("training set is empty")
    net, state = _init_net(config, init)
    dtype = net.dtype
    start_iter = int(init.meta.get("iteration", 0)) if isinstance(init, Checkpoint) and \
        FusionSpec.parse(init.meta["spec"]) == config.spec else 0
    val = val_clips if val_clips else train_clips
    sampler = WindowSampler(train_clips, config.spec.window, config.batch, config.crop, config.seed)
    tlog = TrainLog()
    t0 = time.perf_counter()

    def snapshot(it):
        return Checkpoint.from_net(net, state, iteration=it, **_meta(config))

    final = best = snapshot(start_iter)
    last_good = best
    for it in range(start_iter + 1, start_iter + config.max_iters + 1):
        frames, target = sampler.next()
        frames = [f.astype(dtype, copy=False) for f in frames]
        out, cache = net.forward(frames)
        loss, grad = mse_loss(out, target.astype(dtype, copy=False))
        if not math.isfinite(loss):
            _save_last_good(config, last_good)
            raise TrainingError(f"non-finite loss at iteration {it}", last_good)
        grads, _ = net.backward(cache, grad)
        net.sgd_update(grads, state, config.lr, config.momentum, config.weight_decay)
        tlog.add(it, loss)
        done = it == start_iter + config.max_iters
        if (config.eval_every and it % config.eval_every == 0) or done:
            table = evaluate(net, val)
            tlog.rows[-1].update(psnr=table.mean_psnr, ssim=table.mean_ssim)
            last_good = snapshot(it)
            if table.mean_ssim > tlog.best_ssim:
                tlog.best_ssim, tlog.best_iteration, best = table.mean_ssim, it, last_good
            if progress:
                progress(it, loss, table)
            if config.target_psnr is not None and table.mean_psnr >= config.target_psnr:
                done = True
        if done:
            break
    tlog.wall_clock = time.perf_counter() - t0
    final = snapshot(tlog.rows[-1]["iteration"] if tlog.rows else start_iter)
    if not tlog.rows:
        best = final
    return TrainResult(best, final, tlog, net)


def _meta(config):
    return {"lr": config.lr, "momentum": config.momentum, "weight_decay": config.weight_decay,
            "batch": config.batch, "crop": config.crop, "train_seed": config.seed}


def _save_last_good(config, ckpt):
    if config.out_dir:
        path = Path(config.out_dir) / "last_good.evdn"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, path)
        log.error("saved last good checkpoint to %s", path)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalTable:
    rows: list  # (video id, psnr, ssim, n_frames)

    @property
    def mean_psnr(self):
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r[2] for r in self.rows]))

    def format(self):
        lines = [f"{'video':>10} {'PSNR':>9} {'SSIM':>7} frames"]
        for vid, p, s, n in self.rows:
            lines.append(f"{vid:>10} {p:9.4f} {s:7.4f} {n}")
        lines.append(f"{'mean':>10} {self.mean_psnr:9.4f} {self.mean_ssim:7.4f}")
        return "\n".join(lines)


def predict_clip(net, clip, frames=None):
    """Clamped predictions for every frame of ``clip`` (replicated edges)."""
    src = clip.hazy if frames is None else frames
    T = len(clip)
    dtype = net.dtype
    out = np.empty(src.shape, dtype=np.float64)
    for t0 in range(0, T, 32):
        ts = range(t0, min(T, t0 + 32))
        idx = [window_indices(T, t, net.window) for t in ts]
        window = [np.ascontiguousarray(src[[i[j] for i in idx]], dtype=dtype) for j in range(net.window)]
        out[t0:t0 + len(ts)] = net.forward(window)[0]
    return np.clip(out, 0, 1)


def evaluate_predictions(clips, predict):
    """Score ``predict(clip) -> (T, 3, h, w)`` against the clean frames."""
    if not clips:
        raise ContractError("evaluation split is empty")
    rows = []
    for clip in clips:
        pred = np.clip(np.asarray(predict(clip), dtype=np.float64), 0, 1)
        if pred.shape != clip.clean.shape:
            raise ContractError(f"prediction shape {pred.shape} != clean {clip.clean.shape}")
        ps = [psnr(pred[t], clip.clean[t]) for t in range(len(clip))]
        ss = [ssim(pred[t], clip.clean[t]) for t in range(len(clip))]
        rows.append((clip.id, float(np.mean(ps)), float(np.mean(ss)), len(clip)))
    return EvalTable(rows)


def evaluate(model, clips):
    """Per-video and mean PSNR/SSIM of a network or checkpoint on ``clips``."""
    net = model.to_net() if isinstance(model, Checkpoint) else model
    return evaluate_predictions(clips, lambda c: predict_clip(net, c))


# --------------------------------------------------------------------------
# fusion benchmark


@dataclass
class BenchRow:
    spec: FusionSpec
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    params: int = 0
    error: str | None = None

    def stats(self):
        p = np.array(self.psnr)
        s = np.array(self.ssim)
        sd = (lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0)
        return float(p.mean()), sd(p), float(s.mean()), sd(s)


def format_bench(rows):
    lines = [f"{'Methods':<38} {'PSNR':>16} {'SSIM':>16} {'params':>7}"]
    for r in rows:
        if r.error or not r.psnr:
            lines.append(f"{r.spec.label:<38} failed: {r.error}")
            continue
        mp, sp, ms, ss = r.stats()
        lines.append(f"{r.spec.label:<38} {mp:8.4f}+-{sp:6.4f} {ms:7.4f}+-{ss:7.4f} {r.params:7d}")
    return "\n".join(lines)


def fusion_bench(specs, clips, config, n_seeds=3, pretrain_iters=None, progress=None):
    """Train every spec under identical budgets and compare test PSNR/SSIM.

    Per seed, a single-frame model is first trained for ``pretrain_iters``
    (default ``config.max_iters``); every spec (including the single-frame
    baseline, if listed) is then split-initialized from it and trained for
    ``config.max_iters`` more iterations on the same window sequence.
    """
    if n_seeds < 1:
        raise ContractError("n_seeds must be >= 1")
    train_clips = [c for c in clips if c.split == "train"]
    test_clips = [c for c in clips if c.split != "train"]
    if not train_clips or not test_clips:
        raise ContractError("fusion bench needs both train and test clips")
    pre = config.max_iters if pretrain_iters is None else pretrain_iters
    rows = [BenchRow(FusionSpec.parse(s) if isinstance(s, str) else s) for s in specs]
    for r in rows:
        from .models import param_count
        r.params = param_count(r.spec)
    for k in range(n_seeds):
        seed = config.seed + k
        base_cfg = replace(config, spec=FusionSpec.single(), seed=seed, max_iters=pre, eval_every=0,
                           target_psnr=None)
        single = train(base_cfg, train_clips).net
        for r in rows:
            cfg = replace(config, spec=r.spec, seed=seed, eval_every=0, target_psnr=None)
            try:
                res = train(cfg, train_clips, init=Checkpoint.from_net(single))
                table = evaluate(res.net, test_clips)
            except (ContractError, TrainingError, FloatingPointError) as exc:
                log.error("bench row %s failed: %s", r.spec.key, exc)
                r.error = str(exc)
                continue
            r.psnr.append(table.mean_psnr)
            r.ssim.append(table.mean_ssim)
            if progress:
                progress(seed, r.spec, table)
    return rows
