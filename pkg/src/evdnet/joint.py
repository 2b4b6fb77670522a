"""Tree-structured joint dehazing + detection on toy scenes.

``WH`` overlapping low-level windows of ``WL`` hazy frames are dehazed by one
shared multi-frame network; the ``WH`` dehazed frames feed a multi-frame
grid detector whose first two conv layers run as separate branches and are
fused after the second layer. The overall temporal window is
``WL + WH - 1`` frames and the prediction is for its centre frame.

The detector is a stand-in for a region-based detector: on an ``S x S``
grid it predicts an objectness logit plus class logits per cell.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import window_indices
from .models import (
    Checkpoint,
    EVDNet,
    FusionSpec,
    Node,
    Program,
    build,
    load_params,
    split_init,
)
from .tensor import ConvLayer, ContractError, MomentumState, mse_loss, resolve_dtype

log = logging.getLogger(__name__)

NUM_CLASSES = 2
BRANCH_C = 8
FUSED_C = 16


@dataclass(frozen=True)
class TreeSpec:
    """Low-level window ``WL``, high-level window ``WH``; overall is derived."""

    low_window: int = 5
    high_window: int = 3
    dehaze: FusionSpec | None = None
    grid: int = 6
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        for w in (self.low_window, self.high_window):
            if w < 1 or w % 2 == 0:
                raise ContractError(f"tree windows must be odd and >= 1, got {w}")
        d = self.dehaze_spec
        if d.window != self.low_window:
            raise ContractError(f"dehaze spec window {d.window} != low window {self.low_window}")

    @property
    def overall(self):
        return self.low_window + self.high_window - 1

    @property
    def dehaze_spec(self):
        if self.dehaze is not None:
            return self.dehaze
        if self.low_window == 1:
            return FusionSpec.single()
        return FusionSpec("K", self.low_window, 2)

    @property
    def key(self):
        return f"tree:WL={self.low_window},WH={self.high_window},dehaze={self.dehaze_spec.key},S={self.grid}"

    @classmethod
    def parse(cls, text):
        body = text.split(":", 1)[1] if text.startswith("tree:") else text
        kv = dict(item.split("=", 1) for item in body.split(",") if item)
        return cls(int(kv.get("WL", 5)), int(kv.get("WH", 3)),
                   FusionSpec.parse(kv["dehaze"]) if "dehaze" in kv else None,
                   int(kv.get("S", 6)))


# --------------------------------------------------------------------------
# detector head


def head_topology(WH, grid_pool, num_classes, make_layer):
    nodes = []
    for j in range(WH):
        nodes.append(Node(f"b{j}.conv1", "conv", (f"frame:{j}",), make_layer("conv1", 3, 3, BRANCH_C),
                          relu=True, proto="conv1"))
        nodes.append(Node(f"b{j}.conv2", "conv", (f"b{j}.conv1",), make_layer("conv2", 3, BRANCH_C, BRANCH_C),
                          relu=True, proto="conv2"))
    nodes.append(Node("fuse1", "conv", tuple(f"b{j}.conv2" for j in range(WH)),
                      make_layer("fuse1", 3, BRANCH_C * WH, FUSED_C), relu=True, proto="fuse1",
                      segments=(("conv2", WH),)))
    nodes.append(Node("pool", "pool", ("fuse1",), pool=grid_pool))
    nodes.append(Node("fuse2", "conv", ("pool",), make_layer("fuse2", 1, FUSED_C, 1 + num_classes),
                      relu=False, proto="fuse2"))
    return nodes


POST_FUSION = ("fuse1", "fuse2")


class DetectorHead(Program):
    def __init__(self, nodes, WH, grid_pool, num_classes=NUM_CLASSES):
        super().__init__(nodes)
        self.WH = WH
        self.grid_pool = grid_pool
        self.num_classes = num_classes

    def branch_layers(self):
        return tuple(n.name for n in self.nodes if n.name.startswith("b"))


def build_head(WH, grid_pool, seed=0, precision="f64", num_classes=NUM_CLASSES):
    rng = np.random.default_rng([seed, 77])
    dtype = resolve_dtype(precision)

    def make_layer(proto, k, in_c, out_c):
        return ConvLayer.init(in_c, out_c, k, rng, dtype)

    return DetectorHead(head_topology(WH, grid_pool, num_classes, make_layer), WH, grid_pool, num_classes)


def split_init_head(single, WH):
    """Multi-branch head from a one-branch head (1/WH replication at fusion)."""
    if single.WH != 1:
        raise ContractError(f"split_init_head needs a single-branch head, got WH={single.WH}")
    src = {n.proto: n.layer for n in single.nodes if n.layer is not None}

    def make_layer(proto, k, in_c, out_c):
        layer = src[proto]
        if proto == "fuse1":
            w = np.concatenate([layer.weight / WH] * WH, axis=1)
            return ConvLayer(w, layer.bias.copy())
        return ConvLayer(layer.weight.copy(), layer.bias.copy())

    return DetectorHead(head_topology(WH, single.grid_pool, single.num_classes, make_layer),
                        WH, single.grid_pool, single.num_classes)


# --------------------------------------------------------------------------
# tree


@dataclass
class TreeCache:
    dehaze: list
    dehazed: list
    head: object


class TreeNet:
    """Shared dehazing network feeding a multi-frame detector head."""

    def __init__(self, spec, dehaze, head):
        if dehaze.window != spec.low_window or head.WH != spec.high_window:
            raise ContractError("tree components do not match the tree spec")
        self.spec = spec
        self.dehaze = dehaze
        self.head = head

    def params(self):
        out = {"dehaze/" + k: v for k, v in self.dehaze.params().items()}
        out.update({"head/" + k: v for k, v in self.head.params().items()})
        return out

    def n_params(self):
        return self.dehaze.n_params() + self.head.n_params()

    def dehazed_indices(self):
        """0-based indices of the frames the low-level windows are centred on."""
        r = self.spec.low_window // 2
        return tuple(k + r for k in range(self.spec.high_window))

    def forward(self, frames):
        frames = list(frames)
        if len(frames) != self.spec.overall:
            raise ContractError(f"tree expects {self.spec.overall} frames, got {len(frames)}")
        WL = self.spec.low_window
        caches, dehazed = [], []
        for k in range(self.spec.high_window):
            J, c = self.dehaze.forward(frames[k:k + WL])
            caches.append(c)
            dehazed.append(J)
        logits, hc = self.head.forward(dehazed)
        return logits, TreeCache(caches, dehazed, hc)

    def backward(self, cache, grad_logits, train_dehaze=True, train_branches=True, grad_dehazed=None):
        """Gradients keyed like :meth:`params`.

        ``grad_dehazed`` optionally adds extra gradients (e.g. an auxiliary
        MSE term) on the dehazed frames, one entry per application.
        """
        frozen = () if train_branches else self.head.branch_layers()
        hg, gJ = self.head.backward(cache.head, grad_logits, frozen=frozen, input_grads=train_dehaze)
        grads = {"head/" + k: v for k, v in hg.items()}
        if train_dehaze:
            total = {}
            for k, c in enumerate(cache.dehaze):
                g = gJ[k]
                if grad_dehazed is not None and grad_dehazed[k] is not None:
                    g = g + grad_dehazed[k]
                dg, _ = self.dehaze.backward(c, g)
                for name, v in dg.items():
                    total[name] = total[name] + v if name in total else v
            grads.update({"dehaze/" + k: v for k, v in total.items()})
        return grads

    def sgd_update(self, grads, state, lr, momentum=0.9, weight_decay=1e-4):
        from .tensor import sgd_step
        sgd_step(self.params(), grads, state, lr, momentum, weight_decay)
        self.dehaze.touch()
        self.head.touch()

    def to_checkpoint(self, state=None, **meta):
        tensors = {k: v.copy() for k, v in self.params().items()}
        base = {"spec": self.spec.key, "output_bias": repr(self.dehaze.output_bias),
                "grid_pool": str(self.head.grid_pool)}
        base.update({k: str(v) for k, v in meta.items()})
        return Checkpoint(tensors, base, {k: v.copy() for k, v in (state or {}).items()})

    @classmethod
    def from_checkpoint(cls, ckpt):
        spec = TreeSpec.parse(ckpt.meta["spec"])
        dtype = next(iter(ckpt.tensors.values())).dtype
        dehaze = build(spec.dehaze_spec, 0, dtype, float(ckpt.meta.get("output_bias", 1.0)))
        head = build_head(spec.high_window, int(ckpt.meta["grid_pool"]), 0, dtype, spec.num_classes)
        load_params(dehaze, ckpt.tensors, "dehaze/")
        load_params(head, ckpt.tensors, "head/")
        return cls(spec, dehaze, head)


def tree_forward(tree, frames):
    return tree.forward(frames)


# --------------------------------------------------------------------------
# labels and loss


def grid_labels(classes, S, min_cover=0.5):
    """Rasterize a ``(h, w)`` class map (-1 background) onto an ``S x S`` grid.

    A cell holds an object when at least ``min_cover`` of its pixels are
    foreground; its class is the majority foreground class.
    """
    classes = np.asarray(classes)
    h, w = classes.shape[-2:]
    if h % S or w % S:
        raise ContractError(f"grid {S} does not divide image {h}x{w}")
    ph, pw = h // S, w // S
    cells = classes.reshape(classes.shape[:-2] + (S, ph, S, pw))
    cells = np.moveaxis(cells, -3, -2).reshape(classes.shape[:-2] + (S, S, ph * pw))
    fg = cells >= 0
    obj = fg.mean(axis=-1) >= min_cover
    counts = np.stack([(cells == c).sum(axis=-1) for c in range(int(max(classes.max(), 0)) + 1)], axis=-1)
    cls = np.where(obj, counts.argmax(axis=-1), 0)
    return obj, cls


def _log_softmax(z, axis):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def detection_loss(logits, obj, cls):
    """Objectness BCE over all cells plus class CE over object cells.

    Both sums are divided by the total number of cells. Returns
    ``(loss, grad_logits)``.
    """
    n, ch, S1, S2 = logits.shape
    if obj.shape != (n, S1, S2) or cls.shape != (n, S1, S2):
        raise ContractError(f"label shapes {obj.shape}/{cls.shape} do not match logits {logits.shape}")
    N = n * S1 * S2
    z = logits[:, 0]
    y = obj.astype(logits.dtype)
    # softplus(z) - y z, computed stably
    bce = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = np.zeros_like(logits)
    grad[:, 0] = (1.0 / (1.0 + np.exp(-z)) - y) / N
    lsm = _log_softmax(logits[:, 1:], axis=1)
    onehot = np.zeros_like(lsm)
    np.put_along_axis(onehot, cls[:, None].astype(np.int64), 1.0, axis=1)
    ce = -(lsm * onehot).sum(axis=1)
    loss = (bce.sum() + (ce * y).sum()) / N
    grad[:, 1:] = (np.exp(lsm) - onehot) * y[:, None] / N
    return float(loss), grad


def class_scores(logits):
    """Per-class detection score: sigmoid(objectness) * softmax(class)."""
    z = logits[:, 0]
    p_obj = 1.0 / (1.0 + np.exp(-z))
    p_cls = np.exp(_log_softmax(logits[:, 1:], axis=1))
    return p_obj[:, None] * p_cls


def average_precision(scores, positives):
    """Step-wise AP over the precision/recall curve; tied scores form one step."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    n_pos = int(positives.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positives[order]
    tp = np.cumsum(p)
    last = np.r_[s[1:] != s[:-1], True]  # end of each tie group
    tp_g = tp[last]
    n_g = np.nonzero(last)[0] + 1
    precision = tp_g / n_g
    recall = tp_g / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class MapResult:
    ap: dict
    map: float


def toy_map(predict, samples, num_classes=NUM_CLASSES):
    """Cell-level AP per class and their mean.

    ``predict(frames) -> logits``; ``samples`` yields ``(frames, obj, cls)``.
    Classes with no positive cell get AP ``nan`` and are left out of the mean.
    """
    all_scores, all_obj, all_cls = [], [], []
    for frames, obj, cls in samples:
        all_scores.append(class_scores(predict(frames)))
        all_obj.append(obj)
        all_cls.append(cls)
    if not all_scores:
        raise ContractError("toy_map needs a non-empty test set")
    scores = np.concatenate(all_scores)
    obj = np.concatenate(all_obj)
    cls = np.concatenate(all_cls)
    ap = {}
    for c in range(num_classes):
        ap[c] = average_precision(scores[:, c], obj & (cls == c))
    valid = [v for v in ap.values() if not math.isnan(v)]
    missing = [c for c, v in ap.items() if math.isnan(v)]
    if missing:
        warnings.warn(f"classes {missing} have no positive cells; AP undefined, excluded from mean")
    return MapResult(ap, float(np.mean(valid)) if valid else math.nan)


# --------------------------------------------------------------------------
# data


def detection_samples(clips, overall, S, batch=None):
    """``(frames, obj, cls)`` for every frame of every clip, batched per clip."""
    for clip in clips:
        T = len(clip)
        obj, cls = grid_labels(clip.classes, S)
        idx = [window_indices(T, t, overall) for t in range(T)]
        step = batch or T
        for t0 in range(0, T, step):
            sel = idx[t0:t0 + step]
            frames = [np.ascontiguousarray(clip.hazy[[i[j] for i in sel]]) for j in range(overall)]
            yield frames, obj[t0:t0 + step], cls[t0:t0 + step]


class DetectionSampler:
    def __init__(self, clips, overall, S, batch=8, seed=0, source="hazy"):
        self.clips = list(clips)
        if not self.clips:
            raise ContractError("detection sampler needs clips")
        self.overall = overall
        self.batch = batch
        self.source = source
        self.rng = np.random.default_rng([seed, 5])
        self.labels = [grid_labels(c.classes, S) for c in self.clips]
        self._pairs = [(ci, t) for ci, c in enumerate(self.clips) for t in range(len(c))]

    def next(self):
        picks = self.rng.integers(0, len(self._pairs), size=self.batch)
        frames, objs, clss, cleans = [], [], [], []
        for p in picks:
            ci, t = self._pairs[p]
            clip = self.clips[ci]
            idx = window_indices(len(clip), t, self.overall)
            src = getattr(clip, self.source)
            frames.append(src[list(idx)])
            cleans.append(clip.clean[list(idx)])
            objs.append(self.labels[ci][0][t])
            clss.append(self.labels[ci][1][t])
        stack = np.stack(frames, axis=1)
        cstack = np.stack(cleans, axis=1)
        return ([np.ascontiguousarray(f) for f in stack], np.stack(objs), np.stack(clss),
                [np.ascontiguousarray(f) for f in cstack])


# --------------------------------------------------------------------------
# training


@dataclass
class JointConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 8
    budget: int = 1000
    phase1_fraction: float = 0.9
    seed: int = 0
    mse_weight: float = 0.0  # auxiliary dehazing MSE in phase 2


def train_head(head, clips, iters, lr=0.01, batch=8, seed=0, momentum=0.9, weight_decay=1e-4,
               source="clean"):
    """Train a single-branch head directly on (clean by default) frames."""
    if head.WH != 1:
        raise ContractError("train_head expects a single-branch head")
    S = None
    sampler = None
    state = MomentumState()
    losses = []
    for it in range(iters):
        if sampler is None:
            h = clips[0].clean.shape[2]
            S = h // head.grid_pool
            sampler = DetectionSampler(clips, 1, S, batch, seed, source)
        frames, obj, cls, _ = sampler.next()
        logits, cache = head.forward([frames[0].astype(head.dtype)])
        loss, g = detection_loss(logits, obj, cls)
        grads, _ = head.backward(cache, g)
        head.sgd_update(grads, state, lr, momentum, weight_decay)
        losses.append(loss)
    return losses


def run_phase(tree, sampler, iters, config, state, train_all, losses=None):
    for _ in range(iters):
        frames, obj, cls, clean = sampler.next()
        dtype = tree.dehaze.dtype
        frames = [f.astype(dtype, copy=False) for f in frames]
        logits, cache = tree.forward(frames)
        loss, g = detection_loss(logits, obj, cls)
        extra = None
        if train_all and config.mse_weight > 0:
            r = tree.spec.low_window // 2
            extra = []
            for k, J in enumerate(cache.dehazed):
                l2, g2 = mse_loss(J, clean[k + r].astype(dtype))
                loss += config.mse_weight * l2
                extra.append(config.mse_weight * g2)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite joint loss {loss}")
        grads = tree.backward(cache, g, train_dehaze=train_all, train_branches=train_all, grad_dehazed=extra)
        tree.sgd_update(grads, state, config.lr, config.momentum, config.weight_decay)
        if losses is not None:
            losses.append(loss)
    return state


@dataclass
class TwoStepResult:
    tree: TreeNet
    checkpoint: Checkpoint
    phase1_losses: list = field(default_factory=list)
    phase2_losses: list = field(default_factory=list)
    after_phase1: Checkpoint | None = None


def two_step_train(tree, clips, config):
    """Phase 1: only the head's post-fusion layers train (dehazing frozen) for
    ``phase1_fraction`` of the budget; phase 2: everything trains for the rest.

    ``tree`` is modified in place.
    """
    train_clips = [c for c in clips if c.split == "train"] or list(clips)
    budget = int(config.budget)
    n1 = int(round(budget * config.phase1_fraction))
    n2 = budget - n1
    S = tree.spec.grid
    sampler = DetectionSampler(train_clips, tree.spec.overall, S, config.batch, config.seed)
    state = MomentumState()
    res = TwoStepResult(tree, None)
    run_phase(tree, sampler, n1, config, state, train_all=False, losses=res.phase1_losses)
    res.after_phase1 = tree.to_checkpoint(state, phase=1, iteration=n1)
    run_phase(tree, sampler, n2, config, state, train_all=True, losses=res.phase2_losses)
    res.checkpoint = tree.to_checkpoint(state, phase=2, iteration=budget)
    return res


def tree_map(tree, clips, batch=16):
    test = [c for c in clips if c.split != "train"] or list(clips)
    dtype = tree.dehaze.dtype
    return toy_map(lambda fr: tree.forward([f.astype(dtype) for f in fr])[0],
                   detection_samples(test, tree.spec.overall, tree.spec.grid, batch),
                   tree.spec.num_classes)


def assemble_tree(spec, dehaze_single, head_single):
    """Split-initialize both halves of a tree from single-frame models."""
    dehaze = dehaze_single if spec.dehaze_spec == FusionSpec.single() else split_init(dehaze_single, spec.dehaze_spec)
    if spec.dehaze_spec == FusionSpec.single():
        dehaze = Checkpoint.from_net(dehaze_single).to_net()
    head = split_init_head(head_single, spec.high_window)
    return TreeNet(spec, dehaze, head)
