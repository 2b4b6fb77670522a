"""Dehazing network topologies.

Every network is a short, fixed list of nodes evaluated in order: each node
concatenates some earlier feature maps along channels and applies a
convolution (optionally followed by ReLU), the parameter-free clean-image
generation ``J = K I - K + b``, or average pooling. The topology is fully
determined by a :class:`FusionSpec`; backward walks the same list in
reverse.

The single-frame network (five convolutions, AOD-Net style skip layout)::

    conv1 (k1, 3->3)   <- I
    conv2 (k3, 3->3)   <- conv1
    conv3 (k5, 6->3)   <- conv1, conv2
    conv4 (k7, 6->3)   <- conv2, conv3
    conv5 (k3, 12->3)  <- conv1, conv2, conv3, conv4      (= K)
    J = K * I - K + b
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .haze import apply_K, apply_K_backward
from .tensor import (
    ConvLayer,
    ContractError,
    MomentumState,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    resolve_dtype,
    sgd_step,
)

# (name, kernel, sources) for the single-frame K-estimation trunk
TRUNK = (
    ("conv1", 1, ("frame",)),
    ("conv2", 3, ("conv1",)),
    ("conv3", 5, ("conv1", "conv2")),
    ("conv4", 7, ("conv2", "conv3")),
    ("conv5", 3, ("conv1", "conv2", "conv3", "conv4")),
)
TRUNK_LAYERS = tuple(name for name, _, _ in TRUNK)
DEFAULT_OUTPUT_BIAS = 1.0

_STRATEGIES = ("I", "K", "J")


@dataclass(frozen=True)
class FusionSpec:
    """Temporal fusion strategy and window size.

    ``strategy`` is ``"I"`` (input level), ``"K"`` (inside K estimation,
    after conv ``level``) or ``"J"`` (output level).
    """

    strategy: str
    window: int = 5
    level: int | None = None

    def __post_init__(self):
        if self.strategy not in _STRATEGIES:
            raise ContractError(f"unknown fusion strategy {self.strategy!r}")
        if self.strategy == "K":
            if self.level is None or not 1 <= self.level <= 5:
                raise ContractError(f"K-level fusion needs 1 <= level <= 5, got {self.level}")
        elif self.level is not None:
            raise ContractError(f"{self.strategy}-level fusion takes no level")
        if self.window < 1 or self.window % 2 == 0:
            raise ContractError(f"window must be odd and >= 1, got {self.window}")

    @classmethod
    def single(cls):
        return cls("I", 1)

    @classmethod
    def parse(cls, text):
        """Parse ``"K2:5"``, ``"I:3"``, ``"J:5"`` or ``"single"``."""
        text = text.strip()
        if text.lower() in ("single", "aod"):
            return cls.single()
        m = re.fullmatch(r"([IKJ])(\d)?(?::(\d+))?", text)
        if not m:
            raise ContractError(f"cannot parse fusion spec {text!r}")
        strategy, level, window = m.groups()
        return cls(strategy, int(window) if window else 5, int(level) if level else None)

    @property
    def key(self):
        if self.window == 1 and self.strategy == "I":
            return "single"
        return f"{self.strategy}{self.level or ''}:{self.window}"

    @property
    def label(self):
        """Row name in the style of the fusion comparison table."""
        if self.window == 1 and self.strategy == "I":
            return "single-frame (AOD-Net)"
        if self.strategy == "K":
            conv = "conv5(K)" if self.level == 5 else f"conv{self.level}"
            return f"K-level fusion, {conv}, {self.window} frames"
        return f"{self.strategy}-level fusion, {self.window} frames"

    def __str__(self):
        return self.key


TABLE1_SPECS = tuple(
    [FusionSpec("I", w) for w in (3, 5)]
    + [FusionSpec("K", w, l) for l in (1, 2, 3, 4, 5) for w in ((3, 5, 7, 9) if l == 2 else (3, 5))]
    + [FusionSpec("J", w) for w in (3, 5)]
)


@dataclass
class Node:
    """One step of a network program.

    ``sources`` name earlier feature maps (``"frame:j"`` for inputs).
    ``segments`` maps the concatenated input back to the single-column
    prototype for split initialization: a list of ``(proto_source, copies)``.
    """

    name: str
    kind: str  # "conv", "eq4" or "pool"
    sources: tuple
    layer: ConvLayer | None = None
    relu: bool = False
    proto: str | None = None
    segments: tuple = ()
    pool: int = 1


def _trunk_nodes(prefix, frame_src, k_factory, relu_out=True):
    nodes = []
    for name, k, srcs in TRUNK:
        sources = tuple(frame_src if s == "frame" else prefix + s for s in srcs)
        nodes.append(
            Node(prefix + name, "conv", sources, k_factory(name, k, 3 * len(sources), True),
                 relu=True if name != "conv5" else relu_out, proto=name,
                 segments=tuple((s, 1) for s in srcs))
        )
    return nodes


def _column(j):
    return f"c{j}."


def topology(spec, make_layer):
    """Node list for ``spec``; ``make_layer(proto, k, in_c, bias)`` builds layers."""
    W = spec.window
    c = W // 2
    frames = [f"frame:{j}" for j in range(W)]
    nodes = []
    if spec.strategy == "I":
        for name, k, srcs in TRUNK:
            if name == "conv1":
                sources, segments = tuple(frames), (("frame", W),)
            else:
                sources, segments = srcs, tuple((s, 1) for s in srcs)
            in_c = 3 * len(sources)
            nodes.append(Node(name, "conv", sources, make_layer(name, k, in_c, True),
                              relu=True, proto=name, segments=segments))
        nodes.append(Node("J", "eq4", ("conv5", frames[c])))
        return nodes

    if spec.strategy == "J":
        for j in range(W):
            nodes += _trunk_nodes(_column(j), frames[j], make_layer)
            nodes.append(Node(f"{_column(j)}J", "eq4", (f"{_column(j)}conv5", frames[j])))
        srcs = tuple(f"{_column(j)}J" for j in range(W))
        nodes.append(Node("fuse", "conv", srcs, make_layer("fuse", 1, 3 * W, True),
                          relu=False, proto="fuse", segments=(("J", W),)))
        return nodes

    level = spec.level
    for j in range(W):
        col = _column(j)
        for name, k, srcs in TRUNK[:level]:
            sources = tuple(frames[j] if s == "frame" else col + s for s in srcs)
            nodes.append(Node(col + name, "conv", sources, make_layer(name, k, 3 * len(sources), True),
                              relu=True, proto=name, segments=tuple((s, 1) for s in srcs)))
    for idx, (name, k, srcs) in enumerate(TRUNK):
        if idx < level:
            continue
        sources, segments = [], []
        for s in srcs:
            if TRUNK_LAYERS.index(s) < level:
                sources += [_column(j) + s for j in range(W)]
                segments.append((s, W))
            else:
                sources.append(s)
                segments.append((s, 1))
        nodes.append(Node(name, "conv", tuple(sources), make_layer(name, k, 3 * len(sources), True),
                          relu=True, proto=name, segments=tuple(segments)))
    if level == 5:
        # bias-free channel mixing of the per-column K maps
        srcs = tuple(_column(j) + "conv5" for j in range(W))
        nodes.append(Node("fuse", "conv", srcs, make_layer("fuse", 1, 3 * W, False),
                          relu=True, proto="fuse", segments=(("conv5", W),)))
        nodes.append(Node("J", "eq4", ("fuse", frames[c])))
    else:
        nodes.append(Node("J", "eq4", ("conv5", frames[c])))
    return nodes


@dataclass
class ForwardCache:
    net_id: int
    version: int
    feats: dict
    inputs: dict


class Program:
    """Evaluates a node list; shared by dehazing nets and the detector head."""

    def __init__(self, nodes, output_bias=DEFAULT_OUTPUT_BIAS):
        self.nodes = list(nodes)
        self.output_bias = float(output_bias)
        self.version = 0
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ContractError("duplicate node names")

    # -- parameters ------------------------------------------------------
    def params(self):
        """Ordered ``{name: array}`` view of every learnable tensor."""
        out = {}
        for node in self.nodes:
            if node.layer is None:
                continue
            out[node.name + ".weight"] = node.layer.weight
            if node.layer.bias is not None:
                out[node.name + ".bias"] = node.layer.bias
        return out

    def n_params(self):
        return sum(p.size for p in self.params().values())

    def layer(self, name):
        for node in self.nodes:
            if node.name == name:
                return node.layer
        raise KeyError(name)

    @property
    def dtype(self):
        for node in self.nodes:
            if node.layer is not None:
                return node.layer.weight.dtype
        return np.dtype(np.float64)

    def touch(self):
        """Mark parameters as modified so older caches become stale."""
        self.version += 1

    def sgd_update(self, grads, state, lr, momentum=0.9, weight_decay=1e-4):
        sgd_step(self.params(), grads, state, lr, momentum, weight_decay)
        self.touch()

    # -- evaluation ------------------------------------------------------
    @property
    def n_inputs(self):
        idx = [int(s.split(":")[1]) for n in self.nodes for s in n.sources if s.startswith("frame:")]
        return max(idx) + 1

    def forward(self, frames):
        frames = list(frames)
        if len(frames) != self.n_inputs:
            raise ContractError(f"network expects {self.n_inputs} frames, got {len(frames)}")
        feats = {f"frame:{j}": f for j, f in enumerate(frames)}
        inputs = {}
        for node in self.nodes:
            xs = [feats[s] for s in node.sources]
            if node.kind == "conv":
                x = concat_channels(xs)
                y = conv2d_forward(x, node.layer)
                if node.relu:
                    np.maximum(y, 0, out=y)
                inputs[node.name] = x
            elif node.kind == "eq4":
                y = apply_K(xs[1], xs[0], self.output_bias)
            else:
                y = _avg_pool(xs[0], node.pool)
            feats[node.name] = y
        out = feats[self.nodes[-1].name]
        return out, ForwardCache(id(self), self.version, feats, inputs)

    def backward(self, cache, grad_out, frozen=(), input_grads=False):
        """Parameter gradients (and optionally input-frame gradients).

        Layers named in ``frozen`` get no gradient entry. Returns
        ``(grads, frame_grads)`` where ``frame_grads`` is a list (or
        ``None``).
        """
        if cache.net_id != id(self) or cache.version != self.version:
            raise ContractError("stale forward cache: parameters changed since forward")
        frozen = set(frozen)
        needed = self._needs_grad(frozen, input_grads)
        grads = {}
        g_feat = {self.nodes[-1].name: grad_out}
        for node in reversed(self.nodes):
            g = g_feat.pop(node.name, None)
            if g is None:
                continue
            if node.kind == "conv":
                y = cache.feats[node.name]
                if node.relu:
                    g = np.where(y > 0, g, 0)
                want_in = any(needed.get(s, False) for s in node.sources)
                gx, gw, gb = conv2d_backward(cache.inputs[node.name], node.layer, g, want_in)
                if node.name not in frozen:
                    grads[node.name + ".weight"] = gw
                    if gb is not None:
                        grads[node.name + ".bias"] = gb
                if want_in:
                    start = 0
                    for s in node.sources:
                        c = cache.feats[s].shape[1]
                        if needed.get(s, False):
                            _accum(g_feat, s, gx[:, start:start + c])
                        start += c
            elif node.kind == "eq4":
                k_src, i_src = node.sources
                gI, gK = apply_K_backward(cache.feats[i_src], cache.feats[k_src], g)
                if needed.get(k_src, False):
                    _accum(g_feat, k_src, gK)
                if needed.get(i_src, False):
                    _accum(g_feat, i_src, gI)
            else:
                if needed.get(node.sources[0], False):
                    _accum(g_feat, node.sources[0], _avg_pool_backward(g, node.pool))
        frame_grads = None
        if input_grads:
            frame_grads = [g_feat.get(f"frame:{j}") for j in range(self.n_inputs)]
            frame_grads = [
                np.zeros_like(cache.feats[f"frame:{j}"]) if fg is None else fg
                for j, fg in enumerate(frame_grads)
            ]
        return grads, frame_grads

    def _needs_grad(self, frozen, input_grads):
        # a feature needs a gradient if some trainable parameter (or a
        # requested input) lies upstream of it
        needs = {}
        if input_grads:
            for j in range(self.n_inputs):
                needs[f"frame:{j}"] = True
        for node in self.nodes:
            own = node.layer is not None and node.name not in frozen
            needs[node.name] = own or any(needs.get(s, False) for s in node.sources)
        return needs


def _accum(store, key, value):
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


def _avg_pool(x, p):
    if p == 1:
        return x
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ContractError(f"pool size {p} does not divide spatial size {h}x{w}")
    return x.reshape(n, c, h // p, p, w // p, p).mean(axis=(3, 5))


def _avg_pool_backward(g, p):
    if p == 1:
        return g
    return np.repeat(np.repeat(g, p, axis=2), p, axis=3) / (p * p)


class EVDNet(Program):
    """Multi-frame dehazing network for one :class:`FusionSpec`."""

    def __init__(self, spec, nodes, output_bias=DEFAULT_OUTPUT_BIAS, seed=None):
        super().__init__(nodes, output_bias)
        self.spec = spec
        self.seed = seed

    @property
    def window(self):
        return self.spec.window

    def forward(self, frames):
        frames = list(frames)
        if len(frames) != self.window:
            raise ContractError(f"window size mismatch: net W={self.window}, got {len(frames)} frames")
        return super().forward(frames)

    def dehaze(self, frames):
        """Forward pass clamped to ``[0, 1]`` for evaluation/export."""
        return np.clip(self.forward(frames)[0], 0, 1)


def build(spec, seed=0, precision="f64", output_bias=DEFAULT_OUTPUT_BIAS):
    """Fresh network with seeded uniform initialization."""
    dtype = resolve_dtype(precision)
    rng = np.random.default_rng(seed)

    def make_layer(proto, k, in_c, bias):
        return ConvLayer.init(in_c, 3, k, rng, dtype, bias)

    return EVDNet(spec, topology(spec, make_layer), output_bias, seed)


def param_count(spec):
    """Exact number of learnable scalars for ``spec`` (no allocation)."""
    total = 0
    for node in topology(spec, lambda proto, k, in_c, bias: (k, in_c, bias)):
        if node.layer is not None:
            k, in_c, bias = node.layer
            total += 3 * in_c * k * k + (3 if bias else 0)
    return total


def replicate_weight(proto_layer, proto_sources_c, segments):
    """Spread a prototype layer's weight over a widened input.

    ``proto_sources_c`` maps each prototype source to its channel slice in
    ``proto_layer``; every segment ``(source, copies)`` repeats that slice
    ``copies`` times scaled by ``1/copies``, so identical copies of the input
    reproduce the prototype response exactly.
    """
    blocks = []
    for src, copies in segments:
        sl = proto_sources_c[src]
        w = proto_layer.weight[:, sl]
        blocks += [w / copies] * copies
    return np.concatenate(blocks, axis=1)


def _source_slices(sources, width=3):
    return {s: slice(i * width, (i + 1) * width) for i, s in enumerate(sources)}


def averaging_layer(copies, channels, k=1, dtype=np.float64, bias=True):
    """``k=1`` layer averaging ``copies`` channel groups channel-wise."""
    w = np.zeros((channels, channels * copies, 1, 1), dtype=dtype)
    for j in range(copies):
        for ch in range(channels):
            w[ch, j * channels + ch, 0, 0] = 1.0 / copies
    return ConvLayer(w, np.zeros(channels, dtype=dtype) if bias else None)


def split_init(single, spec):
    """Initialize a multi-frame network from a trained single-frame one.

    Pre-fusion layers are copied into every column; layers that consume
    several columns get the prototype weights replicated and divided by the
    number of columns; fresh fusion layers start as channel averaging. On a
    window of identical frames the result reproduces ``single`` exactly (up
    to rounding).
    """
    if not isinstance(single, EVDNet) or single.spec != FusionSpec.single():
        raise ContractError(f"split_init needs a single-frame network, got {getattr(single, 'spec', single)}")
    dtype = single.dtype
    proto = {}
    for name, _, srcs in TRUNK:
        layer = single.layer(name)
        slices = _source_slices(srcs)
        proto[name] = (layer, slices)

    def make_layer(pname, k, in_c, bias):
        return (pname, k, in_c, bias)

    nodes = topology(spec, make_layer)
    for node in nodes:
        if node.layer is None:
            continue
        pname, k, in_c, bias = node.layer
        if pname == "fuse":
            copies = node.segments[0][1]
            node.layer = averaging_layer(copies, 3, dtype=dtype, bias=bias)
            continue
        layer, slices = proto[pname]
        w = replicate_weight(layer, slices, node.segments)
        if w.shape != (3, in_c, k, k):
            raise ContractError(f"split_init shape mismatch at {node.name}: {w.shape}")
        node.layer = ConvLayer(np.array(w, dtype=dtype), layer.bias.copy())
    return EVDNet(spec, nodes, single.output_bias, single.seed)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"EVDN"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    """Parameters, optimizer velocities and metadata of one model."""

    tensors: dict
    meta: dict = field(default_factory=dict)
    momentum: dict = field(default_factory=dict)

    @classmethod
    def from_net(cls, net, state=None, **meta):
        base = {"output_bias": repr(net.output_bias)}
        if isinstance(net, EVDNet):
            base.update(spec=net.spec.key, W=str(net.window), seed=str(net.seed))
        base.update({k: str(v) for k, v in meta.items()})
        return cls(
            {k: v.copy() for k, v in net.params().items()},
            base,
            {k: v.copy() for k, v in (state or {}).items()},
        )

    def momentum_state(self):
        return MomentumState({k: v.copy() for k, v in self.momentum.items()})

    def to_net(self, precision=None):
        """Rebuild the dehazing network described by ``meta['spec']``."""
        spec = FusionSpec.parse(self.meta["spec"])
        dtype = resolve_dtype(precision) if precision else next(iter(self.tensors.values())).dtype
        net = build(spec, 0, dtype, float(self.meta.get("output_bias", DEFAULT_OUTPUT_BIAS)))
        net.seed = self.meta.get("seed")
        load_params(net, self.tensors)
        return net


def load_params(program, tensors, prefix=""):
    params = program.params()
    want = {prefix + k for k in params}
    have = {k for k in tensors if k.startswith(prefix)} if prefix else set(tensors)
    if want != have:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise ContractError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, p in params.items():
        src = tensors[prefix + k]
        if src.shape != p.shape:
            raise ContractError(f"tensor {k!r}: checkpoint {src.shape} vs model {p.shape}")
        p[...] = src
    program.touch()


def _dims4(shape):
    if len(shape) > 4:
        raise CheckpointError(f"tensor rank {len(shape)} > 4")
    return tuple(shape) + (1,) * (4 - len(shape)), len(shape)


def save_checkpoint(ckpt, path):
    """Write little-endian ``EVDN`` file; tensors stored as float64."""
    meta = dict(ckpt.meta)
    records = [(k, v) for k, v in ckpt.tensors.items()]
    records += [("momentum/" + k, v) for k, v in ckpt.momentum.items()]
    ranks = {k: str(np.ndim(v)) for k, v in records}
    meta["ranks"] = ",".join(f"{k}={r}" for k, r in ranks.items())
    meta_bytes = "\n".join(f"{k}={v}" for k, v in meta.items()).encode("utf-8")
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", FORMAT_VERSION)
    buf += struct.pack("<I", len(meta_bytes)) + meta_bytes
    buf += struct.pack("<I", len(records))
    for name, arr in records:
        nb = name.encode("utf-8")
        dims, _ = _dims4(np.shape(arr))
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<4I", *dims)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)
    return path


def load_checkpoint(path, dtype=None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Tensors come back as float64 unless ``dtype`` is given.
    """
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what} (offset {pos}, need {n} bytes)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an EVDN checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
        )
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    meta = {}
    for line in take(mlen, "metadata").decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    ranks = {}
    for item in meta.pop("ranks", "").split(","):
        if item:
            k, _, r = item.rpartition("=")
            ranks[k] = int(r)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors, momentum = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "tensor name").decode("utf-8")
        dims = struct.unpack("<4I", take(16, f"dims of {name}"))
        size = int(np.prod(dims))
        arr = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8").reshape(dims)
        arr = arr.reshape(dims[: ranks.get(name, 4)]).astype(dtype or np.float64)
        if name.startswith("momentum/"):
            momentum[name[len("momentum/"):]] = arr
        else:
            tensors[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return Checkpoint(tensors, meta, momentum)
