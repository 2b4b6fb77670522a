"""RGB-D ingestion, hazy video synthesis, frame windows and toy scenes.

On-disk layout of a dataset root::

    manifest.txt              one line per video: id=.. A=.. beta=.. split=..
    <id>/rgb/0000.png         8-bit RGB (or .ppm)
    <id>/depth/0000.png       16-bit depth, ``depth_scale`` units per metre
    <id>/hazy/0000.png        written by synthesis
    <id>/labels/0000.png      optional 8-bit class map (0 = background)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .haze import HazeParams, synthesize_haze, transmission_from_depth
from .tensor import ContractError

log = logging.getLogger(__name__)

DEFAULT_DEPTH_SCALE = 5000.0
DEFAULT_A_RANGE = (0.6, 1.0)
DEFAULT_BETA_RANGE = (0.4, 1.6)
RGB_SUFFIXES = (".png", ".ppm")
MANIFEST = "manifest.txt"


class IngestError(IOError):
    pass


# --------------------------------------------------------------------------
# image I/O


def read_rgb(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def write_rgb(path, img):
    """Write a ``(3, h, w)`` image in ``[0, 1]`` as 8-bit."""
    q = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(q), "RGB").save(path)


def quantize8(x):
    return np.round(np.clip(x, 0, 1) * 255.0) / 255.0


def read_depth(path, depth_scale=DEFAULT_DEPTH_SCALE):
    """16-bit depth image in metres, shape ``(1, h, w)``; 0 marks a hole."""
    try:
        with Image.open(path) as im:
            raw = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read depth {path}: {exc}") from exc
    if raw.ndim != 2:
        raise IngestError(f"depth {path} must be single-channel, got shape {raw.shape}")
    return (raw / depth_scale)[None]


def write_depth(path, depth, depth_scale=DEFAULT_DEPTH_SCALE):
    raw = np.round(np.asarray(depth).reshape(depth.shape[-2:]) * depth_scale)
    if raw.max(initial=0) > 65535:
        raise ContractError(f"depth exceeds 16-bit range at scale {depth_scale}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raw.astype(np.uint16)).save(path)


def fill_depth_holes(depth):
    """Replace zero/NaN/Inf depths by the nearest valid pixel's value."""
    d = np.array(depth, dtype=np.float64)
    bad = ~np.isfinite(d) | (d <= 0)
    if not bad.any():
        return d
    if bad.all():
        raise IngestError("depth map has no valid pixels")
    out = np.empty_like(d)
    for idx in np.ndindex(d.shape[:-2]):
        plane, mask = d[idx], bad[idx]
        _, (iy, ix) = ndimage.distance_transform_edt(mask, return_indices=True)
        out[idx] = plane[iy, ix]
    return out


# --------------------------------------------------------------------------
# records, clips and manifests


@dataclass(frozen=True)
class VideoRecord:
    """A video on disk: ordered frame/depth paths plus haze parameters."""

    id: str
    rgb_paths: tuple
    depth_paths: tuple
    A: float | tuple | None = None
    beta: float | None = None
    split: str = "train"
    root: Path | None = None

    def __post_init__(self):
        if len(self.rgb_paths) != len(self.depth_paths):
            raise IngestError(
                f"video {self.id}: {len(self.rgb_paths)} RGB frames but {len(self.depth_paths)} depth maps"
            )

    def __len__(self):
        return len(self.rgb_paths)

    @property
    def params(self):
        if self.A is None or self.beta is None:
            return None
        return HazeParams(self.A, self.beta)


@dataclass
class Clip:
    """A video held in memory as ``(T, c, h, w)`` arrays."""

    id: str
    clean: np.ndarray
    depth: np.ndarray
    params: HazeParams
    split: str = "train"
    hazy: np.ndarray | None = None
    classes: np.ndarray | None = None  # (T, h, w) int, -1 background
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.clean.shape[0]


def _frame_files(directory, suffixes):
    files = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix.lower() in suffixes:
            files.setdefault(p.stem, p)
    return files


def ingest_rgbd(directory, depth_scale=DEFAULT_DEPTH_SCALE, A=None, beta=None, split="train", video_id=None):
    """Validate ``<directory>/rgb`` and ``<directory>/depth`` into a record.

    Frames are matched by file stem and ordered by stem. Depth images are
    not decoded here; use :func:`load_clip`.
    """
    directory = Path(directory)
    rgb_dir, depth_dir = directory / "rgb", directory / "depth"
    for d in (rgb_dir, depth_dir):
        if not d.is_dir():
            raise IngestError(f"missing directory {d}")
    rgb = _frame_files(rgb_dir, RGB_SUFFIXES)
    depth = _frame_files(depth_dir, (".png", ".pgm"))
    if not rgb:
        raise IngestError(f"no RGB frames in {rgb_dir}")
    for stem, path in rgb.items():
        if stem not in depth:
            raise IngestError(f"frame {stem} ({path}) has no depth map {depth_dir / (stem + '.png')}")
    for stem, path in depth.items():
        if stem not in rgb:
            raise IngestError(f"depth map {path} has no RGB frame {stem}")
    for stem, path in rgb.items():
        if not path.is_file() or path.stat().st_size == 0:
            raise IngestError(f"unreadable frame {path}")
    stems = sorted(rgb)
    return VideoRecord(
        video_id or directory.name,
        tuple(rgb[s] for s in stems),
        tuple(depth[s] for s in stems),
        A,
        beta,
        split,
        directory,
    )


def load_clip(record, depth_scale=DEFAULT_DEPTH_SCALE, load_hazy=True):
    clean = np.stack([read_rgb(p) for p in record.rgb_paths])
    depth = fill_depth_holes(np.stack([read_depth(p, depth_scale) for p in record.depth_paths]))
    if clean.shape[2:] != depth.shape[2:]:
        raise IngestError(f"video {record.id}: RGB size {clean.shape[2:]} != depth size {depth.shape[2:]}")
    params = record.params
    if params is None:
        raise IngestError(f"video {record.id} has no haze parameters (A, beta)")
    hazy = None
    if load_hazy and record.root is not None and (record.root / "hazy").is_dir():
        paths = [record.root / "hazy" / (Path(p).stem + ".png") for p in record.rgb_paths]
        if all(p.is_file() for p in paths):
            hazy = np.stack([read_rgb(p) for p in paths])
    classes = None
    if record.root is not None and (record.root / "labels").is_dir():
        paths = [record.root / "labels" / (Path(p).stem + ".png") for p in record.rgb_paths]
        if all(p.is_file() for p in paths):
            classes = np.stack([np.asarray(Image.open(p), dtype=np.int64) - 1 for p in paths])
    return Clip(record.id, clean, depth, params, record.split, hazy, classes)


def _format_A(A):
    a = np.atleast_1d(A)
    return ",".join(repr(float(v)) for v in a)


def write_manifest(path, entries):
    """``entries``: iterable of dicts with id, A, beta, split."""
    lines = []
    for e in entries:
        lines.append(f"id={e['id']} A={_format_A(e['A'])} beta={float(e['beta'])!r} split={e['split']}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            kv = dict(tok.split("=", 1) for tok in line.split())
            a = tuple(float(v) for v in kv["A"].split(","))
            entries.append({
                "id": kv["id"],
                "A": a[0] if len(a) == 1 else a,
                "beta": float(kv["beta"]),
                "split": kv.get("split", "train"),
            })
        except (KeyError, ValueError) as exc:
            raise IngestError(f"{path}:{lineno}: malformed manifest line {line!r} ({exc})") from exc
    return entries


def ingest_dataset(root, depth_scale=DEFAULT_DEPTH_SCALE):
    """Records for every video listed in ``root/manifest.txt``."""
    root = Path(root)
    if not (root / MANIFEST).is_file():
        raise IngestError(f"no {MANIFEST} in {root}")
    return [
        ingest_rgbd(root / e["id"], depth_scale, e["A"], e["beta"], e["split"], e["id"])
        for e in read_manifest(root / MANIFEST)
    ]


def load_dataset(root, depth_scale=DEFAULT_DEPTH_SCALE, split=None):
    """In-memory clips for a dataset root; missing hazy frames are synthesized."""
    clips = []
    for rec in ingest_dataset(root, depth_scale):
        if split is not None and rec.split != split:
            continue
        clip = load_clip(rec, depth_scale)
        if clip.hazy is None:
            clip.hazy = synthesize_video(clip, quantize=True)
        clips.append(clip)
    return clips


def check_disjoint(clips):
    train = {c.id for c in clips if c.split == "train"}
    test = {c.id for c in clips if c.split != "train"}
    if train & test:
        raise ContractError(f"videos in both train and test splits: {sorted(train & test)}")


# --------------------------------------------------------------------------
# synthesis


def synthesize_video(video, params=None, write=False, quantize=False, depth_scale=DEFAULT_DEPTH_SCALE):
    """Haze every frame with one constant ``(A, beta)``.

    ``video`` is a :class:`Clip` or a :class:`VideoRecord`. With
    ``write=True`` (records only) frames are stored as ``<root>/hazy/*.png``;
    the returned array is then the 8-bit quantized version.
    """
    if isinstance(video, VideoRecord):
        clip = load_clip(video, depth_scale, load_hazy=False) if params is None else load_clip(
            replace(video, A=params.A, beta=params.beta), depth_scale, load_hazy=False)
    else:
        clip = video
    params = params or clip.params
    t = transmission_from_depth(clip.depth, params.beta)
    hazy = synthesize_haze(clip.clean, t, params)
    if write:
        if not isinstance(video, VideoRecord) or video.root is None:
            raise ContractError("write=True needs a VideoRecord with a root directory")
        for src, frame in zip(video.rgb_paths, hazy):
            write_rgb(video.root / "hazy" / (Path(src).stem + ".png"), frame)
        quantize = True
    return quantize8(hazy) if quantize else hazy


def synthesize_dataset(root, depth_scale=DEFAULT_DEPTH_SCALE, out=None):
    """Write hazy frames for every video under ``root`` and copy the manifest.

    With ``out`` given, hazy frames go to ``out/<id>/hazy`` instead.
    """
    root = Path(root)
    records = ingest_dataset(root, depth_scale)
    for rec in records:
        if out is not None:
            target = Path(out) / rec.id
            rec = replace(rec, root=target)
        synthesize_video(rec, write=True, depth_scale=depth_scale)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / MANIFEST).write_text((root / MANIFEST).read_text())
    return records


def assign_haze_params(rng_seed, A_range=DEFAULT_A_RANGE, beta_range=DEFAULT_BETA_RANGE):
    """Uniformly sampled per-video haze parameters, deterministic per seed."""
    (a0, a1), (b0, b1) = A_range, beta_range
    if a0 > a1 or b0 > b1:
        raise ContractError(f"inverted range: A {A_range}, beta {beta_range}")
    if a0 <= 0 or a1 > 1 or b0 < 0:
        raise ContractError(f"haze ranges out of bounds: A {A_range}, beta {beta_range}")
    rng = np.random.default_rng(rng_seed)
    return HazeParams(float(rng.uniform(a0, a1)), float(rng.uniform(b0, b1)))


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class FrameWindow:
    frames: np.ndarray  # (W, c, h, w)
    indices: tuple
    center: int
    target: np.ndarray | None = None

    @property
    def size(self):
        return len(self.indices)


def window_indices(n_frames, center, W, edge_policy="replicate"):
    if W < 1 or W % 2 == 0:
        raise ContractError(f"window size must be odd, got {W}")
    if not 0 <= center < n_frames:
        raise ContractError(f"center {center} outside sequence of {n_frames} frames")
    if edge_policy != "replicate":
        raise ContractError(f"unknown edge policy {edge_policy!r}")
    r = W // 2
    return tuple(min(max(i, 0), n_frames - 1) for i in range(center - r, center + r + 1))


def sample_window(frames, center, W, edge_policy="replicate", target=None):
    """``W`` frames centred on ``center``; boundary frames are replicated."""
    idx = window_indices(len(frames), center, W, edge_policy)
    tgt = None if target is None else target[center]
    return FrameWindow(np.stack([frames[i] for i in idx]), idx, center, tgt)


class WindowSampler:
    """Seeded stream of random training batches.

    Each batch draws ``batch`` (clip, centre frame) pairs uniformly over all
    training frames, plus a random ``crop`` x ``crop`` patch.
    """

    def __init__(self, clips, W, batch=8, crop=64, seed=0):
        self.clips = [c for c in clips]
        if not self.clips:
            raise ContractError("window sampler needs at least one clip")
        self.W = W
        self.batch = batch
        self.crop = crop
        self.rng = np.random.default_rng(seed)
        self._pairs = [(ci, t) for ci, c in enumerate(self.clips) for t in range(len(c))]

    def next(self):
        picks = self.rng.integers(0, len(self._pairs), size=self.batch)
        ins = []
        tgts = []
        for p in picks:
            ci, t = self._pairs[p]
            clip = self.clips[ci]
            h, w = clip.clean.shape[2:]
            ch, cw = min(self.crop, h), min(self.crop, w)
            y0 = int(self.rng.integers(0, h - ch + 1))
            x0 = int(self.rng.integers(0, w - cw + 1))
            idx = window_indices(len(clip), t, self.W)
            ins.append(clip.hazy[list(idx), :, y0:y0 + ch, x0:x0 + cw])
            tgts.append(clip.clean[t, :, y0:y0 + ch, x0:x0 + cw])
        stacked = np.stack(ins, axis=1)  # (W, n, 3, ch, cw)
        return [np.ascontiguousarray(f) for f in stacked], np.stack(tgts)


def iter_windows(clip, W, frames=None):
    """``(center, window_frames)`` for every frame of ``clip`` (batch of 1)."""
    src = clip.hazy if frames is None else frames
    for t in range(len(clip)):
        idx = window_indices(len(clip), t, W)
        yield t, [src[i][None] for i in idx]


# --------------------------------------------------------------------------
# procedural toy scenes

SHAPE_KINDS = ("rect", "disk")


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple  # (y, x) at frame 0
    size: tuple  # (half height, half width) for rect, (radius, radius) for disk
    velocity: tuple  # (vy, vx) pixels per frame
    color: tuple
    depth: float

    @property
    def class_id(self):
        return SHAPE_KINDS.index(self.kind)


@dataclass(frozen=True)
class SceneSpec:
    """Procedural scene: textured static background plus moving shapes.

    ``depth_far`` is the background depth on the top row, ``depth_near`` on
    the bottom row. Explicit ``shapes`` override the random ones.
    """

    height: int = 64
    width: int = 64
    n_shapes: int = 3
    seed: int = 0
    max_speed: float = 2.0
    depth_near: float = 0.6
    depth_far: float = 1.6
    shape_depth: tuple = (0.3, 0.9)
    shape_size: tuple = (4.0, 9.0)
    saturation: float = 1.0
    shapes: tuple | None = None

    def __post_init__(self):
        if self.max_speed > 2.0:
            raise ContractError(f"max_speed must be <= 2 px/frame, got {self.max_speed}")
        if self.shapes is not None:
            for s in self.shapes:
                if math.hypot(*s.velocity) > 2.0 + 1e-12:
                    raise ContractError(f"shape velocity {s.velocity} exceeds 2 px/frame")


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros((3,) + h.shape)
    for k, (r, g, b) in enumerate(table):
        m = i == k
        out[0][m], out[1][m], out[2][m] = r[m], g[m], b[m]
    return out


def _background(spec, rng):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    hue = rng.uniform(0, 1) + np.zeros((h, w))
    val = np.full((h, w), 0.75)
    for _ in range(3):
        fy, fx = rng.uniform(-0.25, 0.25, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        hue += 0.18 * np.sin(fy * yy + fx * xx + ph)
    for _ in range(2):
        fy, fx = rng.uniform(-0.6, 0.6, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        val += 0.1 * np.sin(fy * yy + fx * xx + ph)
    sat = np.full((h, w), spec.saturation)
    return _hsv_to_rgb(hue % 1.0, sat, np.clip(val, 0.3, 1.0))


def _random_shapes(spec, rng):
    shapes = []
    lo, hi = spec.shape_size
    # keep shapes well inside small frames
    cap = max(1.0, (min(spec.height, spec.width) - 1) / 4)
    lo, hi = min(lo, cap), min(hi, cap)
    for _ in range(spec.n_shapes):
        kind = SHAPE_KINDS[int(rng.integers(0, 2))]
        r = float(rng.uniform(lo, hi))
        size = (r, r) if kind == "disk" else (r, float(rng.uniform(lo, hi)))
        center = (float(rng.uniform(size[0], spec.height - 1 - size[0])),
                  float(rng.uniform(size[1], spec.width - 1 - size[1])))
        speed = float(rng.uniform(0.3, spec.max_speed))
        ang = float(rng.uniform(0, 2 * np.pi))
        vel = (speed * math.sin(ang), speed * math.cos(ang))
        color = tuple(_hsv_to_rgb(np.array([rng.uniform()]), np.array([spec.saturation]),
                                  np.array([rng.uniform(0.6, 1.0)]))[:, 0])
        depth = float(rng.uniform(*spec.shape_depth))
        shapes.append(Shape(kind, center, size, vel, color, depth))
    return tuple(shapes)


def _bounce(p0, v, t, lo, hi):
    # position of a point moving at constant speed, reflected inside [lo, hi]
    if hi <= lo:
        return lo
    span = hi - lo
    u = (p0 - lo + v * t) % (2 * span)
    return lo + (u if u <= span else 2 * span - u)


def shape_center(shape, t, spec):
    hy, hx = shape.size
    cy = _bounce(shape.center[0], shape.velocity[0], t, hy, spec.height - 1 - hy)
    cx = _bounce(shape.center[1], shape.velocity[1], t, hx, spec.width - 1 - hx)
    return cy, cx


def _shape_mask(shape, cy, cx, yy, xx):
    if shape.kind == "rect":
        return (np.abs(yy - cy) <= shape.size[0]) & (np.abs(xx - cx) <= shape.size[1])
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= shape.size[0] ** 2


def scene_shapes(spec):
    if spec.shapes is not None:
        return tuple(spec.shapes)
    rng = np.random.default_rng([spec.seed, 1])
    return _random_shapes(spec, rng)


def render_toy_scene(spec, n_frames):
    """``(clean, depth, classes)`` arrays; see :func:`generate_toy_scene`."""
    rng = np.random.default_rng([spec.seed, 0])
    bg = _background(spec, rng)
    shapes = sorted(scene_shapes(spec), key=lambda s: -s.depth)  # far first
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bg_depth = spec.depth_far + (spec.depth_near - spec.depth_far) * yy / max(h - 1, 1)
    clean = np.empty((n_frames, 3, h, w))
    depth = np.empty((n_frames, 1, h, w))
    classes = np.full((n_frames, h, w), -1, dtype=np.int64)
    shade = 0.85 + 0.15 * np.cos(0.9 * xx) * np.cos(0.9 * yy)
    for t in range(n_frames):
        img = bg.copy()
        d = bg_depth.copy()
        for s in shapes:
            cy, cx = shape_center(s, t, spec)
            m = _shape_mask(s, cy, cx, yy, xx)
            for c in range(3):
                img[c][m] = s.color[c] * shade[m]
            d[m] = s.depth
            classes[t][m] = s.class_id
        clean[t] = np.clip(img, 0, 1)
        depth[t, 0] = d
    return clean, depth, classes


def generate_toy_scene(spec, n_frames):
    """Deterministic clean RGB frames and depth maps for ``spec``.

    Returns ``(clean, depth)`` with shapes ``(T, 3, h, w)`` and
    ``(T, 1, h, w)``.
    """
    clean, depth, _ = render_toy_scene(spec, n_frames)
    return clean, depth


def make_toy_clip(spec, n_frames, params, split="train", video_id=None, quantize=False):
    clean, depth, classes = render_toy_scene(spec, n_frames)
    clip = Clip(video_id or f"toy{spec.seed:04d}", clean, depth, params, split, None, classes)
    clip.hazy = synthesize_video(clip, quantize=quantize)
    return clip


def make_toy_dataset(n_train, n_test, n_frames, size=64, seed=0, n_shapes=3,
                     A_range=DEFAULT_A_RANGE, beta_range=DEFAULT_BETA_RANGE, quantize=False):
    """Procedural train/test clips with per-video haze parameters.

    Videos get distinct scene seeds, so the splits never share a video.
    """
    clips = []
    for v in range(n_train + n_test):
        scene_seed = seed * 1000 + v
        spec = SceneSpec(size, size, n_shapes, scene_seed)
        params = assign_haze_params([seed, v, 7], A_range, beta_range)
        split = "train" if v < n_train else "test"
        clips.append(make_toy_clip(spec, n_frames, params, split, f"v{v:03d}", quantize))
    return clips


def save_clips(root, clips, depth_scale=DEFAULT_DEPTH_SCALE, write_hazy=True):
    """Write clips in the dataset directory layout (plus manifest)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clips:
        for t in range(len(clip)):
            stem = f"{t:04d}.png"
            write_rgb(root / clip.id / "rgb" / stem, clip.clean[t])
            write_depth(root / clip.id / "depth" / stem, clip.depth[t], depth_scale)
            if write_hazy and clip.hazy is not None:
                write_rgb(root / clip.id / "hazy" / stem, clip.hazy[t])
            if clip.classes is not None:
                lab = (clip.classes[t] + 1).astype(np.uint8)
                (root / clip.id / "labels").mkdir(parents=True, exist_ok=True)
                Image.fromarray(lab).save(root / clip.id / "labels" / stem)
        entries.append({"id": clip.id, "A": clip.params.A, "beta": clip.params.beta, "split": clip.split})
    write_manifest(root / MANIFEST, entries)
    return root
