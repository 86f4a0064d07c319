"""MovingShapes: synthetic partially annotated clips with multi-rate dynamics.

Each clip has a textured background (class 0) drifting slowly, a large
slow blob (class 1), a medium shape (class 2) and a small fast shape
(class 3), composited in that painter's order. Geometry is integer
fixed-point (1/16 px) and objects bounce inside the frame, so labels at
any frame and any sampling grid can be re-rendered exactly from the
:class:`ClipSpec`. Floats only enter through colour, texture,
illumination and sensor noise, quantised to ``uint8`` by rounding.

On disk a dataset is ``manifest.txt`` plus ``clip_%05d/`` directories of
TNSR files (see :mod:`tafseg.tnsr`).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tnsr

FP = 16  # fixed-point subdivisions per pixel
IGNORE = 255

__all__ = [
    "GenParams",
    "ObjectSpec",
    "ClipSpec",
    "Clip",
    "Dataset",
    "TrainingPair",
    "PairBatch",
    "AugmentOptions",
    "DatasetError",
    "MissingFileError",
    "DimMismatchError",
    "gen_clip",
    "gen_dataset",
    "render_labels",
    "write_dataset",
    "read_dataset",
    "sample_pair",
    "augment_pair",
    "collate",
]


@dataclass(frozen=True)
class GenParams:
    size: int = 64
    num_classes: int = 4
    half_len: int = 15
    # (min, max) speed in px/frame per class; radius in px per class
    speeds: tuple[tuple[float, float], ...] = ((0.0, 0.19), (0.06, 0.25), (0.75, 1.25), (2.25, 3.0))
    radii: tuple[tuple[int, int], ...] = ((0, 0), (16, 20), (7, 9), (3, 5))
    color_jitter: float = 0.2
    texture_amp: float = 0.15
    illum_amp: float = 0.2
    cast_amp: float = 0.06
    frame_noise: float = 0.04

    def __post_init__(self):
        if self.num_classes != 4:
            raise ValueError("MovingShapes renders exactly 4 classes")
        if self.half_len < 0 or self.size < 16:
            raise ValueError("half_len must be >= 0 and size >= 16")
        if 2 * max(r for _, r in self.radii) >= self.size:
            raise ValueError(f"largest radius does not fit in a {self.size}px frame")

    @property
    def n_frames(self) -> int:
        return 2 * self.half_len + 1

    def static(self) -> GenParams:
        """Same scene statistics with nothing changing over time."""
        return replace(self, speeds=tuple((0.0, 0.0) for _ in self.speeds),
                       illum_amp=0.0, cast_amp=0.0, frame_noise=0.0)


_CLASS_COLORS = np.array([
    [0.45, 0.45, 0.42],
    [0.30, 0.50, 0.70],
    [0.72, 0.40, 0.30],
    [0.65, 0.62, 0.22],
])


@dataclass(frozen=True)
class ObjectSpec:
    cls: int
    radius: int
    p0: tuple[int, int]  # fixed-point (y, x) at frame 0
    v: tuple[int, int]  # fixed-point (vy, vx) per frame
    color: tuple[float, float, float]


@dataclass(frozen=True)
class ClipSpec:
    size: int
    n_frames: int
    objects: tuple[ObjectSpec, ...]
    bg_p0: tuple[int, int]
    bg_v: tuple[int, int]
    bg_pad: int

    def position(self, obj: ObjectSpec, t: int) -> tuple[int, int]:
        return tuple(_bounce(p, v, t, obj.radius * FP, (self.size - obj.radius) * FP)
                     for p, v in zip(obj.p0, obj.v))

    def bg_offset(self, t: int) -> tuple[int, int]:
        return tuple((p + v * t) // FP for p, v in zip(self.bg_p0, self.bg_v))


def _bounce(p0: int, v: int, t: int, lo: int, hi: int) -> int:
    span = hi - lo
    if span <= 0:
        return lo
    u = (p0 - lo + v * t) % (2 * span)
    return lo + (u if u <= span else 2 * span - u)


def render_labels(spec: ClipSpec, t: int, rows=None, cols=None) -> np.ndarray:
    """Label map of frame ``t`` sampled at pixel centres ``rows x cols``."""
    rows = np.arange(spec.size) if rows is None else np.asarray(rows)
    cols = np.arange(spec.size) if cols is None else np.asarray(cols)
    cy = rows.astype(np.int64)[:, None] * FP + FP // 2
    cx = cols.astype(np.int64)[None, :] * FP + FP // 2
    lab = np.zeros((rows.size, cols.size), dtype=np.uint8)
    for obj in spec.objects:
        py, px = spec.position(obj, t)
        r = obj.radius * FP
        inside = (cy - py) ** 2 + (cx - px) ** 2 <= r * r
        lab[inside] = obj.cls
    return lab


@dataclass
class Clip:
    clip_id: int
    frames: list[np.ndarray]  # uint8 [3,H,W]
    key_index: int
    key_label: np.ndarray  # uint8 [H,W]
    gt_all: list[np.ndarray] | None = None
    spec: ClipSpec | None = None

    @property
    def half_len(self) -> int:
        return self.key_index

    def image(self, idx: int) -> np.ndarray:
        return self.frames[idx].astype(np.float32) / 255.0


def _velocity(rng, lo: float, hi: float) -> tuple[int, int]:
    lo_fp, hi_fp = lo * FP, hi * FP
    if hi_fp <= 0:
        return (0, 0)
    for _ in range(1000):
        speed = rng.uniform(lo_fp, hi_fp)
        ang = rng.uniform(0, 2 * math.pi)
        v = (int(round(speed * math.sin(ang))), int(round(speed * math.cos(ang))))
        if lo_fp <= math.hypot(*v) <= hi_fp:
            return v
    raise RuntimeError("could not draw a velocity in range")


def _texture(rng, shape, amp: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros(shape)
    for _ in range(3):
        f = rng.uniform(0.08, 0.35, size=2)
        ph = rng.uniform(0, 2 * math.pi)
        tex += np.sin(f[0] * yy + f[1] * xx + ph)
    tex += 0.5 * rng.standard_normal(shape)
    return amp * tex / 3.0


def gen_clip(params: GenParams, rng: np.random.Generator, clip_id: int = 0, with_gt: bool = True) -> Clip:
    size, nf = params.size, params.n_frames
    objects = []
    for cls in (1, 2, 3):
        rmin, rmax = params.radii[cls]
        radius = int(rng.integers(rmin, rmax + 1))
        p0 = tuple(int(rng.integers(radius * FP, (size - radius) * FP + 1)) for _ in range(2))
        v = _velocity(rng, *params.speeds[cls])
        color = np.clip(_CLASS_COLORS[cls] + rng.normal(0, params.color_jitter, 3), 0, 1)
        objects.append(ObjectSpec(cls, radius, p0, v, tuple(float(c) for c in color)))
    bg_v = _velocity(rng, *params.speeds[0])
    pad = int(math.ceil(params.speeds[0][1] * nf)) + 1
    spec = ClipSpec(size, nf, tuple(objects), ((pad + 0) * FP, (pad + 0) * FP), bg_v, pad)
    # The background canvas is wide enough for drift in either direction.
    bg_color = np.clip(_CLASS_COLORS[0] + rng.normal(0, params.color_jitter, 3), 0, 1)
    canvas = bg_color[:, None, None] + _texture(rng, (size + 2 * pad, size + 2 * pad), params.texture_amp)
    obj_tex = [_texture(rng, (size, size), params.texture_amp / 3) for _ in objects]

    period = rng.uniform(20, 60)
    phase = rng.uniform(0, 2 * math.pi)
    gain_amp = rng.uniform(0, params.illum_amp)
    cast_ph = rng.uniform(0, 2 * math.pi, 3)
    cast_amp = rng.uniform(0, params.cast_amp, 3)

    frames, gts = [], []
    for t in range(nf):
        oy, ox = spec.bg_offset(t)
        img = canvas[:, oy:oy + size, ox:ox + size].copy()
        lab = render_labels(spec, t)
        for obj, tex in zip(objects, obj_tex):
            m = lab == obj.cls
            img[:, m] = (np.asarray(obj.color)[:, None] + tex[m][None, :])
        gain = 1.0 + gain_amp * math.sin(2 * math.pi * t / period + phase)
        cast = cast_amp * np.sin(2 * math.pi * t / period + cast_ph)
        img = img * gain + cast[:, None, None]
        if params.frame_noise > 0:
            img = img + rng.normal(0, params.frame_noise, img.shape)
        frames.append(np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8))
        gts.append(lab)
    key = params.half_len
    return Clip(clip_id, frames, key, gts[key].copy(), gts if with_gt else None, spec)


@dataclass
class Dataset:
    clips: list[Clip]
    num_classes: int = 4

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def half_len(self) -> int:
        return min(c.key_index for c in self.clips)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.clips[0].key_label.shape

    def key_images(self) -> np.ndarray:
        return np.stack([c.image(c.key_index) for c in self.clips])

    def key_labels(self) -> np.ndarray:
        return np.stack([c.key_label for c in self.clips])

    def images_at(self, offset: int) -> np.ndarray:
        return np.stack([c.image(c.key_index + offset) for c in self.clips])


def gen_dataset(n_clips: int, params: GenParams = GenParams(), seed: int = 0, with_gt: bool = True) -> Dataset:
    """Clip ``k`` is drawn from its own generator seeded ``seed + k``."""
    clips = [gen_clip(params, np.random.default_rng(seed + k), clip_id=k, with_gt=with_gt)
             for k in range(n_clips)]
    return Dataset(clips, params.num_classes)


# -- persistence ------------------------------------------------------------------


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class DimMismatchError(DatasetError):
    pass


def write_dataset(clips, directory, with_gt: bool = True) -> None:
    num_classes = clips.num_classes if isinstance(clips, Dataset) else 4
    clips = clips.clips if isinstance(clips, Dataset) else list(clips)
    os.makedirs(directory, exist_ok=True)
    lines = [f"# num_classes={num_classes}"]
    for c in clips:
        lines.append(f"{c.clip_id} {len(c.frames)} {c.key_index}")
        cdir = os.path.join(directory, f"clip_{c.clip_id:05d}")
        os.makedirs(cdir, exist_ok=True)
        for t, f in enumerate(c.frames):
            tnsr.save(os.path.join(cdir, f"frame_{t:03d}.tnsr"), f)
        tnsr.save(os.path.join(cdir, "label_key.tnsr"), c.key_label)
        if with_gt and c.gt_all is not None:
            for t, g in enumerate(c.gt_all):
                tnsr.save(os.path.join(cdir, f"gt_{t:03d}.tnsr"), g)
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _load(path, shape=None):
    if not os.path.exists(path):
        raise MissingFileError(f"missing file {path}")
    arr = tnsr.load(path, expect_dtype=np.uint8)
    if shape is not None and arr.shape != tuple(shape):
        raise DimMismatchError(f"{path}: dims {arr.shape}, expected {tuple(shape)}")
    return arr


def read_dataset(directory) -> Dataset:
    mpath = os.path.join(directory, "manifest.txt")
    if not os.path.exists(mpath):
        raise MissingFileError(f"missing manifest {mpath}")
    num_classes = 4
    entries = []
    with open(mpath, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for kv in line[1:].split():
                    k, _, v = kv.partition("=")
                    if k == "num_classes":
                        num_classes = int(v)
                continue
            cid, nf, key = (int(tok) for tok in line.split())
            entries.append((cid, nf, key))
    clips, frame_shape = [], None
    for cid, nf, key in entries:
        cdir = os.path.join(directory, f"clip_{cid:05d}")
        if not os.path.isdir(cdir):
            raise MissingFileError(f"missing clip directory {cdir}")
        frames = []
        for t in range(nf):
            f = _load(os.path.join(cdir, f"frame_{t:03d}.tnsr"), frame_shape)
            if f.ndim != 3 or f.shape[0] != 3:
                raise DimMismatchError(f"{cdir}/frame_{t:03d}.tnsr: expected [3,H,W], got {f.shape}")
            frame_shape = f.shape
            frames.append(f)
        label = _load(os.path.join(cdir, "label_key.tnsr"), frame_shape[1:])
        gt = None
        if os.path.exists(os.path.join(cdir, "gt_000.tnsr")):
            gt = [_load(os.path.join(cdir, f"gt_{t:03d}.tnsr"), frame_shape[1:]) for t in range(nf)]
        clips.append(Clip(cid, frames, key, label, gt))
    return Dataset(clips, num_classes)


# -- pair sampling and augmentation -------------------------------------------------


@dataclass
class TrainingPair:
    x_t: np.ndarray  # float32 [3,H,W]
    y_t: np.ndarray  # uint8 [H,W]
    x_pair: np.ndarray
    n: int
    clip_id: int
    clip_index: int = -1


@dataclass
class PairBatch:
    x_t: np.ndarray  # [B,3,H,W]
    y_t: np.ndarray  # [B,H,W]
    x_pair: np.ndarray
    n: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.n)


def collate(pairs) -> PairBatch:
    return PairBatch(np.stack([p.x_t for p in pairs]), np.stack([p.y_t for p in pairs]),
                     np.stack([p.x_pair for p in pairs]), np.array([p.n for p in pairs]))


def make_pair(ds: Dataset, index: int, n: int) -> TrainingPair:
    c = ds.clips[index]
    return TrainingPair(c.image(c.key_index), c.key_label, c.image(c.key_index + n), n, c.clip_id, index)


def sample_pair(ds: Dataset, cfg, rng: np.random.Generator, n_h_override: int | None = None,
                index: int | None = None) -> TrainingPair:
    """Key frame of a uniformly chosen clip plus an offset partner from the same clip."""
    from .taf import sample_offset

    if not ds.clips:
        raise DatasetError("empty dataset")
    if index is None:
        index = int(rng.integers(len(ds)))
    clip = ds.clips[index]
    n_h = n_h_override if n_h_override is not None else cfg.n_h
    n_h = min(n_h, clip.key_index, len(clip.frames) - 1 - clip.key_index)
    n = sample_offset(n_h, rng, cfg.exclude_zero_offset and n_h > 0) if n_h > 0 else 0
    return make_pair(ds, index, n)


@dataclass(frozen=True)
class AugmentOptions:
    flip: bool = True
    scale_range: tuple[float, float] = (1.0, 1.0)
    crop: int | None = None


@dataclass(frozen=True)
class Transform:
    """Source pixel index maps: ``out[i, j] = src[rows[i], cols[j]]``."""

    rows: np.ndarray
    cols: np.ndarray

    def apply(self, arr: np.ndarray) -> np.ndarray:
        return arr[..., self.rows[:, None], self.cols[None, :]]


def draw_transform(shape: tuple[int, int], rng: np.random.Generator, opts: AugmentOptions) -> Transform:
    """Scale (nearest), then crop inside the scaled image, then optional flip."""
    h, w = shape
    s = float(rng.uniform(*opts.scale_range)) if opts.scale_range[0] != opts.scale_range[1] else opts.scale_range[0]
    sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    rows = np.minimum((np.arange(sh) * h) // sh, h - 1)
    cols = np.minimum((np.arange(sw) * w) // sw, w - 1)
    ch = cw = opts.crop if opts.crop is not None else None
    if ch is None:
        ch, cw = sh, sw
    if ch > sh or cw > sw:
        raise ValueError(f"crop {ch}x{cw} larger than scaled image {sh}x{sw}")
    r0 = int(rng.integers(0, sh - ch + 1))
    c0 = int(rng.integers(0, sw - cw + 1))
    rows, cols = rows[r0:r0 + ch], cols[c0:c0 + cw]
    if opts.flip and rng.random() < 0.5:
        cols = cols[::-1]
    return Transform(rows.copy(), cols.copy())


def augment_pair(pair: TrainingPair, rng: np.random.Generator, opts: AugmentOptions = AugmentOptions(),
                 return_transform: bool = False):
    """Apply one geometric draw identically to ``x_t``, ``y_t`` and ``x_pair``."""
    tf = draw_transform(pair.y_t.shape, rng, opts)
    out = replace(pair, x_t=tf.apply(pair.x_t), y_t=tf.apply(pair.y_t), x_pair=tf.apply(pair.x_pair))
    return (out, tf) if return_transform else out
