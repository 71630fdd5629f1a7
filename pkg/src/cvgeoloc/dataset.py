"""Samples, JSON Lines annotations and the synthetic cross-view generator.

Annotation file: one JSON object per line::

    {"id": "s0001", "query_path": "images/s0001_q.png", "click_xy": [31.5, 30.2],
     "reference_path": "images/s0001_r.png", "bbox_xywh": [64.0, 40.5, 21.0, 17.0],
     "split": "train"}

``bbox_xywh`` is centre x, centre y, width, height in reference pixels;
``click_xy`` is in query pixels. Image paths are relative to the annotation
file; PNG and binary PPM are accepted.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import BENCH_TEST_SEED
from .detection import BBox
from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
REQUIRED_FIELDS = ("id", "query_path", "click_xy", "reference_path", "bbox_xywh", "split")


@dataclass
class Sample:
    id: str
    query_image: np.ndarray      # 3 x H_q x W_q, values in [0, 1]
    click: tuple[float, float]   # (x_q, y_q) query pixels
    reference_image: np.ndarray  # 3 x H_r x W_r
    gt_box: BBox
    split: str = "train"

    def __post_init__(self):
        validate_sample(self)


def validate_sample(s: Sample) -> None:
    _, hq, wq = s.query_image.shape
    _, hr, wr = s.reference_image.shape
    x, y = s.click
    if not (0 <= x < wq and 0 <= y < hq):
        raise InputError(f"sample {s.id}: click ({x}, {y}) outside {wq}x{hq} query image")
    x0, y0, x1, y1 = s.gt_box.corners()
    if x0 < 0 or y0 < 0 or x1 > wr or y1 > hr:
        raise InputError(f"sample {s.id}: box {s.gt_box.as_tuple()} outside {wr}x{hr} reference image")
    if s.split not in SPLITS:
        raise InputError(f"sample {s.id}: unknown split {s.split!r}")


# ---------------------------------------------------------------- image I/O

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(arr: np.ndarray, path) -> None:
    """Write a ``3 x H x W`` array in [0, 1] (or uint8) as PNG/PPM by suffix."""
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def _image_size(path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


# ---------------------------------------------------------------- annotations

def _parse_line(obj: dict, root: Path) -> Sample:
    missing = [f for f in REQUIRED_FIELDS if f not in obj]
    if missing:
        raise InputError(f"missing field(s) {', '.join(missing)}")
    click = tuple(float(v) for v in obj["click_xy"])
    bbox = [float(v) for v in obj["bbox_xywh"]]
    if len(click) != 2 or len(bbox) != 4:
        raise InputError("click_xy needs 2 values and bbox_xywh 4")
    q_path, r_path = root / obj["query_path"], root / obj["reference_path"]
    for p in (q_path, r_path):
        if not p.exists():
            raise InputError(f"image not found: {p}")
    return Sample(str(obj["id"]), read_image(q_path), click, read_image(r_path),
                  BBox(*bbox), str(obj["split"]))


def load_annotations(path, strict: bool = True) -> list[Sample]:
    """Read and validate a JSON Lines annotation file.

    With ``strict`` every bad line is collected and one :class:`InputError`
    listing them by line number is raised; otherwise bad lines are logged
    and skipped.
    """
    path = Path(path)
    root = path.parent
    samples, problems = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise InputError("line is not a JSON object")
            samples.append(_parse_line(obj, root))
        except (json.JSONDecodeError, InputError, ValueError, TypeError) as exc:
            problems.append(f"{path}:{lineno}: {exc}")
    if problems:
        if strict:
            raise InputError("invalid annotations:\n" + "\n".join(problems))
        for p in problems:
            log.warning(p)
    return samples


def write_annotations(samples, path, image_dir: str = "images", fmt: str = "png") -> Path:
    path = Path(path)
    img_root = path.parent / image_dir
    img_root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        q_rel = f"{image_dir}/{s.id}_q.{fmt}"
        r_rel = f"{image_dir}/{s.id}_r.{fmt}"
        write_image(s.query_image, path.parent / q_rel)
        write_image(s.reference_image, path.parent / r_rel)
        lines.append(json.dumps({
            "id": s.id, "query_path": q_rel, "click_xy": list(s.click),
            "reference_path": r_rel, "bbox_xywh": list(s.gt_box.as_tuple()), "split": s.split,
        }))
    path.write_text("".join(line + "\n" for line in lines))
    return path


# ---------------------------------------------------------------- splitting

def split_dataset(samples, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then cut into (train, val, test) lists."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    samples = list(samples)
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(n, int(math.floor(ratios[0] * n + 0.5)))
    n_val = min(n - n_train, int(math.floor(ratios[1] * n + 0.5)))
    cuts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    return tuple([samples[i] for i in idx] for idx in cuts)


# ---------------------------------------------------------------- synthetic data

PALETTE = np.array([
    (230, 40, 40), (40, 200, 60), (50, 80, 230), (240, 220, 50),
    (220, 60, 220), (60, 220, 230), (250, 140, 30), (245, 245, 245),
], dtype=np.float64)

SHAPES = ("rect", "disc", "cross")


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 256
    query_size: int = 64
    reference_size: int = 128
    shapes: tuple[str, ...] = SHAPES
    n_distractors: int = 3
    size_range: tuple[int, int] = (20, 40)
    scale_range: tuple[float, float] = (0.5, 2.0)
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    crop_jitter: float = 8.0
    border: int = 6          # width of the clutter band along reference edges
    clutter: int = 10        # clutter strokes per reference image
    noise: float = 8.0       # pixel noise std, 0-255 scale
    query_context: bool = False  # distractors also visible in the query view
    targets_per_scene: int = 1  # consecutive samples share a reference scene, each with its own target
    seed: int = 0
    split: str = "train"
    id_prefix: str = "syn"

    def __post_init__(self):
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        if not set(self.shapes) <= set(SHAPES) or not self.shapes:
            raise ConfigError(f"shapes must be drawn from {SHAPES}")
        if self.n_distractors + 1 > len(PALETTE):
            raise ConfigError(f"at most {len(PALETTE) - 1} distractors (one colour each)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad scale range {self.scale_range}")
        if not 1 <= self.targets_per_scene <= self.n_distractors + 1:
            raise ConfigError("targets_per_scene must lie in [1, n_distractors + 1]")
        if any(r % 90 for r in self.rotations):
            raise ConfigError("rotations must be multiples of 90 degrees")


@dataclass
class _Obj:
    shape: str
    cx: float
    cy: float
    w: int
    h: int
    color: np.ndarray

    def contains(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        lx = (px - self.cx) / (self.w / 2)
        ly = (py - self.cy) / (self.h / 2)
        if self.shape == "rect":
            return (np.abs(lx) <= 1) & (np.abs(ly) <= 1)
        if self.shape == "disc":
            return lx * lx + ly * ly <= 1
        arm = 1 / 3
        return ((np.abs(lx) <= 1) & (np.abs(ly) <= arm)) | ((np.abs(lx) <= arm) & (np.abs(ly) <= 1))


@dataclass
class RenderedSample:
    sample: Sample
    target_mask: np.ndarray = field(repr=False)  # H_r x W_r bool


def _place_objects(rng, spec: SyntheticSpec) -> list[_Obj]:
    size = spec.reference_size
    lo, hi = spec.border + 1, size - spec.border - 1
    colors = rng.choice(len(PALETTE), spec.n_distractors + 1, replace=False)
    objs: list[_Obj] = []
    boxes: list[tuple[int, int, int, int]] = []
    for ci in colors:
        for _ in range(1000):
            w, h = (int(v) for v in rng.integers(spec.size_range[0], spec.size_range[1] + 1, size=2))
            x0 = int(rng.integers(lo, hi - w + 1))
            y0 = int(rng.integers(lo, hi - h + 1))
            if all(x0 + w + 2 <= bx0 or bx1 + 2 <= x0 or y0 + h + 2 <= by0 or by1 + 2 <= y0
                   for bx0, by0, bx1, by1 in boxes):
                break
        else:
            raise ConfigError("could not place non-overlapping objects; reduce sizes or distractors")
        boxes.append((x0, y0, x0 + w, y0 + h))
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        objs.append(_Obj(shape, x0 + w / 2, y0 + h / 2, w, h, PALETTE[ci]))
    return objs


def _paint(canvas: np.ndarray, objs, px, py, gain: float) -> list[np.ndarray]:
    masks = []
    for o in objs:
        m = o.contains(px, py)
        canvas[m] = np.clip(o.color * gain, 0, 255)
        masks.append(m)
    return masks


def _background(rng, h, w, spec) -> np.ndarray:
    level = rng.uniform(90, 140)
    tint = rng.uniform(-12, 12, size=3)
    return np.broadcast_to(level + tint, (h, w, 3)).copy()


def _clutter(rng, canvas: np.ndarray, spec: SyntheticSpec) -> None:
    size = spec.reference_size
    b = spec.border
    for _ in range(spec.clutter):
        color = PALETTE[int(rng.integers(len(PALETTE)))]
        length = int(rng.integers(4, 16))
        side = int(rng.integers(4))
        off = int(rng.integers(0, size - length))
        depth = int(rng.integers(0, max(1, b - 1)))
        thick = int(rng.integers(1, 3))
        if side == 0:
            canvas[depth:depth + thick, off:off + length] = color
        elif side == 1:
            canvas[size - depth - thick:size - depth, off:off + length] = color
        elif side == 2:
            canvas[off:off + length, depth:depth + thick] = color
        else:
            canvas[off:off + length, size - depth - thick:size - depth] = color


def _finish(rng, canvas: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    noisy = canvas + rng.normal(0.0, spec.noise, size=canvas.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def render_sample(spec: SyntheticSpec, index: int) -> RenderedSample:
    """Render sample ``index``; depends only on ``(spec, index)``.

    The reference scene is drawn from ``(seed, scene)`` where
    ``scene = index // targets_per_scene``, so samples of one scene share
    an identical reference image and differ in which object is the target.
    """
    scene, which = divmod(index, spec.targets_per_scene)
    scene_rng = np.random.default_rng([spec.seed, scene])
    rng = np.random.default_rng([spec.seed, scene, which, 1])
    objs = _place_objects(scene_rng, spec)
    target = objs[which]

    rs = spec.reference_size
    ry, rx = np.mgrid[0:rs, 0:rs] + 0.5
    ref = _background(scene_rng, rs, rs, spec)
    masks = _paint(ref, objs, rx, ry, scene_rng.uniform(0.9, 1.1))
    _clutter(scene_rng, ref, spec)
    r_img = _finish(scene_rng, ref, spec).astype(np.float64) / 255.0
    tmask = masks[which]
    ys, xs = np.nonzero(tmask)
    gt = BBox.from_corners(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))

    lo, hi = spec.scale_range
    scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    theta = math.radians(spec.rotations[int(rng.integers(len(spec.rotations)))])
    qs = spec.query_size
    jx, jy = rng.uniform(-spec.crop_jitter, spec.crop_jitter, size=2)
    click = (qs / 2 + jx, qs / 2 + jy)
    qy, qx = np.mgrid[0:qs, 0:qs] + 0.5
    dx, dy = (qx - click[0]) / scale, (qy - click[1]) / scale
    c, s = math.cos(theta), math.sin(theta)
    wx = target.cx + c * dx + s * dy
    wy = target.cy - s * dx + c * dy
    query = _background(rng, qs, qs, spec)
    _paint(query, objs if spec.query_context else [target], wx, wy, rng.uniform(0.9, 1.1))
    q_img = _finish(rng, query, spec).astype(np.float64) / 255.0
    sample = Sample(f"{spec.id_prefix}{index:05d}", q_img, click, r_img, gt, spec.split)
    return RenderedSample(sample, tmask)


def generate_samples(spec: SyntheticSpec) -> list[Sample]:
    return [render_sample(spec, i).sample for i in range(spec.n_samples)]


def benchmark_split(n_train: int, n_test: int, seed: int = 0, **spec_kw) -> tuple[list[Sample], list[Sample]]:
    """Disjoint synthetic train/test sets; the test stream uses its own seed."""
    train = generate_samples(SyntheticSpec(n_samples=n_train, seed=seed, split="train", **spec_kw))
    test = generate_samples(SyntheticSpec(n_samples=n_test, seed=seed + BENCH_TEST_SEED, split="test",
                                          id_prefix="syn-test", **spec_kw))
    return train, test


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Render ``spec`` to ``out_dir/annotations.jsonl`` plus PNG images."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return write_annotations(generate_samples(spec), out / "annotations.jsonl")
