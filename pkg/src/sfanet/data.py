"""Synthetic multi-scale scenes, netpbm I/O, and evaluation metrics."""

from __future__ import annotations

import json
import os
import re
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .ops import IGNORE_INDEX

SHAPE_KINDS = ("rectangle", "disk", "triangle")

# background first; one colour per shape class
PALETTE = np.array(
    [
        [60, 60, 60],
        [205, 70, 60],
        [65, 195, 70],
        [70, 90, 210],
        [210, 200, 70],
        [190, 80, 200],
        [70, 200, 200],
        [230, 140, 40],
    ],
    dtype=np.float64,
)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shape_kinds: tuple[str, ...] = ("rectangle", "disk", "triangle")
    scale_range: tuple[float, float] = (0.2, 0.55)
    shapes_per_image: tuple[int, int] = (1, 4)
    color_jitter: float = 30.0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.shape_kinds = tuple(self.shape_kinds)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)
        if self.num_classes < 1:
            raise ValueError("a scene needs at least one class (background)")
        if len(self.shape_kinds) != self.num_classes - 1:
            raise ValueError(
                f"need one shape kind per foreground class: {self.num_classes - 1} classes, "
                f"{len(self.shape_kinds)} kinds"
            )
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if self.num_classes > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} classes are supported")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid shapes_per_image {self.shapes_per_image}")


@dataclass
class Shape:
    kind: str
    label: int
    center: tuple[float, float]  # (y, x) in pixels
    size: tuple[float, float]  # (height, width); a disk uses size[0] as its diameter
    color: tuple[float, float, float]
    flip: bool = False  # triangles: apex at the bottom instead of the top


def shape_mask(shape: Shape, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    cy, cx = shape.center
    h, w = shape.size
    if shape.kind == "rectangle":
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    if shape.kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (h / 2) ** 2
    if shape.kind == "triangle":
        # isosceles: apex on one horizontal edge of the box, base on the other
        t = (yy - (cy - h / 2)) / h
        if shape.flip:
            t = 1 - t
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * w / 2)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render(spec: SceneSpec, shapes: list[Shape], rng: np.random.Generator, background=None):
    """Paint ``shapes`` back to front; returns (uint8 HxWx3 image, uint8 HxW labels)."""
    bg = PALETTE[0] if background is None else np.asarray(background, dtype=np.float64)
    image = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    image[:] = bg
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for s in shapes:
        m = shape_mask(s, spec.height, spec.width)
        image[m] = s.color
        labels[m] = s.label
    amp = spec.noise * 255.0
    image += rng.uniform(-amp, amp, size=image.shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), labels


def sample_shapes(spec: SceneSpec, rng: np.random.Generator) -> list[Shape]:
    lo, hi = spec.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    extent = min(spec.height, spec.width)
    shapes = []
    for _ in range(count):
        label = int(rng.integers(1, spec.num_classes)) if spec.num_classes > 1 else 0
        kind = spec.shape_kinds[label - 1] if label else "rectangle"
        h = rng.uniform(*spec.scale_range) * extent
        w = h if kind == "disk" else rng.uniform(*spec.scale_range) * extent
        center = (rng.uniform(0, spec.height), rng.uniform(0, spec.width))
        color = PALETTE[label] + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        shapes.append(Shape(kind, label, center, (h, w), tuple(color), bool(rng.integers(2))))
    return shapes


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (image, labels) pair for ``index``; a pure function of its arguments."""
    if index < 0:
        raise ValueError(f"scene index must be >= 0, got {index}")
    rng = np.random.default_rng([spec.seed, index])
    shapes = sample_shapes(spec, rng)
    bg = PALETTE[0] + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
    return render(spec, shapes, rng, background=bg)


# ---------------------------------------------------------------------------
# datasets


class SceneSet:
    """Index-addressed view over generated scenes (``indices`` selects a split)."""

    def __init__(self, spec: SceneSpec, indices):
        self.spec = spec
        self.indices = list(indices)
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices[i]
        if idx not in self._cache:
            self._cache[idx] = generate_scene(self.spec, idx)
        return self._cache[idx]


class DiskSceneSet:
    """Scenes read back from a directory written by :func:`write_dataset`."""

    def __init__(self, root: str | os.PathLike, split: str):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        lo, hi = self.manifest["splits"][split]
        self.entries = self.manifest["files"][lo:hi]
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int):
        if i not in self._cache:
            e = self.entries[i]
            self._cache[i] = (read_ppm(self.root / e["image"]), read_pgm(self.root / e["mask"]))
        return self._cache[i]


def channel_mean(dataset) -> np.ndarray:
    total = np.zeros(3)
    count = 0
    for i in range(len(dataset)):
        img = dataset[i][0]
        total += img.reshape(-1, 3).sum(axis=0)
        count += img.shape[0] * img.shape[1]
    return total / max(count, 1)


def split_bounds(count: int, val_count: int) -> dict[str, tuple[int, int]]:
    if not 0 <= val_count <= count:
        raise ValueError(f"validation split {val_count} outside [0, {count}]")
    return {"train": (0, count - val_count), "val": (count - val_count, count)}


def write_dataset(root: str | os.PathLike, spec: SceneSpec, count: int, val_count: int) -> dict:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    files = []
    for idx in range(count):
        image, labels = generate_scene(spec, idx)
        entry = {"index": idx, "image": f"images/{idx:05d}.ppm", "mask": f"masks/{idx:05d}.pgm"}
        write_ppm(root / entry["image"], image)
        write_pgm(root / entry["mask"], labels)
        files.append(entry)
    splits = split_bounds(count, val_count)
    train = SceneSet(spec, range(*splits["train"]))
    manifest = {
        "format": "sfanet-scenes",
        "version": 1,
        "count": count,
        "splits": {k: list(v) for k, v in splits.items()},
        "mean": [round(float(v), 6) for v in channel_mean(train)],
        "scene_spec": asdict(spec),
        "files": files,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    (root / "manifest.json").write_text(text)
    return json.loads(text)  # exactly what read_manifest will see


def read_manifest(root: str | os.PathLike) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# netpbm


class NetpbmError(ValueError):
    pass


_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise NetpbmError(f"expected magic {magic!r}, found {buf[:2]!r}")
    pos = 2
    values = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(buf, pos)
        if m is None or not m.group(1).isdigit():
            raise NetpbmError("malformed header")
        values.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise NetpbmError("malformed header: missing separator before payload")
    width, height, maxval = values
    if width < 1 or height < 1:
        raise NetpbmError(f"invalid extents {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    return width, height, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, start = _parse_header(buf, magic)
    need = width * height * channels
    payload = buf[start:start + need]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((height, width, channels) if channels > 1 else (height, width)).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an HxWx3 array, got {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"PPM data must be uint8, got {image.dtype}")
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def encode_pgm(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"PGM needs an HxW array, got {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = mask.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(mask, dtype=np.uint8).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    """Rows index ground truth, columns index prediction."""

    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, gt, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        gt = np.asarray(gt).reshape(-1).astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and ground truth differ in size: {pred.size} vs {gt.size}")
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
        n = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= n):
            raise ValueError(f"ground-truth label outside [0, {n})")
        if pred.size and (pred.min() < 0 or pred.max() >= n):
            raise ValueError(f"predicted label outside [0, {n})")
        self.counts += np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
        return self

    def class_iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    return cm.update(pred, gt, ignore_index)


def miou(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty: no non-ignored pixels were counted")
    return float(np.nanmean(cm.class_iou()))


# ---------------------------------------------------------------------------
# inference speed


class UnfoldedModelError(ValueError):
    """Speed measurements are only defined for BN-folded inference models."""


@dataclass
class BenchReport:
    input_hw: tuple[int, int]
    warmup: int
    iters: int
    mean_latency: float
    median_latency: float
    fps: float
    bn_folded: bool = True
    latencies: list[float] = field(default_factory=list, repr=False)

    def lines(self) -> list[str]:
        h, w = self.input_hw
        return [
            f"input: 1x3x{h}x{w}",
            f"bn_folded: {self.bn_folded}",
            f"warmup: {self.warmup}",
            f"iters: {self.iters}",
            f"mean_latency_ms: {self.mean_latency * 1e3:.4f}",
            f"median_latency_ms: {self.median_latency * 1e3:.4f}",
            f"fps: {self.fps:.2f}",
        ]


def bench_fps(model, input_hw: tuple[int, int], warmup: int = 10, iters: int = 100, seed: int = 0) -> BenchReport:
    """Wall-clock single-image forward latency of a BN-folded inference model."""
    if not getattr(model, "folded", False):
        raise UnfoldedModelError("bench_fps measures BN-folded models only; apply fold_batch_norm first")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    h, w = input_hw
    dtype = model.head.classifier.weight.dtype
    x = Tensor(np.random.default_rng(seed).normal(size=(1, 3, h, w)).astype(dtype))
    latencies = []
    with no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            latencies.append(time.perf_counter() - t0)
    mean = statistics.fmean(latencies)
    return BenchReport((h, w), warmup, iters, mean, statistics.median(latencies), 1.0 / mean, True, latencies)
