"""Images, annotations, manifests, letterboxing and synthetic aerial scenes."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .evaluation import GroundTruthBox

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


class ImageFormatError(ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != magic:
        kind = {b"P3": "ASCII PPM", b"P2": "ASCII PGM", b"P6": "binary PPM", b"P5": "binary PGM"}.get(data[:2])
        found = kind or repr(data[:2])
        raise UnsupportedFormatError(f"{path}: {found} is not supported here, expected {magic.decode()}")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise TruncatedImageError(f"{path}: header ends early")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header {fields}") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: max value {maxval}, only 255 is supported")
    pos += 1  # single whitespace byte before the raster
    need = width * height * channels
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise TruncatedImageError(f"{path}: raster has {len(raster)} of {need} bytes")
    return np.frombuffer(raster, np.uint8).reshape(height, width, channels)


def load_ppm(path: PathLike) -> np.ndarray:
    """Binary P6 file -> float ``(3, H, W)`` tensor in [0, 1]."""
    pixels = _read_pnm(path, b"P6", 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_ppm(image: np.ndarray, path: PathLike) -> None:
    """Write a ``(3, H, W)`` tensor in [0, 1] as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    raster = to_bytes(image).transpose(1, 2, 0)
    h, w = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(raster).tobytes())


def save_pgm(image: np.ndarray, path: PathLike) -> None:
    """Write an ``(H, W)`` uint8 array as binary P5."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected an (H, W) image, got {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise ValueError("PGM values must lie in [0, 255]")
        image = image.astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image).tobytes())


def load_pgm(path: PathLike) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)[:, :, 0].copy()


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


class AnnotationError(ValueError):
    pass


_FIELDS = ("class_id", "cx", "cy", "w", "h")


def parse_annotations(path: PathLike) -> list[GroundTruthBox]:
    """Darknet-style ``class_id cx cy w h`` lines, coordinates normalized."""
    boxes = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise AnnotationError(f"{path}:{n}: expected 5 fields, got {len(parts)}")
        try:
            class_id = int(parts[0])
            values = [float(p) for p in parts[1:]]
        except ValueError:
            raise AnnotationError(f"{path}:{n}: malformed line {line!r}") from None
        if class_id < 0:
            raise AnnotationError(f"{path}:{n}: class_id {class_id} is negative")
        for name, v in zip(_FIELDS[1:], values):
            lo_ok = v > 0 if name in ("w", "h") else v >= 0
            if not (lo_ok and v <= 1) or not np.isfinite(v):
                raise AnnotationError(f"{path}:{n}: {name}={v} out of range")
        boxes.append(GroundTruthBox(class_id, *values))
    return boxes


def format_annotation(box: GroundTruthBox) -> str:
    return f"{box.class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"


def save_annotations(boxes: Sequence[GroundTruthBox], path: PathLike) -> None:
    Path(path).write_text("".join(format_annotation(b) + "\n" for b in boxes))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    images: list
    class_names: list = field(default_factory=list)

    def annotation_path(self, i: int) -> Path:
        return Path(self.images[i]).with_suffix(".txt")

    def __len__(self):
        return len(self.images)


def read_class_names(path: PathLike) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def load_manifest(path: PathLike, names: Optional[PathLike] = None) -> DatasetManifest:
    """One image path per line (``#`` comments allowed), relative to the manifest.

    The class table comes from ``names`` or, failing that, a ``classes.txt``
    beside the manifest.
    """
    path = Path(path)
    base = path.parent
    images = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            images.append(p if p.is_absolute() else base / p)
    if not images:
        raise ManifestError(f"{path}: manifest lists no images")
    missing = []
    for img in images:
        if not img.exists():
            missing.append(f"image {img}")
        if not img.with_suffix(".txt").exists():
            missing.append(f"annotation {img.with_suffix('.txt')}")
    if missing:
        raise ManifestError(f"{path}: {len(missing)} missing entries:\n  " + "\n  ".join(missing))
    table = Path(names) if names is not None else base / "classes.txt"
    class_names = read_class_names(table) if table.exists() else []
    if class_names:
        for img in images:
            for box in parse_annotations(img.with_suffix(".txt")):
                if box.class_id >= len(class_names):
                    raise ManifestError(
                        f"{img.with_suffix('.txt')}: class id {box.class_id} but only {len(class_names)} classes"
                    )
    return DatasetManifest(images, class_names)


def write_manifest(images: Sequence[PathLike], path: PathLike) -> None:
    base = Path(path).parent
    lines = []
    for img in images:
        img = Path(img)
        try:
            lines.append(str(img.relative_to(base)))
        except ValueError:
            lines.append(str(img))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# letterboxing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LetterboxTransform:
    """Maps between original pixel coordinates and the square network canvas."""

    orig_w: int
    orig_h: int
    target: int
    scale_x: float
    scale_y: float
    pad_x: int
    pad_y: int

    def point_to_network(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale_x + self.pad_x, y * self.scale_y + self.pad_y

    def point_to_original(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.pad_x) / self.scale_x, (y - self.pad_y) / self.scale_y

    def box_to_original(self, box) -> tuple:
        """Normalized network-space ``(cx, cy, w, h)`` -> original pixels."""
        cx, cy, w, h = box
        t = self.target
        x, y = self.point_to_original(cx * t, cy * t)
        return (x, y, w * t / self.scale_x, h * t / self.scale_y)

    def box_to_network(self, box) -> tuple:
        """Original-pixel ``(cx, cy, w, h)`` -> normalized network space."""
        cx, cy, w, h = box
        t = self.target
        x, y = self.point_to_network(cx, cy)
        return (x / t, y / t, w * self.scale_x / t, h * self.scale_y / t)

    def gt_to_network(self, gt: GroundTruthBox) -> GroundTruthBox:
        """Letterbox an annotation given in original-image fractions."""
        box = (gt.cx * self.orig_w, gt.cy * self.orig_h, gt.w * self.orig_w, gt.h * self.orig_h)
        cx, cy, w, h = self.box_to_network(box)
        return GroundTruthBox(gt.class_id, cx, cy, min(w, 1.0), min(h, 1.0))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``(C, H, W)`` with pixel-center alignment."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(image.dtype)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    rows = image[:, y0] * (1 - fy)[None, :, None] + image[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def letterbox(image: np.ndarray, target: int, pad_value: float = 0.5):
    """Aspect-preserving resize onto a ``target`` square, centered, gray-padded.

    Returns ``(canvas, LetterboxTransform)``.
    """
    if target < 8:
        raise ValueError(f"target must be >= 8, got {target}")
    _, h, w = image.shape
    scale = min(target / w, target / h)
    nw = max(1, min(target, int(round(w * scale))))
    nh = max(1, min(target, int(round(h * scale))))
    canvas = np.full((3, target, target), pad_value, image.dtype)
    px, py = (target - nw) // 2, (target - nh) // 2
    canvas[:, py:py + nh, px:px + nw] = resize_bilinear(image, nh, nw)
    return canvas, LetterboxTransform(w, h, target, nw / w, nh / h, px, py)


def load_dataset(manifest: DatasetManifest, input_size: int):
    """``[(canvas, boxes, transform)]`` for every manifest entry, letterboxed."""
    items = []
    for i, img_path in enumerate(manifest.images):
        image = load_ppm(img_path)
        canvas, tf = letterbox(image, input_size)
        boxes = [tf.gt_to_network(b) for b in parse_annotations(manifest.annotation_path(i))]
        items.append((canvas, boxes, tf))
    return items


# ---------------------------------------------------------------------------
# synthetic aerial scenes
# ---------------------------------------------------------------------------

# per-class look: long-side fraction of the size range, aspect (long/short),
# base RGB, rectangle or ellipse
_SIGNATURES = [
    dict(size=(0.0, 0.3), aspect=1.8, color=(0.85, 0.15, 0.12), ellipse=False),  # small car
    dict(size=(0.6, 1.0), aspect=2.6, color=(0.95, 0.95, 0.90), ellipse=False),  # long truck
    dict(size=(0.3, 0.6), aspect=1.2, color=(0.10, 0.25, 0.85), ellipse=True),  # round-ish craft
    dict(size=(0.2, 0.5), aspect=3.2, color=(0.95, 0.80, 0.10), ellipse=True),  # boat
    dict(size=(0.4, 0.8), aspect=1.5, color=(0.15, 0.75, 0.75), ellipse=False),
    dict(size=(0.1, 0.4), aspect=2.2, color=(0.80, 0.20, 0.80), ellipse=True),
]


@dataclass
class SynthConfig:
    image_size: int = 152
    count_range: tuple = (2, 6)
    size_range: tuple = (10, 40)
    num_classes: int = 2
    clutter: float = 0.5
    occlusion_prob: float = 0.2
    shadow_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad count_range {self.count_range}")
        smin, smax = self.size_range
        if smin < 2 or smax < smin:
            raise ValueError(f"bad size_range {self.size_range}; sizes must be >= 2 px and ordered")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


def _smooth_noise(rng, n, cell):
    coarse = rng.random((n // cell + 2, n // cell + 2))
    return resize_bilinear(coarse[None], n, n)[0]


def _signature(class_id: int) -> dict:
    sig = dict(_SIGNATURES[class_id % len(_SIGNATURES)])
    if class_id >= len(_SIGNATURES):
        shift = 0.15 * (class_id // len(_SIGNATURES))
        sig["color"] = tuple((c + shift) % 1.0 for c in sig["color"])
    return sig


def synth_scene(cfg: SynthConfig, index: int):
    """Deterministic synthetic aerial tile ``(image (3,N,N), boxes)`` for ``(cfg.seed, index)``.

    Background: smooth textured ground plus road strips.  Vehicles are
    axis-aligned rectangles or ellipses with per-class size, aspect and color;
    some get a cast shadow or a partial canopy occluder.  Boxes always cover
    the full vehicle extent, occluded or not.
    """
    n = cfg.image_size
    if cfg.size_range[1] > n:
        raise ValueError(f"objects up to {cfg.size_range[1]} px do not fit a {n} px image")
    rng = np.random.default_rng([cfg.seed, index])
    ground = np.array([0.38, 0.42, 0.30])
    tex = _smooth_noise(rng, n, max(4, n // 12)) - 0.5
    grain = rng.random((n, n)) - 0.5
    lum = 1.0 + cfg.clutter * (0.5 * tex + 0.25 * grain)
    image = ground[:, None, None] * lum[None]

    for _ in range(int(rng.integers(1, 3))):
        width = int(rng.integers(max(3, n // 16), max(4, n // 8)))
        pos = int(rng.integers(0, n - width))
        road = np.array([0.45, 0.45, 0.47]) * (1 + 0.1 * cfg.clutter * (rng.random() - 0.5))
        sl = (slice(None), slice(pos, pos + width)) if rng.random() < 0.5 else (slice(pos, pos + width), slice(None))
        image[(slice(None),) + sl] = road[:, None, None] * (1 + 0.1 * cfg.clutter * grain[sl])[None]

    yy, xx = np.mgrid[0:n, 0:n]
    boxes: list[GroundTruthBox] = []
    placed: list[tuple] = []
    smin, smax = cfg.size_range
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    for _ in range(count):
        cls = int(rng.integers(cfg.num_classes))
        sig = _signature(cls)
        f0, f1 = sig["size"]
        long_side = int(round(smin + (smax - smin) * rng.uniform(f0, f1)))
        short_side = max(2, int(round(long_side / sig["aspect"])))
        bw, bh = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
        for _attempt in range(30):
            x0 = int(rng.integers(0, n - bw + 1))
            y0 = int(rng.integers(0, n - bh + 1))
            if all(x0 >= px1 + 1 or x0 + bw + 1 <= px0 or y0 >= py1 + 1 or y0 + bh + 1 <= py0
                   for px0, py0, px1, py1 in placed):
                break
        else:
            continue
        placed.append((x0, y0, x0 + bw, y0 + bh))

        if rng.random() < cfg.shadow_prob:
            dx, dy = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            image[:, min(n, y0 + dy):min(n, y0 + bh + dy), min(n, x0 + dx):min(n, x0 + bw + dx)] *= 0.55

        inside = (xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)
        if sig["ellipse"]:
            ex, ey = x0 + bw / 2 - 0.5, y0 + bh / 2 - 0.5
            inside &= ((xx - ex) / (bw / 2)) ** 2 + ((yy - ey) / (bh / 2)) ** 2 <= 1.0
        color = np.clip(np.array(sig["color"]) + rng.normal(0, 0.04, 3), 0, 1)
        image[:, inside] = color[:, None] * (0.92 + 0.08 * rng.random(int(inside.sum())))[None]
        if not sig["ellipse"]:
            # windshield stripe keeps rectangles from reading as flat blobs
            if bw >= bh:
                image[:, y0:y0 + bh, x0 + bw // 5:x0 + bw // 5 + max(1, bw // 8)] *= 0.4
            else:
                image[:, y0 + bh // 5:y0 + bh // 5 + max(1, bh // 8), x0:x0 + bw] *= 0.4

        if rng.random() < cfg.occlusion_prob:
            r = max(2.0, 0.3 * min(bw, bh))
            ox = x0 + (0 if rng.random() < 0.5 else bw)
            oy = y0 + rng.uniform(0, bh)
            canopy = (xx - ox) ** 2 + (yy - oy) ** 2 <= r * r
            image[:, canopy] = (np.array([0.12, 0.30, 0.10]) * (0.8 + 0.4 * rng.random()))[:, None]

        boxes.append(GroundTruthBox(cls, (x0 + bw / 2) / n, (y0 + bh / 2) / n, bw / n, bh / n))

    return np.clip(image, 0.0, 1.0).astype(np.float32), boxes


def write_synth_dataset(cfg: SynthConfig, count: int, out_dir: PathLike, class_names=None):
    """Write ``count`` scenes as PPM + annotation pairs plus ``train.txt`` and ``classes.txt``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        image, boxes = synth_scene(cfg, i)
        p = out / "images" / f"scene_{i:05d}.ppm"
        save_ppm(image, p)
        save_annotations(boxes, p.with_suffix(".txt"))
        paths.append(p)
    write_manifest(paths, out / "train.txt")
    names = class_names or [f"class{c}" for c in range(cfg.num_classes)]
    (out / "classes.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    return out / "train.txt"
