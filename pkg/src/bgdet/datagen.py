"""Synthetic underwater detection data and the on-disk dataset layout.

Clean scenes of textured shapes (one shape family per class) are rendered
deterministically from ``(seed, index)`` and then degraded photometrically
with a Beer-Lambert attenuation + backscatter model.  Datasets are written
in the YOLO text-label layout::

    <root>/images/<split>/<id>.png
    <root>/labels/<split>/<id>.txt     # "class_id cx cy w h" per line

``generate_dataset`` writes one such layout per domain (``underwater/`` and
``clear/``) next to a ``manifest.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import AnnotationError, ConfigError

UNDERWATER = "underwater"
CLEAR = "clear"
DOMAINS = (UNDERWATER, CLEAR)
SPLITS = ("train", "test")

URPC_CLASSES = ("holothurian", "echinus", "scallop", "starfish")

_SUPERSAMPLE = 4
_LABEL_DECIMALS = 6


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def to_line(self) -> str:
        d = _LABEL_DECIMALS
        return (f"{self.class_id} {self.cx:.{d}f} {self.cy:.{d}f} "
                f"{self.w:.{d}f} {self.h:.{d}f}")


@dataclass
class ImageSample:
    """An RGB image in [0, 1] (H x W x 3, float32) with its annotations."""

    pixels: np.ndarray
    boxes: list[BoxAnnotation]
    domain: str
    id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def boxes_array(self) -> np.ndarray:
        """Boxes as an (n, 5) float array of ``class, cx, cy, w, h``."""
        if not self.boxes:
            return np.zeros((0, 5), dtype=np.float32)
        return np.array([[b.class_id, b.cx, b.cy, b.w, b.h] for b in self.boxes],
                        dtype=np.float32)


@dataclass
class DegradationParams:
    beta: tuple[float, float, float] = (1.2, 0.5, 0.3)
    depth: float = 1.0
    ambient: tuple[float, float, float] = (0.08, 0.38, 0.45)
    blur_sigma: float = 0.7
    noise_sigma: float = 0.03
    contrast: float = 0.7

    def validate(self) -> "DegradationParams":
        values = [*self.beta, self.depth, *self.ambient, self.blur_sigma,
                  self.noise_sigma, self.contrast]
        if len(self.beta) != 3 or len(self.ambient) != 3:
            raise ConfigError("beta and ambient need exactly 3 channels (R, G, B)")
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("degradation parameters must be finite")
        if min(self.beta) < 0 or self.depth < 0:
            raise ConfigError(f"attenuation must be non-negative, got beta={self.beta}, "
                              f"depth={self.depth}")
        if not all(0.0 <= a <= 1.0 for a in self.ambient):
            raise ConfigError(f"ambient colour must lie in [0, 1], got {self.ambient}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur_sigma and noise_sigma must be >= 0")
        if not 0.0 < self.contrast <= 1.0:
            raise ConfigError(f"contrast must lie in (0, 1], got {self.contrast}")
        return self

    @classmethod
    def mild(cls) -> "DegradationParams":
        """Light water tint used for the clear-underwater target domain."""
        return cls(beta=(0.25, 0.1, 0.05), depth=1.0, ambient=(0.1, 0.4, 0.45),
                   blur_sigma=0.0, noise_sigma=0.01, contrast=0.95)

    @classmethod
    def identity(cls) -> "DegradationParams":
        return cls(beta=(0.0, 0.0, 0.0), depth=0.0, ambient=(0.0, 0.0, 0.0),
                   blur_sigma=0.0, noise_sigma=0.0, contrast=1.0)


@dataclass
class DatasetSpec:
    n_train: int = 500
    n_test: int = 100
    image_size: tuple[int, int] = (64, 64)
    classes: list[str] = field(default_factory=lambda: list(URPC_CLASSES))
    objects_per_image: tuple[int, int] = (1, 4)
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if self.n_train <= 0 or self.n_test <= 0:
            raise ConfigError("n_train and n_test must be positive")
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ConfigError(f"image_size must be positive multiples of 32, got {self.image_size}")
        if not self.classes:
            raise ConfigError("at least one class is required")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad objects_per_image range {self.objects_per_image}")
        return self

    @property
    def total(self) -> int:
        return self.n_train + self.n_test

    def split_of(self, index: int) -> str:
        return "train" if index < self.n_train else "test"


# --------------------------------------------------------------------------
# scene rendering

_CLASS_COLOURS = np.array([
    (0.30, 0.22, 0.18),  # holothurian: dark brown
    (0.25, 0.12, 0.30),  # echinus: dark purple
    (0.85, 0.72, 0.55),  # scallop: cream
    (0.90, 0.40, 0.20),  # starfish: orange
])


def _wrap(phi):
    return (phi + np.pi) % (2 * np.pi) - np.pi


def _shape_radius(family: int, phi: np.ndarray, s: float, phase: float) -> np.ndarray:
    if family == 0:  # elongated blob
        a, b = 1.0, 0.42
        r = a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
        return s * r * (1 + 0.06 * np.sin(5 * phi + phase))
    if family == 1:  # spiky disc
        return s * (0.62 + 0.38 * ((1 + np.cos(14 * phi)) / 2) ** 3)
    if family == 2:  # fan
        inside = np.abs(_wrap(phi)) <= 1.2
        return np.where(inside, s * (0.95 + 0.05 * np.cos(18 * phi)), 0.3 * s)
    # five-armed star
    return s * (0.38 + 0.62 * ((1 + np.cos(5 * phi)) / 2) ** 1.6)


def _shape_texture(family: int, r: np.ndarray, phi: np.ndarray, xx, yy, phase) -> np.ndarray:
    if family == 0:
        return 0.85 + 0.15 * np.sin(1.3 * xx + phase) * np.sin(1.1 * yy)
    if family == 1:
        return 0.8 + 0.2 * np.cos(14 * phi)
    if family == 2:
        return 0.8 + 0.2 * np.cos(18 * phi)
    return 0.85 + 0.15 * np.cos(2.0 * r + phase)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = np.array([0.62, 0.58, 0.45]) + rng.uniform(-0.06, 0.06, size=3)
    low = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=h / 8, mode="wrap")
    low /= np.abs(low).max() + 1e-12
    ramp = np.linspace(0.05, -0.05, h)[:, None]
    img = base[None, None, :] * (1 + 0.12 * low[..., None] + ramp[..., None])
    img += rng.normal(scale=0.02, size=(h, w, 3))
    return img


def _box_iou_xyxy(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def render_scene(spec: DatasetSpec, index: int) -> ImageSample:
    """Render clean scene ``index`` of ``spec`` (domain ``clear``)."""
    spec.validate()
    if not 0 <= index < spec.total:
        raise ConfigError(f"index {index} outside [0, {spec.total})")
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    ss = _SUPERSAMPLE
    img = _background(rng, h, w)

    # supersampled pixel-centre grid, in output-pixel units
    ys = (np.arange(h * ss) + 0.5) / ss
    xs = (np.arange(w * ss) + 0.5) / ss
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    placed: list[tuple[float, float, float, float]] = []
    boxes: list[BoxAnnotation] = []
    side = min(h, w)
    for _ in range(n_obj):
        cls = int(rng.integers(len(spec.classes)))
        family = cls % 4
        colour = np.clip(_CLASS_COLOURS[family] + rng.uniform(-0.06, 0.06, size=3), 0, 1)
        for attempt in range(30):
            s = rng.uniform(0.09, 0.2) * side
            cx = rng.uniform(s + 1, w - s - 1)
            cy = rng.uniform(s + 1, h - s - 1)
            theta = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            dx, dy = xx - cx, yy - cy
            r = np.hypot(dx, dy)
            phi = np.arctan2(dy, dx) - theta
            mask = r <= _shape_radius(family, phi, s, phase)
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            if rows.size == 0:
                continue
            xyxy = (int(cols[0]) / (w * ss), int(rows[0]) / (h * ss),
                    (int(cols[-1]) + 1) / (w * ss), (int(rows[-1]) + 1) / (h * ss))
            if attempt < 29 and any(_box_iou_xyxy(xyxy, p) > 0.2 for p in placed):
                continue
            break
        else:
            continue
        cover = mask.reshape(h, ss, w, ss).mean(axis=(1, 3))[..., None]
        tex = _shape_texture(family, r, phi, xx, yy, phase)
        tex = tex.reshape(h, ss, w, ss).mean(axis=(1, 3))[..., None]
        img = img * (1 - cover) + colour[None, None, :] * tex * cover
        placed.append(xyxy)
        x0, y0, x1, y1 = xyxy
        boxes.append(BoxAnnotation(cls, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))

    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels=pixels, boxes=boxes, domain=CLEAR, id=f"{index:06d}")


# --------------------------------------------------------------------------
# degradation

def attenuate(pixels: np.ndarray, p: DegradationParams) -> np.ndarray:
    """Beer-Lambert attenuation with additive backscatter, no blur or noise."""
    t = np.exp(-np.asarray(p.beta, dtype=np.float64) * p.depth)
    amb = np.asarray(p.ambient, dtype=np.float64)
    return pixels.astype(np.float64) * t + amb * (1.0 - t)


def degrade(img: ImageSample, p: DegradationParams, seed: int | None = None) -> ImageSample:
    """Apply the underwater degradation model to a clean image.

    Noise is drawn from a generator seeded by ``seed`` or, when omitted, by a
    CRC of the image id, so the result is a pure function of the inputs.
    """
    if img.domain != CLEAR:
        raise ConfigError(f"degrade expects a clear image, got domain {img.domain!r}")
    p.validate()
    out = attenuate(img.pixels, p)
    if p.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="reflect")
    if p.noise_sigma > 0:
        if seed is None:
            seed = zlib.crc32(img.id.encode())
        rng = np.random.default_rng(seed)
        out = np.clip(out + rng.normal(scale=p.noise_sigma, size=out.shape), 0.0, 1.0)
    out = 0.5 + p.contrast * (out - 0.5)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels=out, boxes=list(img.boxes), domain=UNDERWATER, id=img.id)


# --------------------------------------------------------------------------
# disk layout

def _to_png(pixels: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _write_sample(root: Path, split: str, sample: ImageSample) -> None:
    _to_png(sample.pixels, root / "images" / split / f"{sample.id}.png")
    lines = "".join(b.to_line() + "\n" for b in sample.boxes)
    (root / "labels" / split / f"{sample.id}.txt").write_text(lines)


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def generate_dataset(spec: DatasetSpec, p: DegradationParams, out_dir,
                     clear_params: DegradationParams | None = None) -> dict:
    """Render, degrade and write a paired underwater/clear dataset.

    The clear domain receives ``clear_params`` (mild tint by default), so
    the enhancer's target is clear *underwater* imagery rather than in-air.
    Returns the manifest that is also written to ``out_dir/manifest.json``.
    """
    spec.validate()
    p.validate()
    clear_params = (clear_params or DegradationParams.mild()).validate()
    out_dir = Path(out_dir)
    try:
        for domain in DOMAINS:
            for kind in ("images", "labels"):
                for split in SPLITS:
                    (out_dir / domain / kind / split).mkdir(parents=True, exist_ok=True)
        ids: dict[str, list[str]] = {s: [] for s in SPLITS}
        for index in range(spec.total):
            split = spec.split_of(index)
            scene = render_scene(spec, index)
            noise_seed = zlib.crc32(f"{spec.seed}:{index}".encode())
            _write_sample(out_dir / UNDERWATER, split, degrade(scene, p, seed=noise_seed))
            clear = degrade(scene, clear_params, seed=noise_seed + 1)
            clear.domain = CLEAR
            _write_sample(out_dir / CLEAR, split, clear)
            ids[split].append(scene.id)

        manifest = {
            "format_version": 1,
            "classes": list(spec.classes),
            "seed": spec.seed,
            "image_size": list(spec.image_size),
            "spec": _jsonable(dataclasses.asdict(spec)),
            "degradation": _jsonable(dataclasses.asdict(p)),
            "clear_degradation": _jsonable(dataclasses.asdict(clear_params)),
            "domains": {d: d for d in DOMAINS},
            "splits": {s: {"count": len(ids[s]), "ids": ids[s]} for s in SPLITS},
        }
        manifest["content_sha256"] = {d: _tree_digest(out_dir / d) for d in DOMAINS}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def read_manifest(root) -> dict | None:
    path = Path(root) / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


def _layout_root(root: Path, domain: str) -> Path:
    if (root / "images").is_dir():
        return root
    if (root / domain / "images").is_dir():
        return root / domain
    raise FileNotFoundError(f"no images/ directory under {root} (or {root / domain})")


def parse_label_file(path: Path) -> list[BoxAnnotation]:
    """Parse a YOLO-format label file; boxes are clipped to the image."""
    boxes = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            cls = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
            if cls < 0:
                raise ValueError("negative class id")
            if not all(math.isfinite(v) for v in (cx, cy, w, h)) or w <= 0 or h <= 0:
                raise ValueError("box width/height must be positive and finite")
        except ValueError as exc:
            raise AnnotationError(f"{path}:{lineno}: {exc}: {raw!r}") from None
        x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
        x1, y1 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
        if x1 <= x0 or y1 <= y0:
            raise AnnotationError(f"{path}:{lineno}: box lies outside the image: {raw!r}")
        if (x0, y0, x1, y1) != (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2):
            cx, cy, w, h = (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0
        boxes.append(BoxAnnotation(cls, cx, cy, w, h))
    return boxes


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_dataset(root, split: str, domain: str = UNDERWATER) -> Iterator[ImageSample]:
    """Yield the samples of ``split`` in lexicographic id order.

    ``root`` is either a layout root (with ``images/`` and ``labels/``) or a
    generated dataset directory holding one layout per domain.  Images
    without a label file are skipped with a warning.
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    base = _layout_root(Path(root), domain)
    image_dir = base / "images" / split
    label_dir = base / "labels" / split
    paths = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    for path in paths:
        label = label_dir / f"{path.stem}.txt"
        if not label.exists():
            warnings.warn(f"missing annotation file {label}; skipping {path.name}")
            continue
        yield ImageSample(pixels=load_image(path), boxes=parse_label_file(label),
                          domain=domain, id=path.stem)


def load_arrays(root, split: str, domain: str = UNDERWATER) -> tuple[np.ndarray, list[np.ndarray], list[str]]:
    """Load a whole split as an (N, 3, H, W) array plus per-image box arrays."""
    samples = list(load_dataset(root, split, domain))
    if not samples:
        raise FileNotFoundError(f"no samples in {root} split={split} domain={domain}")
    images = np.stack([s.pixels.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    return images, [s.boxes_array() for s in samples], [s.id for s in samples]


def class_names(root, default: Sequence[str] | None = None) -> list[str]:
    manifest = read_manifest(root)
    if manifest is not None:
        return list(manifest["classes"])
    if default is None:
        raise FileNotFoundError(f"{root} has no manifest.json and no class list was given")
    return list(default)
