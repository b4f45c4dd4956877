"""Raster containers, label masks, disk I/O and synthetic scene generation.

A raster lives on disk as a directory holding ``meta.json`` plus a raw
``data.bin`` of little-endian float32 samples in band-sequential order
(band-major, then row-major).  An optional ``labels.bin`` carries one uint8
code per pixel in row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, PlacementError, ShapeError, ValidationError

MODALITIES = ("hyperspectral", "visible", "sar", "infrared", "lowlight", "synthetic")

CODE_BACKGROUND = 0
CODE_LARGE = 1
CODE_ANOMALY = 2
CODE_IGNORE = 255
LABEL_CODES = (CODE_BACKGROUND, CODE_LARGE, CODE_ANOMALY, CODE_IGNORE)

META_NAME = "meta.json"
DATA_NAME = "data.bin"
LABELS_NAME = "labels.bin"

_PLACEMENT_RETRIES = 100


@dataclass
class Raster:
    """A bands-by-height-by-width float32 image with a modality tag."""

    values: np.ndarray
    modality: str = "synthetic"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ShapeError(f"raster values must be 3-d (bands, h, w), got {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ShapeError(f"raster dimensions must be positive, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("raster values must be finite")
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def copy(self) -> "Raster":
        return Raster(self.values.copy(), self.modality)


@dataclass
class LabelMask:
    """Per-pixel uint8 codes: 0 background, 1 large object, 2 anomaly, 255 ignore."""

    codes: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        if self.codes.ndim != 2:
            raise ShapeError(f"label codes must be 2-d, got {self.codes.shape}")
        bad = ~np.isin(self.codes, LABEL_CODES)
        if bad.any():
            raise ValidationError(f"label mask holds invalid codes {np.unique(self.codes[bad])}")

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    def copy(self) -> "LabelMask":
        return LabelMask(self.codes.copy())


@dataclass
class AnomalyMap:
    """A height-by-width float32 score field with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"anomaly map must be 2-d, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("anomaly map values must be finite")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValidationError("anomaly map values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def regroup_bands(values: np.ndarray, count: int) -> np.ndarray:
    """Reduce or expand a (bands, h, w) stack to ``count`` channels.

    When there are fewer bands than requested the band axis is recycled
    cyclically up to ``count`` first.  The axis is then split into
    ``count`` contiguous near-equal groups and each group is averaged.
    """
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise ShapeError(f"band stack must be 3-d, got {values.shape}")
    if count < 1:
        raise ValidationError(f"channel count must be positive, got {count}")
    bands = values.shape[0]
    if bands < count:
        values = values[np.arange(count) % bands]
    groups = np.array_split(np.arange(values.shape[0]), count)
    return np.stack([values[g].mean(axis=0) for g in groups]).astype(np.float32)


def write_raster(raster: Raster, path, labels: LabelMask | None = None) -> None:
    """Write a raster (and optional label mask) as a container directory.

    Overwrites existing files.  Validation happens before anything is
    touched on disk, so a failed call leaves no partial container.
    """
    if labels is not None and (labels.height, labels.width) != (raster.height, raster.width):
        raise ShapeError(
            f"label mask {labels.codes.shape} does not match raster "
            f"{(raster.height, raster.width)}"
        )
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "height": raster.height,
        "width": raster.width,
        "bands": raster.bands,
        "dtype": "f32",
        "layout": "band-sequential",
        "modality": raster.modality,
    }
    (out / META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    (out / DATA_NAME).write_bytes(np.ascontiguousarray(raster.values, dtype="<f4").tobytes())
    if labels is not None:
        (out / LABELS_NAME).write_bytes(np.ascontiguousarray(labels.codes).tobytes())


def read_raster(path) -> tuple[Raster, LabelMask | None]:
    """Read a container directory back into a raster and optional labels."""
    src = Path(path)
    meta_path = src / META_NAME
    data_path = src / DATA_NAME
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing {meta_path}")
    if not data_path.is_file():
        raise FileNotFoundError(f"missing {data_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt {meta_path}: {exc}") from exc
    for key in ("height", "width", "bands", "dtype", "layout", "modality"):
        if key not in meta:
            raise FormatError(f"{meta_path} lacks required key {key!r}")
    if meta["dtype"] != "f32":
        raise FormatError(f"unsupported dtype {meta['dtype']!r}")
    if meta["layout"] != "band-sequential":
        raise FormatError(f"unsupported layout {meta['layout']!r}")
    h, w, b = int(meta["height"]), int(meta["width"]), int(meta["bands"])
    if h < 1 or w < 1 or b < 1:
        raise FormatError(f"non-positive dimensions in {meta_path}")
    raw = data_path.read_bytes()
    expected = h * w * b * 4
    if len(raw) != expected:
        raise FormatError(f"{data_path} holds {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4").reshape(b, h, w)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{data_path} holds non-finite samples")
    raster = Raster(values.copy(), str(meta["modality"]))
    labels = None
    labels_path = src / LABELS_NAME
    if labels_path.is_file():
        lraw = labels_path.read_bytes()
        if len(lraw) != h * w:
            raise FormatError(f"{labels_path} holds {len(lraw)} bytes, expected {h * w}")
        codes = np.frombuffer(lraw, dtype=np.uint8).reshape(h, w)
        if not np.isin(codes, LABEL_CODES).all():
            raise ValidationError(f"{labels_path} holds invalid label codes")
        labels = LabelMask(codes.copy())
    return raster, labels


def export_png(amap: AnomalyMap, path) -> None:
    """Export an anomaly map as an 8-bit grayscale PNG.

    Values are stretched with ``round(255 * (v - min) / (max - min))``; a
    constant map exports as all-zero pixels.
    """
    v = amap.values.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        px = np.round(255.0 * (v - lo) / (hi - lo))
    else:
        px = np.zeros_like(v)
    Image.fromarray(px.astype(np.uint8), mode="L").save(Path(path), format="PNG")


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for a synthetic labeled scene.

    ``background_mean``/``background_std`` may be scalars or per-band
    sequences.  ``anomaly_shift`` is expressed in background-stddev units
    and may be a scalar or one value per anomaly.  ``large_ratio`` adds a
    single rectangular region with its own mean when set.  ``speckle``
    applies multiplicative gamma noise with shape ``speckle_looks`` and
    unit mean, as in multi-look SAR intensity imagery.
    """

    height: int
    width: int
    bands: int
    background_mean: tuple | float = 0.5
    background_std: tuple | float = 0.1
    anomaly_count: int = 1
    anomaly_shift: tuple | float = 3.0
    anomaly_ratio: float = 0.01
    anomaly_shape: str = "rectangle"
    large_ratio: float | None = None
    large_mean: tuple | float = 1.0
    speckle: bool = False
    speckle_looks: float = 4.0
    modality: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.bands < 1:
            raise ValidationError("scene dimensions must be positive")
        if self.anomaly_count < 0:
            raise ValidationError("anomaly count must be non-negative")
        if self.anomaly_count and not 0.0 < self.anomaly_ratio <= 0.1:
            raise ValidationError("anomaly area ratio must lie in (0, 0.1]")
        if self.large_ratio is not None and not 0.0 < self.large_ratio <= 0.5:
            raise ValidationError("large-object area ratio must lie in (0, 0.5]")
        if self.anomaly_shape not in ("rectangle", "ellipse"):
            raise ValidationError(f"unknown anomaly shape {self.anomaly_shape!r}")
        if self.speckle and self.speckle_looks <= 0:
            raise ValidationError("speckle looks must be positive")
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")


def _per_band(value, bands: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        return np.full(bands, float(arr[0]))
    if arr.size != bands:
        raise ValidationError(f"{name} must be scalar or length {bands}, got {arr.size}")
    return arr.astype(np.float64)


def _per_item(value, count: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        return np.full(count, float(arr[0]))
    if arr.size != count:
        raise ValidationError(f"{name} must be scalar or length {count}, got {arr.size}")
    return arr.astype(np.float64)


def _rect_dims(ratio: float, h: int, w: int) -> tuple[int, int]:
    area = max(1.0, ratio * h * w)
    rh = max(1, min(h, int(round(np.sqrt(area)))))
    rw = max(1, min(w, int(round(area / rh))))
    return rh, rw


def _ellipse_mask(h: int, w: int, cy: int, cx: int, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _place_region(rng, occupied: np.ndarray, spec: SceneSpec, ratio: float,
                  shape: str) -> np.ndarray:
    """Pick a region mask disjoint from ``occupied``, retrying placement."""
    h, w = spec.height, spec.width
    for _ in range(_PLACEMENT_RETRIES):
        if shape == "rectangle":
            rh, rw = _rect_dims(ratio, h, w)
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            mask = np.zeros((h, w), dtype=bool)
            mask[top:top + rh, left:left + rw] = True
        else:
            r = float(np.sqrt(max(1.0, ratio * h * w) / np.pi))
            ry = min(r, (h - 1) / 2)
            rx = min(max(1.0, ratio * h * w / (np.pi * ry)), (w - 1) / 2)
            ylo, yhi = int(np.ceil(ry)), h - 1 - int(np.ceil(ry))
            xlo, xhi = int(np.ceil(rx)), w - 1 - int(np.ceil(rx))
            if yhi < ylo or xhi < xlo:
                raise PlacementError("ellipse does not fit inside the scene")
            cy = int(rng.integers(ylo, yhi + 1))
            cx = int(rng.integers(xlo, xhi + 1))
            mask = _ellipse_mask(h, w, cy, cx, ry, rx)
        if not (mask & occupied).any():
            return mask
    raise PlacementError("could not place a disjoint region after 100 retries")


def synth_scene(spec: SceneSpec) -> tuple[Raster, LabelMask]:
    """Generate a labeled synthetic scene from a seeded spec.

    The background is per-band Gaussian noise.  An optional large-object
    rectangle gets its own mean, anomalies are mean-shifted regions
    (rectangles or ellipses) placed disjointly, and speckle multiplies the
    finished scene.  Identical specs yield bit-identical outputs.
    """
    rng = np.random.default_rng(spec.seed)
    h, w, b = spec.height, spec.width, spec.bands
    means = _per_band(spec.background_mean, b, "background_mean")
    stds = _per_band(spec.background_std, b, "background_std")
    if (stds < 0).any():
        raise ValidationError("background stddev must be non-negative")
    shifts = _per_item(spec.anomaly_shift, max(spec.anomaly_count, 1), "anomaly_shift")

    values = rng.normal(0.0, 1.0, size=(b, h, w)) * stds[:, None, None] + means[:, None, None]
    codes = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)

    if spec.large_ratio is not None:
        large_means = _per_band(spec.large_mean, b, "large_mean")
        mask = _place_region(rng, occupied, spec, spec.large_ratio, "rectangle")
        noise = rng.normal(0.0, 1.0, size=(b, int(mask.sum())))
        values[:, mask] = large_means[:, None] + stds[:, None] * noise
        codes[mask] = CODE_LARGE
        occupied |= mask

    for i in range(spec.anomaly_count):
        mask = _place_region(rng, occupied, spec, spec.anomaly_ratio, spec.anomaly_shape)
        noise = rng.normal(0.0, 1.0, size=(b, int(mask.sum())))
        shifted = means + shifts[i] * stds
        values[:, mask] = shifted[:, None] + stds[:, None] * noise
        codes[mask] = CODE_ANOMALY
        occupied |= mask

    if spec.speckle:
        looks = float(spec.speckle_looks)
        values *= rng.gamma(looks, 1.0 / looks, size=values.shape)

    return Raster(values.astype(np.float32), spec.modality), LabelMask(codes)
