"""Anomaly sample simulation from unlabeled or weakly labeled rasters.

Two generators share one configuration.  The spectral generator plants
square regions whose pixels get their channels shuffled, then randomizes
each region boundary with a small affine warp.  The spatial generator
pastes rescaled objects from a bank onto a 1- or 3-band scene.  Both
return the composited raster together with a label mask and the final
per-region masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, PlacementError, ValidationError
from .raster import (
    CODE_ANOMALY,
    CODE_IGNORE,
    CODE_LARGE,
    META_NAME,
    LabelMask,
    Raster,
    read_raster,
    regroup_bands,
)

MASK_NAME = "mask.bin"

PLACEMENT_RETRIES = 100
AFFINE_RETRIES = 10
PLAN_MARGIN = 2  # planned squares keep a small gap so boundary warps can move
POSITIONS_PER_SIZE = 4  # paste placement: positions tried per size draw


@dataclass(frozen=True)
class SimConfig:
    """Area-ratio ranges, per-sample caps and affine warp bounds.

    Ranges are fractions of the sample area.  Within each domain the
    anomaly range sits strictly below the large-object range, so the two
    kinds stay size-separable.
    """

    spectral_anomaly_ratio: tuple = (0.0064, 0.0225)
    spectral_large_ratio: tuple = (0.0225, 0.5)
    spatial_anomaly_ratio: tuple = (0.02, 0.06)
    spatial_large_ratio: tuple = (0.06, 0.5)
    max_anomalies: int = 2
    max_large: int = 2
    rotation_deg: float = 45.0
    shear: float = 0.3
    scale_range: tuple = (0.8, 1.2)
    patch_side: int = 224

    def __post_init__(self):
        for name in ("spectral_anomaly_ratio", "spectral_large_ratio",
                     "spatial_anomaly_ratio", "spatial_large_ratio"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo < hi < 1.0:
                raise ValidationError(f"{name} must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")
        if self.spectral_anomaly_ratio[1] > self.spectral_large_ratio[0]:
            raise ValidationError("spectral anomaly range must sit below the large range")
        if self.spatial_anomaly_ratio[1] > self.spatial_large_ratio[0]:
            raise ValidationError("spatial anomaly range must sit below the large range")
        if self.max_anomalies < 1 or self.max_large < 1:
            raise ValidationError("per-sample object caps must be at least 1")
        if self.rotation_deg < 0 or self.shear < 0:
            raise ValidationError("warp bounds must be non-negative")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ValidationError(f"scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.patch_side < 32:
            raise ValidationError("patch side must be at least 32")

    def ratio_range(self, domain: str, kind: str) -> tuple[float, float]:
        return getattr(self, f"{domain}_{kind}_ratio")


@dataclass
class Region:
    kind: str  # "anomaly" or "large"
    mask: np.ndarray  # bool (h, w)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class RegionPlan:
    shape: tuple[int, int]
    regions: list = field(default_factory=list)


_KIND_CODE = {"large": CODE_LARGE, "anomaly": CODE_ANOMALY}


def _free_windows(occupied: np.ndarray, nh: int, nw: int) -> np.ndarray:
    """Top-left corners of all nh-by-nw windows free of occupied pixels."""
    h, w = occupied.shape
    if nh > h or nw > w:
        return np.empty((0, 2), dtype=np.int64)
    padded = np.zeros((h + 1, w + 1), dtype=np.int64)
    padded[1:, 1:] = occupied.cumsum(0).cumsum(1)
    sums = (padded[nh:, nw:] - padded[:-nh, nw:]
            - padded[nh:, :-nw] + padded[:-nh, :-nw])
    return np.argwhere(sums == 0)


def _side_bounds(lo: float, hi: float, h: int, w: int) -> tuple[int, int]:
    smin = max(1, int(np.ceil(np.sqrt(lo * h * w))))
    smax = min(int(np.floor(np.sqrt(hi * h * w))), h, w)
    if smin > smax:
        raise PlacementError(
            f"no square side fits ratio range ({lo}, {hi}) in a {h}x{w} frame"
        )
    return smin, smax


def select_regions(shape: tuple[int, int], cfg: SimConfig, rng,
                   include_large: bool = True) -> RegionPlan:
    """Pick disjoint square regions for the spectral generator.

    Draws one or two regions per enabled kind.  Side lengths are sampled
    so every square's area ratio lands inside its kind's range exactly.
    Placement is fully interior and retried up to 100 times per region.
    """
    h, w = shape
    n_large = int(rng.integers(1, cfg.max_large + 1)) if include_large else 0
    n_anom = int(rng.integers(1, cfg.max_anomalies + 1))
    kinds = ["large"] * n_large + ["anomaly"] * n_anom
    bounds = {kind: _side_bounds(*cfg.ratio_range("spectral", kind), h, w)
              for kind in set(kinds)}

    # placed bounding boxes, dilated by the margin so new squares keep clear
    occupied = np.zeros((h, w), dtype=bool)
    plan = RegionPlan(shape=(h, w))
    for kind in kinds:
        smin, smax = bounds[kind]
        placed = False
        for _ in range(PLACEMENT_RETRIES):
            # fresh size each retry: an oversize draw that cannot coexist
            # with already placed squares gets replaced, and the position
            # is sampled uniformly over the exact free-window set
            side = int(rng.integers(smin, smax + 1))
            spots = _free_windows(occupied, side, side)
            if not spots.shape[0]:
                continue
            top, left = (int(v) for v in spots[int(rng.integers(spots.shape[0]))])
            mask = np.zeros((h, w), dtype=bool)
            mask[top:top + side, left:left + side] = True
            t0 = max(0, top - PLAN_MARGIN)
            l0 = max(0, left - PLAN_MARGIN)
            occupied[t0:top + side + PLAN_MARGIN, l0:left + side + PLAN_MARGIN] = True
            plan.regions.append(Region(kind=kind, mask=mask))
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"could not place a disjoint {kind} square after "
                f"{PLACEMENT_RETRIES} retries"
            )
    plan.regions.sort(key=lambda r: -r.area)  # warp crowded big regions first
    return plan


def channel_shuffle(raster: Raster, rng) -> Raster:
    """Reorder the band axis with a random permutation."""
    perm = rng.permutation(raster.bands)
    return Raster(raster.values[perm], raster.modality)


def copy_paste_regions(shuffled: Raster, source: Raster, plan: RegionPlan) -> Raster:
    """Paste the shuffled raster's pixels into the source under the plan masks."""
    if shuffled.values.shape != source.values.shape:
        raise ValidationError("shuffled and source rasters must share one shape")
    if plan.shape != (source.height, source.width):
        raise ValidationError("plan shape does not match the raster")
    out = source.values.copy()
    for region in plan.regions:
        out[:, region.mask] = shuffled.values[:, region.mask]
    return Raster(out, source.modality)


def warp_mask(mask: np.ndarray, rotation_deg: float, shear: float,
              scale: float) -> np.ndarray:
    """Warp a boolean mask about its centroid with rotate/shear/scale.

    Nearest-neighbor resampling; pixels carried outside the frame are
    dropped.  Identity parameters reproduce the mask exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    cy, cx = ndimage.center_of_mass(mask)
    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, shear], [0.0, 1.0]])
    fwd = rot @ shr * scale
    inv = np.linalg.inv(fwd)
    center = np.array([cy, cx])
    offset = center - inv @ center
    warped = ndimage.affine_transform(
        mask.astype(np.float32), inv, offset=offset, order=0,
        mode="constant", cval=0.0, prefilter=False,
    )
    return warped > 0.5


def _affine_composite(content: Raster, base: Raster, plan: RegionPlan,
                      cfg: SimConfig, rng) -> tuple[Raster, LabelMask, list]:
    if content.values.shape != base.values.shape:
        raise ValidationError("content and base rasters must share one shape")
    if plan.shape != (base.height, base.width):
        raise ValidationError("plan shape does not match the raster")
    h, w = plan.shape
    out = base.values.copy()
    codes = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    final = []
    for region in plan.regions:
        lo, hi = cfg.ratio_range("spectral", region.kind)
        for _ in range(AFFINE_RETRIES):
            angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
            shear = float(rng.uniform(-cfg.shear, cfg.shear))
            scale = float(rng.uniform(*cfg.scale_range))
            warped = warp_mask(region.mask, angle, shear, scale)
            ratio = warped.sum() / (h * w)
            if lo <= ratio <= hi and not (warped & occupied).any():
                break
        else:
            raise PlacementError(
                f"no affine draw kept the {region.kind} region inside its "
                f"ratio range after {AFFINE_RETRIES} attempts"
            )
        occupied |= warped
        out[:, warped] = content.values[:, warped]
        codes[warped] = _KIND_CODE[region.kind]
        final.append(Region(kind=region.kind, mask=warped))
    return Raster(out, base.modality), LabelMask(codes), final


def affine_boundary(content: Raster, base: Raster, plan: RegionPlan,
                    cfg: SimConfig, rng) -> tuple[Raster, LabelMask]:
    """Randomize region boundaries, then composite content over base.

    Each plan mask is warped independently; a warp is redrawn when it
    pushes the region's area ratio out of range or collides with an
    already warped region.  Pixels outside every warped mask stay
    bit-equal to the base raster.
    """
    raster, labels, _ = _affine_composite(content, base, plan, cfg, rng)
    return raster, labels


@dataclass
class AnomalySample:
    """A simulated training sample with labels and per-region masks."""

    raster: Raster
    labels: LabelMask
    regions: list
    domain: str


def simulate_spectral(source: Raster, cfg: SimConfig, rng,
                      include_large: bool = True) -> AnomalySample:
    """Plant channel-shuffled regions with randomized boundaries.

    Every labeled pixel keeps the channel multiset of the source pixel at
    the same location; background pixels are bit-equal to the source.
    """
    if source.height < 32 or source.width < 32:
        raise ValidationError("spectral simulation needs at least a 32x32 raster")
    plan = select_regions((source.height, source.width), cfg, rng,
                          include_large=include_large)
    shuffled = channel_shuffle(source, rng)
    raster, labels, regions = _affine_composite(shuffled, source, plan, cfg, rng)
    return AnomalySample(raster=raster, labels=labels, regions=regions, domain="spectral")


@dataclass
class BankEntry:
    """One extractable object: a patch raster plus its foreground mask."""

    patch: Raster
    mask: np.ndarray
    category: str = "object"

    @property
    def area(self) -> int:
        return int(self.mask.sum())


class ObjectBank:
    """Objects available for pasting, indexed by foreground area ascending."""

    def __init__(self, entries):
        entries = list(entries)
        if not entries:
            raise ConfigurationError("object bank holds no usable entries")
        self.entries = sorted(entries, key=lambda e: e.area)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> BankEntry:
        return self.entries[idx]


def build_object_bank(path) -> ObjectBank:
    """Load a bank directory: one subdirectory per object.

    Each object holds the usual raster container plus ``mask.bin`` (one
    byte per pixel, 0 background / 1 foreground).  Entries with an empty
    foreground are skipped; an empty bank is a configuration error.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"missing object bank directory {root}")
    entries = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        patch, _ = read_raster(sub)
        mask_path = sub / MASK_NAME
        if not mask_path.is_file():
            raise FileNotFoundError(f"missing {mask_path}")
        raw = mask_path.read_bytes()
        if len(raw) != patch.height * patch.width:
            raise FormatError(
                f"{mask_path} holds {len(raw)} bytes, expected {patch.height * patch.width}"
            )
        flat = np.frombuffer(raw, dtype=np.uint8)
        if not np.isin(flat, (0, 1)).all():
            raise FormatError(f"{mask_path} holds values other than 0 and 1")
        mask = flat.reshape(patch.height, patch.width).astype(bool)
        if not mask.any():
            continue
        meta = json.loads((sub / META_NAME).read_text())
        entries.append(BankEntry(patch=patch, mask=mask,
                                 category=str(meta.get("category", "object"))))
    if not entries:
        raise ConfigurationError(f"object bank {root} holds no usable entries")
    return ObjectBank(entries)


def _resize_entry(entry: BankEntry, target_ratio: float, h: int, w: int):
    """Rescale one bank object; None when it cannot fit inside the frame."""
    ph, pw = entry.mask.shape
    scale = float(np.sqrt(target_ratio * h * w / entry.area))
    nh = max(1, round(ph * scale))
    nw = max(1, round(pw * scale))
    if nh > h or nw > w:
        return None
    rmask = cv2.resize(entry.mask.astype(np.uint8), (nw, nh),
                       interpolation=cv2.INTER_NEAREST).astype(bool)
    chw = entry.patch.values
    hwc = np.ascontiguousarray(chw.transpose(1, 2, 0))
    rpatch = cv2.resize(hwc, (nw, nh), interpolation=cv2.INTER_LINEAR)
    if rpatch.ndim == 2:
        rpatch = rpatch[:, :, None]
    return rmask, np.ascontiguousarray(rpatch.transpose(2, 0, 1))


def simulate_spatial(scene: Raster, scene_labels: LabelMask | None, bank: ObjectBank,
                     cfg: SimConfig, rng, include_large: bool = True) -> AnomalySample:
    """Paste rescaled bank objects onto a 1- or 3-band scene.

    Originally labeled scene pixels become ignore pixels.  Objects are
    drawn without replacement, split into large and anomaly groups,
    rescaled until each foreground lands in its kind's ratio range, and
    pasted fully interior and mutually disjoint.  Pixels untouched by any
    paste keep the scene's values bit-for-bit.
    """
    if scene.bands not in (1, 3):
        raise ValidationError(f"spatial simulation expects 1 or 3 bands, got {scene.bands}")
    h, w = scene.height, scene.width
    codes = np.zeros((h, w), dtype=np.uint8)
    if scene_labels is not None:
        if (scene_labels.height, scene_labels.width) != (h, w):
            raise ValidationError("scene labels do not match the scene shape")
        codes[scene_labels.codes != 0] = CODE_IGNORE

    n_large = int(rng.integers(1, cfg.max_large + 1)) if include_large else 0
    n_anom = int(rng.integers(1, cfg.max_anomalies + 1))
    total = n_large + n_anom
    if total > len(bank):
        raise ConfigurationError(
            f"object bank holds {len(bank)} entries but the draw needs {total}"
        )
    picks = rng.choice(len(bank), size=total, replace=False)
    jobs = [("large", bank[int(i)]) for i in picks[:n_large]]
    jobs += [("anomaly", bank[int(i)]) for i in picks[n_large:]]

    out = scene.values.copy()
    occupied = np.zeros((h, w), dtype=bool)
    regions = []
    size_draws = PLACEMENT_RETRIES // POSITIONS_PER_SIZE
    for kind, entry in jobs:
        lo, hi = cfg.ratio_range("spatial", kind)
        frame = None
        rmask = None
        rpatch = None
        for _ in range(size_draws):
            target = float(rng.uniform(lo, hi))
            resized = _resize_entry(entry, target, h, w)
            if resized is None:
                continue  # object cannot reach this ratio inside the frame
            cand_mask, cand_patch = resized
            if not lo <= cand_mask.sum() / (h * w) <= hi:
                continue  # rasterization pushed the ratio out, redraw
            nh, nw = cand_mask.shape
            spots = _free_windows(occupied, nh, nw)
            if spots.shape[0]:
                top, left = (int(v) for v in spots[int(rng.integers(spots.shape[0]))])
                frame = np.zeros((h, w), dtype=bool)
                frame[top:top + nh, left:left + nw] = cand_mask
                rmask, rpatch = cand_mask, cand_patch
                break
            # no window clears every bounding box; random tries can still
            # interleave foregrounds whose boxes overlap
            for _ in range(POSITIONS_PER_SIZE):
                top = int(rng.integers(0, h - nh + 1))
                left = int(rng.integers(0, w - nw + 1))
                cand = np.zeros((h, w), dtype=bool)
                cand[top:top + nh, left:left + nw] = cand_mask
                if not (cand & occupied).any():
                    frame, rmask, rpatch = cand, cand_mask, cand_patch
                    break
            if frame is not None:
                break
        if frame is None:
            raise PlacementError(
                f"could not paste a {kind} object after {PLACEMENT_RETRIES} retries"
            )
        adapted = regroup_bands(rpatch, scene.bands)
        occupied |= frame
        out[:, frame] = adapted[:, rmask]
        codes[frame] = _KIND_CODE[kind]
        regions.append(Region(kind=kind, mask=frame))

    return AnomalySample(
        raster=Raster(out, scene.modality),
        labels=LabelMask(codes),
        regions=regions,
        domain="spatial",
    )
