"""Deterministic synthetic fixture suite for training and evaluation.

Generates a self-contained directory tree: anomaly-free training scenes
across three modality families (32-band spectral, 1-band speckled, 3-band
optical-like), labeled held-out scenes with planted anomalies, and an
object bank of small shape patches for the spatial generator.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .raster import META_NAME, Raster, SceneSpec, synth_scene, write_raster

SCENE_SIDE = 64
TRAIN_SPECTRAL = 22
TRAIN_SAR = 21
TRAIN_OPTICAL = 21
HELDOUT_PER_MODALITY = 12
BANK_SIZE = 24
SPECTRAL_BANDS = 32

_MODALITY_KINDS = ("spectral", "sar", "optical")


def _scene_seed(rng) -> int:
    return int(rng.integers(0, 2**63 - 1))


def _spectral_spec(rng, anomalies: bool) -> SceneSpec:
    means = tuple(rng.uniform(0.2, 0.8, SPECTRAL_BANDS))
    stds = tuple(rng.uniform(0.02, 0.08, SPECTRAL_BANDS))
    count = int(rng.integers(1, 3)) if anomalies else 0
    return SceneSpec(
        height=SCENE_SIDE, width=SCENE_SIDE, bands=SPECTRAL_BANDS,
        background_mean=means, background_std=stds,
        anomaly_count=count,
        anomaly_shift=3.0,
        anomaly_ratio=float(rng.uniform(0.006, 0.02)),
        anomaly_shape="rectangle" if rng.integers(2) else "ellipse",
        modality="hyperspectral",
        seed=_scene_seed(rng),
    )


def _sar_spec(rng, anomalies: bool) -> SceneSpec:
    count = int(rng.integers(1, 3)) if anomalies else 0
    return SceneSpec(
        height=SCENE_SIDE, width=SCENE_SIDE, bands=1,
        background_mean=float(rng.uniform(0.25, 0.5)),
        # multiplicative speckle swamps weak additive contrast; keep the
        # planted anomalies clearly above the speckle noise floor
        background_std=float(rng.uniform(0.03, 0.06)),
        anomaly_count=count,
        anomaly_shift=8.0,
        anomaly_ratio=float(rng.uniform(0.008, 0.02)),
        anomaly_shape="rectangle" if rng.integers(2) else "ellipse",
        speckle=True,
        speckle_looks=4.0,
        modality="sar",
        seed=_scene_seed(rng),
    )


def _optical_spec(rng, anomalies: bool) -> SceneSpec:
    count = int(rng.integers(1, 3)) if anomalies else 0
    return SceneSpec(
        height=SCENE_SIDE, width=SCENE_SIDE, bands=3,
        background_mean=tuple(rng.uniform(0.2, 0.8, 3)),
        background_std=tuple(rng.uniform(0.02, 0.08, 3)),
        anomaly_count=count,
        anomaly_shift=3.0,
        anomaly_ratio=float(rng.uniform(0.006, 0.02)),
        anomaly_shape="rectangle" if rng.integers(2) else "ellipse",
        modality="visible",
        seed=_scene_seed(rng),
    )


_SPECS = {"spectral": _spectral_spec, "sar": _sar_spec, "optical": _optical_spec}


def _bank_mask(shape: str, side: int) -> np.ndarray:
    mask = np.zeros((side, side), dtype=bool)
    c = (side - 1) / 2.0
    yy, xx = np.ogrid[:side, :side]
    if shape == "disc":
        r = side * 0.38
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= r * r
    elif shape == "box":
        m = max(1, side // 5)
        mask[m:side - m, m:side - m] = True
    elif shape == "bar":
        m = max(1, side // 3)
        mask[m:side - m, 1:side - 1] = True
    else:  # cross
        m = max(1, side // 3)
        mask[m:side - m, :] = True
        mask[:, m:side - m] = True
    return mask


def _bank_entry(rng, shape: str) -> tuple[Raster, np.ndarray, str]:
    side = int(rng.integers(10, 23))
    mask = _bank_mask(shape, side)
    back = rng.uniform(0.1, 0.9, 3)
    fore = rng.uniform(0.1, 0.9, 3)
    values = back[:, None, None] + rng.normal(0.0, 0.02, (3, side, side))
    values[:, mask] = fore[:, None] + rng.normal(0.0, 0.02, (3, int(mask.sum())))
    patch = Raster(np.clip(values, 0.0, 1.0).astype(np.float32), "visible")
    return patch, mask, shape


def write_bank_entry(path, patch: Raster, mask: np.ndarray, category: str) -> None:
    """Write one object-bank entry: raster container plus mask and category."""
    write_raster(patch, path)
    entry = Path(path)
    (entry / "mask.bin").write_bytes(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    meta = json.loads((entry / META_NAME).read_text())
    meta["category"] = category
    (entry / META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def generate_fixture_suite(root, seed: int = 0) -> dict:
    """Build the whole fixture tree under ``root`` and return its manifest."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    manifest = {"seed": seed, "train": {}, "heldout": {}, "bank": "bank"}

    train_plan = [
        ("spectral", "train/spectral", TRAIN_SPECTRAL),
        ("sar", "train/spatial", TRAIN_SAR),
        ("optical", "train/spatial", TRAIN_OPTICAL),
    ]
    counters = {}
    for kind, rel, count in train_plan:
        paths = manifest["train"].setdefault(rel.split("/")[1], [])
        for _ in range(count):
            idx = counters.get(rel, 0)
            counters[rel] = idx + 1
            spec = _SPECS[kind](rng, anomalies=False)
            raster, _ = synth_scene(spec)
            dest = root / rel / f"scene_{idx:03d}"
            write_raster(raster, dest)
            paths.append(str(dest.relative_to(root)))

    for kind in _MODALITY_KINDS:
        paths = manifest["heldout"].setdefault(kind, [])
        for idx in range(HELDOUT_PER_MODALITY):
            spec = _SPECS[kind](rng, anomalies=True)
            raster, labels = synth_scene(spec)
            dest = root / "heldout" / kind / f"scene_{idx:03d}"
            write_raster(raster, dest, labels)
            paths.append(str(dest.relative_to(root)))

    shapes = ("disc", "box", "bar", "cross")
    for idx in range(BANK_SIZE):
        patch, mask, category = _bank_entry(rng, shapes[idx % len(shapes)])
        write_bank_entry(root / "bank" / f"obj_{idx:03d}", patch, mask, category)

    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
