"""Single-file checkpoints: a stored (uncompressed) zip with a manifest.

``manifest.json`` records the format version, tensor names/shapes/offsets
and any extra metadata; ``tensors.bin`` concatenates all tensors as
little-endian float32.  Writing is byte-deterministic: fixed member
timestamps, no compression, tensor names sorted.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
TENSORS_NAME = "tensors.bin"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_tensor_archive(path, tensors: dict, extra: dict | None = None) -> None:
    """Write named float32 arrays plus JSON metadata as one archive file."""
    names = sorted(tensors)
    blobs = []
    records = []
    offset = 0
    for name in names:
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = arr.tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "extra": extra or {},
        "tensors": records,
    }
    payload = json.dumps(manifest, sort_keys=True, indent=2).encode()
    with zipfile.ZipFile(Path(path), "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(MANIFEST_NAME, date_time=_EPOCH), payload)
        zf.writestr(zipfile.ZipInfo(TENSORS_NAME, date_time=_EPOCH), b"".join(blobs))


def load_tensor_archive(path) -> tuple[dict, dict]:
    """Read an archive back into (tensors, extra); reject other versions."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing checkpoint {p}")
    try:
        with zipfile.ZipFile(p) as zf:
            names = set(zf.namelist())
            if MANIFEST_NAME not in names or TENSORS_NAME not in names:
                raise CheckpointError(f"{p} lacks required archive members")
            manifest = json.loads(zf.read(MANIFEST_NAME))
            blob = zf.read(TENSORS_NAME)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{p} is not a checkpoint archive: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{p} holds a corrupt manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{p} has format version {version!r}, this build reads {FORMAT_VERSION}"
        )
    tensors = {}
    for rec in manifest["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{p}: tensor {rec['name']!r} overruns the blob")
        tensors[rec["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    return tensors, manifest.get("extra", {})


@dataclass
class Checkpoint:
    """Model parameters, ranking state, config snapshot and iteration count."""

    model_state: dict
    ranking: dict
    config: dict = field(default_factory=dict)
    iteration: int = 0

    RANKING_KEYS = ("threshold_logits", "multipliers", "anchors", "weights")

    def __post_init__(self):
        for key in self.RANKING_KEYS:
            if key not in self.ranking:
                raise CheckpointError(f"ranking state lacks {key!r}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    tensors.update({f"ranking/{k}": v for k, v in ckpt.ranking.items()})
    extra = {"config": ckpt.config, "iteration": int(ckpt.iteration)}
    save_tensor_archive(path, tensors, extra)


def load_checkpoint(path) -> Checkpoint:
    tensors, extra = load_tensor_archive(path)
    model_state = {}
    ranking = {}
    for name, arr in tensors.items():
        group, _, key = name.partition("/")
        if group == "model":
            model_state[key] = arr
        elif group == "ranking":
            ranking[key] = arr
        else:
            raise CheckpointError(f"unexpected tensor group {group!r} in {path}")
    return Checkpoint(
        model_state=model_state,
        ranking=ranking,
        config=dict(extra.get("config", {})),
        iteration=int(extra.get("iteration", 0)),
    )
