"""Direct anomaly-map network with a shared stem and attention-fused skips.

The stem turns any modality (reduced to a fixed channel count) into a
full-resolution descriptor field.  A five-level encoder over the stem
output feeds a decoder that fuses gated skip connections back up to full
resolution; a final fusion with the stem descriptors yields per-pixel
descriptors and a sigmoid anomaly score.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, ValidationError
from .raster import Raster, regroup_bands

C_IN = 4
DESCRIPTOR_CHANNELS = 32
ENCODER_WIDTHS = (32, 64, 128, 256, 512)
SIZE_MULTIPLE = 16


def normalize_bands(values: np.ndarray) -> np.ndarray:
    """Min-max scale each band to [0, 1]; constant bands become zero."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 3:
        raise ShapeError(f"band stack must be 3-d, got {v.shape}")
    lo = v.min(axis=(1, 2), keepdims=True)
    hi = v.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.zeros_like(v)
    np.divide(v - lo, span, out=out, where=span > 0)
    return out


def adapt_channels(raster: Raster, count: int = C_IN) -> np.ndarray:
    """Map any band count onto the network's fixed input channels.

    Bands are min-max normalized individually, recycled if fewer than
    ``count``, then averaged in contiguous near-equal groups.
    """
    return regroup_bands(normalize_bands(raster.values), count)


def pad_to_multiple(values: np.ndarray, multiple: int = SIZE_MULTIPLE,
                    mode: str = "reflect") -> tuple[np.ndarray, tuple[int, int]]:
    """Pad the last two axes on the bottom/right to a size multiple.

    Returns the padded array and the original (h, w) for cropping back.
    Falls back to edge padding when a dimension is too small to reflect.
    """
    h, w = values.shape[-2], values.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return values, (h, w)
    pad = [(0, 0)] * (values.ndim - 2) + [(0, ph), (0, pw)]
    if mode == "reflect" and (ph > h - 1 or pw > w - 1):
        mode = "edge"
    return np.pad(values, pad, mode=mode), (h, w)


def pad_labels(codes: np.ndarray, multiple: int = SIZE_MULTIPLE,
               fill: int = 255) -> np.ndarray:
    """Pad label codes with the ignore value to a size multiple."""
    h, w = codes.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return codes
    return np.pad(codes, ((0, ph), (0, pw)), mode="constant", constant_values=fill)


class ConvBlock(nn.Module):
    """3x3 convolution, affine instance norm, ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class LocalAttention(nn.Module):
    """Depthwise 3x3 gate: x * sigmoid(depthwise_conv(x))."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, x):
        return x * torch.sigmoid(self.gate(x))


class AttentionFuse(nn.Module):
    """Concatenate a feature map with its gated self, project back 1x1."""

    def __init__(self, channels: int):
        super().__init__()
        self.attention = LocalAttention(channels)
        self.project = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        return self.project(torch.cat([x, self.attention(x)], dim=1))


class SkipFuse(nn.Module):
    """Upsample the deeper map to the skip's size, concatenate, project 1x1."""

    def __init__(self, c_skip: int, c_deep: int):
        super().__init__()
        self.project = nn.Conv2d(c_skip + c_deep, c_skip, 1)

    def forward(self, skip, deep):
        if deep.shape[-2:] != skip.shape[-2:]:
            deep = F.interpolate(deep, size=skip.shape[-2:], mode="bilinear",
                                 align_corners=False)
        return self.project(torch.cat([skip, deep], dim=1))


class DetectorNet(nn.Module):
    """Shared-stem encoder/decoder emitting descriptors and anomaly scores.

    ``forward`` takes (b, 4, h, w) with h and w divisible by 16 and
    returns ``(scores, descriptors)``: sigmoid scores of shape
    (b, 1, h, w) and the fused full-resolution descriptor field of shape
    (b, 32, h, w).
    """

    def __init__(self, c_in: int = C_IN):
        super().__init__()
        widths = ENCODER_WIDTHS
        self.stem = nn.Sequential(
            ConvBlock(c_in, DESCRIPTOR_CHANNELS),
            ConvBlock(DESCRIPTOR_CHANNELS, DESCRIPTOR_CHANNELS),
        )
        self.encoders = nn.ModuleList()
        prev = DESCRIPTOR_CHANNELS
        for level, width in enumerate(widths):
            stride = 1 if level == 0 else 2
            self.encoders.append(ConvBlock(prev, width, stride=stride))
            prev = width
        self.skip_fuses = nn.ModuleList(AttentionFuse(w) for w in widths)
        self.decoders = nn.ModuleList(
            SkipFuse(widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        )
        self.final_fuse = SkipFuse(DESCRIPTOR_CHANNELS, widths[0])
        self.head = nn.Conv2d(DESCRIPTOR_CHANNELS, 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != self.stem[0].conv.in_channels:
            raise ShapeError(f"expected (b, {self.stem[0].conv.in_channels}, h, w), "
                             f"got {tuple(x.shape)}")
        h, w = x.shape[-2], x.shape[-1]
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ShapeError(f"input sides must be multiples of {SIZE_MULTIPLE}, "
                             f"got {h}x{w}")
        stem_out = self.stem(x)
        feats = []
        cur = stem_out
        for enc in self.encoders:
            cur = enc(cur)
            feats.append(cur)
        fused = [fuse(f) for fuse, f in zip(self.skip_fuses, feats)]
        deep = fused[-1]
        for i in range(len(self.decoders) - 1, -1, -1):
            deep = self.decoders[i](fused[i], deep)
        descriptors = self.final_fuse(stem_out, deep)
        scores = torch.sigmoid(self.head(descriptors))
        return scores, descriptors


def state_to_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Flatten a module's state dict into float32 numpy arrays."""
    out = {}
    for name, tensor in model.state_dict().items():
        out[name] = tensor.detach().cpu().numpy().astype(np.float32)
    return out


def arrays_to_state(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    """Load float32 numpy arrays back into a module, strictly by name."""
    state = model.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise ValidationError(f"parameter names mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
