"""Training objectives: hypersphere compactness and threshold-ranking losses.

The feature loss pulls descriptors of normal pixels into a tight
hypersphere while pushing a mixed anomaly group away from compactness.
The pixel loss bounds the detection/false-alarm trade-off at a bank of
learnable thresholds and enforces per-threshold false-alarm budgets with
projected-ascent Lagrange multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ValidationError
from .raster import CODE_ANOMALY, CODE_IGNORE, CODE_LARGE

SCORE_EPS = 1e-6


@dataclass(frozen=True)
class HypersphereConfig:
    """Knobs for the compactness objective.

    ``nu`` sets the quantile of squared distances used as the squared
    radius, ``beta`` weighs the outside-the-sphere slack, ``rho`` sizes
    the normal subsample mixed into the anomaly group, and ``eps`` guards
    the reciprocal term.  ``joint_mode`` picks how the anomaly group
    enters the loss: ``"reciprocal"`` (default) or ``"difference"``, an
    exponentiated ablation variant.
    """

    beta: float = 1.0
    nu: float = 0.9
    eps: float = 1e-6
    rho: float = 1.0
    joint_mode: str = "reciprocal"

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be non-negative")
        if not 0.0 < self.nu <= 1.0:
            raise ValidationError("nu must lie in (0, 1]")
        if self.eps <= 0:
            raise ValidationError("eps must be positive")
        if self.rho < 0:
            raise ValidationError("rho must be non-negative")
        if self.joint_mode not in ("reciprocal", "difference"):
            raise ValidationError(f"unknown joint mode {self.joint_mode!r}")


def hypersphere_center(descriptors: torch.Tensor) -> torch.Tensor:
    """Mean of an (n, f) descriptor batch."""
    if descriptors.ndim != 2:
        raise ValidationError(f"descriptors must be (n, f), got {tuple(descriptors.shape)}")
    if descriptors.shape[0] == 0:
        raise ValidationError("cannot take the center of an empty descriptor batch")
    return descriptors.mean(dim=0)


def compactness_radius_sq(descriptors: torch.Tensor, nu: float) -> torch.Tensor:
    """Detached nu-quantile of squared distances from the batch center."""
    center = hypersphere_center(descriptors)
    sq = ((descriptors - center) ** 2).sum(dim=1)
    return torch.quantile(sq, nu).detach()


def hypersphere_compactness(descriptors: torch.Tensor, cfg: HypersphereConfig,
                            radius_sq=None) -> torch.Tensor:
    """Negated soft-boundary compactness score, always <= 0.

    Returns ``-(R^2 + beta * mean(relu(|d - c|^2 - R^2)))`` where ``R^2``
    is the nu-quantile of squared distances, treated as a constant during
    differentiation.  Pass ``radius_sq`` to pin the radius externally
    (the optimizer sees exactly that function of the descriptors).
    """
    center = hypersphere_center(descriptors)
    sq = ((descriptors - center) ** 2).sum(dim=1)
    if radius_sq is None:
        radius_sq = torch.quantile(sq, cfg.nu).detach()
    else:
        radius_sq = torch.as_tensor(radius_sq, dtype=sq.dtype, device=sq.device)
    slack = torch.clamp(sq - radius_sq, min=0.0).mean()
    return -(radius_sq + cfg.beta * slack)


def feature_groups(fused: torch.Tensor, codes: np.ndarray, cfg: HypersphereConfig,
                   rng) -> tuple[torch.Tensor, torch.Tensor]:
    """Split per-pixel descriptors into the normal and joint groups.

    ``fused`` is (f, h, w); ``codes`` the matching label codes.  The
    normal group holds background and large-object pixels.  The joint
    group holds anomaly pixels plus a seeded subsample of
    ``round(rho * n_anomaly)`` normal pixels.  Ignore pixels drop out.
    """
    if fused.ndim != 3:
        raise ValidationError(f"fused descriptors must be (f, h, w), got {tuple(fused.shape)}")
    codes = np.asarray(codes)
    if codes.shape != fused.shape[1:]:
        raise ValidationError(f"codes {codes.shape} do not match descriptors {tuple(fused.shape)}")
    flat = fused.reshape(fused.shape[0], -1).T  # (n, f)
    fcodes = codes.reshape(-1)
    normal_idx = np.flatnonzero((fcodes == 0) | (fcodes == CODE_LARGE))
    anom_idx = np.flatnonzero(fcodes == CODE_ANOMALY)
    if anom_idx.size == 0:
        raise ValidationError("feature loss needs at least one anomaly pixel")
    if normal_idx.size == 0:
        raise ValidationError("feature loss needs at least one normal pixel")
    normal = flat[torch.from_numpy(normal_idx)]
    n_sub = min(int(round(cfg.rho * anom_idx.size)), normal_idx.size)
    sub = rng.choice(normal_idx.size, size=n_sub, replace=False) if n_sub else np.empty(0, int)
    joint = torch.cat([flat[torch.from_numpy(anom_idx)], normal[torch.from_numpy(np.sort(sub))]])
    return normal, joint


def feature_loss(fused: torch.Tensor, codes: np.ndarray, cfg: HypersphereConfig,
                 rng, radii=None) -> torch.Tensor:
    """Compactness loss over the normal and joint groups, >= 0 by parts.

    Default form: ``-M(normal) - 1 / (M(joint) - eps)`` with both terms
    non-negative since ``M <= 0``.  ``radii`` optionally pins the two
    squared radii (normal, joint) so repeated evaluations share them.
    """
    normal, joint = feature_groups(fused, codes, cfg, rng)
    rn = radii[0] if radii is not None else None
    rj = radii[1] if radii is not None else None
    m_normal = hypersphere_compactness(normal, cfg, radius_sq=rn)
    m_joint = hypersphere_compactness(joint, cfg, radius_sq=rj)
    if cfg.joint_mode == "reciprocal":
        return -m_normal - 1.0 / (m_joint - cfg.eps)
    # exponentiated difference, shifted to stay non-negative
    return torch.exp(m_joint) - torch.exp(m_normal) + 1.0


@dataclass
class RankingState:
    """Learnable threshold bank with its Lagrangian bookkeeping.

    ``threshold_logits`` feed a sigmoid so every threshold stays inside
    (0, 1).  ``anchors`` are the per-threshold false-alarm budgets t/k,
    ``weights`` the integration weights 1/k, and ``multipliers`` the
    non-negative Lagrange multipliers.
    """

    threshold_logits: torch.Tensor
    multipliers: np.ndarray
    anchors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.multipliers = np.asarray(self.multipliers, dtype=np.float64)
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        k = self.threshold_logits.shape[0]
        if k < 1:
            raise ValidationError("ranking state needs at least one threshold")
        for name in ("multipliers", "anchors", "weights"):
            if getattr(self, name).shape != (k,):
                raise ValidationError(f"{name} must have shape ({k},)")
        if (self.multipliers < 0).any():
            raise ValidationError("multipliers must be non-negative")

    @property
    def k(self) -> int:
        return int(self.threshold_logits.shape[0])

    @property
    def thresholds(self) -> torch.Tensor:
        return torch.sigmoid(self.threshold_logits)

    @classmethod
    def initial(cls, k: int = 10, dtype=torch.float32) -> "RankingState":
        if k < 1:
            raise ValidationError("k must be at least 1")
        t = np.arange(1, k + 1, dtype=np.float64)
        centers = (t - 0.5) / k  # thresholds start evenly spread over (0, 1)
        logits = torch.tensor(np.log(centers / (1.0 - centers)), dtype=dtype,
                              requires_grad=True)
        return cls(
            threshold_logits=logits,
            multipliers=np.ones(k),
            anchors=t / k,
            weights=np.full(k, 1.0 / k),
        )


def _check_threshold(threshold) -> torch.Tensor:
    th = torch.as_tensor(threshold)
    val = float(th.detach())
    if not 0.0 < val < 1.0:
        raise ValidationError(f"threshold must lie strictly inside (0, 1), got {val}")
    return th


def _select(scores: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    return scores.reshape(-1)[torch.from_numpy(np.flatnonzero(mask))]


def tp_ce(scores: torch.Tensor, codes: np.ndarray, threshold) -> torch.Tensor:
    """Differentiable lower bound on the detection count at a threshold.

    Sums ``1 - log(p) / log(th)`` over anomaly pixels; each term is at
    most the hard indicator ``p >= th``.  Scores are clamped away from 0
    and 1 before the logarithm.
    """
    th = _check_threshold(threshold).to(scores.dtype)
    p = _select(scores, np.asarray(codes).reshape(-1) == CODE_ANOMALY)
    p = p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    return (1.0 - torch.log(p) / torch.log(th)).sum()


def fp_ce(scores: torch.Tensor, codes: np.ndarray, threshold) -> torch.Tensor:
    """Differentiable upper bound on the false-alarm count at a threshold.

    Sums ``log(1 - p) / log(1 - th)`` over background and large-object
    pixels; each term is at least the hard indicator ``p >= th``.
    """
    th = _check_threshold(threshold).to(scores.dtype)
    fcodes = np.asarray(codes).reshape(-1)
    p = _select(scores, (fcodes == 0) | (fcodes == CODE_LARGE))
    p = p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    return (torch.log(1.0 - p) / torch.log(1.0 - th)).sum()


def pixel_loss(scores: torch.Tensor, codes: np.ndarray,
               state: RankingState) -> tuple[torch.Tensor, np.ndarray]:
    """Anchored ranking loss over the threshold bank.

    Returns the loss and the multiplier gradients
    ``fp_ce(th_t) / n_normal - anchor_t`` used by the ascent step.  The
    multipliers themselves enter as constants.
    """
    fcodes = np.asarray(codes).reshape(-1)
    n_anom = int((fcodes == CODE_ANOMALY).sum())
    n_normal = int(((fcodes == 0) | (fcodes == CODE_LARGE)).sum())
    if n_anom == 0 or n_normal == 0:
        raise ValidationError("pixel loss needs both anomaly and normal pixels")
    thresholds = state.thresholds
    total = scores.new_zeros(())
    grads = np.empty(state.k, dtype=np.float64)
    for t in range(state.k):
        th = thresholds[t]
        miss = 1.0 - tp_ce(scores, codes, th) / n_anom
        excess = fp_ce(scores, codes, th) / n_normal - float(state.anchors[t])
        total = total + float(state.weights[t]) * miss + float(state.multipliers[t]) * excess
        grads[t] = float(excess.detach())
    return total, grads


def lambda_ascent_step(state: RankingState, grads: np.ndarray,
                       step: float = 0.01) -> RankingState:
    """Projected gradient ascent on the multipliers: clamp at zero."""
    if step <= 0:
        raise ValidationError("ascent step must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != (state.k,):
        raise ValidationError(f"expected {state.k} multiplier gradients, got {grads.shape}")
    new = np.maximum(0.0, state.multipliers + step * grads)
    return replace(state, multipliers=new)


def total_loss(feature, pixel, weight: float = 0.1):
    """Weighted sum of the feature and pixel terms."""
    return weight * feature + pixel


def ce_loss(scores: torch.Tensor, codes: np.ndarray,
            from_logits: bool = False) -> torch.Tensor:
    """Plain balanced-free binary cross-entropy over non-ignore pixels.

    With ``from_logits`` the input is pre-sigmoid; that path keeps a live
    gradient even where a float32 sigmoid would saturate to exactly 0 or 1.
    """
    fcodes = np.asarray(codes).reshape(-1)
    keep = fcodes != CODE_IGNORE
    if not keep.any():
        raise ValidationError("cross-entropy needs at least one labeled pixel")
    x = _select(scores, keep)
    target = torch.as_tensor((fcodes[keep] == CODE_ANOMALY).astype(np.float32),
                             dtype=x.dtype, device=x.device)
    if from_logits:
        return torch.nn.functional.binary_cross_entropy_with_logits(x, target)
    p = x.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def dice_loss(scores: torch.Tensor, codes: np.ndarray) -> torch.Tensor:
    """Soft Dice loss against the anomaly mask over non-ignore pixels."""
    fcodes = np.asarray(codes).reshape(-1)
    keep = fcodes != CODE_IGNORE
    if not keep.any():
        raise ValidationError("dice loss needs at least one labeled pixel")
    p = _select(scores, keep)
    target = torch.as_tensor((fcodes[keep] == CODE_ANOMALY).astype(np.float32),
                             dtype=p.dtype, device=p.device)
    inter = (p * target).sum()
    return 1.0 - (2.0 * inter + 1.0) / (p.sum() + target.sum() + 1.0)
