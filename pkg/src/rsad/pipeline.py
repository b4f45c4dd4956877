"""Training loop, tiled inference and evaluation glue.

Each training iteration draws a domain uniformly among the enabled
sample generators, simulates a fresh batch from the source scenes,
averages the loss over the batch, steps Adam on the network and the
threshold logits, then runs the projected multiplier ascent.  Every
epoch ends with a checkpoint; a JSON-lines log records one line per
iteration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigurationError, NumericalError, PlacementError, ValidationError
from .losses import (
    HypersphereConfig,
    RankingState,
    ce_loss,
    dice_loss,
    feature_loss,
    lambda_ascent_step,
    pixel_loss,
    total_loss,
)
from .metrics import MetricsReport, anomaly_truth, report
from .network import (
    DetectorNet,
    adapt_channels,
    arrays_to_state,
    pad_labels,
    pad_to_multiple,
    state_to_arrays,
)
from .raster import AnomalyMap, LabelMask, Raster, read_raster
from .simulate import ObjectBank, SimConfig, build_object_bank, simulate_spatial, simulate_spectral

LOSS_MODES = ("pixel_only", "pixel+feature", "ce", "dice")
SIM_RETRIES = 10
CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    """Everything the training loop needs, JSON-serializable."""

    spectral_dir: str | None = None
    spatial_dir: str | None = None
    bank_dir: str | None = None
    out_dir: str = "run"
    learning_rate: float = 0.01
    weight_decay: float = 1e-5
    epochs: int = 100
    iterations_per_epoch: int = 100
    batch_size: int = 4
    feature_weight: float = 0.1
    tile: int = 224
    lambda_step: float = 0.01
    anchor_count: int = 10
    seed: int = 0
    loss_mode: str = "pixel+feature"
    joint_mode: str = "reciprocal"
    simulate_large: bool = True
    use_spectral_stem: bool = True
    use_spatial_stem: bool = True

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight decay must be non-negative")
        if self.epochs < 0 or self.iterations_per_epoch < 1 or self.batch_size < 1:
            raise ValidationError("epochs, iterations and batch size must be positive")
        if self.feature_weight < 0:
            raise ValidationError("feature weight must be non-negative")
        if self.tile < 32 or self.tile % 16:
            raise ValidationError("tile side must be a multiple of 16, at least 32")
        if self.lambda_step <= 0:
            raise ValidationError("multiplier step must be positive")
        if self.anchor_count < 1:
            raise ValidationError("anchor count must be at least 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"loss mode must be one of {LOSS_MODES}")
        if not (self.use_spectral_stem or self.use_spatial_stem):
            raise ConfigurationError("at least one sample domain must stay enabled")
        if self.use_spectral_stem and not self.spectral_dir:
            raise ConfigurationError("spectral domain enabled but spectral_dir unset")
        if self.use_spatial_stem and not (self.spatial_dir and self.bank_dir):
            raise ConfigurationError("spatial domain enabled but spatial_dir/bank_dir unset")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)


def _list_scene_dirs(path) -> list[Path]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"missing scene directory {root}")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise ConfigurationError(f"{root} holds no scene containers")
    return dirs


class _Sources:
    """Loaded training material, read once up front."""

    def __init__(self, cfg: TrainConfig):
        self.spectral: list[Raster] = []
        self.spatial: list[tuple[Raster, LabelMask | None]] = []
        self.bank: ObjectBank | None = None
        if cfg.use_spectral_stem:
            self.spectral = [read_raster(p)[0] for p in _list_scene_dirs(cfg.spectral_dir)]
        if cfg.use_spatial_stem:
            self.spatial = [read_raster(p) for p in _list_scene_dirs(cfg.spatial_dir)]
            self.bank = build_object_bank(cfg.bank_dir)


def _crop(raster: Raster, labels: LabelMask | None, side: int, rng):
    h, w = raster.height, raster.width
    if h <= side and w <= side:
        return raster, labels
    top = int(rng.integers(0, max(h - side, 0) + 1))
    left = int(rng.integers(0, max(w - side, 0) + 1))
    values = raster.values[:, top:top + min(side, h), left:left + min(side, w)]
    cropped = Raster(values.copy(), raster.modality)
    if labels is None:
        return cropped, None
    codes = labels.codes[top:top + min(side, h), left:left + min(side, w)]
    return cropped, LabelMask(codes.copy())


def _draw_sample(domain: str, sources: _Sources, cfg: TrainConfig,
                 sim_cfg: SimConfig, rng):
    last = None
    for _ in range(SIM_RETRIES):
        try:
            if domain == "spectral":
                scene = sources.spectral[int(rng.integers(len(sources.spectral)))]
                scene, _ = _crop(scene, None, cfg.tile, rng)
                return simulate_spectral(scene, sim_cfg, rng,
                                         include_large=cfg.simulate_large)
            scene, labels = sources.spatial[int(rng.integers(len(sources.spatial)))]
            scene, labels = _crop(scene, labels, cfg.tile, rng)
            return simulate_spatial(scene, labels, sources.bank, sim_cfg, rng,
                                    include_large=cfg.simulate_large)
        except PlacementError as exc:
            last = exc
    raise PlacementError(f"simulation kept failing after {SIM_RETRIES} fresh draws: {last}")


def _build_checkpoint(model: DetectorNet, state: RankingState, cfg: TrainConfig,
                      iteration: int) -> Checkpoint:
    ranking = {
        "threshold_logits": state.threshold_logits.detach().cpu().numpy().astype(np.float32),
        "multipliers": state.multipliers.astype(np.float32),
        "anchors": state.anchors.astype(np.float32),
        "weights": state.weights.astype(np.float32),
    }
    return Checkpoint(
        model_state=state_to_arrays(model),
        ranking=ranking,
        config=cfg.to_dict(),
        iteration=iteration,
    )


def ranking_from_checkpoint(ckpt: Checkpoint, requires_grad: bool = False) -> RankingState:
    logits = torch.tensor(ckpt.ranking["threshold_logits"], dtype=torch.float32,
                          requires_grad=requires_grad)
    return RankingState(
        threshold_logits=logits,
        multipliers=ckpt.ranking["multipliers"].astype(np.float64),
        anchors=ckpt.ranking["anchors"].astype(np.float64),
        weights=ckpt.ranking["weights"].astype(np.float64),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> DetectorNet:
    model = DetectorNet()
    arrays_to_state(model, ckpt.model_state)
    model.eval()
    return model


def train(cfg: TrainConfig) -> Checkpoint:
    """Run the full loop and return the final checkpoint.

    Artifacts land in ``cfg.out_dir``: a rolling ``checkpoint.bin``
    rewritten every epoch plus ``train_log.jsonl`` with one record per
    iteration.  A non-finite loss aborts with a diagnostic.  Identical
    configs (same seed) produce bit-identical artifacts.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = DetectorNet()
    state = RankingState.initial(cfg.anchor_count)
    hyper = HypersphereConfig(joint_mode=cfg.joint_mode)
    sim_cfg = SimConfig()
    sources = _Sources(cfg)
    domains = [name for name, on in (("spectral", cfg.use_spectral_stem),
                                     ("spatial", cfg.use_spatial_stem)) if on]
    optimizer = torch.optim.Adam(
        [
            {"params": list(model.parameters()), "weight_decay": cfg.weight_decay},
            {"params": [state.threshold_logits], "weight_decay": 0.0},
        ],
        lr=cfg.learning_rate,
    )
    pixel_mode = cfg.loss_mode in ("pixel_only", "pixel+feature")

    iteration = 0
    ckpt = _build_checkpoint(model, state, cfg, iteration)
    with open(out_dir / LOG_NAME, "w") as log:
        for _epoch in range(cfg.epochs):
            for _ in range(cfg.iterations_per_epoch):
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, iteration))
                )
                domain = domains[int(rng.integers(len(domains)))]
                optimizer.zero_grad()
                batch = None
                f_total = 0.0
                p_total = 0.0
                grads = np.zeros(state.k)
                for _b in range(cfg.batch_size):
                    sample = _draw_sample(domain, sources, cfg, sim_cfg, rng)
                    x, _ = pad_to_multiple(adapt_channels(sample.raster))
                    codes = pad_labels(sample.labels.codes)
                    scores, fused = model(torch.from_numpy(x)[None])
                    p_map = scores[0, 0]
                    if pixel_mode:
                        loss_p, lam_grads = pixel_loss(p_map, codes, state)
                        grads += lam_grads
                        if cfg.loss_mode == "pixel+feature":
                            loss_f = feature_loss(fused[0], codes, hyper, rng)
                            loss = total_loss(loss_f, loss_p, cfg.feature_weight)
                            f_total += float(loss_f.detach())
                        else:
                            loss = loss_p
                        p_total += float(loss_p.detach())
                    elif cfg.loss_mode == "ce":
                        # rerun the scoring head on the descriptors to train in
                        # logit space; probability-space log has a dead gradient
                        # once float32 sigmoid saturates
                        loss = ce_loss(model.head(fused)[0, 0], codes, from_logits=True)
                    else:
                        loss = dice_loss(p_map, codes)
                    batch = loss if batch is None else batch + loss
                batch = batch / cfg.batch_size
                value = float(batch.detach())
                if not np.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss {value} at iteration {iteration} "
                        f"(domain={domain}, mode={cfg.loss_mode})"
                    )
                batch.backward()
                optimizer.step()
                if pixel_mode:
                    state = lambda_ascent_step(state, grads / cfg.batch_size,
                                               cfg.lambda_step)
                iteration += 1
                log.write(json.dumps({
                    "iter": iteration,
                    "loss_total": value,
                    "loss_f": f_total / cfg.batch_size,
                    "loss_p": p_total / cfg.batch_size,
                    "lambda_mean": float(state.multipliers.mean()),
                }, sort_keys=True) + "\n")
            ckpt = _build_checkpoint(model, state, cfg, iteration)
            save_checkpoint(out_dir / CHECKPOINT_NAME, ckpt)
    if cfg.epochs == 0:
        save_checkpoint(out_dir / CHECKPOINT_NAME, ckpt)
    return ckpt


def _window_starts(length: int, win: int, stride: int) -> list[int]:
    if length <= win:
        return [0]
    starts = list(range(0, length - win + 1, stride))
    if starts[-1] != length - win:
        starts.append(length - win)
    return starts


def infer(raster: Raster, ckpt: Checkpoint, mode: str = "tiled",
          tile: int = 224, overlap: float = 0.5) -> AnomalyMap:
    """Score a raster with a trained checkpoint.

    ``tiled`` slides a window with the given fractional overlap and
    averages overlapping scores in float64; ``whole`` runs one padded
    pass.  An image no larger than the tile makes the two identical.
    """
    if mode not in ("tiled", "whole"):
        raise ValidationError(f"mode must be 'tiled' or 'whole', got {mode!r}")
    if tile < 32:
        raise ValidationError("tile side must be at least 32")
    if not 0.0 <= overlap < 1.0:
        raise ValidationError("overlap must lie in [0, 1)")
    model = model_from_checkpoint(ckpt)
    x = adapt_channels(raster)
    h, w = raster.height, raster.width

    def forward(patch: np.ndarray) -> np.ndarray:
        padded, (ph, pw) = pad_to_multiple(patch)
        with torch.no_grad():
            scores, _ = model(torch.from_numpy(padded)[None])
        return scores[0, 0, :ph, :pw].numpy().astype(np.float64)

    if mode == "whole":
        return AnomalyMap(forward(x).astype(np.float32))

    stride = max(1, int(round(tile * (1.0 - overlap))))
    win_h = min(tile, h)
    win_w = min(tile, w)
    acc = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.float64)
    for top in _window_starts(h, win_h, stride):
        for left in _window_starts(w, win_w, stride):
            patch = x[:, top:top + win_h, left:left + win_w]
            acc[top:top + win_h, left:left + win_w] += forward(patch)
            cnt[top:top + win_h, left:left + win_w] += 1.0
    return AnomalyMap((acc / cnt).astype(np.float32))


def evaluate(amap: AnomalyMap, gt: LabelMask, tau_grid="unique") -> MetricsReport:
    """Score an anomaly map against ground-truth labels."""
    if (amap.height, amap.width) != (gt.height, gt.width):
        raise ValidationError(
            f"map {amap.values.shape} does not match labels {gt.codes.shape}"
        )
    return report(amap.values.ravel(), anomaly_truth(gt).ravel(), tau_grid=tau_grid)
