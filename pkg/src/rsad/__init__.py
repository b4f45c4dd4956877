"""Cross-modality anomaly detection for remote-sensing rasters."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigurationError,
    FormatError,
    NumericalError,
    PlacementError,
    RsadError,
    ShapeError,
    ValidationError,
)
from .losses import (
    HypersphereConfig,
    RankingState,
    ce_loss,
    dice_loss,
    feature_loss,
    fp_ce,
    hypersphere_center,
    hypersphere_compactness,
    lambda_ascent_step,
    pixel_loss,
    total_loss,
    tp_ce,
)
from .metrics import (
    MetricsReport,
    RocCurves,
    auc,
    derived_areas,
    grx,
    mahalanobis_scores,
    report,
    roc_3d,
)
from .network import C_IN, DetectorNet, adapt_channels
from .pipeline import TrainConfig, evaluate, infer, train
from .raster import (
    AnomalyMap,
    LabelMask,
    Raster,
    SceneSpec,
    export_png,
    read_raster,
    synth_scene,
    write_raster,
)
from .simulate import (
    AnomalySample,
    ObjectBank,
    SimConfig,
    affine_boundary,
    build_object_bank,
    channel_shuffle,
    copy_paste_regions,
    select_regions,
    simulate_spatial,
    simulate_spectral,
)

__version__ = "0.1.0"
