import json
from pathlib import Path

import numpy as np
import pytest
import torch

import rsad.pipeline as pipeline_mod
from rsad.checkpoint import load_checkpoint
from rsad.errors import ConfigurationError, PlacementError, ValidationError
from rsad.metrics import MetricsReport
from rsad.pipeline import (
    CHECKPOINT_NAME,
    LOG_NAME,
    LOSS_MODES,
    SIM_RETRIES,
    TrainConfig,
    evaluate,
    infer,
    model_from_checkpoint,
    ranking_from_checkpoint,
    train,
)
from rsad.pipeline import _window_starts
from rsad.raster import AnomalyMap, read_raster

from conftest import make_labels, make_raster


def mini_config(suite_dir, out_dir, **overrides) -> TrainConfig:
    base = dict(
        spectral_dir=str(suite_dir / "train" / "spectral"),
        spatial_dir=str(suite_dir / "train" / "spatial"),
        bank_dir=str(suite_dir / "bank"),
        out_dir=str(out_dir),
        epochs=1,
        iterations_per_epoch=2,
        batch_size=1,
        tile=64,
        anchor_count=4,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def mini_run(suite_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("mini_run")
    ckpt = train(mini_config(suite_dir, out, iterations_per_epoch=3))
    return ckpt, out


class TestTrainConfig:
    def test_defaults_validate(self, suite_dir):
        mini_config(suite_dir, "run").validate()

    @pytest.mark.parametrize("overrides", [
        {"learning_rate": 0.0},
        {"weight_decay": -1e-3},
        {"epochs": -1},
        {"iterations_per_epoch": 0},
        {"batch_size": 0},
        {"feature_weight": -0.1},
        {"tile": 30},
        {"tile": 65},
        {"lambda_step": 0.0},
        {"anchor_count": 0},
        {"loss_mode": "hinge"},
    ])
    def test_bad_values_rejected(self, suite_dir, overrides):
        with pytest.raises(ValidationError):
            mini_config(suite_dir, "run", **overrides).validate()

    def test_domain_wiring_required(self, suite_dir):
        with pytest.raises(ConfigurationError):
            mini_config(suite_dir, "run", use_spectral_stem=False,
                        use_spatial_stem=False).validate()
        with pytest.raises(ConfigurationError):
            mini_config(suite_dir, "run", spectral_dir=None).validate()
        with pytest.raises(ConfigurationError):
            mini_config(suite_dir, "run", bank_dir=None).validate()

    def test_json_round_trip(self, suite_dir, tmp_path):
        cfg = mini_config(suite_dir, "run", seed=7, loss_mode="dice")
        path = tmp_path / "train.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_json(path) == cfg

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "train.json"
        path.write_text(json.dumps({"seed": 1, "warmup": 5}))
        with pytest.raises(ValidationError):
            TrainConfig.from_json(path)


class TestWindowStarts:
    def test_short_length_single_window(self):
        assert _window_starts(50, 64, 32) == [0]
        assert _window_starts(64, 64, 32) == [0]

    def test_tail_window_appended(self):
        assert _window_starts(100, 64, 32) == [0, 32, 36]

    def test_exact_stride_fit(self):
        assert _window_starts(96, 64, 32) == [0, 32]

    def test_full_coverage(self):
        for length in (65, 97, 200, 224):
            starts = _window_starts(length, 64, 32)
            covered = np.zeros(length, dtype=bool)
            for s in starts:
                covered[s:s + 64] = True
            assert covered.all()
            assert starts == sorted(starts)
            assert starts[-1] == length - 64


class TestTrain:
    @pytest.mark.parametrize("mode", LOSS_MODES)
    def test_all_loss_modes_run(self, suite_dir, tmp_path, mode):
        out = tmp_path / mode.replace("+", "_")
        ckpt = train(mini_config(suite_dir, out, loss_mode=mode))
        assert ckpt.iteration == 2
        assert (out / CHECKPOINT_NAME).is_file()
        lines = (out / LOG_NAME).read_text().splitlines()
        assert len(lines) == 2
        for i, line in enumerate(lines, start=1):
            rec = json.loads(line)
            assert rec["iter"] == i
            assert set(rec) == {"iter", "loss_total", "loss_f", "loss_p", "lambda_mean"}
            assert np.isfinite(rec["loss_total"])

    def test_zero_epochs_writes_initial_checkpoint(self, suite_dir, tmp_path):
        out = tmp_path / "zero"
        ckpt = train(mini_config(suite_dir, out, epochs=0))
        assert ckpt.iteration == 0
        assert load_checkpoint(out / CHECKPOINT_NAME).iteration == 0
        # untouched multipliers and anchors of a fresh ranking state
        np.testing.assert_array_equal(ckpt.ranking["multipliers"], np.ones(4))
        np.testing.assert_allclose(ckpt.ranking["anchors"], np.arange(1, 5) / 4.0)

    def test_deterministic_artifacts(self, suite_dir, tmp_path):
        out = tmp_path / "redo"
        blobs = []
        for _ in range(2):
            train(mini_config(suite_dir, out))
            blobs.append(((out / CHECKPOINT_NAME).read_bytes(),
                          (out / LOG_NAME).read_bytes()))
        assert blobs[0] == blobs[1]

    def test_checkpoint_snapshot(self, suite_dir, mini_run):
        ckpt, out = mini_run
        cfg = mini_config(suite_dir, out, iterations_per_epoch=3)
        assert ckpt.iteration == 3
        assert ckpt.config == cfg.to_dict()
        disk = load_checkpoint(out / CHECKPOINT_NAME)
        assert disk.iteration == 3
        np.testing.assert_array_equal(disk.ranking["threshold_logits"],
                                      ckpt.ranking["threshold_logits"])

    def test_spectral_only_training(self, suite_dir, tmp_path):
        out = tmp_path / "spec_only"
        ckpt = train(mini_config(suite_dir, out, use_spatial_stem=False,
                                 spatial_dir=None, bank_dir=None))
        assert ckpt.iteration == 2

    def test_training_moves_parameters(self, suite_dir, mini_run):
        ckpt, _ = mini_run
        torch.manual_seed(0)
        from rsad.network import DetectorNet, state_to_arrays
        fresh = state_to_arrays(DetectorNet())
        assert not np.array_equal(ckpt.model_state["head.weight"],
                                  fresh["head.weight"])


class TestDrawSampleRetries:
    def test_gives_up_after_budget(self, suite_dir, monkeypatch):
        cfg = mini_config(suite_dir, "run")
        sources = pipeline_mod._Sources(cfg)
        calls = []

        def always_fails(*args, **kwargs):
            calls.append(1)
            raise PlacementError("forced")

        monkeypatch.setattr(pipeline_mod, "simulate_spectral", always_fails)
        rng = np.random.default_rng(0)
        from rsad.simulate import SimConfig
        with pytest.raises(PlacementError, match="kept failing"):
            pipeline_mod._draw_sample("spectral", sources, cfg, SimConfig(), rng)
        assert len(calls) == SIM_RETRIES

    def test_recovers_from_transient_failures(self, suite_dir, monkeypatch):
        cfg = mini_config(suite_dir, "run")
        sources = pipeline_mod._Sources(cfg)
        real = pipeline_mod.simulate_spectral
        state = {"left": 3}

        def flaky(*args, **kwargs):
            if state["left"] > 0:
                state["left"] -= 1
                raise PlacementError("transient")
            return real(*args, **kwargs)

        monkeypatch.setattr(pipeline_mod, "simulate_spectral", flaky)
        from rsad.simulate import SimConfig
        sample = pipeline_mod._draw_sample("spectral", sources, cfg, SimConfig(),
                                           np.random.default_rng(0))
        assert sample.domain == "spectral"


class TestInfer:
    def test_whole_matches_tiled_when_image_fits(self, suite_dir, mini_run):
        ckpt, _ = mini_run
        raster, _ = read_raster(suite_dir / "heldout" / "spectral" / "scene_000")
        whole = infer(raster, ckpt, mode="whole")
        tiled = infer(raster, ckpt, mode="tiled", tile=224)
        assert np.array_equal(whole.values, tiled.values)

    def test_tiled_covers_larger_image(self, mini_run):
        ckpt, _ = mini_run
        raster = make_raster(seed=3, bands=3, h=80, w=96)
        amap = infer(raster, ckpt, mode="tiled", tile=64, overlap=0.5)
        assert amap.values.shape == (80, 96)
        assert amap.values.min() >= 0.0 and amap.values.max() <= 1.0

    def test_tiled_deterministic(self, mini_run):
        ckpt, _ = mini_run
        raster = make_raster(seed=4, bands=3, h=80, w=80)
        a = infer(raster, ckpt, mode="tiled", tile=64)
        b = infer(raster, ckpt, mode="tiled", tile=64)
        assert np.array_equal(a.values, b.values)

    def test_parameter_validation(self, mini_run):
        ckpt, _ = mini_run
        raster = make_raster(seed=0, bands=3, h=32, w=32)
        with pytest.raises(ValidationError):
            infer(raster, ckpt, mode="average")
        with pytest.raises(ValidationError):
            infer(raster, ckpt, tile=16)
        with pytest.raises(ValidationError):
            infer(raster, ckpt, overlap=1.0)

    def test_model_round_trip_scores_match(self, suite_dir, mini_run):
        ckpt, out = mini_run
        raster, _ = read_raster(suite_dir / "heldout" / "optical" / "scene_000")
        a = infer(raster, ckpt, mode="whole")
        b = infer(raster, load_checkpoint(out / CHECKPOINT_NAME), mode="whole")
        assert np.array_equal(a.values, b.values)


class TestCheckpointAdapters:
    def test_ranking_state_restored(self, mini_run):
        ckpt, _ = mini_run
        state = ranking_from_checkpoint(ckpt)
        assert state.k == 4
        assert not state.threshold_logits.requires_grad
        np.testing.assert_array_equal(state.multipliers, ckpt.ranking["multipliers"])
        np.testing.assert_allclose(
            state.thresholds.detach().numpy(),
            torch.sigmoid(torch.tensor(ckpt.ranking["threshold_logits"])).numpy(),
        )

    def test_model_in_eval_mode(self, mini_run):
        ckpt, _ = mini_run
        assert not model_from_checkpoint(ckpt).training


class TestEvaluate:
    def test_report_on_heldout_scene(self, suite_dir, mini_run):
        ckpt, _ = mini_run
        raster, labels = read_raster(suite_dir / "heldout" / "spectral" / "scene_000")
        rep = evaluate(infer(raster, ckpt, mode="whole"), labels)
        assert isinstance(rep, MetricsReport)
        assert 0.0 <= rep.auc_df <= 1.0
        assert rep.positives > 0 and rep.negatives > 0

    def test_shape_mismatch_rejected(self):
        amap = AnomalyMap(np.zeros((8, 8), dtype=np.float32))
        with pytest.raises(ValidationError):
            evaluate(amap, make_labels(h=4, w=4))

    def test_perfect_map_scores_one(self):
        labels = make_labels(h=8, w=8, anomaly=((1, 1), (2, 5)))
        values = np.zeros((8, 8), dtype=np.float32)
        values[1, 1] = values[2, 5] = 1.0
        rep = evaluate(AnomalyMap(values), labels)
        assert rep.auc_df == 1.0


class TestMissingSources:
    def test_missing_scene_dir(self, suite_dir, tmp_path):
        cfg = mini_config(suite_dir, tmp_path / "x",
                          spectral_dir=str(tmp_path / "absent"))
        with pytest.raises(FileNotFoundError):
            train(cfg)

    def test_empty_scene_dir(self, suite_dir, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        cfg = mini_config(suite_dir, tmp_path / "x", spectral_dir=str(empty))
        with pytest.raises(ConfigurationError):
            train(cfg)
