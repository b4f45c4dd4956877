import json
import zipfile

import numpy as np
import pytest
import torch

from rsad.checkpoint import (
    FORMAT_VERSION,
    MANIFEST_NAME,
    TENSORS_NAME,
    Checkpoint,
    load_checkpoint,
    load_tensor_archive,
    save_checkpoint,
    save_tensor_archive,
)
from rsad.errors import CheckpointError, ShapeError, ValidationError
from rsad.network import (
    C_IN,
    DESCRIPTOR_CHANNELS,
    SIZE_MULTIPLE,
    DetectorNet,
    adapt_channels,
    arrays_to_state,
    normalize_bands,
    pad_labels,
    pad_to_multiple,
    state_to_arrays,
)

from conftest import make_raster


class TestNormalizeBands:
    def test_each_band_spans_unit_interval(self):
        v = np.random.default_rng(0).normal(5.0, 3.0, (4, 6, 6)).astype(np.float32)
        out = normalize_bands(v)
        assert out.min() >= 0.0 and out.max() <= 1.0
        for b in range(4):
            assert out[b].min() == 0.0 and out[b].max() == 1.0

    def test_linear_map_oracle(self):
        band = np.array([[2.0, 4.0], [6.0, 10.0]], dtype=np.float32)
        out = normalize_bands(band[None])
        np.testing.assert_allclose(out[0], (band - 2.0) / 8.0, rtol=1e-6)

    def test_constant_band_becomes_zero(self):
        v = np.full((2, 3, 3), 7.0, dtype=np.float32)
        v[1] = np.arange(9, dtype=np.float32).reshape(3, 3)
        out = normalize_bands(v)
        assert (out[0] == 0.0).all()
        assert out[1].max() == 1.0

    def test_requires_three_dims(self):
        with pytest.raises(ShapeError):
            normalize_bands(np.zeros((3, 3), dtype=np.float32))


class TestAdaptChannels:
    @pytest.mark.parametrize("bands", [1, 2, 3, 4, 8, 32])
    def test_always_four_channels(self, bands):
        out = adapt_channels(make_raster(seed=1, bands=bands, h=6, w=6))
        assert out.shape == (C_IN, 6, 6)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_single_band_recycles(self):
        r = make_raster(seed=2, bands=1, h=5, w=5)
        out = adapt_channels(r)
        norm = normalize_bands(r.values)[0]
        for c in range(C_IN):
            np.testing.assert_array_equal(out[c], norm)

    def test_pair_average_oracle(self):
        r = make_raster(seed=3, bands=8, h=4, w=4)
        out = adapt_channels(r)
        norm = normalize_bands(r.values)
        np.testing.assert_allclose(out[0], norm[:2].mean(axis=0), rtol=1e-6)
        np.testing.assert_allclose(out[3], norm[6:].mean(axis=0), rtol=1e-6)


class TestPadding:
    def test_multiple_is_noop(self):
        v = np.random.default_rng(0).random((2, 32, 48)).astype(np.float32)
        out, size = pad_to_multiple(v)
        assert out is v and size == (32, 48)

    def test_pads_bottom_right_only(self):
        v = np.random.default_rng(0).random((2, 33, 49)).astype(np.float32)
        out, size = pad_to_multiple(v)
        assert out.shape == (2, 48, 64) and size == (33, 49)
        np.testing.assert_array_equal(out[:, :33, :49], v)

    def test_reflect_values(self):
        v = np.arange(15, dtype=np.float32).reshape(1, 3, 5)
        out, _ = pad_to_multiple(v, multiple=4)
        assert out.shape == (1, 4, 8)
        # reflection about the last row/column excludes the edge itself
        np.testing.assert_array_equal(out[0, 3, :5], v[0, 1])
        np.testing.assert_array_equal(out[0, 0, 5:], v[0, 0, (3, 2, 1),])

    def test_thin_input_falls_back_to_edge(self):
        v = np.arange(5, dtype=np.float32).reshape(1, 1, 5)
        out, _ = pad_to_multiple(v, multiple=4)
        assert out.shape == (1, 4, 8)
        np.testing.assert_array_equal(out[0, 3], out[0, 0])
        assert (out[0, 0, 5:] == 4.0).all()

    def test_labels_padded_with_ignore(self):
        codes = np.zeros((3, 5), dtype=np.uint8)
        out = pad_labels(codes, multiple=4)
        assert out.shape == (4, 8)
        assert (out[3:] == 255).all() and (out[:, 5:] == 255).all()
        assert (out[:3, :5] == 0).all()

    def test_labels_noop(self):
        codes = np.zeros((16, 16), dtype=np.uint8)
        assert pad_labels(codes) is codes


def tiny_input(seed=0, b=1, h=32, w=32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((b, C_IN, h, w), generator=gen)


class TestDetectorNet:
    def test_output_shapes(self):
        net = DetectorNet()
        scores, desc = net(tiny_input(b=2))
        assert scores.shape == (2, 1, 32, 32)
        assert desc.shape == (2, DESCRIPTOR_CHANNELS, 32, 32)

    def test_scores_are_probabilities(self):
        net = DetectorNet()
        scores, _ = net(tiny_input())
        assert scores.min() > 0.0 and scores.max() < 1.0

    def test_scores_come_from_descriptors(self):
        net = DetectorNet()
        scores, desc = net(tiny_input(seed=4))
        torch.testing.assert_close(scores, torch.sigmoid(net.head(desc)))

    def test_rejects_wrong_channel_count(self):
        net = DetectorNet()
        with pytest.raises(ShapeError):
            net(torch.rand(1, C_IN + 1, 32, 32))

    def test_rejects_unaligned_sizes(self):
        net = DetectorNet()
        with pytest.raises(ShapeError):
            net(torch.rand(1, C_IN, 30, 32))
        with pytest.raises(ShapeError):
            net(torch.rand(1, C_IN, 32, 40))

    def test_rejects_missing_batch_axis(self):
        net = DetectorNet()
        with pytest.raises(ShapeError):
            net(torch.rand(C_IN, 32, 32))

    def test_handles_nonsquare_multiples(self):
        net = DetectorNet()
        scores, _ = net(tiny_input(h=32, w=SIZE_MULTIPLE * 3))
        assert scores.shape == (1, 1, 32, 48)

    def test_seeded_construction_is_deterministic(self):
        torch.manual_seed(7)
        a = DetectorNet()
        torch.manual_seed(7)
        b = DetectorNet()
        x = tiny_input(seed=1)
        torch.testing.assert_close(a(x)[0], b(x)[0])

    def test_gradient_reaches_input(self):
        net = DetectorNet()
        x = tiny_input(seed=2).requires_grad_(True)
        scores, _ = net(x)
        scores.sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()


class TestStateArrays:
    def test_round_trip_restores_outputs(self):
        torch.manual_seed(0)
        net = DetectorNet()
        x = tiny_input(seed=3)
        before = net(x)[0]
        arrays = state_to_arrays(net)
        with torch.no_grad():
            net.head.weight.add_(1.0)
        assert not torch.allclose(net(x)[0], before)
        arrays_to_state(net, arrays)
        torch.testing.assert_close(net(x)[0], before)

    def test_name_mismatch_rejected(self):
        net = DetectorNet()
        arrays = state_to_arrays(net)
        arrays["bogus"] = np.zeros(3, dtype=np.float32)
        with pytest.raises(ValidationError):
            arrays_to_state(net, arrays)
        del arrays["bogus"]
        del arrays["head.weight"]
        with pytest.raises(ValidationError):
            arrays_to_state(net, arrays)

    def test_arrays_are_float32(self):
        for arr in state_to_arrays(DetectorNet()).values():
            assert arr.dtype == np.float32


def ranking_arrays(k=4):
    t = np.arange(1, k + 1, dtype=np.float32)
    return {
        "threshold_logits": np.log((t - 0.5) / k / (1 - (t - 0.5) / k)).astype(np.float32),
        "multipliers": np.ones(k, dtype=np.float32),
        "anchors": (t / k).astype(np.float32),
        "weights": np.full(k, 1.0 / k, dtype=np.float32),
    }


class TestTensorArchive:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "arc.bin"
        tensors = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.float32(2.5),
            "nested/c": np.ones(4, dtype=np.float32),
        }
        save_tensor_archive(path, tensors, {"note": "x", "n": 3})
        loaded, extra = load_tensor_archive(path)
        assert extra == {"note": "x", "n": 3}
        assert set(loaded) == set(tensors)
        np.testing.assert_array_equal(loaded["a"], tensors["a"])
        assert loaded["b"].shape == ()
        assert float(loaded["b"]) == 2.5

    def test_byte_deterministic(self, tmp_path):
        tensors = {"w": np.random.default_rng(0).random((8, 8)).astype(np.float32)}
        save_tensor_archive(tmp_path / "a.bin", tensors, {"k": 1})
        save_tensor_archive(tmp_path / "b.bin", tensors, {"k": 1})
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_tensor_archive(tmp_path / "none.bin")

    def test_not_an_archive(self, tmp_path):
        p = tmp_path / "garbage.bin"
        p.write_bytes(b"not a zip at all")
        with pytest.raises(CheckpointError):
            load_tensor_archive(p)

    def test_wrong_version_rejected(self, tmp_path):
        p = tmp_path / "arc.bin"
        manifest = {"format_version": FORMAT_VERSION + 1, "extra": {}, "tensors": []}
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr(MANIFEST_NAME, json.dumps(manifest))
            zf.writestr(TENSORS_NAME, b"")
        with pytest.raises(CheckpointError):
            load_tensor_archive(p)

    def test_missing_member_rejected(self, tmp_path):
        p = tmp_path / "arc.bin"
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr(MANIFEST_NAME, json.dumps(
                {"format_version": FORMAT_VERSION, "extra": {}, "tensors": []}))
        with pytest.raises(CheckpointError):
            load_tensor_archive(p)

    def test_blob_overrun_rejected(self, tmp_path):
        p = tmp_path / "arc.bin"
        manifest = {
            "format_version": FORMAT_VERSION,
            "extra": {},
            "tensors": [{"name": "w", "shape": [10], "offset": 0}],
        }
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr(MANIFEST_NAME, json.dumps(manifest))
            zf.writestr(TENSORS_NAME, b"\x00" * 8)  # 2 floats, manifest claims 10
        with pytest.raises(CheckpointError):
            load_tensor_archive(p)

    def test_corrupt_manifest_rejected(self, tmp_path):
        p = tmp_path / "arc.bin"
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr(MANIFEST_NAME, "{broken")
            zf.writestr(TENSORS_NAME, b"")
        with pytest.raises(CheckpointError):
            load_tensor_archive(p)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(0)
        net = DetectorNet()
        ckpt = Checkpoint(
            model_state=state_to_arrays(net),
            ranking=ranking_arrays(),
            config={"seed": 5},
            iteration=120,
        )
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert back.iteration == 120
        assert back.config == {"seed": 5}
        assert set(back.model_state) == set(ckpt.model_state)
        for key in Checkpoint.RANKING_KEYS:
            np.testing.assert_array_equal(back.ranking[key], ckpt.ranking[key])
        np.testing.assert_array_equal(back.model_state["head.weight"],
                                      ckpt.model_state["head.weight"])

    def test_restored_model_matches(self, tmp_path):
        torch.manual_seed(1)
        net = DetectorNet()
        x = tiny_input(seed=5)
        want = net(x)[0]
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, Checkpoint(state_to_arrays(net), ranking_arrays()))
        torch.manual_seed(99)
        other = DetectorNet()
        arrays_to_state(other, load_checkpoint(path).model_state)
        torch.testing.assert_close(other(x)[0], want)

    def test_missing_ranking_key_rejected(self):
        bad = ranking_arrays()
        del bad["multipliers"]
        with pytest.raises(CheckpointError):
            Checkpoint(model_state={}, ranking=bad)

    def test_unexpected_group_rejected(self, tmp_path):
        p = tmp_path / "arc.bin"
        save_tensor_archive(p, {"weird/x": np.zeros(2, dtype=np.float32)}, {})
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
