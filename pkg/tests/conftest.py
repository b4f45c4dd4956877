import numpy as np
import pytest

from rsad.fixtures import generate_fixture_suite
from rsad.raster import LabelMask, Raster, SceneSpec, synth_scene
from rsad.simulate import build_object_bank


@pytest.fixture(scope="session")
def suite_dir(tmp_path_factory):
    """One shared synthetic suite: training scenes, held-out scenes, bank."""
    root = tmp_path_factory.mktemp("suite")
    generate_fixture_suite(root, seed=0)
    return root


@pytest.fixture(scope="session")
def object_bank(suite_dir):
    return build_object_bank(suite_dir / "bank")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def make_scene(seed=0, bands=8, side=64, anomalies=0, shift=3.0, speckle=False,
               modality="synthetic"):
    spec = SceneSpec(
        height=side, width=side, bands=bands,
        background_mean=0.5, background_std=0.1,
        anomaly_count=anomalies, anomaly_shift=shift, anomaly_ratio=0.01,
        speckle=speckle, modality=modality, seed=seed,
    )
    return synth_scene(spec)


def make_raster(seed=0, bands=3, h=8, w=8, modality="synthetic") -> Raster:
    gen = np.random.default_rng(seed)
    return Raster(gen.uniform(0.0, 1.0, (bands, h, w)).astype(np.float32), modality)


def make_labels(h=8, w=8, anomaly=((2, 3),), large=(), ignore=()) -> LabelMask:
    codes = np.zeros((h, w), dtype=np.uint8)
    for y, x in large:
        codes[y, x] = 1
    for y, x in anomaly:
        codes[y, x] = 2
    for y, x in ignore:
        codes[y, x] = 255
    return LabelMask(codes)
