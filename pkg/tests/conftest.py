import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from demakeup import data as datamod
from demakeup.networks import ToyFeatureExtractor


@pytest.fixture(scope="session")
def toy_extractor():
    return ToyFeatureExtractor()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 preprocessed pairs at 32x32, shared across tests."""
    root = tmp_path_factory.mktemp("fixture32")
    manifest = datamod.synthesize_fixture_dataset(seed=11, count=12, image_size=32, out_dir=root)
    samples = datamod.load_manifest(manifest)
    return datamod.preprocess_dataset(samples, root / "pp")
