import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from lightnorm.data import index_dataset, synth_dataset


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Small shared synthetic relighting set (8 pairs, 64x64, with masks)."""
    root = tmp_path_factory.mktemp("synthset")
    synth_dataset(root, 8, size=(64, 64), seed=7)
    return root


@pytest.fixture(scope="session")
def synth_records(synth_root):
    return index_dataset(synth_root)
