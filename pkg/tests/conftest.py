"""Shared fixtures: deterministic threading and a small reusable dataset."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from volseg import generate_toy_dataset, load_manifest

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two-case, two-class 32x32x3 dataset for fast end-to-end tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    manifest_path = generate_toy_dataset(
        root, num_cases=2, num_classes=2, shape=(3, 32, 32),
        modalities=1, seed=7, num_val=0,
    )
    return manifest_path, load_manifest(manifest_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
