import time

import numpy as np
import pytest

from sesom import harness
from sesom.backbone import init_backbone, save_backbone
from sesom.config import ExperimentConfig
from sesom.prompts import save_prompt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_backbone():
    """Unfrozen random backbone small enough for finite differences."""
    return init_backbone(9, 4, np.random.default_rng(7))


@pytest.fixture
def frozen_tiny_backbone(tiny_backbone):
    return tiny_backbone.freeze()


@pytest.fixture(scope="session")
def reference_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def reference_lab(reference_cfg):
    """Pretrained backbone and source prompts of the reference suite (built once)."""
    t0 = time.perf_counter()
    lab = harness.build_lab(reference_cfg)
    lab.build_seconds = time.perf_counter() - t0
    return lab


@pytest.fixture(scope="session")
def reference_artifacts(reference_lab, tmp_path_factory):
    """The reference backbone and sources saved to disk, for config files to point at."""
    root = tmp_path_factory.mktemp("artifacts")
    save_backbone(reference_lab.backbone, root / "backbone.bin")
    for j, p in enumerate(reference_lab.sources):
        save_prompt(p, root / f"source{j}.bin")
    return root


@pytest.fixture(scope="session")
def reference_grid(reference_lab, reference_cfg):
    """Every acceptance-relevant method over 20 seeds and source counts 6/5/3/1.

    One pass: each seed's episode, adaptation and bundles are shared by all
    methods and all source counts.
    """
    methods = ("sesom", "hard_variant", "uniform", "fixed_weight", "majority_vote", "single_source")
    seeds = harness.seed_list(reference_cfg)
    t0 = time.perf_counter()
    grid = harness.run_grid(reference_lab, seeds, methods, (0, 5, 3, 1), keep_records=True)
    seconds = time.perf_counter() - t0
    return grid, seconds + reference_lab.build_seconds
