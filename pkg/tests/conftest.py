"""Shared fixtures. The trained toy model is cached across sessions under pytest's cache dir."""
from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from tcaq import pipeline
from tcaq.config import RunConfig
from tcaq.diffusion import ToyUNet


def _key(cfg: RunConfig) -> str:
    fields = {k: getattr(cfg, k) for k in ("seed", "dataset_seed", "dataset_size", "train_steps", "train_lr",
                                           "train_batch")}
    return hashlib.sha1(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def default_cfg() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def trained_path(request, default_cfg):
    """Checkpoint of the default-config model (trained once, reused by later sessions)."""
    d = request.config.cache.mkdir("tcaq-models")
    path = d / f"fp_{_key(default_cfg)}.tcaq"
    if not path.exists():
        model = pipeline.train(default_cfg)
        model.save(path)
        np.save(d / f"history_{_key(default_cfg)}.npy", np.asarray(model.history))
    return path


@pytest.fixture(scope="session")
def trained(trained_path) -> ToyUNet:
    return ToyUNet.load(trained_path)


@pytest.fixture(scope="session")
def train_history(trained_path) -> np.ndarray:
    return np.load(trained_path.parent / trained_path.name.replace("fp_", "history_").replace(".tcaq", ".npy"))


@pytest.fixture(scope="session")
def calib(trained, default_cfg):
    return pipeline.calibrate(trained, default_cfg)


@pytest.fixture(scope="session")
def reference(default_cfg):
    return pipeline.reference_images(default_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
