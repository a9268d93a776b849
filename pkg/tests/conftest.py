"""Shared fixtures: reduced-size models and the cached toy checkpoint."""

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from zestdiff import shapes, training
from zestdiff.unet import Denoiser, DenoiserConfig

REPO = Path(__file__).resolve().parent.parent
CACHE = REPO / ".cache"

# canonical toy-training recipe used by the acceptance suite
TOY_DATA_N = 4000
TOY_DATA_SEED = 1000
TOY_TRAIN_SEED = 0
TOY_TRAIN_CFG = dict(steps=4500, batch=16, val_every=250, warmup=100)


def reduced_config(img: int = 8, base: int = 8, heads: int = 2) -> DenoiserConfig:
    return DenoiserConfig(img_size=img, base_channels=base, channel_mults=(1, 2),
                          attention_resolutions=(img, img // 2), heads=heads,
                          time_dim=16, d_text=16, gn_groups=4)


@pytest.fixture(scope="session")
def tiny_model():
    model = Denoiser(reduced_config(), seed=5)
    model.set_requires_grad(False)
    return model


@pytest.fixture(scope="session")
def tiny_schedule():
    from zestdiff.schedule import make_schedule
    return make_schedule(1000)


def _recipe_key() -> str:
    recipe = {"data_n": TOY_DATA_N, "data_seed": TOY_DATA_SEED,
              "train_seed": TOY_TRAIN_SEED, "cfg": TOY_TRAIN_CFG}
    return hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:12]


def toy_checkpoint_path() -> Path:
    override = os.environ.get("ZESTDIFF_TEST_CKPT")
    if override:
        return Path(override)
    return CACHE / f"ckpt-main-{_recipe_key()}.ntc"


def ensure_toy_checkpoint() -> Path:
    """Train the shared toy checkpoint once per machine (cached)."""
    path = toy_checkpoint_path()
    if path.exists():
        return path
    CACHE.mkdir(exist_ok=True)
    data_dir = CACHE / f"data-{TOY_DATA_SEED}-{TOY_DATA_N}"
    if not (data_dir / "images.ntc").exists():
        shapes.build_dataset(TOY_DATA_N, TOY_DATA_SEED, data_dir)
    dataset = shapes.load_dataset(data_dir)
    cfg = training.TrainConfig(**TOY_TRAIN_CFG)
    print(f"\n[conftest] training toy checkpoint ({cfg.steps} steps, one-time, "
          f"~1h on a laptop core) -> {path}", flush=True)
    ckpt = training.train(dataset, cfg, TOY_TRAIN_SEED,
                          log_path=path.with_suffix(".log.csv"), progress=500)
    training.save_checkpoint(ckpt, path)
    return path


@pytest.fixture(scope="session")
def toy_ckpt():
    path = ensure_toy_checkpoint()
    return training.load_checkpoint(path)


@pytest.fixture(scope="session")
def toy_ckpt_path():
    return ensure_toy_checkpoint()


@pytest.fixture(scope="session")
def toy_model(toy_ckpt):
    return toy_ckpt.build_model()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running test")
    config.addinivalue_line(
        "markers", "acceptance: spec acceptance criterion (may be hours)")
