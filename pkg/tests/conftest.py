import os

import numpy as np
import pytest

from mssl.config import config_from_dict
from mssl.synthdata import SynthSpec, generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """Tiny synthetic dataset (32x32) for fast unit tests."""
    out = tmp_path_factory.mktemp("synth_small")
    spec = SynthSpec(n_train=12, n_val=4, n_test=6, image_size=(32, 32), seed=7)
    generate_synthetic_dataset(spec, str(out))
    return str(out)


@pytest.fixture(scope="session")
def bench_root(tmp_path_factory):
    """The fixed-seed 64x64 benchmark dataset used by the acceptance suite."""
    out = tmp_path_factory.mktemp("synth_bench")
    spec = SynthSpec(n_train=120, n_val=32, n_test=40, image_size=(64, 64), seed=0)
    generate_synthetic_dataset(spec, str(out))
    return str(out)


def small_cfg(root, run_id="t", seed=0, **overrides):
    """Config for quick training tests: 32x32 images, 2-level tiny_unet."""
    raw = {
        "run_id": run_id,
        "seed": seed,
        "data": {"root_path": root, "image_size": [32, 32],
                 "val_fraction": 0.25, "labeled_ratio": 0.5},
        "model": {"family": "tiny_unet", "levels": 2, "base_width": 4},
        "optim": {"learning_rate": 1e-3, "batch_size": 4,
                  "epochs_teacher": 2, "epochs_student": 2},
        "ssl": {"mode": "online", "momentum_ratio": 0.9, "ema_interval": "epoch"},
        "output_dir": "runs",
    }
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if name:
            raw.setdefault(section, {})[name] = value
        else:
            raw[key] = value
    return config_from_dict(raw)


def bench_cfg(root, out_dir, run_id, seed, mode, lr, epochs_teacher, epochs_student):
    """The frozen acceptance-benchmark configuration (see tests/test_acceptance.py)."""
    return config_from_dict({
        "run_id": run_id,
        "seed": seed,
        "data": {"root_path": root, "image_size": [64, 64],
                 "val_fraction": 32 / 152, "labeled_ratio": 0.2},
        "model": {"family": "tiny_unet", "levels": 4, "base_width": 8},
        "optim": {"learning_rate": lr, "batch_size": 8,
                  "epochs_teacher": epochs_teacher, "epochs_student": epochs_student},
        "ssl": {"mode": mode, "momentum_ratio": 0.8, "ema_interval": 1},
        "output_dir": out_dir,
    })


def random_param_map(seed, shapes=((8, 4), (4,), (16,), ())):
    """Small synthetic ParamMap with both learnable and statistic entries."""
    from mssl.model import ParamMap, ParamEntry, ROLE_LEARNABLE, ROLE_STATISTIC
    rng = np.random.default_rng(seed)
    entries = []
    for i, shape in enumerate(shapes):
        role = ROLE_STATISTIC if i % 3 == 2 else ROLE_LEARNABLE
        entries.append(ParamEntry(f"p{i}", rng.normal(size=shape).astype(np.float32), role))
    return ParamMap(entries=entries, arch_digest="test-arch")
