from __future__ import annotations

import time

import numpy as np
import pytest

from pmq import cli, data, storage, vit
from pmq.config import load_config

import acceptance_log

TINY = vit.ViTConfig(depth=2, embed_dim=4, heads=2, mlp_dim=6, patches=3, num_classes=3, patch_dim=3)


def random_params(cfg: vit.ViTConfig, seed: int = 0, std: float = 0.5, dtype=np.float64) -> vit.ViTParams:
    """Parameters with nonzero biases and non-unit layernorm gains."""
    rng = np.random.default_rng(seed)
    p = vit.ViTParams.init(cfg, rng, std=std, dtype=dtype)
    return p.with_arrays({k: (v + 0.3 * rng.standard_normal(v.shape)).astype(dtype) for k, v in p.arrays.items()})


@pytest.fixture
def tiny():
    return TINY


@pytest.fixture
def tiny_params():
    return random_params(TINY)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Default pipeline config, its dataset, and a converged checkpoint on disk."""
    root = tmp_path_factory.mktemp("trained")
    cfg = load_config()
    m, d = cfg.model, cfg.data
    ds = data.generate(d.seed, m.num_classes, d.train_samples, d.test_samples, m.patches, m.patch_dim,
                       d.separation, d.informative_patches, d.noise)
    data.save(root / "data.json", ds)
    start = time.perf_counter()
    cli.train_checkpoint(cfg, ds, root / "ckpt.json")
    seconds = time.perf_counter() - start
    params, meta = storage.load_checkpoint(root / "ckpt.json")
    return {"cfg": cfg, "dataset": ds, "params": params, "meta": meta, "root": root, "train_seconds": seconds}


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
