from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from neural_graph import ArchSpec, ParameterWindow, mlp_spec
from trajectory_store import RunManifest, TrajectoryStore


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch() -> None:
    torch.manual_seed(0)


@pytest.fixture
def small_mlp() -> ArchSpec:
    return mlp_spec([3, 4, 2])


@pytest.fixture
def store(tmp_path: Path) -> TrajectoryStore:
    return TrajectoryStore(tmp_path / "store")


def random_window(spec: ArchSpec, c: int, rng: np.random.Generator, stride: int = 200) -> ParameterWindow:
    states = [rng.normal(size=spec.num_params) for _ in range(c)]
    return ParameterWindow.from_oldest_first(states, [stride * (i + 1) for i in range(c)], stride)


def linear_run(store: TrajectoryStore, run_id: str, spec: ArchSpec, count: int, stride: int = 200,
               seed: int = 0) -> np.ndarray:
    """A run whose parameters move on straight lines; returns the states [count, n]."""
    rng = np.random.default_rng(seed)
    start = rng.normal(size=spec.num_params)
    velocity = 0.01 * rng.normal(size=spec.num_params)
    store.create_run(RunManifest(run_id=run_id, task_id="linear", arch_hash=spec.hash(),
                                 num_params=spec.num_params, stride=stride,
                                 total_steps=count * stride, seed=seed, arch=spec.to_dict()))
    states = np.stack([start + velocity * i for i in range(1, count + 1)]).astype(np.float32)
    for i, theta in enumerate(states, start=1):
        store.record_checkpoint(run_id, i * stride, theta)
    store.finish_run(run_id, 0.0)
    return states
