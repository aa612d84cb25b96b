from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from scipy import stats

from conftest import linear_run
from errors import TrajectoryError
from neural_graph import ArchSpec, mlp_spec
from trajectory_store import RunManifest, TrajectoryDataset, TrajectoryStore, checkpoint_name, verify


def _manifest(spec: ArchSpec, run_id: str = "r0", stride: int = 200) -> RunManifest:
    return RunManifest(run_id=run_id, task_id="toy", arch_hash=spec.hash(), num_params=spec.num_params,
                       stride=stride, arch=spec.to_dict())


def test_record_lists_steps_in_order(store: TrajectoryStore, small_mlp: ArchSpec, rng: np.random.Generator) -> None:
    store.create_run(_manifest(small_mlp))
    for step in range(200, 2001, 200):
        store.record_checkpoint("r0", step, rng.normal(size=small_mlp.num_params))
    assert store.manifest("r0").steps == list(range(200, 2001, 200))
    assert len(store.manifest("r0").checksums) == 10
    reread = TrajectoryStore(store.root).manifest("r0")
    assert reread.steps == list(range(200, 2001, 200))


def test_bad_checkpoints_are_rejected(store: TrajectoryStore, small_mlp: ArchSpec) -> None:
    store.create_run(_manifest(small_mlp))
    theta = np.zeros(small_mlp.num_params)
    store.record_checkpoint("r0", 400, theta)
    with pytest.raises(TrajectoryError, match="duplicate"):
        store.record_checkpoint("r0", 400, theta)
    with pytest.raises(TrajectoryError, match="out-of-order"):
        store.record_checkpoint("r0", 200, theta)
    with pytest.raises(TrajectoryError, match="multiple"):
        store.record_checkpoint("r0", 500, theta)
    with pytest.raises(TrajectoryError):
        store.record_checkpoint("r0", 600, np.zeros(3))
    with pytest.raises(TrajectoryError, match="already exists"):
        store.create_run(_manifest(small_mlp))


def test_readback_is_bit_exact(store: TrajectoryStore, small_mlp: ArchSpec, rng: np.random.Generator) -> None:
    store.create_run(_manifest(small_mlp))
    theta = rng.normal(size=small_mlp.num_params).astype(np.float32)
    store.record_checkpoint("r0", 200, theta)
    back = TrajectoryStore(store.root).load_checkpoint("r0", 200)
    assert back.dtype == np.float32
    assert back.tobytes() == theta.tobytes()


def test_verify_reports_corruption(store: TrajectoryStore, small_mlp: ArchSpec) -> None:
    linear_run(store, "good", small_mlp, 4)
    linear_run(store, "bad", small_mlp, 4, seed=1)
    assert verify(store.root) == []

    flipped = store.run_dir("bad") / checkpoint_name(400)
    payload = bytearray(flipped.read_bytes())
    payload[5] ^= 0xFF
    flipped.write_bytes(bytes(payload))
    truncated = store.run_dir("bad") / checkpoint_name(600)
    truncated.write_bytes(truncated.read_bytes()[:-4])
    (store.run_dir("good") / checkpoint_name(800)).unlink()
    (store.run_dir("good") / "00009999.f32").write_bytes(b"\0" * 4)

    problems = verify(store.root)
    assert any(str(flipped) in p and "checksum" in p for p in problems)
    assert any(str(truncated) in p and "size" in p for p in problems)
    assert any(checkpoint_name(800) in p and "missing" in p for p in problems)
    assert any("00009999.f32" in p and "not listed" in p for p in problems)


def test_verify_empty_root(tmp_path) -> None:
    assert "no runs found" in verify(tmp_path / "nothing")[0]


def test_dataset_windows_and_available_horizon(store: TrajectoryStore, small_mlp: ArchSpec) -> None:
    states = linear_run(store, "r0", small_mlp, 8)
    ds = TrajectoryDataset(store, context=5, horizon=3)
    # c + K = 8 checkpoints -> the first window has the full horizon
    first = ds.window_at("r0", 4)
    assert first.k_avail == 3
    assert first.tau == 1000
    np.testing.assert_array_equal(first.context.latest, states[4])
    np.testing.assert_allclose(first.targets[:, 0], states[5].astype(np.float64) - states[4])
    assert len(ds) == 3

    short = TrajectoryDataset(store, context=5, horizon=40)
    assert short.window_at("r0", 4).k_avail == 3
    assert short.window_at("r0", 6).k_avail == 1


def test_windows_read_only_the_checkpoints_they_use(store: TrajectoryStore, small_mlp: ArchSpec,
                                                    monkeypatch: pytest.MonkeyPatch) -> None:
    states = linear_run(store, "r0", small_mlp, 12)
    reads = Counter()
    load = store.load_checkpoint

    def counting(run_id: str, step: int) -> np.ndarray:
        reads[step] += 1
        return load(run_id, step)

    monkeypatch.setattr(store, "load_checkpoint", counting)
    ds = TrajectoryDataset(store, context=3, horizon=2, cache_size=8)
    sample = ds.window_at("r0", 5)
    assert sorted(reads) == [800, 1000, 1200, 1400, 1600]
    np.testing.assert_array_equal(sample.context.oldest_first().T, states[3:6].astype(np.float64))
    np.testing.assert_allclose(sample.targets[:, 1], states[7].astype(np.float64) - states[5])

    ds.window_at("r0", 5)
    assert sum(reads.values()) == 5
    for i in range(2, 10):
        ds.window_at("r0", i)
    assert ds._checkpoint.cache_info().currsize == 8


def test_dataset_needs_long_enough_runs(store: TrajectoryStore, small_mlp: ArchSpec) -> None:
    linear_run(store, "r0", small_mlp, 5)
    with pytest.raises(TrajectoryError):
        TrajectoryDataset(store, context=5, horizon=40)


def test_iteration_is_reproducible(store: TrajectoryStore, small_mlp: ArchSpec) -> None:
    linear_run(store, "r0", small_mlp, 12)
    ds = TrajectoryDataset(store, context=3, horizon=4)
    a = [(w.run_id, w.tau) for w in ds.iter_windows(5, 20)]
    b = [(w.run_id, w.tau) for w in ds.iter_windows(5, 20)]
    assert a == b


def test_sampling_is_uniform_over_positions(store: TrajectoryStore) -> None:
    spec = mlp_spec([1, 1])
    linear_run(store, "a", spec, 10)
    linear_run(store, "b", spec, 7, seed=1)
    ds = TrajectoryDataset(store, context=2, horizon=3)
    rng = np.random.default_rng(0)
    counts = Counter((w.run_id, w.tau) for w in (ds.sample_window(rng) for _ in range(3000)))
    assert len(counts) == len(ds) == 8 + 5
    observed = np.array([counts[(r, store.manifest(r).steps[i])] for r, i in ds.positions])
    assert stats.chisquare(observed).pvalue > 0.001
