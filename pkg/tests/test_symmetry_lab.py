from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from errors import InvalidSpecError, ShapeError
from neural_graph import msa_spec
from symmetry_lab import (
    BAD_CLASSES,
    GOOD_CLASSES,
    embed_weights,
    embedding_model,
    export_csv,
    flat_from_weights,
    msa_forward,
    permute_weights,
    random_weights,
    results_frame,
    run_experiment,
    same_function,
    weights_from_flat,
)


def test_single_token_single_head_is_value_then_output(rng: np.random.Generator) -> None:
    w = random_weights(4, 1, rng)
    x = rng.normal(size=(1, 4))
    expected = (x @ w["v.weight"].T + w["v.bias"]) @ w["o.weight"].T + w["o.bias"]
    np.testing.assert_allclose(msa_forward(x, w, heads=1), expected, atol=1e-12)
    with pytest.raises(ShapeError):
        msa_forward(rng.normal(size=(2, 5)), w, heads=1)


def test_flat_weights_roundtrip(rng: np.random.Generator) -> None:
    spec = msa_spec(6, 3)
    flat = rng.normal(size=spec.num_params)
    np.testing.assert_array_equal(flat_from_weights(spec, weights_from_flat(spec, flat)), flat)


@pytest.mark.parametrize("kind", GOOD_CLASSES)
def test_good_permutations_keep_the_function(kind: str, rng: np.random.Generator) -> None:
    w = random_weights(6, 2, rng)
    assert same_function(w, permute_weights(w, 2, kind, rng), 2, rng)


@pytest.mark.parametrize("kind", ["cross_head_swap", "global_shuffle"])
def test_bad_permutations_change_the_function(kind: str) -> None:
    rng = np.random.default_rng(5)
    w = random_weights(12, 4, rng)
    assert not same_function(w, permute_weights(w, 4, kind, rng), 4, rng)


def test_unknown_permutation_class(rng: np.random.Generator) -> None:
    with pytest.raises(InvalidSpecError):
        permute_weights(random_weights(4, 2, rng), 2, "rotate", rng)


def test_embeddings_see_only_function_changing_permutations() -> None:
    rng = np.random.default_rng(1)
    spec = msa_spec(6, 2)
    model = embedding_model(seed=0)
    w = random_weights(6, 2, rng)
    base = embed_weights(model, spec, w, "ours")
    for kind in GOOD_CLASSES:
        moved = embed_weights(model, spec, permute_weights(w, 2, kind, rng), "ours")
        assert np.max(np.abs(moved - base)) < 1e-5, kind
    gaps = {kind: np.max(np.abs(embed_weights(model, spec, permute_weights(w, 2, kind, rng), "ours") - base))
            for kind in BAD_CLASSES}
    assert max(gaps.values()) > 1e-3
    # head membership alone has to reach the readout
    assert gaps["cross_head_swap"] > 1e-6


def test_cross_head_swap_reaches_the_embedding() -> None:
    rng = np.random.default_rng(3)
    spec = msa_spec(12, 4)
    model = embedding_model(seed=0)
    w = random_weights(12, 4, rng)
    base = embed_weights(model, spec, w, "ours")
    for _ in range(5):
        moved = permute_weights(w, 4, "cross_head_swap", rng)
        assert not same_function(w, moved, 4, rng)
        assert np.max(np.abs(embed_weights(model, spec, moved, "ours") - base)) > 1e-6


def test_small_experiment_and_export(tmp_path: Path) -> None:
    results = run_experiment(d=6, heads=2, n_perms=60, seed=0, hidden=16, depth=2, with_coords=True)
    assert [r.mode for r in results] == ["ours", "naive"]
    for r in results:
        assert r.n == 60
        assert 0 < r.n_good < 60
        assert 0.0 <= r.accuracy <= 100.0
        assert r.coords.shape == (60, 2)

    frame = results_frame(results)
    assert list(frame.columns) == ["mode", "accuracy", "n", "seed"]
    path = tmp_path / "sym" / "run.csv"
    export_csv(results, path)
    assert pd.read_csv(path)["mode"].tolist() == ["ours", "naive"]
    coords = pd.read_csv(tmp_path / "sym" / "run_ours_coords.csv")
    assert list(coords.columns) == ["pca_x", "pca_y", "label"]
    assert len(coords) == 60


def test_heads_must_divide_width() -> None:
    with pytest.raises(InvalidSpecError):
        run_experiment(d=6, heads=4, n_perms=10)


def test_full_replication_separates_good_from_bad() -> None:
    ours, naive = run_experiment(d=12, heads=4, n_perms=1000, seed=0)
    assert ours.accuracy >= 80.0
    assert naive.accuracy <= ours.accuracy - 15.0
