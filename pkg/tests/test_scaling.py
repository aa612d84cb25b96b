from __future__ import annotations

import numpy as np
import pytest

from errors import InvalidSpecError, ShapeError
from scaling import (
    EPS,
    SCALER_KINDS,
    IdentityScaler,
    LayerwiseScaler,
    fit_layerwise,
    fit_minmax,
    fit_param_std,
    fit_scaler,
    wnn_scale,
    wnn_unscale,
)


def test_layerwise_population_std() -> None:
    scaler = fit_layerwise(np.array([[1.0], [2.0], [3.0]]), [(0, 3)])
    assert scaler.mean[0] == pytest.approx(2.0)
    assert scaler.std[0] == pytest.approx(np.sqrt(2.0 / 3.0))
    np.testing.assert_allclose(scaler.scale(np.array([1.0, 2.0, 3.0])),
                               np.array([-1.0, 0.0, 1.0]) / (np.sqrt(2.0 / 3.0) + EPS))


def test_layerwise_pools_all_states_of_a_group() -> None:
    window = np.array([[1.0, 3.0], [2.0, 2.0]])
    scaler = fit_layerwise(window, [(0, 2)])
    assert scaler.mean[0] == pytest.approx(2.0)
    assert scaler.std[0] == pytest.approx(np.sqrt(0.5))


def test_constant_layer_scales_to_zero() -> None:
    scaler = fit_layerwise(np.full((4, 3), 0.7), [(0, 4)])
    assert scaler.std[0] == 0.0
    assert not scaler.scale(np.full((4, 3), 0.7)).any()


def test_constant_block_next_to_a_varying_one(rng: np.random.Generator) -> None:
    window = np.vstack([np.full((7, 5), 0.1), rng.normal(size=(3, 5))])
    scaler = fit_layerwise(window, [(0, 7), (7, 10)])
    assert scaler.mean[0] == 0.1
    assert scaler.std[0] == 0.0
    scaled = scaler.scale(window)
    assert not scaled[:7].any()
    np.testing.assert_array_equal(scaler.unscale(scaled)[:7], window[:7])


def test_constant_parameter_has_zero_std() -> None:
    scaler = fit_param_std(np.array([[0.1, 0.1, 0.1], [1.0, 2.0, 3.0]]))
    assert scaler.shift[0] == 0.1
    assert scaler.denom[0] == scaler.eps
    assert not scaler.scale(np.array([0.1, 2.0])).any()


def test_groups_are_scaled_independently(rng: np.random.Generator) -> None:
    window = rng.normal(size=(10, 4))
    a = fit_layerwise(window, [(0, 4), (4, 10)])
    changed = window.copy()
    changed[4:] *= 100.0
    b = fit_layerwise(changed, [(0, 4), (4, 10)])
    np.testing.assert_array_equal(a.scale(window)[:4], b.scale(changed)[:4])


def test_layerwise_is_equivariant_to_group_order(rng: np.random.Generator) -> None:
    window = rng.normal(size=(9, 3))
    forward = fit_layerwise(window, [(0, 4), (4, 9)]).scale(window)
    swapped = np.concatenate([window[4:], window[:4]])
    backward = fit_layerwise(swapped, [(0, 5), (5, 9)]).scale(swapped)
    np.testing.assert_allclose(np.concatenate([backward[5:], backward[:5]]), forward)


def test_delta_roundtrip_and_direct_formula(rng: np.random.Generator) -> None:
    window = rng.normal(size=(6, 5))
    scaler = fit_layerwise(window, [(0, 2), (2, 6)])
    delta = rng.normal(size=6)
    np.testing.assert_allclose(scaler.unscale_delta(scaler.scale_delta(delta)), delta, rtol=1e-6)
    assert not scaler.unscale_delta(np.zeros(6)).any()

    half = LayerwiseScaler(np.zeros(1), np.array([0.5 + EPS]), ((0, 1),), np.zeros(1), np.array([0.5]))
    assert half.unscale_delta(np.array([1.0]))[0] == pytest.approx(0.5)


def test_minmax_scaling() -> None:
    scaler = fit_minmax(np.array([[0.3, 0.1]]))
    assert scaler.span[0] == pytest.approx(0.2)
    assert wnn_scale(scaler, np.array([0.3]))[0] == pytest.approx(1.5)
    x = np.array([0.25])
    assert wnn_unscale(scaler, wnn_scale(scaler, x))[0] == pytest.approx(0.25, rel=1e-6)


def test_minmax_constant_parameter_uses_eps() -> None:
    scaler = fit_minmax(np.array([[2e-9, 2e-9]]))
    assert scaler.span[0] == 0.0
    assert wnn_scale(scaler, np.array([2e-9]))[0] == pytest.approx(0.2)


@pytest.mark.parametrize("kind", SCALER_KINDS)
def test_every_kind_roundtrips(kind: str, rng: np.random.Generator) -> None:
    window = rng.normal(size=(8, 4))
    scaler = fit_scaler(kind, window, [(0, 3), (3, 8)])
    np.testing.assert_allclose(scaler.unscale(scaler.scale(window)), window, atol=1e-12)
    np.testing.assert_allclose(scaler.unscale_delta(scaler.scale_delta(window[:, 0])), window[:, 0], rtol=1e-6)


def test_fit_scaler_defaults_and_errors(rng: np.random.Generator) -> None:
    window = rng.normal(size=(5, 3))
    assert isinstance(fit_scaler("none", window), IdentityScaler)
    whole = fit_scaler("layerwise", window)
    assert whole.groups == ((0, 5),)
    with pytest.raises(InvalidSpecError):
        fit_scaler("robust", window)
    with pytest.raises(ShapeError):
        fit_layerwise(window, [(0, 3)])
    with pytest.raises(ShapeError):
        whole.scale(np.zeros(4))
