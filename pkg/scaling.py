# scaling.py
# Invertible normalization of parameter windows
# -------------------------------------------------------------
# layerwise      scalar mean/std per parameter tensor (NiNo, WNN+)
# per-param-std  mean/std of each parameter over the window
# minmax         per-parameter range, no centring (WNN)
# none           identity
# All statistics are computed in float64.
# -------------------------------------------------------------

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidSpecError, ShapeError
from neural_graph import ParameterWindow

EPS = 1e-8
SCALER_KINDS = ("layerwise", "per-param-std", "minmax", "none")

WindowLike = Union[ParameterWindow, np.ndarray]


def _as_matrix(window: WindowLike) -> np.ndarray:
    values = window.values if isinstance(window, ParameterWindow) else np.asarray(window)
    if values.ndim == 1:
        values = values[:, None]
    return values.astype(np.float64, copy=False)


@dataclass(frozen=True, eq=False)
class _AffineScaler:
    """x -> (x - shift) / denom, with per-parameter shift and denom."""

    shift: np.ndarray
    denom: np.ndarray

    @property
    def num_params(self) -> int:
        return int(self.denom.shape[0])

    def _check(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] != self.num_params:
            raise ShapeError(f"scaler fitted on {self.num_params} parameters, got {values.shape[0]}")
        if values.ndim == 1:
            return self.shift, self.denom
        return self.shift[:, None], self.denom[:, None]

    def scale(self, values: np.ndarray) -> np.ndarray:
        shift, denom = self._check(values)
        return (np.asarray(values, dtype=np.float64) - shift) / denom

    def unscale(self, values: np.ndarray) -> np.ndarray:
        shift, denom = self._check(values)
        return np.asarray(values, dtype=np.float64) * denom + shift

    def scale_delta(self, delta: np.ndarray) -> np.ndarray:
        _, denom = self._check(delta)
        return np.asarray(delta, dtype=np.float64) / denom

    def unscale_delta(self, delta: np.ndarray) -> np.ndarray:
        _, denom = self._check(delta)
        return np.asarray(delta, dtype=np.float64) * denom


@dataclass(frozen=True, eq=False)
class LayerwiseScaler(_AffineScaler):
    groups: Tuple[Tuple[int, int], ...] = ()
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    eps: float = EPS


@dataclass(frozen=True, eq=False)
class ParamStdScaler(_AffineScaler):
    eps: float = EPS


@dataclass(frozen=True, eq=False)
class MinMaxScaler(_AffineScaler):
    span: Optional[np.ndarray] = None
    eps: float = EPS


@dataclass(frozen=True, eq=False)
class IdentityScaler(_AffineScaler):
    pass


def fit_layerwise(window: WindowLike, groups: Sequence[Tuple[int, int]], eps: float = EPS) -> LayerwiseScaler:
    """One population mean/std per tensor, pooled over all c states."""
    values = _as_matrix(window)
    n = values.shape[0]
    covered = sum(end - start for start, end in groups)
    if covered != n:
        raise ShapeError(f"parameter groups cover {covered} values, window has {n}")
    mean = np.empty(len(groups))
    std = np.empty(len(groups))
    shift = np.empty(n)
    denom = np.empty(n)
    for g, (start, end) in enumerate(groups):
        block = values[start:end]
        if block.size and np.ptp(block) == 0:
            mean[g], std[g] = block.flat[0], 0.0
        else:
            mean[g] = block.mean()
            std[g] = block.std()
        shift[start:end] = mean[g]
        denom[start:end] = std[g] + eps
    return LayerwiseScaler(shift, denom, tuple(tuple(g) for g in groups), mean, std, eps)


def fit_param_std(window: WindowLike, eps: float = EPS) -> ParamStdScaler:
    values = _as_matrix(window)
    flat = np.ptp(values, axis=1) == 0
    mean = np.where(flat, values[:, 0], values.mean(axis=1))
    std = np.where(flat, 0.0, values.std(axis=1))
    return ParamStdScaler(mean, std + eps, eps)


def fit_minmax(window: WindowLike, eps: float = EPS) -> MinMaxScaler:
    values = _as_matrix(window)
    span = values.max(axis=1) - values.min(axis=1)
    return MinMaxScaler(np.zeros_like(span), span + eps, span, eps)


def fit_identity(window: WindowLike) -> IdentityScaler:
    n = _as_matrix(window).shape[0]
    return IdentityScaler(np.zeros(n), np.ones(n))


def fit_scaler(kind: str, window: WindowLike, groups: Sequence[Tuple[int, int]] = (),
               eps: float = EPS) -> _AffineScaler:
    if kind == "layerwise":
        if not groups:
            groups = ((0, _as_matrix(window).shape[0]),)
        return fit_layerwise(window, groups, eps)
    if kind == "per-param-std":
        return fit_param_std(window, eps)
    if kind == "minmax":
        return fit_minmax(window, eps)
    if kind == "none":
        return fit_identity(window)
    raise InvalidSpecError(f"unknown scaling '{kind}', expected one of {SCALER_KINDS}")


# WNN scaling: theta / (s + eps); no centring
def wnn_scale(scaler: MinMaxScaler, values: np.ndarray) -> np.ndarray:
    return scaler.scale(values)


def wnn_unscale(scaler: MinMaxScaler, values: np.ndarray) -> np.ndarray:
    return scaler.unscale(values)
