# baselines.py
# Nowcasting baselines: Linefit, Linefit+, WNN, WNN+
# -------------------------------------------------------------
# Linefit fits a least-squares line per parameter over x = 1..c (oldest
# first) and extrapolates to x = 2c. Linefit+ weights the residuals by
# [1/c, 2/c, ..., 1] so the newest states count most. WNN is a small MLP
# applied to each parameter's scaled history independently.
# -------------------------------------------------------------

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from errors import ShapeError
from neural_graph import ParameterWindow

logger = logging.getLogger(__name__)


# =========================
# Closed-form line fits
# =========================
@dataclass(frozen=True, eq=False)
class LineFitResult:
    slope: np.ndarray       # a^i
    intercept: np.ndarray   # b^i
    context: int

    def at(self, x: float) -> np.ndarray:
        return self.slope * x + self.intercept

    def extrapolate(self) -> np.ndarray:
        return self.at(2 * self.context)


def _fit_line(window: ParameterWindow, weights: Optional[np.ndarray] = None) -> LineFitResult:
    y = window.oldest_first().astype(np.float64)
    c = y.shape[1]
    x = np.arange(1, c + 1, dtype=np.float64)
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    sw, sx, sxx = w.sum(), w @ x, w @ (x * x)
    sy, sxy = y @ w, y @ (w * x)
    slope = (sw * sxy - sx * sy) / (sw * sxx - sx * sx)
    intercept = (sy - slope * sx) / sw
    return LineFitResult(slope, intercept, c)


def linefit(window: ParameterWindow) -> LineFitResult:
    return _fit_line(window)


def linefitplus(window: ParameterWindow) -> LineFitResult:
    c = window.context
    mu = np.arange(1, c + 1, dtype=np.float64) / c
    # ||mu * residual||_2 -> per-point weights mu^2
    return _fit_line(window, mu ** 2)


def linefit_predict(window: ParameterWindow) -> np.ndarray:
    """theta_hat = 2ac + b per parameter."""
    fit = linefit(window)
    return _exact_constant(window, fit.extrapolate())


def linefitplus_predict(window: ParameterWindow) -> np.ndarray:
    fit = linefitplus(window)
    return _exact_constant(window, fit.extrapolate())


def _exact_constant(window: ParameterWindow, pred: np.ndarray) -> np.ndarray:
    # constant histories return the constant bit-for-bit
    values = window.values
    flat = np.all(values == values[:, :1], axis=1)
    pred[flat] = values[flat, 0]
    return pred


# =========================
# WNN
# =========================
class WnnModel(nn.Module):
    """Per-parameter MLP: c scaled states -> K scaled deltas.

    WNN uses K=1 (a single horizon of c strides); WNN+ uses K horizons
    with a direct multi-step head. The output layer starts at zero so an
    untrained model predicts no change.
    """

    def __init__(self, context: int = 5, hidden: int = 128, outputs: int = 1) -> None:
        super().__init__()
        self.context = context
        self.outputs = outputs
        self.body = nn.Sequential(
            nn.Linear(context, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
        )
        self.head = nn.Linear(hidden, outputs)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, scaled_window: torch.Tensor) -> torch.Tensor:
        if scaled_window.shape[-1] != self.context:
            raise ShapeError(f"WNN expects {self.context} states, got {scaled_window.shape[-1]}")
        return self.head(self.body(scaled_window))

    @torch.no_grad()
    def embedding(self, scaled_window: torch.Tensor) -> torch.Tensor:
        """Mean last-hidden activation over parameters, [hidden]."""
        return self.body(scaled_window).mean(dim=0)


def wnn_forward(model: WnnModel, scaled_window: torch.Tensor) -> torch.Tensor:
    return model(scaled_window)


def horizon_mae(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over horizons of the per-horizon mean absolute error.

    pred/target are [n, K]; mask [n, K] marks valid entries. Horizons with
    no valid entry are left out of the outer mean.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.dim() == 1:
        pred, target = pred[:, None], target[:, None]
        mask = None if mask is None else mask[:, None]
    err = (pred - target).abs()
    if mask is None:
        return err.mean(dim=0).mean()
    mask = mask.to(err.dtype)
    count = mask.sum(dim=0)
    per_k = (err * mask).sum(dim=0) / count.clamp_min(1)
    present = count > 0
    if not bool(present.any()):
        return err.sum() * 0.0
    return per_k[present].mean()


def wnn_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """L1 between scaled delta predictions and scaled true deltas."""
    return horizon_mae(pred, target, mask)
