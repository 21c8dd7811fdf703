"""Quantitative diagnostics: per-layer latent diversity (MAD), MAE,
within-threshold rates, and per-target normalized MAE summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError

__all__ = [
    "mad",
    "LayerDiversityProfile",
    "mad_profile",
    "mae",
    "within_threshold",
    "std_mae",
    "log_mae",
    "METRIC_DIRECTIONS",
]

# which way is better, for run comparison summaries
METRIC_DIRECTIONS = {
    "mae": "min",
    "node_mae": "min",
    "aewt": "max",
    "adwt": "max",
    "accuracy": "max",
    "ce": "min",
    "std_mae": "min",
    "log_mae": "min",
    "aux": "min",
}


def mad(node_latents: np.ndarray) -> float:
    """Mean pairwise cosine distance over ordered pairs of distinct rows.

    Zero-norm rows are excluded; fewer than two usable rows is an error.
    Values lie in [0, 2].
    """
    h = np.asarray(node_latents, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise UndefinedMetricError(
            f"mad needs a [n>=2, d] latent matrix, got shape {h.shape}")
    norms = np.linalg.norm(h, axis=1)
    usable = norms > 0
    if usable.sum() < 2:
        raise UndefinedMetricError("mad undefined: fewer than two nonzero rows")
    u = h[usable] / norms[usable, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    n = u.shape[0]
    off_diag_sum = cos.sum() - np.trace(cos)
    return float(1.0 - off_diag_sum / (n * (n - 1)))


@dataclass(frozen=True)
class LayerDiversityProfile:
    """Per-layer MAD values; NaN marks layers where MAD is undefined."""

    values: np.ndarray
    target: str                 # "latents" or "residual_updates"
    sorted_desc: bool = False

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]


def mad_profile(model, params, batch, target: str = "latents",
                sort: bool = False, train: bool = False) -> LayerDiversityProfile:
    """MAD per processor layer on one forward pass.

    target="latents" measures each layer's node latents; "residual_updates"
    measures the per-layer deltas. Layers where every row is zero (e.g.
    zero-initialized updates) report NaN rather than erroring.
    """
    if target not in ("latents", "residual_updates"):
        raise ContractError(f"unknown mad_profile target '{target}'")
    snaps = [s.data for s in model.forward(params, batch, train).snapshots]
    values = []
    for k in range(1, len(snaps)):
        mat = snaps[k] if target == "latents" else snaps[k] - snaps[k - 1]
        try:
            values.append(mad(mat))
        except UndefinedMetricError:
            values.append(np.nan)
    values = np.asarray(values)
    if sort:
        values = np.sort(values)[::-1]
    return LayerDiversityProfile(values, target, sorted_desc=sort)


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"mae: shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise UndefinedMetricError("mae undefined on empty input")
    return float(np.abs(pred - target).mean())


def within_threshold(pred: np.ndarray, target: np.ndarray,
                     thresh: float) -> float:
    """Fraction of entries with error below thresh. For multi-column rows
    (e.g. per-node 3-vectors) the error is the row's Euclidean distance."""
    if thresh <= 0:
        raise ContractError(f"threshold must be positive, got {thresh}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise UndefinedMetricError("within_threshold undefined on empty input")
    err = np.abs(pred - target) if pred.ndim <= 1 else \
        np.linalg.norm(pred - target, axis=-1)
    return float((err < thresh).mean())


def _checked_ratio(per_target_maes, per_target_stds):
    maes = np.asarray(per_target_maes, dtype=np.float64)
    stds = np.asarray(per_target_stds, dtype=np.float64)
    if maes.shape != stds.shape or maes.ndim != 1:
        raise ContractError(f"need equal-length vectors, got {maes.shape} "
                            f"and {stds.shape}")
    if np.any(stds <= 0):
        raise ContractError("target standard deviations must be positive")
    return maes / stds


def std_mae(per_target_maes, per_target_stds) -> float:
    """Mean over targets of MAE_m / sigma_m."""
    return float(_checked_ratio(per_target_maes, per_target_stds).mean())


def log_mae(per_target_maes, per_target_stds) -> float:
    """Mean over targets of ln(MAE_m / sigma_m)."""
    return float(np.log(_checked_ratio(per_target_maes, per_target_stds)).mean())
