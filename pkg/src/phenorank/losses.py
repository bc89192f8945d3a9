"""Angular-margin loss, weighted cross entropy, and a gradient harness.

Both losses are hand-differentiated numpy code (no autograd framework).
The angular-margin loss on L2-normalized features and class weights:

    L = -(1/N) sum_i log[ exp(s*cos(theta_y + m)) /
            (exp(s*cos(theta_y + m)) + sum_{j != y} exp(s*cos(theta_j))) ]

Class weights for the imbalance-aware cross entropy map frequencies
into (0.5, 1.0]:

    W_c = 0.5 * min(D) / D_c + 0.5
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import (
    ConfigInvalid,
    EmptyFrequencies,
    LabelOutOfRange,
    NonFinite,
    ZeroCount,
    ZeroVector,
)

_COS_CLIP = 1e-7
_NORM_EPS = 1e-12


def wce_weights(freqs: Mapping[str, int]) -> dict[str, float]:
    """Per-class weights in (0.5, 1.0]; every minimum-count class gets 1.0."""
    if not freqs:
        raise EmptyFrequencies("empty frequency map")
    for class_id, count in freqs.items():
        if count < 1:
            raise ZeroCount(f"class {class_id} has count {count}")
    smallest = min(freqs.values())
    return {c: 0.5 * smallest / d + 0.5 for c, d in freqs.items()}


@dataclass
class ArcFaceParams:
    """Scale, angular margin, and the class-weight matrix (n_classes x dim)."""

    weights: np.ndarray
    scale: float = 64.0
    margin: float = 0.5

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ConfigInvalid("weights must be a (n_classes, dim) matrix")
        if self.scale <= 0:
            raise ConfigInvalid(f"scale must be positive, got {self.scale}")
        if not 0 <= self.margin < np.pi:
            raise ConfigInvalid(f"margin must lie in [0, pi), got {self.margin}")


def _normalize_rows_checked(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(mat, axis=1)
    if not np.all(norms > _NORM_EPS):
        bad = int(np.argmin(norms))
        raise ZeroVector(f"{what} row {bad} has norm {norms[bad]}")
    return mat / norms[:, None], norms


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LabelOutOfRange(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def arcface_loss(embeddings: np.ndarray, labels, params: ArcFaceParams
                 ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean angular-margin loss with analytic gradients.

    Returns (loss, d_loss/d_embeddings, d_loss/d_weights).  Cosines for
    the true class are clipped to [-1 + 1e-7, 1 - 1e-7] before the angle
    computation to keep the derivative finite.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigInvalid("embeddings must be (N, dim)")
    w = params.weights
    if x.shape[1] != w.shape[1]:
        raise ConfigInvalid(
            f"embedding dim {x.shape[1]} != weight dim {w.shape[1]}")
    n_samples, n_classes = x.shape[0], w.shape[0]
    y = _check_labels(labels, n_classes)
    if n_samples == 0:
        return 0.0, np.zeros_like(x), np.zeros_like(w)
    s, m = params.scale, params.margin
    cos_m, sin_m = np.cos(m), np.sin(m)

    u, x_norms = _normalize_rows_checked(x, "embedding")
    v, w_norms = _normalize_rows_checked(w, "weight")
    cosines = u @ v.T  # (N, n_classes)

    rows = np.arange(n_samples)
    ct = np.clip(cosines[rows, y], -1.0 + _COS_CLIP, 1.0 - _COS_CLIP)
    st = np.sqrt(1.0 - ct * ct)

    logits = s * cosines
    logits[rows, y] = s * (ct * cos_m - st * sin_m)

    # per-sample loss via the max trick; exact log1p when the true logit
    # dominates so saturated margins keep full precision
    max_logit = logits.max(axis=1)
    losses = np.empty(n_samples)
    shifted = logits - max_logit[:, None]
    exp_shifted = np.exp(shifted)
    for i in range(n_samples):
        zy = logits[i, y[i]]
        if zy == max_logit[i]:
            rest = exp_shifted[i].sum() - exp_shifted[i, y[i]]
            losses[i] = np.log1p(rest)
        else:
            losses[i] = (max_logit[i] - zy) + np.log(exp_shifted[i].sum())
    loss = float(losses.sum() / n_samples)

    probs = exp_shifted / exp_shifted.sum(axis=1, keepdims=True)
    grad_logits = probs
    grad_logits[rows, y] -= 1.0
    grad_logits /= n_samples

    # chain through the margin on the true-class column
    grad_cos = grad_logits * s
    dtrue_dcos = s * (cos_m + sin_m * ct / st)
    grad_cos[rows, y] = grad_logits[rows, y] * dtrue_dcos

    grad_u = grad_cos @ v
    grad_v = grad_cos.T @ u
    grad_x = (grad_u - (grad_u * u).sum(axis=1, keepdims=True) * u) / x_norms[:, None]
    grad_w = (grad_v - (grad_v * v).sum(axis=1, keepdims=True) * v) / w_norms[:, None]
    return loss, grad_x, grad_w


def wce_loss(logits: np.ndarray, labels, class_weights: np.ndarray
             ) -> tuple[float, np.ndarray]:
    """Per-sample cross entropy scaled by the label's class weight.

    Returns (mean loss over the batch, d_loss/d_logits).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ConfigInvalid("logits must be (N, n_classes)")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (z.shape[1],):
        raise ConfigInvalid(
            f"class_weights shape {weights.shape} != ({z.shape[1]},)")
    n_samples = z.shape[0]
    y = _check_labels(labels, z.shape[1])
    if n_samples == 0:
        return 0.0, np.zeros_like(z)
    rows = np.arange(n_samples)
    max_logit = z.max(axis=1)
    shifted = z - max_logit[:, None]
    exp_shifted = np.exp(shifted)
    sums = exp_shifted.sum(axis=1)
    log_probs = shifted[rows, y] - np.log(sums)
    sample_w = weights[y]
    loss = float((-sample_w * log_probs).sum() / n_samples)
    probs = exp_shifted / sums[:, None]
    grad = probs
    grad[rows, y] -= 1.0
    grad *= sample_w[:, None] / n_samples
    return loss, grad


def finite_diff_check(loss_fn: Callable, point, step: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``point`` is one float64 array or a tuple of them; ``loss_fn`` maps
    the point to (loss, gradient) with the gradient matching the point's
    structure.  Relative error per coordinate is
    |analytic - numeric| / (|numeric| + 1e-8).
    """
    single = not isinstance(point, (tuple, list))
    arrays = [np.array(point, dtype=np.float64)] if single else [
        np.array(p, dtype=np.float64) for p in point]

    def call(arrs):
        loss, grad = loss_fn(arrs[0] if single else tuple(arrs))
        if not np.isfinite(loss):
            raise NonFinite(f"loss is {loss}")
        grads = [np.asarray(grad)] if single else [np.asarray(g) for g in grad]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFinite("gradient has non-finite entries")
        return float(loss), grads

    _, analytic = call(arrays)
    worst = 0.0
    for a_idx, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = call(arrays)
            flat[i] = orig - step
            down, _ = call(arrays)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NonFinite("numeric gradient is non-finite")
            ana = analytic[a_idx].reshape(-1)[i]
            err = abs(ana - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
