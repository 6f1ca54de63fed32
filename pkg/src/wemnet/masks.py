"""Binary channel masks derived from head weights.

A channel is kept when ``sigmoid(|w|)`` is strictly above the mean of
``sigmoid(|W|)``. Masks are constants: they carry no gradient and are
rebuilt from the live weights on every forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, ValidationError, _sigmoid


def _weights(W) -> np.ndarray:
    arr = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.size == 0:
        raise ValueError("weight matrix is empty")
    return arr


def _mean_within_range(s: np.ndarray, axis=None) -> np.ndarray:
    # a float mean of identical values can drift an ulp outside them; clamp so
    # constant inputs tie exactly and yield an all-zero mask
    m = s.mean(axis=axis, keepdims=axis is not None)
    return np.clip(m, s.min(axis=axis, keepdims=axis is not None), s.max(axis=axis, keepdims=axis is not None))


def weight_threshold(W) -> float:
    """Mean of sigmoid(|W|) over every entry of ``W``."""
    return float(_mean_within_range(_sigmoid(np.abs(_weights(W)))))


def weight_mask(W, per_row: bool = False) -> Tensor:
    """Indicator of sigmoid(|W|) > threshold, as a constant tensor.

    With ``per_row`` each row is compared against its own mean instead of the
    global one.
    """
    s = _sigmoid(np.abs(_weights(W)))
    thr = _mean_within_range(s, axis=1) if per_row else _mean_within_range(s)
    return Tensor((s > thr).astype(np.float64))


@dataclass
class DomainMask:
    mask: Tensor  # 1 x N_h
    threshold: float


@dataclass
class ClassMask:
    mask: Tensor  # N_c x N_h
    threshold: np.ndarray  # shape (1,) for a global threshold, (N_c,) per row


@dataclass
class BatchClassMask:
    mask: Tensor  # N_b x N_h
    origin: list[str]


def domain_mask(W_d) -> DomainMask:
    arr = _weights(W_d)
    if arr.shape[0] != 1:
        raise DimensionError(f"domain mask expects a 1 x N_h weight, got {arr.shape}")
    return DomainMask(weight_mask(arr), weight_threshold(arr))


def class_mask(W_c, per_row: bool = False) -> ClassMask:
    arr = _weights(W_c)
    s = _sigmoid(np.abs(arr))
    thr = _mean_within_range(s, axis=1).ravel() if per_row else np.array([_mean_within_range(s)])
    return ClassMask(weight_mask(arr, per_row=per_row), thr)


def batch_class_mask(M_c, weights, kind: str) -> Tensor:
    """Per-sample mask: row k is sum_i weights[k, i] * M_c[i].

    ``kind="source"`` requires one-hot rows, ``kind="target"`` requires rows
    on the probability simplex (tolerance 1e-6).
    """
    m = M_c.data if isinstance(M_c, Tensor) else np.asarray(M_c, dtype=np.float64)
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    if w.shape[1] != m.shape[0]:
        raise DimensionError(f"weights have {w.shape[1]} columns but M_c has {m.shape[0]} rows")
    if kind == "source":
        ok = ((w == 0) | (w == 1)).all(axis=1) & (w.sum(axis=1) == 1)
        if not ok.all():
            raise ValidationError(f"source row {int(np.flatnonzero(~ok)[0])} is not one-hot")
    elif kind == "target":
        ok = (w >= 0).all(axis=1) & (np.abs(w.sum(axis=1) - 1.0) <= 1e-6)
        if not ok.all():
            raise ValidationError(f"target row {int(np.flatnonzero(~ok)[0])} is not on the simplex")
    else:
        raise ValueError(f"kind must be 'source' or 'target', got {kind!r}")
    return Tensor(w @ m)


def concat_batch_masks(src: Tensor, tgt: Tensor) -> Tensor:
    """Stack source rows above target rows, matching the feature batch layout."""
    if src.shape[1] != tgt.shape[1]:
        raise DimensionError(f"mask column mismatch: {src.shape} vs {tgt.shape}")
    return Tensor(np.vstack([src.data, tgt.data]))


def batch_mask_from_labels(M_c: Tensor, y_s: Tensor, p_t: Tensor) -> BatchClassMask:
    src = batch_class_mask(M_c, y_s, "source")
    tgt = batch_class_mask(M_c, p_t, "target")
    origin = ["source"] * src.shape[0] + ["target"] * tgt.shape[0]
    return BatchClassMask(concat_batch_masks(src, tgt), origin)
