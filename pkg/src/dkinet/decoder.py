"""History-aware decoding and the medication output layer."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def history_attention_batch(v: Tensor, history: Tensor, mask: np.ndarray,
                            w_q: Tensor, w_k: Tensor, w_val: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product read of medication history for a batch of visits.

    ``v`` is ``V x D_v``; ``history`` is ``H x dim``; ``mask[r, j]`` says
    whether visit ``r`` may attend history row ``j``. Rows without any
    admissible history get a zero read, so ``v_hat = v`` there.
    Returns ``(v_hat, weights)``.
    """
    dim = w_k.shape[0]
    if v.shape[-1] != w_q.shape[0] or history.shape[-1] != dim or w_val.shape[0] != dim:
        raise T.ShapeError(
            f"history attention widths: v {v.shape}, history {history.shape}, "
            f"w_q {w_q.shape}, w_k {w_k.shape}, w_val {w_val.shape}")
    scores = (v @ w_q) @ (history @ w_k).T * (1.0 / math.sqrt(dim))
    weights = T.masked_softmax(scores, mask)
    return (weights @ history) @ w_val + v, weights


def history_attention(v: Tensor, history: list[Tensor], w_q: Tensor, w_k: Tensor, w_val: Tensor) -> Tensor:
    """Single-visit form: ``v`` of width D_v, ``history`` a list of width-dim vectors."""
    if not history:
        return v
    keys = T.concat([T.reshape(h, (1, -1)) for h in history], axis=0)
    mask = np.ones((1, len(history)), dtype=bool)
    out, _ = history_attention_batch(T.reshape(v, (1, -1)), keys, mask, w_q, w_k, w_val)
    return T.reshape(out, v.shape)


def predict_scores(v_hat: Tensor, w_y: Tensor, b_y: Tensor) -> Tensor:
    return T.sigmoid(v_hat @ w_y + b_y)


def threshold_select(scores, eta: float = 0.5) -> set[int]:
    """Medication ids whose score is at least ``eta``."""
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return set(np.flatnonzero(scores >= eta).tolist())
