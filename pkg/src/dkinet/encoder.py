"""Visit encoders and the CLUB mutual-information regularizer.

All functions take per-code (row, code) index pairs so that a whole batch of
visits is encoded with a handful of array ops; ``rows[i]`` names the visit
that code occurrence ``i`` belongs to.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import AdamState, ParamStore, adam_step
from .tensor import Tensor


def embed_visit_ehr(table: Tensor, rows, codes, num_visits: int) -> tuple[Tensor, Tensor]:
    """Per-code EHR embeddings and their per-visit sums.

    Returns ``(e, v)`` with ``e`` of shape ``len(codes) x dim`` and ``v`` of
    shape ``num_visits x dim``.
    """
    e = T.gather(table, codes)
    return e, T.segment_sum(e, rows, num_visits)


def global_knowledge(queries: Tensor, knowledge_table: Tensor) -> Tensor:
    """Attention read of a knowledge table: ``softmax(q . E_k) E_k`` per query row."""
    if queries.shape[-1] != knowledge_table.shape[-1]:
        raise T.ShapeError(f"query width {queries.shape[-1]} != table width {knowledge_table.shape[-1]}")
    att = T.softmax(queries @ knowledge_table.T, axis=1)
    return att @ knowledge_table


def knowledge_inject(ehr_embs: Tensor, knowledge_table: Tensor, w_inj: Tensor, rows, codes,
                     num_visits: int) -> Tensor:
    """Per-visit knowledge-injected sum for one code type.

    For each code occurrence: its own knowledge row, concatenated with the
    global attention read, projected by ``w_inj`` (``2*dim x dim``); the
    projections are then summed per visit.
    """
    local = T.gather(knowledge_table, codes)
    glob = global_knowledge(ehr_embs, knowledge_table)
    z = T.concat([local, glob], axis=1) @ w_inj
    return T.segment_sum(z, rows, num_visits)


def fuse(v_k: Tensor, v_o: Tensor, w_v: Tensor, b_v: Tensor) -> Tensor:
    """``[v_k; v_o] @ w_v + b_v`` (``w_v`` is ``2*D_v x D_v``)."""
    if v_k.shape != v_o.shape:
        raise T.ShapeError(f"fuse: v_k {v_k.shape} and v_o {v_o.shape} differ")
    if w_v.shape[0] != 2 * v_k.shape[-1]:
        raise T.ShapeError(f"fuse: w_v has {w_v.shape[0]} input rows, expected {2 * v_k.shape[-1]}")
    axis = v_k.ndim - 1
    return T.concat([v_k, v_o], axis=axis) @ w_v + b_v


def club_mean(v_o: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return v_o @ w + b


def club_mi_loss(v_o: Tensor, v_k: Tensor, w, b) -> Tensor:
    """CLUB upper bound over all ``S x S`` (positive, negative) pairs.

    ``log f(y | x) = -0.5 * ||y - mu(x)||^2``; ``w`` and ``b`` enter as
    constants, so gradients reach ``v_o`` and ``v_k`` only.
    """
    s = v_o.shape[0]
    if s < 2:
        return Tensor(0.0)
    w = Tensor(w.data if isinstance(w, Tensor) else w, _check=False)
    b = Tensor(b.data if isinstance(b, Tensor) else b, _check=False)
    mu = club_mean(v_o, w, b)
    positive = -0.5 * T.reduce_sum((v_k - mu) * (v_k - mu), axis=1)
    d = T.reshape(v_k, (1, s, -1)) - T.reshape(mu, (s, 1, -1))
    negative = -0.5 * T.reduce_sum(d * d, axis=2)
    return T.reduce_sum(positive) * (1.0 / s) - T.reduce_sum(negative) * (1.0 / (s * s))


def club_nll(v_o: np.ndarray, v_k: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    diff = Tensor(v_k, _check=False) - club_mean(Tensor(v_o, _check=False), w, b)
    return T.mean(0.5 * T.reduce_sum(diff * diff, axis=1))


def club_fit_step(v_o, v_k, params: ParamStore, state: AdamState,
                  names: tuple[str, str] = ("club.w", "club.b")) -> float:
    """One likelihood step on the CLUB mean network; encoder activations are constants.

    Returns the negative log-likelihood before the update.
    """
    v_o = v_o.data if isinstance(v_o, Tensor) else np.asarray(v_o, dtype=np.float64)
    v_k = v_k.data if isinstance(v_k, Tensor) else np.asarray(v_k, dtype=np.float64)
    with T.GradientTape() as tape:
        p = tape.watch(params, names)
        nll = club_nll(v_o, v_k, p[names[0]], p[names[1]])
    grads = T.backward(nll, tape)
    adam_step(params, grads, state)
    return nll.item()
