"""Knowledge-graph aggregation into per-code knowledge embeddings.

Two alternating propagation steps per layer:

* concept layer: each concept averages ``e_r * e_tail`` over its outgoing
  triples;
* filter layer: each medical code averages, over its mapped concepts and all
  filters, the filter-attention-weighted ``e_F * e_concept``, where each filter
  embedding is a softmax mixture of relation embeddings.

Nodes without neighbours carry their previous embedding forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .kg import NeighborIndex
from .tensor import Tensor

DVAR_EPS = 1e-12


@dataclass
class KnowledgeTables:
    diag: Tensor
    proc: Tensor
    med: Tensor
    codes: Tensor
    filter_embs: Tensor

    def by_type(self, code_type: str) -> Tensor:
        return getattr(self, code_type)


def filter_embeddings(filter_w: Tensor, relation_table: Tensor) -> Tensor:
    """``softmax(w_F, over relations) @ e_r``: one convex mixture of relations per filter."""
    if relation_table.shape[0] < 1:
        raise ValueError("at least one relation is required")
    return T.softmax(filter_w, axis=1) @ relation_table


def _inverse_degree(deg: np.ndarray) -> tuple[Tensor, Tensor]:
    deg = np.asarray(deg, dtype=np.float64)
    scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    keep = (deg == 0).astype(np.float64)
    return Tensor(scale[:, None]), Tensor(keep[:, None])


def aggregate_umls_layer(prev_concepts: Tensor, relation_table: Tensor, index: NeighborIndex) -> Tensor:
    msg = T.gather(relation_table, index.kg_rels) * T.gather(prev_concepts, index.kg_tails)
    agg = T.segment_sum(msg, index.kg_heads, index.num_concepts)
    scale, keep = _inverse_degree(index.concept_deg)
    return agg * scale + prev_concepts * keep


def filter_attention(prev_codes: Tensor, filter_embs: Tensor) -> Tensor:
    """Per-code softmax over filters of ``e_F . e_c``; shape ``codes x filters``."""
    return T.softmax(prev_codes @ filter_embs.T, axis=1)


def aggregate_filter_layer(prev_codes: Tensor, concepts: Tensor, filter_embs: Tensor,
                           index: NeighborIndex) -> Tensor:
    att = filter_attention(prev_codes, filter_embs)
    # sum_i att[c, i] * e_F_i, once per (code, concept) pair
    mixed = T.gather(att, index.pair_codes) @ filter_embs
    msg = mixed * T.gather(concepts, index.pair_concepts)
    agg = T.segment_sum(msg, index.pair_codes, index.num_codes)
    scale, keep = _inverse_degree(index.code_deg)
    return agg * scale + prev_codes * keep


def build_knowledge_tables(concepts: Tensor, relations: Tensor, codes: Tensor, filter_w: Tensor,
                           index: NeighborIndex, num_layers: int, sizes: dict[str, int]) -> KnowledgeTables:
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    f_embs = filter_embeddings(filter_w, relations)
    c, u = codes, concepts
    for _ in range(num_layers):
        c, u = aggregate_filter_layer(c, u, f_embs, index), aggregate_umls_layer(u, relations, index)
    nd, npr = sizes["diag"], sizes["proc"]
    return KnowledgeTables(
        diag=c[:nd],
        proc=c[nd:nd + npr],
        med=c[nd + npr:],
        codes=c,
        filter_embs=f_embs,
    )


def _centered_distances(x: Tensor) -> Tensor:
    n = x.shape[0]
    d = T.abs_(T.reshape(x, (n, 1)) - T.reshape(x, (1, n)))
    return d - T.mean(d, axis=0, keepdims=True) - T.mean(d, axis=1, keepdims=True) + T.mean(d)


def distance_correlation(x: Tensor, y: Tensor) -> Tensor:
    """Sample distance correlation of two equal-length vectors, each read as scalar samples.

    Returns an exact zero when either distance variance is below ``1e-12``.
    """
    if x.shape != y.shape or x.ndim != 1:
        raise T.ShapeError(f"distance_correlation needs equal 1-D vectors, got {x.shape} and {y.shape}")
    a, b = _centered_distances(x), _centered_distances(y)
    dvar_x = T.sqrt(T.mean(a * a))
    dvar_y = T.sqrt(T.mean(b * b))
    if dvar_x.item() < DVAR_EPS or dvar_y.item() < DVAR_EPS:
        return Tensor(0.0)
    dcov2 = T.mean(a * b)
    if dcov2.item() <= 0.0:
        return Tensor(0.0)
    return T.sqrt(dcov2) / T.sqrt(dvar_x * dvar_y)


def independence_loss(filter_embs: Tensor) -> Tensor:
    """Sum of distance correlations over ordered filter pairs ``i != j``."""
    n = filter_embs.shape[0]
    total = Tensor(0.0)
    if n < 2:
        return total
    rows = [filter_embs[i] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            # dCor is symmetric, so (i, j) and (j, i) contribute the same term
            total = total + 2.0 * distance_correlation(rows[i], rows[j])
    return total
