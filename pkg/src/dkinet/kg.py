"""Concept graph, code-to-concept mapping, and the filter-expanded graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ehr import CODE_TYPES, CodeVocab

log = logging.getLogger(__name__)


class KGFormatError(ValueError):
    pass


@dataclass
class KnowledgeGraph:
    concepts: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    heads: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tails: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.concept_index = {c: i for i, c in enumerate(self.concepts)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

    @property
    def num_concepts(self) -> int:
        return len(self.concepts)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_triples(self) -> int:
        return len(self.heads)

    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.heads.tolist(), self.rels.tolist(), self.tails.tolist()))

    @classmethod
    def from_named_triples(cls, triples, concepts=(), relations=()) -> "KnowledgeGraph":
        """Intern names in first-seen order; ``concepts``/``relations`` seed the order."""
        c_idx = {c: i for i, c in enumerate(concepts)}
        r_idx = {r: i for i, r in enumerate(relations)}
        seen, out = set(), []
        for h, r, t in triples:
            hid = c_idx.setdefault(h, len(c_idx))
            rid = r_idx.setdefault(r, len(r_idx))
            tid = c_idx.setdefault(t, len(c_idx))
            if (hid, rid, tid) not in seen:
                seen.add((hid, rid, tid))
                out.append((hid, rid, tid))
        arr = np.array(out, dtype=np.int64).reshape(-1, 3)
        return cls(list(c_idx), list(r_idx), arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())

    def neighbors(self) -> list[list[tuple[int, int]]]:
        """N_h for every concept: the (relation, tail) pairs of triples headed by h."""
        out: list[list[tuple[int, int]]] = [[] for _ in self.concepts]
        for h, r, t in self.triples():
            out[h].append((r, t))
        return out


def load_triples(path) -> KnowledgeGraph:
    """Read ``head \\t relation \\t tail`` lines; duplicates collapse."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise KGFormatError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            rows.append(tuple(p.strip() for p in parts))
    return KnowledgeGraph.from_named_triples(rows)


def save_triples(kg: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples():
            fh.write(f"{kg.concepts[h]}\t{kg.relations[r]}\t{kg.concepts[t]}\n")


@dataclass
class CodeConceptMap:
    """(code, concept) pairs. Codes are global ids into the stacked code table.

    The stacked table orders rows diag, proc, med, PAD: a diagnosis id ``i``
    becomes row ``i``, a procedure id ``j`` row ``|D| + j``, a medication id
    ``k`` row ``|D| + |P| + k``.
    """

    codes: np.ndarray
    concepts: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.codes)


def code_offsets(vocab: CodeVocab) -> dict[str, int]:
    s = vocab.sizes
    return {"diag": 0, "proc": s["diag"], "med": s["diag"] + s["proc"]}


def num_code_rows(vocab: CodeVocab) -> int:
    s = vocab.sizes
    return s["diag"] + s["proc"] + s["med"] + 1


def load_code_map(path, vocab: CodeVocab, kg: KnowledgeGraph) -> CodeConceptMap:
    """Read ``code_type \\t code \\t cui`` lines.

    Codes absent from ``vocab`` are skipped and counted; a CUI absent from the
    graph is an error.
    """
    offsets = code_offsets(vocab)
    pairs, seen, skipped = [], set(), 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = [p.strip() for p in line.split("\t")]
            if len(parts) != 3:
                raise KGFormatError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            ctype, code, cui = parts
            if ctype not in CODE_TYPES:
                raise KGFormatError(f"{path}:{lineno}: unknown code type {ctype!r}")
            if cui not in kg.concept_index:
                raise KGFormatError(f"{path}:{lineno}: concept {cui!r} is not in the knowledge graph")
            cid = vocab.get(ctype, code)
            if cid is None:
                skipped += 1
                continue
            pair = (offsets[ctype] + cid, kg.concept_index[cui])
            if pair not in seen:
                seen.add(pair)
                pairs.append(pair)
    if skipped:
        log.warning("skipped %d mapping line(s) for codes not in the vocabulary", skipped)
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return CodeConceptMap(arr[:, 0].copy(), arr[:, 1].copy(), skipped)


@dataclass
class FilterGraph:
    num_filters: int
    codes: np.ndarray
    filters: np.ndarray
    concepts: np.ndarray

    def __len__(self) -> int:
        return len(self.codes)


@dataclass
class NeighborIndex:
    """Flat edge arrays for vectorized aggregation plus per-node degrees.

    ``concept_deg[h] = |N_h|`` and ``code_deg[c] = |N_c|`` (the latter counts
    filter triples, i.e. ``|F|`` times the number of mapped concepts).
    """

    num_concepts: int
    num_codes: int
    num_filters: int
    kg_heads: np.ndarray
    kg_rels: np.ndarray
    kg_tails: np.ndarray
    pair_codes: np.ndarray
    pair_concepts: np.ndarray
    concept_deg: np.ndarray
    code_deg: np.ndarray

    def n_h(self, h: int) -> list[tuple[int, int]]:
        sel = self.kg_heads == h
        return list(zip(self.kg_rels[sel].tolist(), self.kg_tails[sel].tolist()))

    def n_c(self, c: int) -> list[tuple[int, int]]:
        us = self.pair_concepts[self.pair_codes == c].tolist()
        return [(i, u) for u in us for i in range(self.num_filters)]


def build_filter_graph(code_map: CodeConceptMap, num_filters: int, kg: KnowledgeGraph,
                       num_codes: int) -> tuple[FilterGraph, NeighborIndex]:
    if num_filters < 1:
        raise ValueError(f"num_filters must be >= 1, got {num_filters}")
    n = len(code_map)
    fg = FilterGraph(
        num_filters,
        np.repeat(code_map.codes, num_filters),
        np.tile(np.arange(num_filters, dtype=np.int64), n),
        np.repeat(code_map.concepts, num_filters),
    )
    index = NeighborIndex(
        num_concepts=kg.num_concepts,
        num_codes=num_codes,
        num_filters=num_filters,
        kg_heads=kg.heads,
        kg_rels=kg.rels,
        kg_tails=kg.tails,
        pair_codes=code_map.codes,
        pair_concepts=code_map.concepts,
        concept_deg=np.bincount(kg.heads, minlength=kg.num_concepts),
        code_deg=np.bincount(code_map.codes, minlength=num_codes) * num_filters,
    )
    return fg, index
