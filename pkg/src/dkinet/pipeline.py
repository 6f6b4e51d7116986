"""File-level glue: load the four input files and build a model for them."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ehr import CodeVocab, PatientRecord, load_ehr
from .kg import (CodeConceptMap, KnowledgeGraph, NeighborIndex, build_filter_graph, load_code_map, load_triples,
                 num_code_rows)
from .metrics import load_ddi
from .model import DKINet, TrainConfig


@dataclass
class Inputs:
    patients: list[PatientRecord]
    vocab: CodeVocab
    kg: KnowledgeGraph | None
    index: NeighborIndex | None
    ddi: np.ndarray | None
    dropped: int = 0


def _require(path, label: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{label} file not found: {p}")
    return p


def load_inputs(ehr, triples=None, code_map=None, ddi=None, num_filters: int = 4,
                vocab: CodeVocab | None = None) -> Inputs:
    patients, vocab = load_ehr(_require(ehr, "EHR"), vocab)
    dropped = load_ehr.last_dropped
    kg = index = None
    if triples is not None:
        kg = load_triples(_require(triples, "triples"))
        if code_map is not None:
            cmap = load_code_map(_require(code_map, "code map"), vocab, kg)
        else:
            cmap = CodeConceptMap(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        _, index = build_filter_graph(cmap, num_filters, kg, num_code_rows(vocab))
    ddi_mat = load_ddi(_require(ddi, "DDI"), vocab) if ddi is not None else None
    return Inputs(patients, vocab, kg, index, ddi_mat, dropped)


def build_model(config: TrainConfig, inputs: Inputs) -> DKINet:
    if config.use_kg and inputs.kg is None:
        raise ValueError("knowledge-graph files are required unless the knowledge graph is disabled")
    n_rel = inputs.kg.num_relations if inputs.kg is not None else 0
    return DKINet(config, inputs.vocab, inputs.index if config.use_kg else None, n_rel)
