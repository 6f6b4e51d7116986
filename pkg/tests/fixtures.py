"""Small synthetic setups shared by the model-level tests."""

import tempfile

import numpy as np
from dataclasses import dataclass

from dkinet.aggregation import build_knowledge_tables
from dkinet.ehr import PatientRecord, split
from dkinet.model import DKINet, TrainConfig
from dkinet.pipeline import Inputs, build_model, load_inputs
from dkinet.kg import CodeConceptMap, KnowledgeGraph, build_filter_graph
from dkinet.synth import SynthSpec, generate_synthetic
from dkinet.tensor import Tensor

from oracles import loop_knowledge_tables


@dataclass
class Setup:
    inputs: Inputs
    model: DKINet
    paths: dict

    @property
    def patients(self) -> list[PatientRecord]:
        return self.inputs.patients


TINY_SPEC = dict(patients=5, diag=30, proc=10, med=8, concepts=25, relations=3, conditions=2)


def make_setup(spec_kw=None, seed=0, out_dir=None, **cfg_kw) -> Setup:
    spec = SynthSpec(**(spec_kw if spec_kw is not None else TINY_SPEC))
    out_dir = out_dir or tempfile.mkdtemp(prefix="dkinet-")
    paths = generate_synthetic(spec, seed=seed).write(out_dir, force=True)
    cfg = TrainConfig(**{"seed": seed, **cfg_kw})
    inputs = load_inputs(paths["ehr"], paths["triples"], paths["code_map"], paths["ddi"], cfg.num_filters)
    return Setup(inputs, build_model(cfg, inputs), paths)


def split_of(setup: Setup):
    return split(setup.patients, setup.model.config.seed)


def make_index(n_u, n_r, n_c, triples, pairs, n_f):
    arr = np.array(triples, dtype=np.int64).reshape(-1, 3)
    kg = KnowledgeGraph([f"C{i}" for i in range(n_u)], [f"r{i}" for i in range(n_r)],
                        arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())
    parr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    cmap = CodeConceptMap(parr[:, 0].copy(), parr[:, 1].copy())
    return build_filter_graph(cmap, n_f, kg, n_c)[1]


def knowledge_case(n_u, n_r, n_c, triples, pairs, n_f, layers, seed, dim=4):
    """Vectorized knowledge tables next to the loop oracle's, on the same random weights."""
    rng = np.random.default_rng(seed)
    concepts, rel, codes = rng.normal(size=(n_u, dim)), rng.normal(size=(n_r, dim)), rng.normal(size=(n_c, dim))
    w = rng.normal(size=(n_f, n_r))
    idx = make_index(n_u, n_r, n_c, triples, pairs, n_f)
    kt = build_knowledge_tables(Tensor(concepts), Tensor(rel), Tensor(codes), Tensor(w), idx, layers,
                                {"diag": n_c, "proc": 0, "med": 0})
    ref = loop_knowledge_tables(concepts, rel, codes, w, triples, pairs, n_f, layers)
    return kt, ref, codes
