"""Knowledge-injected medication recommendation on longitudinal EHR data."""

from .ehr import CodeVocab, PatientRecord, Visit, load_ehr, split
from .kg import build_filter_graph, load_code_map, load_triples
from .model import DKINet, TrainConfig
from .params import AdamState, ParamStore, adam_step
from .synth import SynthSpec, generate_synthetic
from .tensor import GradientTape, Tensor, backward
from .training import bootstrap_evaluate, evaluate_metrics, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "CodeVocab", "DKINet", "GradientTape", "ParamStore", "PatientRecord", "SynthSpec", "Tensor",
    "TrainConfig", "Visit", "adam_step", "backward", "bootstrap_evaluate", "build_filter_graph", "evaluate_metrics",
    "generate_synthetic", "load_code_map", "load_ehr", "load_triples", "split", "train",
]
