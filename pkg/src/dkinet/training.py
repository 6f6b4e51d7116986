"""Training loop, evaluation, bootstrap protocol and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .ehr import CodeVocab, PatientRecord
from .encoder import club_fit_step
from .metrics import MetricsReport, VisitScores, aggregate, bootstrap_report, score_patient
from .model import DKINet, TrainConfig
from .params import AdamState, ParamStore, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainState:
    params: ParamStore
    adam: AdamState
    club_adam: AdamState
    epoch: int = 0
    best_params: ParamStore | None = None
    best_epoch: int = 0
    best_jaccard: float = -math.inf
    history: list[dict] = field(default_factory=list)


def new_state(model: DKINet) -> TrainState:
    cfg = model.config
    return TrainState(model.init_params(), AdamState(lr=cfg.lr), AdamState(lr=cfg.lr))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 1, int(epoch)]).permutation(n)


def train_step(model: DKINet, state: TrainState, batch) -> dict[str, float]:
    """One optimization step: CLUB fit on current activations, then the main update."""
    cfg = model.config
    params = state.params
    names = model.model_names(params)
    with T.GradientTape() as tape:
        p = tape.watch(params, names)
        fwd = model.forward(p, batch)
        if cfg.beta:
            for _ in range(cfg.club_inner_steps):
                try:
                    club_fit_step(fwd.v_o.data, fwd.v_k.data, params, state.club_adam, model.club_names())
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"non-finite CLUB update at epoch {state.epoch + 1}: {exc}") from None
        losses = model.losses(fwd, batch, params["club.w"], params["club.b"])
    values = {k: v.item() for k, v in losses.items()}
    if not all(math.isfinite(x) for x in values.values()):
        raise TrainingDiverged(f"non-finite loss at epoch {state.epoch + 1}: {values}")
    grads = T.backward(losses["total"], tape)
    adam_step(params, grads, state.adam)
    return values


def dataset_loss(model: DKINet, params: ParamStore, patients: list[PatientRecord]) -> dict[str, float]:
    """Mean per-batch losses over ``patients`` in file order, without updates."""
    cfg = model.config
    p = {k: Tensor(v, _check=False) for k, v in params.items()}
    tables = model.knowledge_tables(p)
    sums = {"total": 0.0, "bce": 0.0, "ekg": 0.0, "mi": 0.0}
    n = 0
    for i in range(0, len(patients), cfg.batch_size):
        batch = model.make_batch(patients[i:i + cfg.batch_size])
        fwd = model.forward(p, batch, tables)
        for k, v in model.losses(fwd, batch, p["club.w"], p["club.b"]).items():
            sums[k] += v.item()
        n += 1
    return {k: v / max(n, 1) for k, v in sums.items()}


def evaluate(model: DKINet, params: ParamStore, patients: list[PatientRecord],
             ddi: np.ndarray | None = None) -> list[VisitScores]:
    probs = model.predict(params, patients)
    eta = model.config.eta
    return [score_patient(pr, [set(v.med_ids) for v in p.visits], eta, ddi, model.num_meds)
            for pr, p in zip(probs, patients)]


def evaluate_metrics(model: DKINet, params: ParamStore, patients: list[PatientRecord],
                     ddi: np.ndarray | None = None) -> dict[str, float]:
    return aggregate(evaluate(model, params, patients, ddi), with_ddi=ddi is not None)


def bootstrap_evaluate(model: DKINet, params: ParamStore, patients: list[PatientRecord], rounds: int = 10,
                       seed: int = 0, resample: bool = True, ddi: np.ndarray | None = None) -> MetricsReport:
    scores = evaluate(model, params, patients, ddi)
    report = bootstrap_report(scores, rounds, seed, resample, with_ddi=ddi is not None)
    report.metadata["eta"] = model.config.eta
    report.metadata["ddi"] = "computed" if ddi is not None else "omitted (no DDI file)"
    return report


def train(model: DKINet, train_set: list[PatientRecord], val_set: list[PatientRecord],
          epochs: int | None = None, state: TrainState | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Run ``epochs`` more epochs, keeping the best-validation-Jaccard parameters.

    The log gets an epoch-0 entry (losses at initialization) on a fresh state.
    """
    cfg = model.config
    state = state or new_state(model)
    epochs = cfg.epochs if epochs is None else epochs
    if state.epoch == 0 and not state.history:
        entry = {"epoch": 0, **{f"loss_{k}": v for k, v in dataset_loss(model, state.params, train_set).items()}}
        state.history.append(entry)
        if on_epoch:
            on_epoch(entry)
    for _ in range(epochs):
        order = _epoch_order(cfg.seed, state.epoch + 1, len(train_set))
        shuffled = [train_set[i] for i in order]
        for i in range(0, len(shuffled), cfg.batch_size):
            train_step(model, state, model.make_batch(shuffled[i:i + cfg.batch_size]))
        state.epoch += 1
        entry = {"epoch": state.epoch,
                 **{f"loss_{k}": v for k, v in dataset_loss(model, state.params, train_set).items()}}
        if val_set:
            val = evaluate_metrics(model, state.params, val_set)
            entry.update({f"val_{k}": v for k, v in val.items()})
            if val["jaccard"] > state.best_jaccard:
                state.best_jaccard = val["jaccard"]
                state.best_epoch = state.epoch
                state.best_params = state.params.copy()
        state.history.append(entry)
        if on_epoch:
            on_epoch(entry)
    if state.best_params is None:
        state.best_params = state.params.copy()
        state.best_epoch = state.epoch
    return state


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model: DKINet, state: TrainState, params: ParamStore | None = None,
                    kg_meta: dict | None = None) -> Path:
    """Write ``params.dkp``, optimizer containers and ``meta.json`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (params or state.params).save(out / "params.dkp")
    state.adam.to_store().save(out / "adam.dkp")
    state.club_adam.to_store().save(out / "club_adam.dkp")
    if state.best_params is not None:
        state.best_params.save(out / "best_params.dkp")
    meta = {
        "format": "dkinet-checkpoint/1",
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_jaccard": state.best_jaccard if math.isfinite(state.best_jaccard) else None,
        "history": state.history,
        "kg": kg_meta or {},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: CodeVocab
    params: ParamStore
    state: TrainState
    kg: dict


def load_checkpoint(path) -> Checkpoint:
    src = Path(path)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint metadata at {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = TrainConfig.from_dict(meta["config"])
    params = ParamStore.load(src / "params.dkp")
    best = ParamStore.load(src / "best_params.dkp") if (src / "best_params.dkp").exists() else None
    state = TrainState(
        params=params.copy(),
        adam=AdamState.from_store(ParamStore.load(src / "adam.dkp")),
        club_adam=AdamState.from_store(ParamStore.load(src / "club_adam.dkp")),
        epoch=meta["epoch"],
        best_params=best,
        best_epoch=meta["best_epoch"],
        best_jaccard=meta["best_jaccard"] if meta["best_jaccard"] is not None else -math.inf,
        history=meta["history"],
    )
    return Checkpoint(config, CodeVocab.from_dict(meta["vocab"]), params, state, meta.get("kg", {}))
