"""Model assembly: parameter layout, batch indexing, forward pass and losses."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .aggregation import KnowledgeTables, build_knowledge_tables, independence_loss
from .decoder import history_attention_batch, predict_scores
from .ehr import CodeVocab, PatientRecord, history_med_input, multihot
from .encoder import club_mi_loss, embed_visit_ehr, fuse, knowledge_inject
from .kg import NeighborIndex, num_code_rows
from .params import ParamStore
from .tensor import Tensor


@dataclass
class TrainConfig:
    dim: int = 256
    num_filters: int = 4
    kg_layers: int = 1
    eta: float = 0.5
    lr: float = 1e-3
    batch_size: int = 4
    alpha: float = 1.0
    beta: float = 1.0
    mi_sign: int = 1
    epochs: int = 20
    seed: int = 0
    club_inner_steps: int = 1
    bce_clamp: float = 1e-7
    use_kg: bool = True
    init_scheme: str = "uniform"
    embed_scale: float = 1.0

    def __post_init__(self):
        for name in ("dim", "num_filters", "kg_layers", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.lr <= 0 or self.alpha < 0 or self.beta < 0 or self.club_inner_steps < 0:
            raise ValueError("lr must be positive; alpha, beta, club_inner_steps non-negative")
        if self.mi_sign not in (1, -1):
            raise ValueError("mi_sign must be +1 or -1")
        if self.embed_scale <= 0:
            raise ValueError("embed_scale must be positive")
        if not 0.0 < self.bce_clamp < 0.5:
            raise ValueError("bce_clamp must lie in (0, 0.5)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def ablated(self) -> "TrainConfig":
        """The knowledge-free arm: zero knowledge tables and no auxiliary losses."""
        d = self.to_dict()
        d.update(use_kg=False, alpha=0.0, beta=0.0)
        return TrainConfig(**d)


@dataclass
class Batch:
    num_visits: int
    rows: dict[str, np.ndarray]
    codes: dict[str, np.ndarray]
    labels: np.ndarray
    history_mask: np.ndarray
    visit_patient: np.ndarray
    visit_t: np.ndarray
    patient_rows: list[slice] = field(default_factory=list)


@dataclass
class Forward:
    probs: Tensor
    v_o: Tensor
    v_k: Tensor
    v: Tensor
    v_hat: Tensor
    history_weights: Tensor
    tables: KnowledgeTables | None


def bce_loss(probs: Tensor, labels: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Binary cross-entropy summed over every entry (visits x medications)."""
    y = T.clip(probs, clamp, 1.0 - clamp)
    m = Tensor(labels)
    return -T.reduce_sum(m * T.log(y) + (1.0 - m) * T.log(1.0 - y))


def total_loss(bce, l_ekg, l_mi, alpha: float, beta: float):
    return bce + alpha * l_ekg + beta * l_mi


def _param_seed(seed: int, name: str) -> list[int]:
    return [int(seed), zlib.crc32(name.encode("utf-8"))]


class DKINet:
    """Parameter layout and forward computation for one vocabulary/graph pair.

    ``index`` may be ``None`` when ``config.use_kg`` is false.
    """

    def __init__(self, config: TrainConfig, vocab: CodeVocab, index: NeighborIndex | None = None,
                 num_relations: int = 0):
        self.config = config
        self.vocab = vocab
        self.index = index
        self.num_relations = num_relations
        sizes = vocab.sizes
        self.sizes = sizes
        self.types = tuple(t for t in ("diag", "proc", "med") if t != "proc" or sizes["proc"] > 0)
        self.table_rows = {"diag": sizes["diag"], "proc": sizes["proc"], "med": sizes["med"] + 1}
        self.num_meds = sizes["med"]
        self.dim = config.dim
        self.width = len(self.types) * config.dim
        if config.use_kg:
            if index is None:
                raise ValueError("a neighbor index is required when use_kg is set")
            if num_relations < 1:
                raise ValueError("the knowledge graph needs at least one relation")
            if index.num_codes != num_code_rows(vocab):
                raise ValueError("neighbor index was built for a different vocabulary")
            if index.num_filters != config.num_filters:
                raise ValueError("neighbor index filter count differs from config.num_filters")

    # parameters ------------------------------------------------------------

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, dv, nm = self.dim, self.width, self.num_meds
        shapes = {}
        if self.config.use_kg:
            shapes["kg.concept"] = (self.index.num_concepts, d)
            shapes["kg.relation"] = (self.num_relations, d)
            shapes["kg.code"] = (self.index.num_codes, d)
            shapes["kg.filter_w"] = (self.config.num_filters, self.num_relations)
        for t in self.types:
            shapes[f"ehr.{t}"] = (self.table_rows[t], d)
            shapes[f"enc.w_inj.{t}"] = (2 * d, d)
        shapes.update({
            "enc.w_v": (2 * dv, dv), "enc.b_v": (dv,),
            "club.w": (dv, dv), "club.b": (dv,),
            "dec.w_q": (dv, d), "dec.w_k": (d, d), "dec.w_val": (d, dv),
            "out.w_y": (dv, nm), "out.b_y": (nm,),
        })
        return shapes

    EMBEDDING_TABLES = ("kg.concept", "kg.relation", "kg.code", "ehr.diag", "ehr.proc", "ehr.med")

    def init_params(self, seed: int | None = None) -> ParamStore:
        """Seeded init: biases zero, lookup tables at ``embed_scale``, matrices at 1/sqrt(dim)."""
        seed = self.config.seed if seed is None else seed
        store = ParamStore()
        for name, shape in sorted(self.param_shapes().items()):
            if len(shape) == 1:
                store[name] = np.zeros(shape)
                continue
            if name in self.EMBEDDING_TABLES:
                scale = self.config.embed_scale
            else:
                scale = 1.0 / np.sqrt(self.dim)
            store[name] = T.seeded_init(shape, _param_seed(seed, name), self.config.init_scheme, scale).data
        return store

    @staticmethod
    def club_names() -> tuple[str, str]:
        return ("club.w", "club.b")

    def model_names(self, store: ParamStore) -> list[str]:
        return [n for n in store if not n.startswith("club.")]

    # batching --------------------------------------------------------------

    def make_batch(self, patients: list[PatientRecord]) -> Batch:
        rows = {t: [] for t in self.types}
        codes = {t: [] for t in self.types}
        labels, vis_patient, vis_t, slices = [], [], [], []
        r = 0
        for pi, p in enumerate(patients):
            start = r
            for t, visit in enumerate(p.visits, 1):
                inputs = {"diag": visit.diag_ids, "proc": visit.proc_ids,
                          "med": history_med_input(p, t, self.vocab.pad_id)}
                for ty in self.types:
                    ids = inputs[ty]
                    if ids and max(ids) >= self.table_rows[ty]:
                        raise IndexError(f"{ty} id {max(ids)} out of range for patient {p.patient_id!r}")
                    rows[ty].extend([r] * len(ids))
                    codes[ty].extend(ids)
                labels.append(multihot(visit.med_ids, self.num_meds))
                vis_patient.append(pi)
                vis_t.append(t)
                r += 1
            slices.append(slice(start, r))
        vp, vt = np.array(vis_patient, dtype=np.int64), np.array(vis_t, dtype=np.int64)
        # history row j holds the med-input summary of visit t_j, i.e. meds of visit t_j - 1;
        # visit r may read it when 2 <= t_j <= t_r
        mask = (vp[:, None] == vp[None, :]) & (vt[None, :] >= 2) & (vt[None, :] <= vt[:, None])
        return Batch(
            num_visits=r,
            rows={t: np.array(v, dtype=np.int64) for t, v in rows.items()},
            codes={t: np.array(v, dtype=np.int64) for t, v in codes.items()},
            labels=np.array(labels).reshape(r, self.num_meds),
            history_mask=mask,
            visit_patient=vp,
            visit_t=vt,
            patient_rows=slices,
        )

    # forward ---------------------------------------------------------------

    def knowledge_tables(self, p: dict[str, Tensor]) -> KnowledgeTables | None:
        if not self.config.use_kg:
            return None
        return build_knowledge_tables(p["kg.concept"], p["kg.relation"], p["kg.code"], p["kg.filter_w"],
                                      self.index, self.config.kg_layers, self.sizes)

    def forward(self, p: dict[str, Tensor], batch: Batch, tables: KnowledgeTables | None = None) -> Forward:
        if tables is None:
            tables = self.knowledge_tables(p)
        V = batch.num_visits
        vo_parts, vk_parts = [], []
        for ty in self.types:
            e, vo = embed_visit_ehr(p[f"ehr.{ty}"], batch.rows[ty], batch.codes[ty], V)
            if tables is not None:
                ek = tables.by_type(ty)
            else:
                ek = Tensor(np.zeros((self.table_rows[ty], self.dim)))
            vk = knowledge_inject(e, ek, p[f"enc.w_inj.{ty}"], batch.rows[ty], batch.codes[ty], V)
            vo_parts.append(vo)
            vk_parts.append(vk)
        v_o, v_k = T.concat(vo_parts, axis=1), T.concat(vk_parts, axis=1)
        v = fuse(v_k, v_o, p["enc.w_v"], p["enc.b_v"])
        v_hat, weights = history_attention_batch(v, vk_parts[-1], batch.history_mask,
                                                 p["dec.w_q"], p["dec.w_k"], p["dec.w_val"])
        probs = predict_scores(v_hat, p["out.w_y"], p["out.b_y"])
        return Forward(probs, v_o, v_k, v, v_hat, weights, tables)

    def losses(self, fwd: Forward, batch: Batch, club_w, club_b) -> dict[str, Tensor]:
        cfg = self.config
        bce = bce_loss(fwd.probs, batch.labels, cfg.bce_clamp)
        l_ekg = independence_loss(fwd.tables.filter_embs) if fwd.tables is not None and cfg.alpha else Tensor(0.0)
        l_mi = club_mi_loss(fwd.v_o, fwd.v_k, club_w, club_b) if cfg.beta else Tensor(0.0)
        total = total_loss(bce, l_ekg, l_mi, cfg.alpha, cfg.beta * cfg.mi_sign)
        return {"total": total, "bce": bce, "ekg": l_ekg, "mi": l_mi}

    def predict(self, params: ParamStore, patients: list[PatientRecord], batch_size: int = 64) -> list[np.ndarray]:
        """Per-patient ``T_n x |M|`` score matrices (no tape)."""
        p = {k: Tensor(v, _check=False) for k, v in params.items()}
        tables = self.knowledge_tables(p)
        out = []
        for i in range(0, len(patients), batch_size):
            chunk = patients[i:i + batch_size]
            batch = self.make_batch(chunk)
            probs = self.forward(p, batch, tables).probs.data
            out.extend(probs[s].copy() for s in batch.patient_rows)
        return out
