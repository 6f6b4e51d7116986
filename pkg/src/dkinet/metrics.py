"""Set and ranking metrics for multi-label medication prediction, plus DDI rate."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
import numpy as np

from .ehr import CodeVocab

METRICS = ("jaccard", "f1", "prauc", "ddi")


def jaccard_visit(true: set, pred: set) -> float:
    union = true | pred
    return len(true & pred) / len(union) if union else 0.0


def f1_visit(true: set, pred: set) -> float:
    denom = len(true) + len(pred)
    return 2.0 * len(true & pred) / denom if denom else 0.0


def prauc_visit(scores, labels) -> float:
    """Average precision of ``scores`` against a 0/1 ``labels`` vector.

    Labels are ranked by descending score, ties by ascending id. Returns NaN
    when there are no positives (the caller skips such visits).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    precision_at_k = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at_k[hits].sum() / n_pos)


def load_ddi(path, vocab: CodeVocab) -> np.ndarray:
    """Read ``med_code \\t med_code`` lines into a symmetric boolean matrix.

    Pairs naming a medication outside ``vocab`` are ignored.
    """
    n = len(vocab.med)
    mat = np.zeros((n, n), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = [p.strip() for p in line.rstrip("\n").split("\t")]
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated medication codes")
            a, b = vocab.get("med", parts[0]), vocab.get("med", parts[1])
            if a is None or b is None or a == b:
                continue
            mat[a, b] = mat[b, a] = True
    return mat


def ddi_pair_counts(pred: set, ddi: np.ndarray) -> tuple[int, int]:
    """(adverse pairs, all unordered pairs) among one visit's predicted medications."""
    ids = sorted(pred)
    k = len(ids)
    if k < 2:
        return 0, 0
    sub = ddi[np.ix_(ids, ids)]
    return int(np.triu(sub, 1).sum()), k * (k - 1) // 2


def ddi_rate(predicted: list[set], ddi: np.ndarray) -> float:
    adverse = total = 0
    for pred in predicted:
        a, n = ddi_pair_counts(pred, ddi)
        adverse += a
        total += n
    return adverse / total if total else 0.0


@dataclass
class VisitScores:
    """Per-visit metric values for one patient.

    ``jaccard``/``f1``/``prauc`` hold one entry per visit with a nonempty
    ground truth (``prauc`` is NaN-free). ``ddi_adverse``/``ddi_pairs`` count
    every visit.
    """

    jaccard: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    prauc: list[float] = field(default_factory=list)
    ddi_adverse: int = 0
    ddi_pairs: int = 0


def score_patient(probs: np.ndarray, true_sets: list[set], eta: float, ddi: np.ndarray | None,
                  num_meds: int) -> VisitScores:
    out = VisitScores()
    for row, true in zip(probs, true_sets):
        pred = set(np.flatnonzero(row >= eta).tolist())
        if ddi is not None:
            a, n = ddi_pair_counts(pred, ddi)
            out.ddi_adverse += a
            out.ddi_pairs += n
        if not true:
            continue
        out.jaccard.append(jaccard_visit(true, pred))
        out.f1.append(f1_visit(true, pred))
        labels = np.zeros(num_meds)
        labels[list(true)] = 1.0
        out.prauc.append(prauc_visit(row, labels))
    return out


def aggregate(scores: list[VisitScores], with_ddi: bool = True) -> dict[str, float]:
    vals = {}
    for m in ("jaccard", "f1", "prauc"):
        pooled = [x for s in scores for x in getattr(s, m)]
        vals[m] = float(np.mean(pooled)) if pooled else 0.0
    if with_ddi:
        adverse = sum(s.ddi_adverse for s in scores)
        pairs = sum(s.ddi_pairs for s in scores)
        vals["ddi"] = adverse / pairs if pairs else 0.0
    return vals


@dataclass
class MetricsReport:
    rounds: dict[str, list[float]]
    metadata: dict = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.rounds[metric]))

    def std(self, metric: str) -> float:
        return float(np.std(self.rounds[metric]))

    def to_dict(self) -> dict:
        return {
            "metrics": {m: {"mean": self.mean(m), "std": self.std(m), "rounds": list(self.rounds[m])}
                        for m in self.rounds},
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'metric':<8} {'mean':>8} {'std':>8}"]
        for m in METRICS:
            if m in self.rounds:
                lines.append(f"{m:<8} {self.mean(m):>8.4f} {self.std(m):>8.4f}")
        return "\n".join(lines)


def bootstrap_report(scores: list[VisitScores], rounds: int = 10, seed: int = 0, resample: bool = True,
                     with_ddi: bool = True) -> MetricsReport:
    """Resample patients with replacement ``rounds`` times and pool visit metrics per round."""
    if not scores:
        raise ValueError("bootstrap needs a nonempty test set")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(scores)
    per_round: dict[str, list[float]] = {m: [] for m in METRICS if m != "ddi" or with_ddi}
    for _ in range(rounds):
        idx = rng.integers(0, n, size=n) if resample else np.arange(n)
        vals = aggregate([scores[i] for i in idx], with_ddi)
        for m in per_round:
            per_round[m].append(vals[m])
    meta = {"rounds": rounds, "resample": resample, "seed": seed, "patients": n,
            "averaging": "per-visit, pooled over sampled patients"}
    return MetricsReport(per_round, meta)
