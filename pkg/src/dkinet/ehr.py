"""Longitudinal EHR records: loading, vocabularies, splitting, multi-hot encoding.

The on-disk format is JSON lines, one patient per line::

    {"id": "p1", "visits": [{"diag": ["401.9"], "proc": [], "med": ["B01A"]}, ...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

CODE_TYPES = ("diag", "proc", "med")
_VISIT_KEYS = set(CODE_TYPES)
_PATIENT_KEYS = {"id", "visits"}


class EHRFormatError(ValueError):
    pass


@dataclass
class CodeVocab:
    """Dense integer ids per code type. The PAD medication id is ``len(med)``."""

    diag: list[str] = field(default_factory=list)
    proc: list[str] = field(default_factory=list)
    med: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = {t: {c: i for i, c in enumerate(getattr(self, t))} for t in CODE_TYPES}

    @property
    def sizes(self) -> dict[str, int]:
        return {t: len(getattr(self, t)) for t in CODE_TYPES}

    @property
    def pad_id(self) -> int:
        return len(self.med)

    def id_of(self, code_type: str, code: str) -> int:
        return self._index[code_type][code]

    def get(self, code_type: str, code: str) -> int | None:
        return self._index[code_type].get(code)

    def add(self, code_type: str, code: str) -> int:
        idx = self._index[code_type]
        if code not in idx:
            idx[code] = len(idx)
            getattr(self, code_type).append(code)
        return idx[code]

    def to_dict(self) -> dict:
        return {t: list(getattr(self, t)) for t in CODE_TYPES}

    @classmethod
    def from_dict(cls, d: dict) -> "CodeVocab":
        return cls(**{t: list(d[t]) for t in CODE_TYPES})


@dataclass(frozen=True)
class Visit:
    diag_ids: tuple[int, ...]
    proc_ids: tuple[int, ...]
    med_ids: tuple[int, ...]

    @classmethod
    def from_ids(cls, diag: Iterable[int], proc: Iterable[int], med: Iterable[int]) -> "Visit":
        def canon(ids):
            return tuple(sorted({int(i) for i in ids}))
        return cls(canon(diag), canon(proc), canon(med))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if len(self.visits) < 2:
            raise ValueError(f"patient {self.patient_id!r} has {len(self.visits)} visit(s); at least 2 required")

    def __len__(self) -> int:
        return len(self.visits)


@dataclass
class DatasetSplit:
    train: list[PatientRecord]
    val: list[PatientRecord]
    test: list[PatientRecord]


def _parse_line(line: str, lineno: int) -> tuple[str, list[dict]]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise EHRFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise EHRFormatError(f"line {lineno}: expected an object")
    extra = set(obj) - _PATIENT_KEYS
    if extra:
        raise EHRFormatError(f"line {lineno}: unknown field(s) {sorted(extra)}")
    if "id" not in obj or not isinstance(obj.get("visits"), list):
        raise EHRFormatError(f"line {lineno}: need 'id' and a 'visits' array")
    for v in obj["visits"]:
        if not isinstance(v, dict):
            raise EHRFormatError(f"line {lineno}: visit is not an object")
        extra = set(v) - _VISIT_KEYS
        if extra:
            raise EHRFormatError(f"line {lineno}: unknown visit field(s) {sorted(extra)}")
        for t in CODE_TYPES:
            codes = v.get(t, [])
            if not isinstance(codes, list) or not all(isinstance(c, str) for c in codes):
                raise EHRFormatError(f"line {lineno}: visit field {t!r} must be an array of strings")
    return str(obj["id"]), obj["visits"]


def load_ehr(path, vocab: CodeVocab | None = None) -> tuple[list[PatientRecord], CodeVocab]:
    """Read a JSON-lines EHR file.

    Codes are interned in first-seen order unless a fixed ``vocab`` is given, in
    which case an unknown code raises :class:`EHRFormatError`. Patients with a
    single visit are dropped (count logged and stored on ``load_ehr.last_dropped``).
    """
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                raw.append(_parse_line(line, lineno) + (lineno,))

    frozen = vocab is not None
    vocab = vocab if frozen else CodeVocab()
    patients, dropped = [], 0
    for pid, visits, lineno in raw:
        if len(visits) < 2:
            dropped += 1
            continue
        parsed = []
        for v in visits:
            ids = {}
            for t in CODE_TYPES:
                if frozen:
                    missing = [c for c in v.get(t, []) if vocab.get(t, c) is None]
                    if missing:
                        raise EHRFormatError(f"line {lineno}: {t} code(s) {missing} not in vocabulary")
                    ids[t] = [vocab.id_of(t, c) for c in v.get(t, [])]
                else:
                    ids[t] = [vocab.add(t, c) for c in v.get(t, [])]
            parsed.append(Visit.from_ids(ids["diag"], ids["proc"], ids["med"]))
        patients.append(PatientRecord(pid, tuple(parsed)))
    if dropped:
        log.info("dropped %d single-visit patient(s) from %s", dropped, path)
    load_ehr.last_dropped = dropped
    return patients, vocab


load_ehr.last_dropped = 0


def dump_ehr(patients: Iterable[PatientRecord], vocab: CodeVocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in patients:
            visits = [
                {"diag": [vocab.diag[i] for i in v.diag_ids],
                 "proc": [vocab.proc[i] for i in v.proc_ids],
                 "med": [vocab.med[i] for i in v.med_ids]}
                for v in p.visits
            ]
            fh.write(json.dumps({"id": p.patient_id, "visits": visits}) + "\n")


def split(patients: list[PatientRecord], seed: int) -> DatasetSplit:
    """Shuffle patients by ``seed`` and partition them 4:1:1 into train/val/test."""
    n = len(patients)
    if n < 6:
        raise ValueError(f"need at least 6 patients to split 4:1:1, got {n}")
    # sort by id first so the partition depends only on (ids, seed), not file order
    ordered = sorted(patients, key=lambda p: p.patient_id)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = n_test = round(n / 6)
    n_train = n - n_val - n_test
    shuffled = [ordered[i] for i in perm]
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])


def multihot(ids: Iterable[int], size: int) -> np.ndarray:
    out = np.zeros(size)
    for i in ids:
        if not 0 <= i < size:
            raise IndexError(f"id {i} outside [0, {size})")
        out[i] = 1.0
    return out


def history_med_input(patient: PatientRecord, t: int, pad_id: int) -> tuple[int, ...]:
    """Medication input for visit ``t`` (1-based): the previous visit's meds, or PAD at t=1."""
    if not 1 <= t <= len(patient.visits):
        raise IndexError(f"visit index {t} outside [1, {len(patient.visits)}]")
    if t == 1:
        return (pad_id,)
    return patient.visits[t - 2].med_ids
