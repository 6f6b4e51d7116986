"""Synthetic EHR + knowledge-graph generator with knowledge-mediated labels.

Latent conditions tie a cluster of diagnoses (and procedures) to a cluster of
medications *through* shared graph concepts: every clustered code maps to one
of its condition's hub concepts. Visit labels are the union of the active
conditions' medication clusters, perturbed by label noise. Individual
diagnosis codes are kept rare, so recognizing a condition from unfamiliar
codes requires the concept mapping.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

FILES = {"ehr": "ehr.jsonl", "triples": "kg_triples.tsv", "code_map": "code_map.tsv", "ddi": "ddi.tsv"}


@dataclass
class SynthSpec:
    patients: int = 100
    diag: int = 1895
    proc: int = 1378
    med: int = 112
    concepts: int = 300
    relations: int = 6
    conditions: int = 8
    hubs_per_condition: int = 2
    avg_visits: float = 2.6
    diag_per_visit: int = 10
    proc_per_visit: int = 4
    condition_diag_per_visit: int = 4
    chronic_conditions: int = 1
    acute_prob: float = 0.5
    background_diag_frac: float = 0.2
    background_proc_frac: float = 0.5
    edges_per_concept: int = 2
    ddi_density: float = 0.05
    noise: float = 0.1

    def validate(self) -> None:
        if min(self.patients, self.diag, self.med, self.relations, self.conditions) < 1:
            raise ValueError("counts must be positive (procedures may be 0)")
        if self.concepts < 2 or self.edges_per_concept < 1:
            raise ValueError("need at least 2 concepts and 1 edge per concept")
        if self.conditions * self.hubs_per_condition > self.concepts:
            raise ValueError("not enough concepts for the condition hubs")
        if self.med < self.conditions:
            raise ValueError("need at least one medication per condition")
        if self.diag < self.conditions:
            raise ValueError("need at least one diagnosis per condition")
        if self.avg_visits < 2:
            raise ValueError("avg_visits must be >= 2 (single-visit patients are excluded)")
        if not 0.0 <= self.noise <= 1.0 or not 0.0 <= self.ddi_density <= 1.0:
            raise ValueError("noise and ddi_density must lie in [0, 1]")
        if not 0 <= self.chronic_conditions <= self.conditions:
            raise ValueError("chronic_conditions exceeds conditions")


@dataclass
class SynthData:
    records: list[dict]
    triples: list[tuple[str, str, str]]
    code_map: list[tuple[str, str, str]]
    ddi_pairs: list[tuple[str, str]]
    med_clusters: list[list[str]]
    diag_clusters: list[list[str]]
    hubs: list[list[str]]

    def write(self, out_dir, force: bool = False) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / v for k, v in FILES.items()}
        existing = [str(p) for p in paths.values() if p.exists()]
        if existing and not force:
            raise FileExistsError(f"refusing to overwrite {existing} (use force)")
        with open(paths["ehr"], "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        for key, rows in (("triples", self.triples), ("code_map", self.code_map), ("ddi", self.ddi_pairs)):
            with open(paths[key], "w", encoding="utf-8", newline="\n") as fh:
                fh.writelines("\t".join(r) + "\n" for r in rows)
        return paths


def _split_clusters(n: int, k: int, frac_background: float) -> tuple[list[list[int]], list[int]]:
    n_clustered = max(k, int(round(n * (1.0 - frac_background))))
    clusters = [list(range(i, n_clustered, k)) for i in range(k)]
    return clusters, list(range(n_clustered, n))


def generate_synthetic(spec: SynthSpec | None = None, seed: int = 0) -> SynthData:
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    K = spec.conditions
    cui = [f"C{i:07d}" for i in range(spec.concepts)]
    rel = [f"rel_{i}" for i in range(spec.relations)]
    dcode = [f"D{i:04d}" for i in range(spec.diag)]
    pcode = [f"P{i:04d}" for i in range(spec.proc)]
    mcode = [f"M{i:03d}" for i in range(spec.med)]

    hub_ids = rng.permutation(spec.concepts)[:K * spec.hubs_per_condition].reshape(K, spec.hubs_per_condition)
    background = np.setdiff1d(np.arange(spec.concepts), hub_ids.ravel())

    # knowledge graph: hubs of a condition link to each other under a condition-specific
    # relation, plus random background edges everywhere
    triples = []
    for k in range(K):
        r = rel[k % spec.relations]
        hs = hub_ids[k]
        for a in hs:
            for b in hs:
                if a != b:
                    triples.append((cui[a], r, cui[b]))
    for h in range(spec.concepts):
        for _ in range(spec.edges_per_concept):
            t = (h + 1 + int(rng.integers(spec.concepts - 1))) % spec.concepts
            triples.append((cui[h], rel[int(rng.integers(spec.relations))], cui[t]))

    d_clusters, d_bg = _split_clusters(spec.diag, K, spec.background_diag_frac)
    p_clusters, p_bg = _split_clusters(spec.proc, K, spec.background_proc_frac) if spec.proc else ([[]] * K, [])
    m_clusters, m_bg = _split_clusters(spec.med, K, 0.0)
    m_clusters = [c[:max(1, spec.med // K)] for c in m_clusters]

    code_map = []

    def map_cluster(ctype, names, clusters, bg):
        for k, members in enumerate(clusters):
            for c in members:
                code_map.append((ctype, names[c], cui[int(rng.choice(hub_ids[k]))]))
        for c in bg:
            if len(background):
                code_map.append((ctype, names[c], cui[int(rng.choice(background))]))

    map_cluster("diag", dcode, d_clusters, d_bg)
    map_cluster("proc", pcode, p_clusters, p_bg)
    clustered_meds = {m for c in m_clusters for m in c}
    map_cluster("med", mcode, m_clusters, [m for m in range(spec.med) if m not in clustered_meds])

    records = []
    for n in range(spec.patients):
        n_visits = 2 + int(rng.poisson(spec.avg_visits - 2.0))
        chronic = set(rng.choice(K, size=spec.chronic_conditions, replace=False).tolist())
        visits = []
        for _ in range(n_visits):
            active = set(chronic)
            if rng.random() < spec.acute_prob or not active:
                active.add(int(rng.integers(K)))
            diag, proc = set(), set()
            for k in sorted(active):
                take = min(spec.condition_diag_per_visit, len(d_clusters[k]))
                diag.update(rng.choice(d_clusters[k], size=take, replace=False).tolist())
                if spec.proc and p_clusters[k]:
                    proc.add(int(rng.choice(p_clusters[k])))
            pool = d_bg if d_bg else list(range(spec.diag))
            target = min(spec.diag_per_visit, len(diag | set(pool)))
            while len(diag) < target:
                diag.add(int(rng.choice(pool)))
            if spec.proc:
                ppool = p_bg if p_bg else list(range(spec.proc))
                target = min(spec.proc_per_visit, len(proc | set(ppool)))
                while len(proc) < target:
                    proc.add(int(rng.choice(ppool)))
            meds = set()
            for k in sorted(active):
                meds.update(m_clusters[k])
            if spec.noise > 0:
                kept = {m for m in sorted(meds) if rng.random() >= spec.noise}
                n_extra = int(rng.binomial(len(meds), spec.noise))
                extras = rng.choice(spec.med, size=n_extra, replace=False).tolist() if n_extra else []
                meds = kept | set(extras)
            visits.append({
                "diag": [dcode[i] for i in sorted(diag)],
                "proc": [pcode[i] for i in sorted(proc)],
                "med": [mcode[i] for i in sorted(meds)],
            })
        records.append({"id": f"patient{n:05d}", "visits": visits})

    ddi_pairs = []
    for a in range(spec.med):
        for b in range(a + 1, spec.med):
            if rng.random() < spec.ddi_density:
                ddi_pairs.append((mcode[a], mcode[b]))

    return SynthData(
        records=records,
        triples=triples,
        code_map=code_map,
        ddi_pairs=ddi_pairs,
        med_clusters=[[mcode[m] for m in c] for c in m_clusters],
        diag_clusters=[[dcode[d] for d in c] for c in d_clusters],
        hubs=[[cui[h] for h in hs] for hs in hub_ids],
    )


def summary(records: list[dict], n_concepts: int, n_relations: int) -> dict[str, float]:
    visits = [v for r in records for v in r["visits"]]
    n_multi = sum(1 for r in records if len(r["visits"]) >= 2)
    return {
        "# of patients": n_multi,
        "# of clinical visits": sum(len(r["visits"]) for r in records if len(r["visits"]) >= 2),
        "avg. # of visits": round(np.mean([len(r["visits"]) for r in records]), 2) if records else 0.0,
        "avg. # of diag. / vi.": round(np.mean([len(v["diag"]) for v in visits]), 2) if visits else 0.0,
        "avg. # of proc. / vi.": round(np.mean([len(v["proc"]) for v in visits]), 2) if visits else 0.0,
        "avg. # of med. / vi.": round(np.mean([len(v["med"]) for v in visits]), 2) if visits else 0.0,
        "# concept": n_concepts,
        "# relationship": n_relations,
    }


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
