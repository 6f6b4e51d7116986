"""The ten acceptance criteria, each at its stated tolerance.

Each test records one PASS/FAIL line (see ``acceptance_log``), shown in the
terminal summary of every pytest run that includes this module.
"""

import json
import math
import time

import numpy as np
import pytest

from dkinet.aggregation import distance_correlation
from dkinet.cli import main as cli
from dkinet.ehr import PatientRecord, Visit, split
from dkinet.encoder import club_mi_loss, club_nll
from dkinet.gradcheck import check_gradients
from dkinet.metrics import aggregate, ddi_rate, f1_visit, jaccard_visit, prauc_visit
from dkinet.params import ParamStore
from dkinet.pipeline import build_model
from dkinet.tensor import GradientTape, Tensor, backward
from dkinet.training import bootstrap_evaluate, evaluate, evaluate_metrics, load_checkpoint, train

from acceptance_log import criterion
from fixtures import TINY_SPEC, knowledge_case, make_setup
from oracles import brute_ap, brute_dcor, brute_f1, brute_jaccard, random_graph
from test_encoder import independent_pair_estimates


def test_gradient_suite():
    with criterion(1, "gradient suite") as note:
        start = time.perf_counter()
        s = make_setup(TINY_SPEC, dim=8)
        m = s.model
        params = m.init_params()
        batch = m.make_batch(s.patients)
        assert len(s.patients) == 5
        worst = 0.0
        for term in ("bce", "ekg", "mi", "total"):
            def loss(p, term=term):
                return m.losses(m.forward(p, batch), batch, p["club.w"], p["club.b"])[term]
            checks = check_gradients(loss, params, n_coords=20, seed=1)
            assert len(checks) == 20
            worst = max(worst, max(c.rel_error for c in checks))
        note["max_rel_error"] = worst
        note["seconds"] = time.perf_counter() - start
        assert worst <= 1e-4
        assert note["seconds"] < 30


def test_aggregation_oracle():
    with criterion(2, "aggregation oracle") as note:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for g in range(50):
            graph = random_graph(rng)
            assert graph[0] <= 20 and graph[1] <= 5 and graph[2] <= 10
            for n_f in (1, 2, 4):
                for layers in (1, 2):
                    kt, (codes_ref, concepts_ref, f_ref), _ = knowledge_case(*graph, n_f, layers, seed=g)
                    worst = max(worst, np.max(np.abs(kt.codes.data - codes_ref)),
                                np.max(np.abs(kt.filter_embs.data - f_ref)))
        note["graphs"] = 50
        note["max_abs_diff"] = float(worst)
        assert worst <= 1e-10


def test_dcor_properties():
    with criterion(3, "dCor properties") as note:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 20))
            x = rng.normal(size=n) * rng.uniform(0.1, 5)
            y = rng.choice([x ** 2, rng.normal(size=n), -3 * x + 1]) + rng.normal(size=n) * rng.uniform(0, 1)
            got = distance_correlation(Tensor(x), Tensor(y)).item()
            assert 0.0 <= got <= 1.0
            worst = max(worst, abs(got - brute_dcor(x, y)))
            if np.ptp(x) > 0:
                assert distance_correlation(Tensor(x), Tensor(x)).item() == pytest.approx(1.0, abs=1e-12)
            assert distance_correlation(Tensor(x), Tensor(np.full(n, 1.7))).item() == 0.0
        note["max_abs_diff"] = float(worst)
        assert worst <= 1e-10


def test_club_checks():
    with criterion(4, "CLUB checks") as note:
        v = Tensor([[0.0], [2.0]])
        fixture = club_mi_loss(v, v, np.eye(1), np.zeros(1)).item()
        note["fixture"] = fixture
        assert fixture == 1.0

        rng = np.random.default_rng(5)
        store = ParamStore({"vo": rng.normal(size=(4, 3)), "vk": rng.normal(size=(4, 3)),
                            "club.w": rng.normal(size=(3, 3)), "club.b": rng.normal(size=3)})
        with GradientTape() as tape:
            p = tape.watch(store)
            loss = club_mi_loss(p["vo"], p["vk"], p["club.w"], p["club.b"])
        grads = backward(loss, tape)
        assert not np.any(grads["club.w"]) and not np.any(grads["club.b"])
        with GradientTape() as tape:
            p = tape.watch(store)
            nll = club_nll(p["vo"].data, p["vk"].data, p["club.w"], p["club.b"])
        grads = backward(nll, tape)
        assert not np.any(grads["vo"]) and not np.any(grads["vk"])

        est = independent_pair_estimates(batches=50, s=64, dim=8)
        note["independent_mean"] = float(np.mean(est))
        assert abs(np.mean(est)) <= 0.1


def test_metric_oracles():
    with criterion(5, "metric oracles") as note:
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(1, 15))
            true = set(rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False).tolist())
            pred = set(rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False).tolist())
            scores = rng.integers(0, 5, size=n) / 4.0
            assert jaccard_visit(true, pred) == brute_jaccard(sorted(true), pred)
            assert f1_visit(true, pred) == brute_f1(sorted(true), pred)
            labels = [int(i in true) for i in range(n)]
            got, ref = prauc_visit(scores, labels), brute_ap(list(scores), labels)
            if math.isnan(ref):
                assert math.isnan(got)
            else:
                worst = max(worst, abs(got - ref))
        ddi = np.zeros((3, 3), bool)
        ddi[0, 1] = ddi[1, 0] = True
        note["prauc_max_diff"] = float(worst)
        note["ddi_fixture"] = ddi_rate([{0, 1, 2}], ddi)
        assert worst <= 1e-10
        assert note["ddi_fixture"] == 1 / 3


def test_causality():
    with criterion(6, "causality") as note:
        s = make_setup(TINY_SPEC, dim=8)
        m = s.model
        params = m.init_params()
        sizes = [s.inputs.vocab.sizes[t] for t in ("diag", "proc", "med")]
        rng = np.random.default_rng(6)
        checked = 0
        for rec in s.patients:
            base = m.predict(params, [rec])[0]
            for t in range(1, len(rec.visits) + 1):
                for _ in range(3):
                    visits = list(rec.visits)
                    v = visits[t - 1]
                    visits[t - 1] = Visit.from_ids(v.diag_ids, v.proc_ids,
                                                   rng.choice(sizes[2], size=3, replace=False))
                    for i in range(t, len(visits)):
                        visits[i] = Visit.from_ids(*(rng.choice(n, size=int(rng.integers(1, 4)), replace=False)
                                                     for n in sizes))
                    other = m.predict(params, [PatientRecord(rec.patient_id, tuple(visits))])[0]
                    assert np.array_equal(other[:t], base[:t])
                    checked += 1
        note["perturbations"] = checked


def test_overfit_capacity():
    with criterion(7, "overfit capacity") as note:
        start = time.perf_counter()
        s = make_setup(dict(patients=4), dim=32, epochs=300)
        assert len(s.patients) == 4
        state = train(s.model, s.patients, [])
        note["train_jaccard"] = evaluate_metrics(s.model, state.params, s.patients)["jaccard"]
        note["seconds"] = time.perf_counter() - start
        assert note["train_jaccard"] >= 0.95
        assert note["seconds"] < 300


ABLATION = dict(dim=32, epochs=30)


def test_ablation_ordering():
    with criterion(8, "ablation ordering") as note:
        start = time.perf_counter()
        full, nokg = [], []
        for seed in range(5):
            s = make_setup({}, seed=seed, **ABLATION)  # the default synthetic set
            parts = split(s.patients, seed)
            for scores, model in ((full, s.model), (nokg, build_model(s.model.config.ablated(), s.inputs))):
                state = train(model, parts.train, parts.val)
                scores.append(evaluate_metrics(model, state.best_params, parts.test)["jaccard"])
        note["full_median"] = float(np.median(full))
        note["nokg_median"] = float(np.median(nokg))
        note["seconds"] = time.perf_counter() - start
        assert note["full_median"] > note["nokg_median"]
        assert note["seconds"] < 20 * 60


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_determinism(tmp_path):
    with criterion(9, "determinism") as note:
        data = tmp_path / "data"
        assert cli(["synth", "--out", str(data), "--patients", "20"]) == 0
        inputs = ["--ehr", data / "ehr.jsonl", "--triples", data / "kg_triples.tsv",
                  "--code-map", data / "code_map.tsv", "--ddi", data / "ddi.tsv"]
        for run in ("a", "b"):
            out = tmp_path / run
            assert cli([str(a) for a in ("train", *inputs, "--dim", 16, "--epochs", 3, "--out", out)]) == 0
            assert cli(["eval", "--checkpoint", str(out), "--split", "all"]) == 0
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        note["files"] = len(a)
        assert "report_all.json" in a and "params.dkp" in a
        assert a == b


def test_bootstrap_protocol(tmp_path):
    with criterion(10, "bootstrap protocol") as note:
        s = make_setup(dict(TINY_SPEC, patients=12), dim=8, epochs=2)
        state = train(s.model, s.patients, [])
        report = bootstrap_evaluate(s.model, state.params, s.patients, rounds=10, ddi=s.inputs.ddi)
        summary = report.to_dict()["metrics"]
        assert set(summary) == {"jaccard", "f1", "prauc", "ddi"}
        for v in summary.values():
            assert len(v["rounds"]) == 10 and math.isfinite(v["mean"]) and math.isfinite(v["std"])
        plain = aggregate(evaluate(s.model, state.params, s.patients, s.inputs.ddi))
        single = bootstrap_evaluate(s.model, state.params, s.patients, rounds=1, resample=False, ddi=s.inputs.ddi)
        for metric, value in plain.items():
            assert single.mean(metric) == value and single.std(metric) == 0.0
        note["metrics"] = len(summary)

        # the same through the command line
        ck = tmp_path / "run"
        assert cli([str(a) for a in ("train", "--ehr", s.paths["ehr"], "--triples", s.paths["triples"],
                                     "--code-map", s.paths["code_map"], "--ddi", s.paths["ddi"],
                                     "--dim", 8, "--epochs", 2, "--out", ck)]) == 0
        assert cli(["eval", "--checkpoint", str(ck), "--split", "all", "--rounds", "1", "--no-resample",
                    "--params", "final", "--out", str(tmp_path / "r.json")]) == 0
        ckpt = load_checkpoint(ck)
        cli_model = build_model(ckpt.config, s.inputs)
        plain = aggregate(evaluate(cli_model, ckpt.params, s.patients, s.inputs.ddi))
        stored = json.loads((tmp_path / "r.json").read_text())["metrics"]
        for metric, value in plain.items():
            assert stored[metric]["mean"] == value
