import numpy as np
import pytest

from dkinet.ehr import split
from dkinet.metrics import aggregate
from dkinet.training import (TrainingDiverged, bootstrap_evaluate, evaluate, load_checkpoint, new_state,
                             save_checkpoint, train, train_step)

from fixtures import make_setup

SMALL_SPEC = dict(patients=12, diag=40, proc=12, med=10, concepts=30, relations=3, conditions=3)


@pytest.fixture(scope="module")
def small():
    return make_setup(SMALL_SPEC, dim=8, epochs=3)


def _losses(state):
    return [e["loss_total"] for e in state.history]


def test_fixed_seed_gives_identical_loss_sequence(small):
    parts = split(small.patients, 0)
    a = train(small.model, parts.train, parts.val)
    b = train(small.model, parts.train, parts.val)
    assert _losses(a) == _losses(b)
    assert a.params.to_bytes() == b.params.to_bytes()
    assert [e["epoch"] for e in a.history] == [0, 1, 2, 3]


def test_one_epoch_reduces_training_loss():
    s = make_setup(dict(SMALL_SPEC, patients=6), dim=8, epochs=1)
    parts = split(s.patients, 0)
    state = train(s.model, parts.train, parts.val)
    assert state.history[1]["loss_total"] < state.history[0]["loss_total"]


def test_resume_matches_uninterrupted_run(small, tmp_path):
    parts = split(small.patients, 0)
    full = train(small.model, parts.train, parts.val, epochs=4)
    half = train(small.model, parts.train, parts.val, epochs=2)
    save_checkpoint(tmp_path / "ck", small.model, half)
    ck = load_checkpoint(tmp_path / "ck")
    resumed = train(small.model, parts.train, parts.val, epochs=2, state=ck.state)
    assert _losses(resumed) == _losses(full)
    assert resumed.params.to_bytes() == full.params.to_bytes()
    assert resumed.best_params.to_bytes() == full.best_params.to_bytes()


def test_checkpoint_roundtrip_is_byte_stable(small, tmp_path):
    parts = split(small.patients, 0)
    state = train(small.model, parts.train, parts.val, epochs=1)
    save_checkpoint(tmp_path / "a", small.model, state, kg_meta={"ehr": "x"})
    ck = load_checkpoint(tmp_path / "a")
    assert ck.config == small.model.config and ck.vocab.to_dict() == small.model.vocab.to_dict()
    assert ck.kg == {"ehr": "x"}
    save_checkpoint(tmp_path / "b", small.model, ck.state, kg_meta=ck.kg)
    for name in ("params.dkp", "adam.dkp", "club_adam.dkp", "best_params.dkp", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_divergence_is_reported(small):
    state = new_state(small.model)
    for name in ("ehr.diag", "enc.w_v", "dec.w_q"):
        state.params[name] = np.full_like(state.params[name], 1e300)
    batch = small.model.make_batch(small.patients[:2])
    with pytest.raises(TrainingDiverged, match="non-finite"):
        with np.errstate(all="ignore"):
            train_step(small.model, state, batch)


def test_bootstrap_single_round_equals_plain(small):
    params = small.model.init_params()
    plain = aggregate(evaluate(small.model, params, small.patients, small.inputs.ddi))
    report = bootstrap_evaluate(small.model, params, small.patients, rounds=1, resample=False,
                                ddi=small.inputs.ddi)
    for m, v in plain.items():
        assert report.rounds[m] == [v]


def test_bootstrap_report_is_reproducible(small):
    params = small.model.init_params()
    a = bootstrap_evaluate(small.model, params, small.patients, rounds=10, seed=3, ddi=small.inputs.ddi)
    b = bootstrap_evaluate(small.model, params, small.patients, rounds=10, seed=3, ddi=small.inputs.ddi)
    assert a.to_json() == b.to_json()
    assert all(len(v) == 10 for v in a.rounds.values())
    assert a.metadata["averaging"].startswith("per-visit")


def test_bootstrap_without_ddi_omits_it(small):
    report = bootstrap_evaluate(small.model, small.model.init_params(), small.patients, rounds=2)
    assert "ddi" not in report.rounds and "omitted" in report.metadata["ddi"]


@pytest.mark.parametrize("seed", range(5))
def test_loss_drops_within_five_epochs_on_default_data(seed):
    s = make_setup({}, seed=seed, dim=32, epochs=5)
    parts = split(s.patients, seed)
    state = train(s.model, parts.train, [])
    assert state.history[5]["loss_total"] < state.history[0]["loss_total"]
