"""
One recommendation, up close
============================

Train a small model, then score a single visit and compare the selected
medications with what was actually prescribed. Finally check that the
prediction for visit t ignores everything from visit t onward on the label
side: later visits and the current prescription.

Run with ``python demos/03_one_prediction.py``.
"""

import tempfile

import numpy as np

from dkinet.ehr import PatientRecord, Visit, split
from dkinet.model import TrainConfig
from dkinet.pipeline import build_model, load_inputs
from dkinet.synth import SynthSpec, generate_synthetic
from dkinet.training import train

spec = SynthSpec(patients=40)
paths = generate_synthetic(spec, seed=1).write(tempfile.mkdtemp(prefix="dkinet-demo-"))
config = TrainConfig(dim=32, epochs=20, seed=1)
inputs = load_inputs(paths["ehr"], paths["triples"], paths["code_map"], paths["ddi"], config.num_filters)
model = build_model(config, inputs)
parts = split(inputs.patients, config.seed)
state = train(model, parts.train, parts.val)

patient = max(parts.test, key=lambda p: len(p.visits))
t = len(patient.visits)
scores = model.predict(state.best_params, [patient])[0][t - 1]
selected = set(np.flatnonzero(scores >= config.eta).tolist())
truth = set(patient.visits[t - 1].med_ids)
med = inputs.vocab.med

print(f"patient {patient.patient_id}, visit {t} of {t}")
for i in np.argsort(-scores, kind="stable")[:8]:
    print(f"  {'*' if i in selected else ' '} {med[i]}  {scores[i]:.3f}  {'prescribed' if i in truth else ''}")
print(f"hit {len(selected & truth)}, missed {len(truth - selected)}, extra {len(selected - truth)}")

# Replace the current prescription with something random: the visit-t scores
# must not move by a single bit.
rng = np.random.default_rng(0)
visits = list(patient.visits)
last = visits[-1]
visits[-1] = Visit.from_ids(last.diag_ids, last.proc_ids, rng.choice(len(med), size=3, replace=False))
again = model.predict(state.best_params, [PatientRecord(patient.patient_id, tuple(visits))])[0][t - 1]
print("unchanged after swapping the current prescription:", np.array_equal(again, scores))
