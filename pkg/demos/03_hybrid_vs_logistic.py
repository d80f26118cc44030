"""
Hybrid CNN+FCN against logistic baselines on a small phantom
============================================================

Generate a reduced cohort in memory, process every scan, fit normative
grids on training-fold normals, then train the four model arms and compare
them on the held-out subjects. Epochs are cut to keep the run short, so the
numbers are only indicative.
"""

import time

import numpy as np

from octhybrid.evaluation import auc, delong_test
from octhybrid.hybrid import ModelConfig, TrainConfig
from octhybrid.phantom import CohortSpec, generate_cohort
from octhybrid import workflow

t0 = time.perf_counter()
cohort, scans = generate_cohort(CohortSpec(n_normal_subjects=30, n_pg_subjects=40, seed=3))
print(f"{len(cohort.eyes)} eyes, {len(scans)} scans ({time.perf_counter() - t0:.1f}s)")

# map chain for every scan
inputs = [(eye.profiles, eye.vessel_mask, eye.disc_offset) for _, eye in scans]
grids = workflow.process_scans(inputs)
records = []
for sid, eye in scans:
    r = eye.record.to_dict()
    r["scan_id"] = sid
    records.append(r)

# subject-level split; norms come from training-fold normals only
split = workflow.split_for(records, 0.8, seed=3)
subjects = [r["subject_id"] for r in records]
train_mask = split.train_mask(subjects)
labels = workflow.labels_of(records)
norms = workflow.fit_norms(grids, train_mask & (labels == 0))
for k, v in workflow.derived_scalars(grids, norms).items():
    for r, x in zip(records, v):
        r[k] = float(x)
train_idx = np.flatnonzero(train_mask)
test_idx = np.flatnonzero(~train_mask)
print(f"train {len(train_idx)} scans, test {len(test_idx)} scans")

scores = {}
for arm in workflow.MODEL_ARMS:
    t0 = time.perf_counter()
    channels = 1 if arm == "hybrid-1ch" else 2
    model, _ = workflow.fit_arm(arm, records, grids, train_idx,
                                model_cfg=ModelConfig(cnn_channels_in=channels),
                                train_cfg=TrainConfig(epochs=60, seed=3))
    scores[arm] = workflow.score_arm(model, records, grids, test_idx)
    print(f"{arm:>10}: test AUC {auc(scores[arm], labels[test_idx]):.3f} ({time.perf_counter() - t0:.0f}s)")

res = delong_test(scores["hybrid-2ch"], scores["logit-a"], labels[test_idx])
print(f"hybrid-2ch vs logit-a: diff {res.diff:+.3f}, p {res.p_value:.3f}")
