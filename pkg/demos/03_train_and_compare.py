#!/usr/bin/env python3
"""Train a small detector and compare it with CFAR.

Uses a reduced dataset so it finishes in about a minute; the acceptance
suite runs the full 500/100 version.  Writes the comparison report (metrics
table, ROC curves, PGM panels) to ./compare_report.
"""

import logging
import sys

from ssmcfar import evaluation as ev
from ssmcfar.cfar import CfarVariant, CfarWindow, threshold_factor
from ssmcfar.datagen import SceneConfig, generate
from ssmcfar.model import DetectorConfig, count_params, init_model, predict_proba
from ssmcfar.train import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout)

scene = SceneConfig(grid=(64, 32), clutter="mixed", seed=7)
data = generate(scene, 300, counts=(200, 50, 50))

model = init_model(DetectorConfig(L=64 * 32, N=32, H=32))
print("trainable parameters:", count_params(model))
best, report = train(model, data, TrainConfig(learning_rate=3e-3, epochs=6, batch_size=10, pos_weight=5.0))
print(report.to_csv())

test = data.split("test")
window = CfarWindow.default_2d()
valid = ev.cfar_valid_mask(scene.grid, window)
probs = predict_proba(best, [s.frame for s in test])
entries = [ev.ReportEntry(
    "model",
    ev.pool(ev.pd_pf(p >= 0.5, s.mask, valid) for p, s in zip(probs, test)),
    ev.roc_probabilities(probs, [s.mask for s in test], valid),
    [(s.frame.values, p, s.mask) for s, p in zip(test[:2], probs)],
)]
for kind in ("CA", "OS", "GO", "SO"):
    T = threshold_factor(kind, window.n_train, 1e-2)
    entries.append(ev.ReportEntry(kind, ev.cfar_metrics(kind, window, test, T, valid),
                                  ev.roc_cfar(CfarVariant(kind), window, test, valid=valid)))

for e in entries:
    print(f"{e.method:5s} Pd {e.metrics.pd:.3f}  Pf {e.metrics.pf:.4f}  AUC {e.roc.auc:.4f}")
ev.compare_report(entries, "compare_report")
