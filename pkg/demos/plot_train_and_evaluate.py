"""
Two-stage training and held-out diagnostics
===========================================

A miniature version of the full pipeline: generate a corpus, fit units,
train with the encoder body frozen and then jointly, and score the result
with probes, clean/noisy similarity and noise separability. Takes about a
minute on one core; the command line runs the same steps from files.
"""

import tempfile
from pathlib import Path

from spkdistill import pipeline
from spkdistill.trainer import TrainConfig, read_metrics

out = Path(tempfile.mkdtemp())
dcfg = pipeline.DataConfig(n_speakers=8, utterances_per_speaker=8, n_test_speakers=4, test_utterances_per_speaker=12)
pipeline.datagen(out / "data", dcfg)

cfg = TrainConfig(stage1_steps=100, stage2_steps=300)
pipeline.fit_units_step(out / "data", cfg, out / "units.bin")
pipeline.train_step_files(out / "data", cfg, out / "units.bin", out / "run")
for row in read_metrics(out / "run" / "metrics.csv")[::50]:
    print(row["step"], row["stage"], round(row["loss_total"], 3), round(row["loss_speaker"], 3))

# %%
metrics = pipeline.eval_files(out / "run", out / "data", ecfg=pipeline.EvalConfig(n_folds=4))
for k in sorted(metrics):
    print(f"{k:20s} {metrics[k]:.3f}")
