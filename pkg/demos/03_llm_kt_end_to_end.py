"""
LLM-KT end to end at small scale
================================

Train the sequence encoder, pre-train the toy LM, fine-tune it with LoRA plus
the context and sequence branches, then score the test windows and reload the
checkpoint. The same steps run at full scale behind ``llmkt train``.
Takes about six minutes on one core.
"""

import tempfile
from pathlib import Path

import numpy as np

from llmkt.data import Dataset, SynthSpec, synth_generate
from llmkt.evaluate import Experiment, PipelineConfig, evaluate, majority_acc
from llmkt.model import predict_windows, save_model
from llmkt.prompt import pack_windows

ds = Dataset.from_interactions(synth_generate(SynthSpec(n_students=80)).interactions)

# nested dicts mirror the JSON config accepted by the CLI
cfg = PipelineConfig.from_json({
    "seq": {"epochs": 15},
    "kt": {"L": 30, "lm": {"dim": 32}, "context": {"dim": 32}, "train": {"epochs": 3, "lr": 3e-3}},
})
exp = Experiment(ds, cfg)

# windows of one student share everything up to their cut, so they are packed together
test = exp.windows("test", cfg.kt.L)
plan, members = next(iter(pack_windows(cfg.kt.template, test, exp.vocab)))
print(f"{len(members)} windows share a {len(plan.stream_ids)}-token stream")

run = exp.run(cfg.kt, "test")
for row in run.train.curves:
    print("epoch {epoch}: train loss {train_loss:.4f}, valid AUC {valid_auc:.4f}".format(**row))
labels = [w.label for w in test]
print(f"test AUC {run.report.auc:.4f}, ACC {run.report.acc:.4f} (majority {majority_acc(labels):.4f})")

# only LoRA factors, adapters, merge and context encoder moved; the base LM is untouched
print("frozen tensors unchanged:", run.train.frozen_before == run.train.frozen_after)
print("trainable / total parameters:", run.model.n_parameters(True), "/", run.model.n_parameters())

# a saved checkpoint scores the same windows identically
with tempfile.TemporaryDirectory() as tmp:
    save_model(run.model, Path(tmp) / "ck")
    again = evaluate(Path(tmp) / "ck", ds, exp.split, "test")
print("reloaded AUC equals trained AUC:", again.auc == run.report.auc)

p = predict_windows(run.model, test[:5])
print("P(Yes) for the first five test windows:", np.round(p, 3), "labels:", labels[:5])
