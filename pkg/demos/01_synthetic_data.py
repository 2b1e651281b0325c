"""
Synthetic students and prompts
==============================

Generate the oracle dataset, split it by student, cut history windows and
render one window in each of the five prompt templates.
"""

import numpy as np

from llmkt.data import Dataset, SynthSpec, split_students, synth_generate, window_histories
from llmkt.metrics import auc
from llmkt.prompt import TemplateKind, Vocab, plan_prompt, render, template_corpus

# every interaction carries the true probability it was sampled from
result = synth_generate(SynthSpec(n_students=60))
ds = Dataset.from_interactions(result.interactions)
print(len(ds.students), "students,", len(ds.interactions()), "interactions")

# split 8:1:1 by student, never by interaction
split = split_students(ds.students, 42)
print({p: len(split.part(p)) for p in ("train", "valid", "test")})

# one window per target: the previous L items plus the item to predict
windows = window_histories(ds.interactions(split.test), L=5)
labels = np.array([w.label for w in windows])
oracle = result.oracle_by_key()
p_true = np.array([oracle[(w.target.student_id, w.target.seq_index)] for w in windows])
# no model can beat the generating probabilities, so this is the ceiling
print("oracle AUC on test windows: %.4f" % auc(p_true, labels))

w = windows[3]
for kind in TemplateKind:
    print(f"\n--- template type {int(kind)} ---")
    print(render(kind, w))

# the tokenized prompt knows where each slot marker sits and what it stands for
vocab = Vocab.build(template_corpus(ds))
plan = plan_prompt(1, w, vocab)
print("\n", len(plan.token_ids), "tokens,", len(plan.slot_bindings), "slots; first:", plan.slot_bindings[0])
