"""
Classical knowledge tracing encoders
====================================

Train DKT and AKT-lite on the synthetic data and export the ID embeddings
that the language model later receives through its slot tokens.
"""

import numpy as np

from llmkt import numcore as nc
from llmkt.data import Dataset, SynthSpec, split_students, synth_generate
from llmkt.seqkt import SeqConfig, evaluate_encoder, extract_id_embeddings, train_seq_encoder

nc.set_default_dtype(np.float32)

ds = Dataset.from_interactions(synth_generate(SynthSpec(n_students=120)).interactions)
split = split_students(ds.students, 42)

for kind in ("dkt", "akt-lite"):
    enc = train_seq_encoder(ds, split, SeqConfig(kind=kind, epochs=15))
    print(f"{kind}: test AUC {evaluate_encoder(enc, ds, split.test):.4f} after {len(enc.history)} epochs")

# question and concept tables, one row per id; these are what the adapter maps into the LM
emb = extract_id_embeddings(enc)
print("question table", emb.questions.shape, "concept table", emb.concepts.shape)

# harder questions should sit apart from easy ones; check the leading direction against difficulty
res = synth_generate(SynthSpec(n_students=120))
q = emb.questions - emb.questions.mean(0)
direction = np.linalg.svd(q, full_matrices=False)[2][0]
proj = q @ direction
difficulty = res.difficulty[emb.question_ids]
print("|corr(first component, difficulty)| = %.2f" % abs(np.corrcoef(proj, difficulty)[0, 1]))
