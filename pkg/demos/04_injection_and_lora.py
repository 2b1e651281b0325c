"""
Slot injection and the LoRA identity
====================================

The two contracts the fine-tuning relies on, shown on a tiny untrained LM.
"""

import numpy as np

from llmkt import numcore as nc
from llmkt.data import Dataset, SynthSpec, synth_generate, window_histories
from llmkt.lm import LMConfig, LoRAConfig, ToyLM, injected_logits, predict_prob
from llmkt.numcore import Tensor
from llmkt.prompt import Vocab, plan_prompt, template_corpus

nc.set_default_dtype(np.float64)
res = synth_generate(SynthSpec(n_students=4, interactions_per_student=10))
vocab = Vocab.build(template_corpus(Dataset.from_interactions(res.interactions)))
plan = plan_prompt(1, window_histories(res.interactions, 4)[-1], vocab)
pos = np.array([b.position for b in plan.slot_bindings])

rng = np.random.default_rng(0)
lm = ToyLM(rng, len(vocab), LMConfig(dim=16, n_heads=2))
lm.eval()

# writing a slot token's own embedding back into its row changes nothing, bit for bit
plain = lm.logits_all(lm.embed(plan.token_ids)).data
own = injected_logits(lm, plan, Tensor(lm.tok_emb.data[plan.token_ids[pos]])).data
print("own-embedding injection == plain forward:", np.array_equal(own, plain))

# foreign vectors change the logits only from the first slot onwards (causal attention)
vectors = Tensor(rng.normal(size=(len(pos), 16)))
z = injected_logits(lm, plan, vectors).data
print("first slot at", pos.min(), "| identical before it:", np.array_equal(z[: pos.min()], plain[: pos.min()]),
      "| differs after:", not np.array_equal(z[pos.min():], plain[pos.min():]))

# with B = 0 every LoRA branch adds exactly zero
before = predict_prob(lm, plan, vectors, vocab.yes_id, vocab.no_id)
lm.attach_lora(rng, LoRAConfig())
lm.eval()
after = predict_prob(lm, plan, vectors, vocab.yes_id, vocab.no_id)
print(f"P(Yes) before {before!r} after {after!r}, equal: {before == after}")

# a nonzero B moves the prediction while the frozen weights keep their checksum
checksum = lm.base_checksum()
for layer in lm.lora_layers():
    layer.lora_b.data[:] = rng.normal(0.0, 0.1, size=layer.lora_b.shape)
print("after updating B: P(Yes)", predict_prob(lm, plan, vectors, vocab.yes_id, vocab.no_id),
      "| base checksum unchanged:", lm.base_checksum() == checksum)
