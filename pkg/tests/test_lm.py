import numpy as np
import pytest

from llmkt import numcore as nc
from llmkt.data import Dataset, SynthSpec, synth_generate, window_histories
from llmkt.lm import (LMConfig, LoRAConfig, LoRALinear, PackedInputs, ToyLM, distance_bias, forward_injected, inject,
                      injected_logits, lora_apply, packed_answer_logits, predict_prob, recency_slopes,
                      yes_probability)
from llmkt.numcore import Tensor
from llmkt.prompt import Vocab, pack_windows, plan_prompt, template_corpus

CFG = LMConfig(dim=16, n_layers=2, n_heads=2)


@pytest.fixture(scope="module")
def setup():
    res = synth_generate(SynthSpec(n_students=3, n_questions=8, n_concepts=3, interactions_per_student=9, seed=5))
    ds = Dataset.from_interactions(res.interactions)
    vocab = Vocab.build(template_corpus(ds))
    windows = window_histories(res.interactions, 4)
    return ds, vocab, windows


def _lm(vocab, seed=0, lora=False, random_b=False):
    rng = np.random.default_rng(seed)
    lm = ToyLM(rng, len(vocab), CFG)
    if lora:
        lm.attach_lora(rng, LoRAConfig(rank=2, alpha=4.0, dropout=0.0))
        if random_b:
            for layer in lm.lora_layers():
                layer.lora_b.data[:] = rng.normal(0.0, 0.3, size=layer.lora_b.shape)
    lm.eval()
    return lm


def _slots(plan, dim, seed=1):
    return Tensor(np.random.default_rng(seed).normal(size=(len(plan.slot_bindings), dim)))


def test_yes_probability_closed_form():
    assert yes_probability(np.log(3.0), 0.0) == pytest.approx(0.75, abs=1e-15)
    assert yes_probability(2.0, 2.0) == 0.5
    assert yes_probability(1000.0, -1000.0) == 1.0 and yes_probability(-1000.0, 1000.0) == 0.0


def test_recency_bias_shapes_and_values():
    s = recency_slopes(4)
    np.testing.assert_allclose(s, [2 ** -2, 2 ** -4, 2 ** -6, 2 ** -8])
    b = distance_bias(s, np.arange(3), np.arange(3), np.float64)
    assert b.shape == (4, 3, 3)
    assert b[0, 2, 0] == -0.5 and b[1, 1, 1] == 0.0
    g = recency_slopes(4, 1)
    assert g[-1] == 0.0 and np.all(np.diff(g[:3]) < 0) and g[2] == 2 ** -8
    assert not recency_slopes(2, 2).any()
    with pytest.raises(ValueError):
        LMConfig(n_heads=2, dim=8, global_heads=3)


def test_lora_zero_b_is_bitwise_identity(setup):
    _, vocab, windows = setup
    plan = plan_prompt(1, windows[-1], vocab)
    slots = _slots(plan, CFG.dim)
    base = _lm(vocab)
    before = predict_prob(base, plan, slots, vocab.yes_id, vocab.no_id)
    z_before = forward_injected(base, plan, slots).data.copy()
    base.attach_lora(np.random.default_rng(9), LoRAConfig())
    base.eval()
    assert predict_prob(base, plan, slots, vocab.yes_id, vocab.no_id) == before
    assert np.array_equal(forward_injected(base, plan, slots).data, z_before)


def test_attach_lora_freezes_base_and_rejects_double_attach(setup):
    _, vocab, _ = setup
    lm = _lm(vocab, lora=True)
    trainable = [n for n, p in lm.named_parameters() if p.requires_grad]
    assert trainable and all(".lora_" in n for n in trainable)
    assert len(lm.lora_layers()) == 2 * CFG.n_layers
    with pytest.raises(ValueError):
        lm.attach_lora(np.random.default_rng(0), LoRAConfig())


def test_base_checksum_ignores_lora_and_tracks_base(setup):
    _, vocab, _ = setup
    lm = _lm(vocab)
    before = lm.base_checksum()
    lm.attach_lora(np.random.default_rng(0), LoRAConfig())
    lm.lora_layers()[0].lora_b.data += 1.0
    assert lm.base_checksum() == before
    lm.blocks[0].w_out.weight.data[0, 0] += 1e-9
    assert lm.base_checksum() != before


def test_lora_apply_shape_errors():
    w = Tensor(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        lora_apply(w, Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 5))), 1.0, Tensor(np.zeros((1, 4))))


def test_lora_dropout_only_in_training_with_rng():
    base = nc.Linear(np.random.default_rng(0), 4, 4)
    layer = LoRALinear(base, np.random.default_rng(1), 2, 2.0, 0.5)
    layer.lora_b.data[:] = 1.0
    x = Tensor(np.ones((3, 4)))
    layer.train()
    a = layer(x).data
    layer.rng = np.random.default_rng(2)
    b = layer(x).data
    layer.eval()
    c = layer(x).data
    np.testing.assert_array_equal(a, c)
    assert not np.array_equal(a, b)


def test_injecting_own_embeddings_is_bitwise_plain(setup):
    _, vocab, windows = setup
    lm = _lm(vocab, lora=True, random_b=True)
    for kind in (1, 2, 3, 5):
        plan = plan_prompt(kind, windows[-1], vocab)
        pos = [b.position for b in plan.slot_bindings]
        own = Tensor(lm.tok_emb.data[plan.token_ids[pos]])
        plain = lm.logits_all(lm.embed(plan.token_ids)).data
        assert np.array_equal(injected_logits(lm, plan, own).data, plain)


def test_logits_before_first_slot_are_injection_invariant(setup):
    _, vocab, windows = setup
    lm = _lm(vocab, lora=True, random_b=True)
    plan = plan_prompt(1, windows[-1], vocab)
    first = min(b.position for b in plan.slot_bindings)
    a = injected_logits(lm, plan, _slots(plan, CFG.dim, 1)).data
    b = injected_logits(lm, plan, _slots(plan, CFG.dim, 2)).data
    assert np.array_equal(a[:first], b[:first])
    assert not np.array_equal(a[first:], b[first:])


def test_inject_validation(setup):
    _, vocab, windows = setup
    lm = _lm(vocab)
    plan = plan_prompt(1, windows[-1], vocab)
    pos = [b.position for b in plan.slot_bindings]
    with pytest.raises(ValueError):
        inject(lm, plan.token_ids, pos[:-1], _slots(plan, CFG.dim))
    with pytest.raises(ValueError):
        inject(lm, plan.token_ids, pos, Tensor(np.zeros((len(pos), CFG.dim + 1))))
    with pytest.raises(ValueError):
        lm.embed(np.array([len(vocab)]))


@pytest.mark.parametrize("kind", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("drop", [(), ("Question",), ("Concept",)])
def test_packed_logits_match_standalone(setup, kind, drop):
    _, vocab, windows = setup
    if (kind == 2 and drop == ("Question",)) or (kind in (3, 5) and drop == ("Concept",)):
        pytest.skip("template has nothing left after the drop")
    lm = _lm(vocab, lora=True, random_b=True)
    rng = np.random.default_rng(3)
    for plan, members in pack_windows(kind, windows, vocab, drop):
        inputs = PackedInputs.from_plan(plan, vocab.pad_id)
        ss = Tensor(rng.normal(size=(len(inputs.stream_slot_pos), CFG.dim)))
        bs = Tensor(rng.normal(size=(len(inputs.branch_slot_rows), CFG.dim)))
        z = packed_answer_logits(lm, inputs, ss if len(ss.data) else None, bs if len(bs.data) else None).data
        offset = 0
        for k, br in enumerate(plan.branches):
            wp = plan.window_plan(k)
            n_stream = sum(b.position < br.cut for b in plan.stream_bindings)
            n_own = len(br.slot_bindings)
            slots = np.concatenate([ss.data[:n_stream], bs.data[offset : offset + n_own]])
            offset += n_own
            ref = forward_injected(lm, wp, Tensor(slots) if len(slots) else None).data
            np.testing.assert_allclose(z[k], ref, rtol=0, atol=1e-12)


def test_lora_attention_and_answer_loss_gradcheck(setup):
    _, vocab, windows = setup
    lm = _lm(vocab, lora=True, random_b=True)
    plan = plan_prompt(1, windows[5], vocab)
    slots = Tensor(np.random.default_rng(4).normal(size=(len(plan.slot_bindings), CFG.dim)), requires_grad=True)
    gold = np.array([vocab.yes_id])

    def f():
        z = forward_injected(lm, plan, slots)
        return nc.cross_entropy(z.reshape(1, -1), gold)

    params = [slots] + [p for layer in lm.lora_layers() for p in (layer.lora_a, layer.lora_b)]
    assert nc.grad_check(f, params, max_entries=24) < 1e-5


def test_packed_gradients_match_standalone(setup):
    _, vocab, windows = setup
    lm = _lm(vocab, lora=True, random_b=True)
    plan, members = pack_windows(1, windows, vocab)[0]
    inputs = PackedInputs.from_plan(plan, vocab.pad_id)
    rng = np.random.default_rng(6)
    ss = Tensor(rng.normal(size=(len(inputs.stream_slot_pos), CFG.dim)), requires_grad=True)
    bs = Tensor(rng.normal(size=(len(inputs.branch_slot_rows), CFG.dim)), requires_grad=True)
    params = [p for layer in lm.lora_layers() for p in (layer.lora_a, layer.lora_b)]
    packed_answer_logits(lm, inputs, ss, bs).sum().backward()
    packed = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    offset = 0
    for k, br in enumerate(plan.branches):
        wp = plan.window_plan(k)
        n_stream = sum(b.position < br.cut for b in plan.stream_bindings)
        n_own = len(br.slot_bindings)
        slots = nc.concat([ss[:n_stream], bs[offset : offset + n_own]], axis=0)
        offset += n_own
        forward_injected(lm, wp, slots).sum().backward()
    for a, p in zip(packed, params):
        np.testing.assert_allclose(a, p.grad, atol=1e-11)


def test_config_validation():
    with pytest.raises(ValueError):
        LMConfig(dim=10, n_heads=4)
    with pytest.raises(ValueError):
        LoRAConfig(rank=0)
    with pytest.raises(ValueError):
        LoRAConfig(targets=("gate",))
    assert LoRAConfig.large().rank == 32 and LoRAConfig().scale == 1.0
