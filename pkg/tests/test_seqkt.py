import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmkt import numcore as nc
from llmkt.data import Dataset, SynthSpec, split_students, synth_generate
from llmkt.numcore import Tensor
from llmkt.seqkt import (AKTLite, DKT, EntityIndex, LSTMCell, MonotonicAttention, SeqConfig, build_encoder,
                         extract_id_embeddings, history_mask, load_embeddings, load_encoder, make_batch,
                         parse_kind, predict_steps, save_embeddings, save_encoder, train_seq_encoder)


@pytest.fixture(scope="module")
def small():
    res = synth_generate(SynthSpec(n_students=40, n_questions=12, n_concepts=4, interactions_per_student=25, seed=3))
    ds = Dataset.from_interactions(res.interactions)
    return ds, split_students(ds.students, 0)


def _batch(ds, n=3, T=6):
    idx = EntityIndex.from_dataset(ds)
    return idx, make_batch([ds.by_student[s][:T] for s in ds.students[:n]], idx)


def test_parse_kind_aliases_and_errors():
    assert parse_kind("AKT") == "akt-lite"
    assert parse_kind("token_init") == "token-init"
    with pytest.raises(ValueError):
        parse_kind("sakt")


def test_make_batch_pads_and_masks(small):
    ds, _ = small
    idx = EntityIndex.from_dataset(ds)
    seqs = [ds.by_student[ds.students[0]][:4], ds.by_student[ds.students[1]][:2]]
    b = make_batch(seqs, idx)
    assert b.shape == (2, 4)
    assert b.mask.tolist() == [[True] * 4, [True, True, False, False]]
    assert b.a[0].tolist() == [int(it.correct) for it in seqs[0]]


def test_lstm_cell_gradcheck():
    rng = np.random.default_rng(0)
    cell = LSTMCell(rng, 3, 4)
    xw = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
    h = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

    def f():
        h1, c1 = cell(xw, h, c)
        return (h1 * h1).sum() + c1.sum()

    assert nc.grad_check(f, [xw, h, c, *cell.parameters()]) < 1e-5


def test_dkt_gradcheck_and_state_alignment(small):
    ds, _ = small
    idx, batch = _batch(ds)
    model = DKT(np.random.default_rng(1), idx, 4, 5)
    H = model.states(batch)
    assert np.all(H.data[:, 0] == 0.0)  # no information before the first step
    w = batch.mask.astype(float)
    f = lambda: nc.bce_with_logits(model.logits(batch)[0], batch.a, weights=w)  # noqa: E731
    assert nc.grad_check(f, model.parameters(), max_entries=30) < 1e-5


def test_dkt_prediction_ignores_current_and_future_answers(small):
    ds, _ = small
    idx, batch = _batch(ds, n=1, T=6)
    model = DKT(np.random.default_rng(2), idx, 4, 5)
    base = model.logits(batch)[0].data.copy()
    batch.a[0, 3] = 1 - batch.a[0, 3]
    changed = model.logits(batch)[0].data
    np.testing.assert_array_equal(base[0, :4], changed[0, :4])
    assert not np.array_equal(base[0, 4:], changed[0, 4:])


def test_monotonic_attention_gradcheck_including_theta():
    rng = np.random.default_rng(3)
    attn = MonotonicAttention(rng, 4, theta=0.3)
    x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    mask = history_mask(np.ones((2, 5), dtype=bool))
    f = lambda: (attn(x, x, x, mask) ** 2).sum()  # noqa: E731
    assert nc.grad_check(f, [x, *attn.parameters()]) < 1e-5


def test_monotonic_attention_first_row_is_zero():
    rng = np.random.default_rng(4)
    attn = MonotonicAttention(rng, 4)
    x = Tensor(rng.normal(size=(1, 4, 4)))
    out = attn(x, x, x, history_mask(np.ones((1, 4), dtype=bool)))
    assert np.all(out.data[0, 0] == 0.0)


@settings(max_examples=25, deadline=None)
@given(theta=st.floats(0.01, 3.0), T=st.integers(3, 12))
def test_monotonic_weights_decay_with_distance_for_identical_keys(theta, T):
    attn = MonotonicAttention(np.random.default_rng(0), 3, theta=theta)
    x = Tensor(np.tile(np.array([0.3, -0.2, 0.5]), (1, T, 1)))
    w = attn.weights(x, x, history_mask(np.ones((1, T), dtype=bool))).data[0, T - 1, : T - 1]
    assert np.all(np.diff(w) > 0)  # closer steps weigh more
    np.testing.assert_allclose(w[1:] / w[:-1], np.exp(theta), rtol=1e-9)


def test_history_mask_window():
    m = history_mask(np.array([[True, True, True, False]]), window=1)[0]
    assert m.tolist() == [[False] * 4, [True, False, False, False], [False, True, False, False],
                          [False, False, True, False]]


def test_akt_lite_gradcheck(small):
    ds, _ = small
    idx, batch = _batch(ds)
    model = AKTLite(np.random.default_rng(5), idx, 4, 5)
    w = batch.mask.astype(float)

    def f():
        main, aux = model.logits(batch)
        return nc.bce_with_logits(main, batch.a, weights=w) + nc.bce_with_logits(aux, batch.a, weights=w)

    assert nc.grad_check(f, model.parameters(), max_entries=30) < 1e-5


def test_predict_steps_skips_first_step(small):
    ds, split = small
    enc = build_encoder(EntityIndex.from_dataset(ds), SeqConfig(kind="dkt", dim=4, hidden=4))
    seqs = [ds.by_student[s] for s in split.test]
    scores, labels = predict_steps(enc, seqs)
    assert len(scores) == sum(len(s) - 1 for s in seqs)
    assert np.all((scores > 0) & (scores < 1))


@pytest.mark.parametrize("kind", ["dkt", "akt-lite"])
def test_training_beats_chance_and_is_deterministic(small, kind):
    ds, split = small
    cfg = SeqConfig(kind=kind, dim=8, hidden=8, epochs=6, patience=6)
    a = train_seq_encoder(ds, split, cfg)
    b = train_seq_encoder(ds, split, cfg)
    assert a.trained and a.history[-1]["valid_auc"] > 0.5
    np.testing.assert_array_equal(extract_id_embeddings(a).questions, extract_id_embeddings(b).questions)


def test_token_init_is_untrained_but_extractable(small):
    ds, split = small
    enc = train_seq_encoder(ds, split, SeqConfig(kind="token-init", dim=4))
    emb = extract_id_embeddings(enc)
    assert emb.questions.shape == (len(ds.question_ids), 4)


def test_untrained_extraction_warns(small):
    ds, _ = small
    enc = build_encoder(EntityIndex.from_dataset(ds), SeqConfig(kind="dkt", dim=4, hidden=4))
    with pytest.warns(UserWarning):
        extract_id_embeddings(enc)


@pytest.mark.parametrize("suffix", [".json", ".csv"])
def test_embedding_export_roundtrip(small, tmp_path, suffix):
    ds, _ = small
    enc = build_encoder(EntityIndex.from_dataset(ds), SeqConfig(kind="akt-lite", dim=4, hidden=4))
    enc.trained = True
    emb = extract_id_embeddings(enc)
    save_embeddings(emb, tmp_path / f"e{suffix}")
    back = load_embeddings(tmp_path / f"e{suffix}")
    assert back.question_ids == emb.question_ids and back.concept_ids == emb.concept_ids
    np.testing.assert_array_equal(back.questions, emb.questions)
    np.testing.assert_array_equal(back.concepts, emb.concepts)
    assert back.question(emb.question_ids[2]).tolist() == emb.questions[2].tolist()


def test_encoder_save_load_same_predictions(small, tmp_path):
    ds, split = small
    enc = build_encoder(EntityIndex.from_dataset(ds), SeqConfig(kind="akt-lite", dim=4, hidden=4, seed=9))
    save_encoder(enc, tmp_path / "enc.npz")
    back = load_encoder(tmp_path / "enc.npz")
    seqs = [ds.by_student[s] for s in split.test]
    np.testing.assert_array_equal(predict_steps(enc, seqs)[0], predict_steps(back, seqs)[0])


def test_batch_rejects_unknown_ids(small):
    ds, _ = small
    idx = EntityIndex(ds.question_ids[:2], ds.concept_ids)
    seq = [it for it in ds.interactions() if it.question_id not in ds.question_ids[:2]][:1]
    with pytest.raises(ValueError, match="outside"):
        make_batch([seq], idx)
