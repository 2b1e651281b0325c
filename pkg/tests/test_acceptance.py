"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The default-scale runs (criteria 6 and 7) train the full model and its four
ablations on the default synthetic dataset once and share the results; they
take a little under two hours on one core.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from llmkt import numcore as nc
from llmkt.cli import EXIT_OK, main
from llmkt.context import ContextConfig, ContextEncoder, encode_texts
from llmkt.data import Dataset, SynthSpec, save_synth, split_students, synth_generate, window_histories
from llmkt.evaluate import (ABLATIONS, Experiment, ExperimentGrid, PipelineConfig, experiment_key, majority_acc,
                            run_grid)
from llmkt.fusion import Adapter, Merge
from llmkt.lm import LMConfig, LoRAConfig, ToyLM, forward_injected, injected_logits, predict_prob
from llmkt.metrics import auc
from llmkt.numcore import Tensor
from llmkt.prompt import CSLOT, QSLOT, TemplateKind, Vocab, plan_prompt, render, template_corpus, tokenize
from llmkt.seqkt import (LSTMCell, MonotonicAttention, SeqConfig, history_mask, student_scores,
                         train_seq_encoder)

from conftest import ACCEPTANCE_LINES

GOLDEN = Path(__file__).parent / "golden"
SMALL = {
    "dtype": "float64",
    "seq": {"dim": 8, "hidden": 8, "epochs": 3},
    "kt": {"L": 10, "lm": {"dim": 16, "n_layers": 1, "n_heads": 2}, "context": {"dim": 8, "n_heads": 2},
           "train": {"epochs": 2, "batch_size": 16, "lr": 3e-3}},
}
SMALL_SYNTH = SynthSpec(n_students=30, n_questions=12, n_concepts=4, interactions_per_student=20, seed=7)


def record(n: int, ok: bool, what: str, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {what} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# Shared default-scale runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_scale():
    t0 = time.perf_counter()
    res = synth_generate(SynthSpec())
    ds = Dataset.from_interactions(res.interactions)
    cfg = PipelineConfig()
    exp = Experiment(ds, cfg)
    full = exp.run(cfg.kt, "test")
    pipeline_seconds = time.perf_counter() - t0
    rest = run_grid(ds, ExperimentGrid.ablations(cfg, ABLATIONS[1:]), experiments={experiment_key(cfg): exp})
    rows = dict([("full", full.report), *rest])
    labels = [w.label for w in exp.windows("test", cfg.kt.L)]
    return {"ds": ds, "exp": exp, "full": full, "rows": rows, "seconds": pipeline_seconds,
            "majority": majority_acc(labels)}


# ---------------------------------------------------------------------------
# 1. AUC against the pairwise oracle
# ---------------------------------------------------------------------------


def _pairwise_auc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_criterion_1_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        labels = rng.random(n) < 0.5
        labels[rng.integers(n)] = True
        labels[rng.integers(n)] ^= True
        if labels.all() or not labels.any():
            labels[0] = not labels[1]
        scores = rng.integers(0, max(2, n // 3), size=n).astype(float) / 7.0  # plenty of ties
        worst = max(worst, abs(auc(scores, labels) - _pairwise_auc(scores, labels)))
    seconds = time.perf_counter() - t
    record(1, worst <= 1e-12 and seconds < 5.0, "rank AUC equals pairwise oracle on 200 tied instances",
           f"max error {worst:.1e}, {seconds:.2f}s")


# ---------------------------------------------------------------------------
# 2. Gradient suite
# ---------------------------------------------------------------------------


def test_criterion_2_gradient_suite():
    rng = np.random.default_rng(0)
    errors = {}
    t = time.perf_counter()
    with nc.default_dtype(np.float64):
        cell = LSTMCell(rng, 3, 4)
        xw, h, c = (Tensor(rng.normal(size=s), requires_grad=True) for s in [(2, 16), (2, 4), (2, 4)])

        def lstm():
            h1, c1 = cell(xw, h, c)
            return (h1 * h1).sum() + c1.sum()

        errors["lstm cell"] = nc.grad_check(lstm, [xw, h, c, *cell.parameters()])

        attn = MonotonicAttention(rng, 4, theta=0.3)
        x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        mask = history_mask(np.ones((2, 5), dtype=bool))
        errors["monotonic attention"] = nc.grad_check(lambda: (attn(x, x, x, mask) ** 2).sum(),
                                                      [x, *attn.parameters()])

        texts = ["Basic Arithmetic", "Writing Expressions; Basic Arithmetic", "What is 2+3?"]
        tv = Vocab.build(texts)
        enc = ContextEncoder(rng, len(tv), ContextConfig(dim=8, n_heads=2))
        w = Tensor(rng.normal(size=(3, 8)))
        errors["context encoder"] = nc.grad_check(lambda: (encode_texts(enc, texts, tv) * w).sum(),
                                                  enc.parameters(), max_entries=20)

        for name, d_in in (("context adapter", 8), ("sequence adapter", 6)):
            ad = Adapter(rng, d_in, 5)
            xa = Tensor(rng.normal(size=(3, d_in)), requires_grad=True)
            errors[name] = nc.grad_check(lambda: (ad(xa) ** 2).sum(), [xa, *ad.parameters()])

        merge = Merge(rng, "Concat", 4)
        hc, hs = (Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(2))
        errors["concat projection"] = nc.grad_check(lambda: (merge(hc, hs) ** 2).sum(), [hc, hs, *merge.parameters()])

        res = synth_generate(SynthSpec(n_students=3, n_questions=8, n_concepts=3, interactions_per_student=9, seed=5))
        vocab = Vocab.build(template_corpus(Dataset.from_interactions(res.interactions)))
        lm = ToyLM(rng, len(vocab), LMConfig(dim=16, n_layers=2, n_heads=2))
        lm.attach_lora(rng, LoRAConfig(rank=2, alpha=4.0, dropout=0.0))
        for layer in lm.lora_layers():
            layer.lora_b.data[:] = rng.normal(0.0, 0.3, size=layer.lora_b.shape)
        lm.eval()
        plan = plan_prompt(1, window_histories(res.interactions, 4)[5], vocab)
        slots = Tensor(rng.normal(size=(len(plan.slot_bindings), 16)), requires_grad=True)
        lora = [p for layer in lm.lora_layers() for p in (layer.lora_a, layer.lora_b)]

        def answer_ce():
            return nc.cross_entropy(forward_injected(lm, plan, slots).reshape(1, -1), np.array([vocab.yes_id]))

        errors["lora attention + answer CE"] = nc.grad_check(answer_ce, [slots, *lora], max_entries=24)
    seconds = time.perf_counter() - t
    worst = max(errors, key=errors.get)
    record(2, max(errors.values()) < 1e-5 and seconds < 120, f"{len(errors)} blocks pass finite differences",
           f"worst {worst} {errors[worst]:.1e}, {seconds:.1f}s")


# ---------------------------------------------------------------------------
# 3. LoRA identity and frozen checksums
# ---------------------------------------------------------------------------


def test_criterion_3_lora_identity_and_frozen_base():
    cfg = PipelineConfig.from_json(SMALL)
    ds = Dataset.from_interactions(synth_generate(SMALL_SYNTH).interactions)
    exp = Experiment(ds, cfg)
    with nc.default_dtype(np.float64):
        base = exp.base_lm(cfg.kt)
        base.eval()
        window = exp.windows("test", cfg.kt.L)[-1]
        plan = plan_prompt(cfg.kt.template, window, exp.vocab)
        slots = Tensor(np.random.default_rng(1).normal(size=(len(plan.slot_bindings), base.config.dim)))
        before = predict_prob(base, plan, slots, exp.vocab.yes_id, exp.vocab.no_id)
        base.attach_lora(np.random.default_rng(2), cfg.kt.lora)
        base.eval()
        after = predict_prob(base, plan, slots, exp.vocab.yes_id, exp.vocab.no_id)
    run = exp.run(cfg.kt, "test")
    frozen_ok = run.train.frozen_before == run.train.frozen_after and len(run.train.frozen_before) > 0
    record(3, before == after and frozen_ok, "B=0 adapter is a bitwise no-op and training leaves frozen tensors intact",
           f"p={before!r} vs {after!r}, {len(run.train.frozen_before)} frozen checksums")


# ---------------------------------------------------------------------------
# 4. Injection contract
# ---------------------------------------------------------------------------


def test_criterion_4_injection_contract():
    res = synth_generate(SynthSpec(n_students=4, n_questions=10, n_concepts=3, interactions_per_student=12, seed=3))
    vocab = Vocab.build(template_corpus(Dataset.from_interactions(res.interactions)))
    windows = window_histories(res.interactions, 6)
    rng = np.random.default_rng(0)
    with nc.default_dtype(np.float64):
        lm = ToyLM(rng, len(vocab), LMConfig(dim=16, n_layers=2, n_heads=2))
        lm.attach_lora(rng, LoRAConfig(rank=2, alpha=4.0, dropout=0.0))
        for layer in lm.lora_layers():
            layer.lora_b.data[:] = rng.normal(0.0, 0.3, size=layer.lora_b.shape)
        lm.eval()
        own_ok = prefix_ok = True
        checked = 0
        for w in windows[::5]:
            for kind in (1, 2, 3, 5):
                plan = plan_prompt(kind, w, vocab)
                pos = [b.position for b in plan.slot_bindings]
                plain = lm.logits_all(lm.embed(plan.token_ids)).data
                own_ok &= np.array_equal(injected_logits(lm, plan, Tensor(lm.tok_emb.data[plan.token_ids[pos]])).data,
                                         plain)
                a = injected_logits(lm, plan, Tensor(rng.normal(size=(len(pos), 16)))).data
                b = injected_logits(lm, plan, Tensor(rng.normal(size=(len(pos), 16)))).data
                prefix_ok &= np.array_equal(a[: min(pos)], b[: min(pos)])
                checked += 1
    record(4, bool(own_ok and prefix_ok), "own-embedding injection is bitwise plain and pre-slot logits are invariant",
           f"{checked} prompts")


# ---------------------------------------------------------------------------
# 5. Template goldens, answer tokens and slot counts
# ---------------------------------------------------------------------------


def test_criterion_5_templates(golden_window):
    goldens_ok = True
    for kind in TemplateKind:
        expected = (GOLDEN / f"type{int(kind)}.txt").read_text(encoding="utf-8")
        text = render(kind, golden_window)
        goldens_ok &= text == expected and text.endswith("Response with 'Yes' or 'No'. Response:")
    res = synth_generate(SynthSpec(n_students=40, interactions_per_student=30, seed=11))
    vocab = Vocab.build(template_corpus(Dataset.from_interactions(res.interactions)))
    single = len(tokenize("Yes", vocab)) == 1 and len(tokenize("No", vocab)) == 1 and vocab.yes_id != vocab.no_id
    windows = window_histories(res.interactions, 12)
    picks = np.random.default_rng(0).choice(len(windows), size=1000, replace=False)
    mismatches = 0
    for n, i in enumerate(picks):
        kind = TemplateKind(1 + n % 5)
        text = render(kind, windows[i])
        plan = plan_prompt(kind, windows[i], vocab)
        mismatches += len(plan.slot_bindings) != text.count(QSLOT) + text.count(CSLOT)
    record(5, bool(goldens_ok and single and mismatches == 0), "goldens exact, Yes/No single ids, slot counts match",
           f"5 goldens, {mismatches} mismatches on 1000 windows")


# ---------------------------------------------------------------------------
# 6. Desk-scale end to end
# ---------------------------------------------------------------------------


def test_criterion_6_desk_scale(default_scale):
    ds = default_scale["ds"]
    split = split_students(ds.students, 42)
    seq_auc = {}
    for kind in ("dkt", "akt-lite"):
        if kind == "akt-lite":
            enc = default_scale["exp"].encoder
        else:
            with nc.default_dtype(np.float32):
                enc = train_seq_encoder(ds, split, SeqConfig(kind=kind))
        with nc.default_dtype(np.float32):
            seq_auc[kind] = auc(*student_scores(enc, ds, split.test))
    rows, full = default_scale["rows"], default_scale["full"].report
    no_seq = rows["-Sequence"].auc
    checks = [min(seq_auc.values()) >= 0.65, full.auc >= 0.68, full.acc >= default_scale["majority"] + 0.01,
              full.auc >= no_seq + 0.01, default_scale["seconds"] <= 30 * 60]
    record(6, all(checks), "desk-scale synthetic run",
           f"DKT {seq_auc['dkt']:.4f}, AKT-lite {seq_auc['akt-lite']:.4f}; full AUC {full.auc:.4f}, "
           f"ACC {full.acc:.4f} vs majority {default_scale['majority']:.4f}, -Sequence AUC {no_seq:.4f}; "
           f"pipeline {default_scale['seconds'] / 60:.1f} min; checks {checks}")


# ---------------------------------------------------------------------------
# 7. Ablation harness
# ---------------------------------------------------------------------------


# fingerprint fields that may differ between ablation variants (the digest covers them)
ABLATION_KEYS = ("drop", "use_context", "use_sequence", "config_hash")


def test_criterion_7_ablation(default_scale, tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({**SMALL, "synth": {k: getattr(SMALL_SYNTH, k) for k in
                                                  ("n_students", "n_questions", "n_concepts",
                                                   "interactions_per_student", "seed")}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")]) == EXIT_OK
    tables = []
    for rerun in ("a", "b"):
        code = main(["ablate", "--config", str(cfg), "--data", str(tmp_path / "data"), "--out", str(tmp_path / rerun)])
        assert code == EXIT_OK
        tables.append((tmp_path / rerun / "ablation.csv").read_bytes())
    small = _csv_rows(tmp_path / "a" / "ablation.csv")
    shape_ok = small[0] == ["variant", "auc", "acc", "n"] and [r[0] for r in small[1:]] == list(ABLATIONS)
    rows = default_scale["rows"]
    order_ok = list(rows) == list(ABLATIONS) and all(rows["full"].auc >= r.auc for r in rows.values())
    fp_ok = len({json.dumps({k: v for k, v in r.fingerprint.items() if k not in ABLATION_KEYS},
                            sort_keys=True) for r in rows.values()}) == 1
    record(7, bool(shape_ok and tables[0] == tables[1] and order_ok and fp_ok),
           "five variants, bit-exact rerun, full >= every ablation",
           "; ".join(f"{k} {r.auc:.4f}" for k, r in rows.items())
           + f"; shape {shape_ok}, rerun {tables[0] == tables[1]}, order {order_ok}, fingerprints {fp_ok}")


# ---------------------------------------------------------------------------
# 8. Determinism
# ---------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    for d in ("a", "b"):
        save_synth(synth_generate(SynthSpec()), tmp_path / d)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    synth_ok = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    ds = Dataset.from_interactions(synth_generate(SMALL_SYNTH).interactions)
    for d in ("a", "b"):
        split_students(ds.students, 42).save(tmp_path / f"split_{d}.json")
    split_ok = (tmp_path / "split_a.json").read_bytes() == (tmp_path / "split_b.json").read_bytes()
    cfg = PipelineConfig.from_json(SMALL)
    reports = [Experiment(ds, cfg).run(cfg.kt, "test").report for _ in range(2)]
    metrics_ok = reports[0].to_json() == reports[1].to_json()
    seq_cfg = SeqConfig(**SMALL["seq"], kind="dkt")
    with nc.default_dtype(np.float64):
        split = split_students(ds.students, 42)
        encs = [train_seq_encoder(ds, split, seq_cfg) for _ in range(2)]
        seq_ok = all(np.array_equal(a.data, b.data) for a, b in zip(encs[0].model.parameters(), encs[1].model.parameters()))
    record(8, bool(synth_ok and split_ok and metrics_ok and seq_ok), "64-bit reruns and fixed-seed artifacts are exact",
           f"{len(names)} synthetic files, split, metrics auc {reports[0].auc!r}, encoder weights")


# ---------------------------------------------------------------------------
# 9. Merge sweep
# ---------------------------------------------------------------------------


def test_criterion_9_merge_sweep(tmp_path):
    cfg = tmp_path / "merge.json"
    cfg.write_text(json.dumps({"synth": {"n_students": 120}, "kt": {"L": 50, "train": {"epochs": 3, "lr": 3e-3}}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data")]) == EXIT_OK
    code = main(["sweep-merge", "--config", str(cfg), "--data", str(tmp_path / "data"), "--out", str(tmp_path / "out")])
    rows = _csv_rows(tmp_path / "out" / "merge_sweep.csv") if code == EXIT_OK else [[]]
    shape_ok = rows[0] == ["merge", "auc", "acc", "n"] and [r[0] for r in rows[1:]] == ["Add", "Avg", "Concat"]
    aucs = {r[0]: float(r[1]) for r in rows[1:]}
    record(9, bool(code == EXIT_OK and shape_ok and all(a > 0.5 for a in aucs.values())),
           "sweep-merge runs Add/Avg/Concat end to end", ", ".join(f"{k} {v:.4f}" for k, v in aucs.items()))

