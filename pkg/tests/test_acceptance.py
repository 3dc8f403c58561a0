"""Acceptance suite: one test per numbered criterion, each printing a PASS/FAIL line.

Criteria 1-5 are property checks at pinned tolerances, 6 and 7 run real
training (together around fifteen minutes on one core), 8 and 9 pin the
metric examples and the serialization round trips. Run with ``-s`` to see
the per-criterion lines as they complete.
"""

import itertools
import time

import numpy as np
import pytest

from textspot import autodiff as ad
from textspot.engine import TrainConfig, load_checkpoint, train
from textspot.heads import (
    AggAttentionHead,
    AttentionMask,
    RecognitionHead,
    SequenceAssembler,
    agg_directional,
)
from textspot.layers import ParamStore
from textspot.matching import (
    Assignment,
    TargetInstance,
    TargetSet,
    dice_loss,
    focal_loss,
    hungarian,
    match,
    total_loss,
)
from textspot.metrics import evaluate_model, evaluate_predictions, one_minus_ned
from textspot.synth import degrade_annotation, generate_sample


def _report(num, name, ok, detail=""):
    suffix = f" ({detail})" if detail else ""
    print(f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'}{suffix}", flush=True)
    return ok


# -- criterion 1: finite-difference gradient suite --------------------------------


def _max_rel_err(leaves, forward):
    """Full-sweep central-difference check via the kernel's own harness."""
    report = ad.finite_difference_check(forward, leaves, eps=1e-5, samples=10**9)
    assert not report.failures, report.failures
    return report.max_rel_error


def _composite_case(rng):
    d, heads, num_char_queries, charset_size = 8, 2, 4, 12
    n, hq, wq = 2, 4, 4
    store = ParamStore(seed=3, dtype=np.float64)
    agg = AggAttentionHead(store, d)
    assembler = SequenceAssembler(store, d)
    rec = RecognitionHead(store, d, heads, 1, num_char_queries, charset_size)
    s = ad.Tensor(rng.normal(size=(n, hq, wq, d)), requires_grad=True)
    weight = rng.normal(size=(n, num_char_queries, charset_size))

    def forward():
        direct = agg_directional(s, agg.agg_attention(s))
        seq = assembler.assemble_sequence(direct)
        return (rec.recognize(seq).logits * ad.Tensor(weight)).sum()

    leaves = [s] + [p for _, p in store.items()]
    return leaves, forward


def _mask_loss_case(rng):
    logits = ad.Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
    target = (rng.random((2, 8, 8)) < 0.4).astype(np.float64)

    def forward():
        probs = ad.sigmoid(logits)
        return dice_loss(probs, target) + focal_loss(probs, target)

    return [logits], forward


def _pinned_loss_case(rng):
    n, hq, wq, k, c = 3, 8, 8, 4, 12
    class_logits = ad.Tensor(rng.normal(size=(n, 3)), requires_grad=True)
    mask_logits = ad.Tensor(rng.normal(size=(n, hq, wq)), requires_grad=True)
    char_logits = ad.Tensor(rng.normal(size=(n, k, c)), requires_grad=True)
    targets = TargetSet(kind="full", instances=[
        TargetInstance(char_ids=rng.integers(0, c, size=k), mask=rng.random((hq, wq)) < 0.3)
        for _ in range(2)
    ])
    assignment = Assignment(pairs=[(0, 0), (1, 2)], total_cost=0.0)

    def forward():
        loss, _ = total_loss(class_logits, mask_logits, char_logits, targets, assignment)
        return loss

    return [class_logits, mask_logits, char_logits], forward


def test_01_gradient_suite():
    rng = np.random.default_rng(17)
    start = time.time()
    errs = {
        "composite": _max_rel_err(*_composite_case(rng)),
        "mask losses": _max_rel_err(*_mask_loss_case(rng)),
        "pinned total": _max_rel_err(*_pinned_loss_case(rng)),
    }
    elapsed = time.time() - start
    ok = all(e < 1e-4 for e in errs.values()) and elapsed < 120.0
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + f", {elapsed:.0f}s"
    assert _report(1, "finite-difference gradients", ok, detail), detail


# -- criterion 2: assignment against exhaustive search -----------------------------


def test_02_matcher_oracle():
    rng = np.random.default_rng(5)
    perms_cache = {}
    start = time.time()
    worst = 0.0
    for _ in range(1000):
        rows = int(rng.integers(1, 7))
        cols = int(rng.integers(rows, 9))
        cost = rng.normal(size=(rows, cols)) * 10.0
        if (rows, cols) not in perms_cache:
            perms_cache[rows, cols] = np.array(
                list(itertools.permutations(range(cols), rows)), dtype=np.intp
            )
        perms = perms_cache[rows, cols]
        best = cost[np.arange(rows), perms].sum(axis=1).min()
        worst = max(worst, abs(hungarian(cost).total_cost - best))
    elapsed = time.time() - start
    ok = worst <= 1e-9 and elapsed < 10.0
    assert _report(2, "matcher vs exhaustive", ok, f"max gap {worst:.1e}, {elapsed:.1f}s"), worst


# -- criterion 3: directional aggregation invariants -------------------------------


def test_03_agg_invariants():
    rng = np.random.default_rng(11)
    worst_uniform = worst_scale = 0.0
    for _ in range(100):
        h, w, d = rng.integers(2, 11), rng.integers(2, 11), 8
        s = rng.normal(size=(1, h, w, d))
        level = float(rng.uniform(0.1, 1.0))
        uniform = AttentionMask(values=ad.Tensor(np.full((1, h, w, d), level)))
        direct = agg_directional(ad.Tensor(s), uniform)
        worst_uniform = max(
            worst_uniform,
            float(np.abs(direct.horizontal.data - s.mean(axis=1)).max()),
            float(np.abs(direct.vertical.data - s.mean(axis=2)).max()),
        )

        m = rng.uniform(0.2, 1.0, size=(1, h, w, d))
        base = agg_directional(ad.Tensor(s), AttentionMask(values=ad.Tensor(m)))
        for alpha in (0.1, 0.5, 1.0):
            scaled = agg_directional(ad.Tensor(s), AttentionMask(values=ad.Tensor(alpha * m)))
            for a, b in ((scaled.horizontal, base.horizontal), (scaled.vertical, base.vertical)):
                rel = np.abs(a.data - b.data) / np.maximum(np.abs(b.data), 1e-30)
                worst_scale = max(worst_scale, float(rel.max()))
    ok = worst_uniform < 1e-5 and worst_scale < 1e-4
    detail = f"uniform gap {worst_uniform:.1e}, scale gap {worst_scale:.1e}"
    assert _report(3, "aggregation invariants", ok, detail), detail


# -- criterion 4: set-prediction invariances ---------------------------------------


def _random_scene(rng, kind, n=5, hq=8, wq=8, k=4, c=12):
    t = 1 if kind == "weak" else int(rng.integers(1, 4))
    instances = [
        TargetInstance(
            char_ids=rng.integers(0, c, size=k),
            mask=(rng.random((hq, wq)) < 0.3) if kind == "full" else None,
        )
        for _ in range(t)
    ]
    targets = TargetSet(kind=kind, instances=instances)
    logits = (
        ad.Tensor(rng.normal(size=(n, 3)), requires_grad=True),
        ad.Tensor(rng.normal(size=(n, hq, wq)), requires_grad=True),
        ad.Tensor(rng.normal(size=(n, k, c)), requires_grad=True),
    )
    queries = rng.permutation(n)[:t]
    assignment = Assignment(pairs=[(ti, int(q)) for ti, q in enumerate(queries)], total_cost=0.0)
    return logits, targets, assignment


def _loss_value(logits, targets, assignment):
    loss, _ = total_loss(*logits, targets, assignment)
    return float(loss.data)


def test_04_set_prediction_invariances():
    rng = np.random.default_rng(23)
    worst = 0.0
    for kind in ("full", "text", "weak"):
        for _ in range(100):
            logits, targets, assignment = _random_scene(rng, kind)
            base = _loss_value(logits, targets, assignment)

            t = len(targets.instances)
            tperm = rng.permutation(t)
            shuffled = TargetSet(kind=kind, instances=[targets.instances[i] for i in tperm])
            tpos = np.argsort(tperm)
            pairs = sorted((int(tpos[ti]), q) for ti, q in assignment.pairs)
            permuted_targets = _loss_value(logits, shuffled, Assignment(pairs=pairs, total_cost=0.0))
            worst = max(worst, abs(permuted_targets - base))

            n = logits[0].shape[0]
            qperm = rng.permutation(n)
            qinv = np.argsort(qperm)
            relogits = tuple(ad.Tensor(x.data[qperm]) for x in logits)
            pairs = sorted((ti, int(qinv[q])) for ti, q in assignment.pairs)
            permuted_queries = _loss_value(relogits, targets, Assignment(pairs=pairs, total_cost=0.0))
            worst = max(worst, abs(permuted_queries - base))
    ok = worst <= 1e-9
    assert _report(4, "set-prediction invariances", ok, f"max gap {worst:.1e}"), worst


# -- criterion 5: weak supervision touches only the matched query ------------------


def test_05_weak_isolation():
    rng = np.random.default_rng(31)
    ok = True
    for _ in range(50):
        logits, targets, _ = _random_scene(rng, "weak", n=6)
        class_logits, mask_logits, char_logits = logits
        assignment = match(
            _softmax(class_logits.data), mask_logits.data, char_logits.data, targets
        )
        loss, _ = total_loss(class_logits, mask_logits, char_logits, targets, assignment)
        ad.backward(loss)
        matched = {q for _, q in assignment.pairs}
        for q in range(class_logits.shape[0]):
            row = class_logits.grad[q]
            if q in matched:
                ok = ok and bool(np.any(row != 0.0))
            else:
                ok = ok and bool(np.all(row == 0.0))
    assert _report(5, "weak-supervision isolation", ok), "unmatched class-logit grads leaked"


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- criterion 6: end-to-end overfit run -------------------------------------------


def _exact_rate(model, samples):
    exact = total = 0
    for s in samples:
        predicted = [r.transcription for r in model.spot(s.image)]
        for inst in s.instances:
            total += 1
            if inst.transcription in predicted:
                predicted.remove(inst.transcription)
                exact += 1
    return exact, total


def test_06_overfit_run():
    samples = [generate_sample(seed) for seed in range(8)]
    start = time.time()
    model, _ = train(TrainConfig(), datasets={"full": samples}, log_fn=lambda line: None)
    elapsed = time.time() - start
    metrics = evaluate_model(model, samples)
    exact, total = _exact_rate(model, samples)
    ok = metrics.det_f >= 0.9 and exact / total >= 7.0 / 8.0 and elapsed < 1200.0
    detail = f"det_f {metrics.det_f:.3f}, exact {exact}/{total}, {elapsed:.0f}s"
    assert _report(6, "overfit run", ok, detail), detail


# -- criterion 7: adding weak data must not degrade the fully supervised subset ----


def test_07_mixed_supervision_direction():
    full = [generate_sample(seed) for seed in range(8)]
    weak = [degrade_annotation(generate_sample(seed), "weak", seed=seed) for seed in range(8)]
    ned = {"full only": [], "mixed": []}
    for train_seed in (0, 1, 2):
        for label, datasets, ratios in (
            ("full only", {"full": full}, (1.0, 0.0, 0.0)),
            ("mixed", {"full": full, "weak": weak}, (0.75, 0.0, 0.25)),
        ):
            cfg = TrainConfig(max_iterations=400, seed=train_seed, mix_ratios=ratios)
            model, _ = train(cfg, datasets=datasets, log_fn=lambda line: None)
            ned[label].append(evaluate_model(model, full).one_minus_ned)
    mean_full = float(np.mean(ned["full only"]))
    mean_mixed = float(np.mean(ned["mixed"]))
    ok = mean_mixed >= mean_full - 0.02
    detail = f"full-only {mean_full:.4f}, mixed {mean_mixed:.4f}"
    assert _report(7, "mixed-supervision direction", ok, detail), detail


# -- criterion 8: metric examples ---------------------------------------------------


def test_08_metric_examples():
    checks = [
        one_minus_ned("abc", "abc") == 1.0,
        one_minus_ned("", "abc") == 0.0,
        one_minus_ned("abc", "axc") == 1.0 - 1.0 / 3.0,
    ]

    gt_mask = np.zeros((8, 16), dtype=bool)
    gt_mask[:, 0:8] = True
    perfect = evaluate_predictions([([(gt_mask, "abc")], [(gt_mask, "abc")])])
    checks.append(perfect.as_row() == (1.0, 1.0, 1.0, 1.0, 1.0))

    nothing = evaluate_predictions([([], [(gt_mask, "abc")])])
    checks.append(nothing.as_row() == (0.0, 0.0, 0.0, 0.0, 0.0))

    # shifted band: intersection 6 columns, union 10, IoU exactly 0.6
    pred_mask = np.zeros((8, 16), dtype=bool)
    pred_mask[:, 2:10] = True
    shifted = evaluate_predictions([([(pred_mask, "axc")], [(gt_mask, "abc")])])
    checks.append(shifted.det_f == 1.0)
    checks.append(shifted.one_minus_ned == 1.0 - 1.0 / 3.0)
    checks.append(shifted.e2e_f == 0.0)

    ok = all(checks)
    assert _report(8, "metric examples", ok, f"{sum(checks)}/{len(checks)} exact"), checks


# -- criterion 9: serialization round trips -----------------------------------------


def test_09_format_round_trips(tmp_path):
    from textspot.dataset_io import read_dataset, write_dataset

    samples = [generate_sample(seed) for seed in range(60)]
    samples += [degrade_annotation(generate_sample(100 + i), "text", seed=i) for i in range(20)]
    samples += [degrade_annotation(generate_sample(200 + i), "weak", seed=i) for i in range(20)]
    write_dataset(tmp_path / "ds", samples)
    loaded = read_dataset(tmp_path / "ds")
    ok = len(loaded) == 100
    for a, b in zip(samples, loaded):
        ok = ok and a.sample_id == b.sample_id and a.kind == b.kind
        ok = ok and np.array_equal(a.image, b.image)
        ok = ok and len(a.instances) == len(b.instances)
        for ia, ib in zip(a.instances, b.instances):
            ok = ok and ia.transcription == ib.transcription
            ok = ok and ia.orientation == ib.orientation
            masks_equal = (ia.mask is None and ib.mask is None) or np.array_equal(ia.mask, ib.mask)
            ok = ok and masks_equal

    train_set = [generate_sample(seed) for seed in range(2)]
    cfg = TrainConfig(d=8, num_queries=3, num_char_queries=4, encoder_layers=1,
                      decoder_layers=1, recognizer_layers=1, heads=2,
                      max_iterations=3, batch_size=2, checkpoint_interval=100)
    ckpt = tmp_path / "model.ckpt"
    model, _ = train(cfg, out_path=ckpt, datasets={"full": train_set}, log_fn=lambda line: None)
    before = evaluate_model(model, train_set).as_row()
    restored, _, _, _ = load_checkpoint(ckpt)
    after = evaluate_model(restored, train_set).as_row()
    ok = ok and before == after
    assert _report(9, "format round trips", ok, "dataset identity, checkpoint evaluate identical"), ok
