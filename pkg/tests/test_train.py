import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_sequence, two_tree_table
from routekt.data import Interaction, StudentSequence, Vocab, make_splits
from routekt.model import KTModel, ModelConfig, load_checkpoint
from routekt.tensor import Tensor
from routekt.train import (Adam, TrainConfig, UndefinedMetric, accuracy, compute_auc, cross_validate, evaluate,
                           relevance_for, train_fold)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------- metrics


def test_auc_hand_cases():
    assert compute_auc([0.9, 0.1], [1, 0]) == 1.0
    assert compute_auc([0.5] * 4, [1, 0, 1, 0]) == 0.5
    # 3 positives x 3 negatives; positives beat negatives in 7 of 9 pairs, one tie.
    scores = [0.9, 0.4, 0.7, 0.4, 0.2, 0.8]
    labels = [1, 1, 1, 0, 0, 0]
    assert compute_auc(scores, labels) == pytest.approx(6.5 / 9, abs=1e-15)


def test_auc_needs_both_classes():
    with pytest.raises(UndefinedMetric):
        compute_auc([0.99, 0.99], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=64))
def test_auc_matches_pairwise_oracle(rows):
    scores = [s / 6 for s, _ in rows]
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        return
    assert compute_auc(scores, labels) == pairwise_auc(scores, labels)


def test_accuracy_hand_counts():
    assert accuracy([0.99, 0.99, 0.99], [1, 1, 1]) == 1.0
    assert accuracy([0.5, 0.49, 0.7, 0.2], [1, 0, 0, 0]) == 0.75
    with pytest.raises(UndefinedMetric):
        accuracy([], [])


# ---------------------------------------------------------------- Adam


def test_zero_gradient_leaves_parameters_and_counts_step():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    w.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(w.data, [1.5, -2.0]) and opt.t == 1


def test_first_step_moves_by_learning_rate():
    w = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=1e-3)
    w.grad = np.array([3.0, -0.2])
    opt.step()
    assert np.allclose(w.data, [-1e-3, 1e-3], rtol=1e-6, atol=0)


def test_three_steps_match_scalar_loop_on_quadratic():
    a, lr, b1, b2, eps = 3.0, 0.05, 0.9, 0.999, 1e-8
    w = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=lr)
    x, m, v = 2.0, 0.0, 0.0
    for t in range(1, 4):
        w.grad = np.array([2 * a * w.data[0]])
        opt.step()
        g = 2 * a * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(w.data[0] - x) <= 1e-12
    assert np.all(opt.v["w"] >= 0)


def test_nan_gradient_aborts():
    w = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"w": w})
    w.grad = np.array([np.nan, 1.0])
    with pytest.raises(FloatingPointError):
        opt.step()
    assert opt.t == 0 and np.array_equal(w.data, [0.0, 0.0])


# ---------------------------------------------------------------- config


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.max_epochs, cfg.patience) == (1e-4, 64, 200, 10)
    assert (cfg.dim, cfg.heads, cfg.blocks, cfg.use_mask, cfg.threads) == (64, 4, 2, True, 1)


@pytest.mark.parametrize("change", [dict(lr=0), dict(batch_size=-1), dict(patience=200), dict(patience=-1),
                                    dict(dim=10, heads=4)])
def test_config_validation(change):
    with pytest.raises(ValueError):
        TrainConfig(**change).validate()


# ---------------------------------------------------------------- loop


TABLE = two_tree_table(questions_per_leaf=3)


def learnable_sequences(n_students=30, seed=0):
    """Correct iff an earlier interaction shared the question's root."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_students):
        base = random_sequence(rng, TABLE, int(rng.integers(4, 12)), max_len=12, sid=f"s{s}")
        roots, its = set(), []
        for it in base.interactions:
            root = TABLE[it.question_id][0].route[0]
            its.append(Interaction(it.question_id, it.concept_id, int(root in roots), it.timestamp))
            roots.add(root)
        out.append(StudentSequence(base.student_id, its, 12))
    return out


@pytest.fixture(scope="module")
def fold_data():
    seqs = learnable_sequences()
    return seqs, relevance_for(seqs, TABLE), Vocab.from_data(seqs, TABLE), make_splits(seqs, 0)


def small_cfg(**kw):
    cfg = dict(dim=8, heads=2, blocks=1, lr=1e-2, batch_size=8, max_epochs=5, patience=4, seed=0)
    cfg.update(kw)
    return TrainConfig(**cfg)


def test_patience_zero_one_epoch(fold_data):
    seqs, rel, vocab, split = fold_data
    tr, va = split.train_val(0)
    res = train_fold(small_cfg(max_epochs=1, patience=0), seqs, rel, tr, va, vocab)
    assert len(res.history) == 1 and res.best_epoch == 1


def test_learns_above_chance_and_writes_run_files(fold_data, tmp_path):
    seqs, rel, vocab, split = fold_data
    tr, va = split.train_val(0)
    res = train_fold(small_cfg(), seqs, rel, tr, va, vocab, split.test, run_dir=tmp_path)
    assert max(e.val_auc for e in res.history) > 0.5
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [x["epoch"] for x in lines] == list(range(1, len(res.history) + 1))
    assert (tmp_path / "auc_curve.csv").read_text().startswith("epoch,train_loss,val_auc")
    model, meta, _ = load_checkpoint(tmp_path / "best.npz")
    assert meta["extra"]["epoch"] == res.best_epoch
    for name, p in res.model.named_parameters().items():
        assert np.array_equal(p.data, model.named_parameters()[name].data)
    # The restored checkpoint is the best one seen.
    assert res.best_val_auc == max(e.val_auc for e in res.history)
    assert res.test is not None and 0 <= res.test.auc <= 1


def test_same_seed_same_history(fold_data):
    seqs, rel, vocab, split = fold_data
    tr, va = split.train_val(1)
    a = train_fold(small_cfg(max_epochs=3, patience=2), seqs, rel, tr, va, vocab)
    b = train_fold(small_cfg(max_epochs=3, patience=2), seqs, rel, tr, va, vocab)
    assert [(e.train_loss, e.val_auc) for e in a.history] == [(e.train_loss, e.val_auc) for e in b.history]


def test_stops_after_patience_without_improvement(fold_data):
    seqs, rel, vocab, split = fold_data
    tr, va = split.train_val(0)
    res = train_fold(small_cfg(lr=1e-9, max_epochs=10, patience=2), seqs, rel, tr, va, vocab)
    flags = [e.improved for e in res.history]
    assert flags[-2:] == [False, False] and len(flags) < 10


def test_evaluate_is_batch_invariant(fold_data):
    seqs, rel, vocab, _ = fold_data
    model = KTModel(ModelConfig(vocab.num_questions, vocab.num_concepts, dim=8, heads=2, blocks=1), seed=1)
    one = evaluate(model, seqs, rel, batch_size=1)
    many = evaluate(model, seqs, rel, batch_size=64)
    assert (one.auc, one.accuracy, one.count) == (many.auc, many.accuracy, many.count)
    assert one.count == sum(len(s) for s in seqs)
    assert evaluate(model, seqs, route_table=TABLE).auc == one.auc


def test_evaluate_rejects_empty_and_reports_single_class(fold_data):
    seqs, rel, vocab, _ = fold_data
    model = KTModel(ModelConfig(vocab.num_questions, vocab.num_concepts, dim=8, heads=2, blocks=1))
    with pytest.raises(ValueError):
        evaluate(model, [], [])
    ones = [StudentSequence("x", [Interaction(0, 1, 1, t) for t in range(4)], 12)]
    rep = evaluate(model, ones, relevance_for(ones, TABLE))
    assert rep.auc is None and rep.count == 4


def test_cross_validate_reports_fold_spread(fold_data, tmp_path):
    seqs, _, _, split = fold_data
    report, results = cross_validate(small_cfg(max_epochs=2, patience=1), seqs, TABLE, split, folds=[0, 1], run_dir=tmp_path)
    assert len(report.folds) == 2 and len(results) == 2
    aucs = [f["test_auc"] for f in report.folds]
    assert report.auc_mean == pytest.approx(np.mean(aucs))
    assert report.auc_std == pytest.approx(np.std(aucs))
    assert (tmp_path / "fold1" / "metrics.jsonl").exists()
