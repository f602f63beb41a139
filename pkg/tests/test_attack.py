import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_graph
from glomia.attack import (
    AttackContext,
    AttackDataset,
    LabelOracle,
    NonSeparableWarning,
    SweepPoint,
    attack_accuracy,
    celoss_score,
    decide,
    estimate_scaler_and_threshold,
    gap_attack,
    gap_attack_expected_acc,
    infer_membership,
    mentr_score,
    robustness_score,
    robustness_scores,
    roc_and_auc,
    score_histogram,
    select_from_trace,
)
from glomia.errors import ConfigError, DegenerateError, EmptyCorpus
from glomia.gnn import GnnModel
from glomia.perturb import PerturbConfig, generate_copy


class ScriptedModel:
    """Label-only stand-in: the unperturbed graph gets ``first``; copy k gets ``copies[k]``."""

    def __init__(self, first, copies):
        self.first = first
        self.copies = list(copies)
        self.pos = 0

    def predict_labels(self, g, features=None):
        if features is None:
            return self.first
        out = self.copies[self.pos:self.pos + len(features)]
        self.pos += len(features)
        return np.array(out)


class SplitModel:
    """Members keep their label under any perturbation; non-members flip."""

    def __init__(self, members, classes=2):
        self.members = set(members)
        self.classes = classes

    def predict_labels(self, g, features=None):
        if features is None:
            return g.label
        y = g.label if g.source_id in self.members else (g.label + 1) % self.classes
        return np.full(len(features), y)


class ConstantModel:
    def predict_labels(self, g, features=None):
        return g.label if features is None else np.full(len(features), g.label)


class Sentinel:
    """Forwards label queries and fails the test if anything else is touched."""

    def __init__(self, model):
        self._model = model

    def predict_labels(self, g, features=None):
        return self._model.predict_labels(g, features)

    def __getattr__(self, name):
        raise AssertionError(f"attack path read {name!r} from the target model")


def graph(rng, sid=1, label=0, n=5, d=3):
    return random_graph(rng, n, d, label=label, source_id=sid)


# -- robustness score ----------------------------------------------------------


def test_mispredicted_original_scores_zero(rng):
    g = graph(rng, label=1)
    oracle = LabelOracle(ScriptedModel(0, [1] * 10))
    assert robustness_score(g, oracle, PerturbConfig(n_copies=10)) == 0.0
    assert oracle.queries == 11


def test_all_copies_kept(rng):
    g = graph(rng, label=1)
    assert robustness_score(g, LabelOracle(ScriptedModel(1, [1] * 10)), PerturbConfig(n_copies=10)) == 1.0


def test_seven_hundred_of_thousand(rng):
    g = graph(rng, label=2)
    labels = [2] * 700 + [0] * 300
    np.random.default_rng(0).shuffle(labels)
    oracle = LabelOracle(ScriptedModel(2, labels))
    assert robustness_score(g, oracle, PerturbConfig(n_copies=1000)) == 0.7
    assert oracle.queries == 1001


def test_zero_copies_rejected(rng):
    cfg = PerturbConfig(n_copies=1)
    object.__setattr__(cfg, "n_copies", 0)
    with pytest.raises(ConfigError):
        robustness_score(graph(rng), LabelOracle(ConstantModel()), cfg)


@pytest.mark.parametrize("arch", ["GCN", "GAT", "SAGE", "GIN"])
def test_score_equals_brute_force_recount(arch):
    rng = np.random.default_rng(3)
    m = GnnModel.init(arch, 3, 6, 3, seed=2)
    cfg = PerturbConfig(n_copies=60, scaler=3.0, seed=5)
    for sid in range(1, 6):
        g = graph(rng, sid=sid, label=int(rng.integers(3)))
        oracle = LabelOracle(m)
        got = robustness_score(g, oracle, cfg)
        assert oracle.queries == cfg.n_copies + 1
        if m.predict_labels(g) != g.label:
            expected = 0.0
        else:
            kept = sum(m.predict_labels(generate_copy(g, cfg, k)) == g.label for k in range(cfg.n_copies))
            expected = kept / cfg.n_copies
        assert got == expected


def test_query_accounting_many_graphs(rng):
    oracle = LabelOracle(GnnModel.init("SAGE", 3, 4, 2, seed=1))
    graphs = [graph(rng, sid=i, label=i % 2) for i in range(7)]
    scores = robustness_scores(graphs, oracle, PerturbConfig(n_copies=25))
    assert oracle.queries == 7 * 26
    assert np.all((scores >= 0) & (scores <= 1))


def test_label_only_discipline(rng):
    target = GnnModel.init("GCN", 3, 4, 2, seed=0)
    ctx = AttackContext(LabelOracle(Sentinel(target)), PerturbConfig(n_copies=30), 1.0, 0.5)
    g = graph(rng, label=0)
    decision = infer_membership(g, ctx)
    assert decision.verdict in (0, 1) and 0.0 <= decision.score <= 1.0
    assert ctx.target_oracle.queries == 31
    with pytest.raises(AssertionError):
        Sentinel(target).predict_proba(g)


# -- decisions -------------------------------------------------------------------


def test_decision_boundary():
    assert decide(0.0, 0.1) == 0
    assert decide(1.0, 0.8) == 1
    assert decide(0.8, 0.8) == 0


def test_infer_membership_uses_calibrated_scaler(rng):
    g = graph(rng, sid=3, label=0)
    ctx = AttackContext(LabelOracle(ConstantModel()), PerturbConfig(n_copies=5), 2.5, 0.9)
    assert ctx.attack_cfg.scaler == 2.5
    d = infer_membership(g, ctx)
    assert (d.graph_id, d.score, d.verdict) == (3, 1.0, 1)


# -- metrics -----------------------------------------------------------------------


def test_auc_examples():
    assert roc_and_auc(AttackDataset.from_groups([0.9, 0.8], [0.1, 0.2])).auc == 1.0
    assert roc_and_auc(AttackDataset.from_groups([0.5] * 3, [0.5] * 4)).auc == 0.5
    with pytest.raises(DegenerateError):
        roc_and_auc(AttackDataset.from_groups([0.1, 0.2], []))


def _random_dataset(rng, size):
    m = int(rng.integers(1, size))
    levels = int(rng.integers(2, 30))
    scores = rng.integers(0, levels + 1, size=size) / levels  # plenty of ties
    member = np.zeros(size, bool)
    member[rng.choice(size, m, replace=False)] = True
    return AttackDataset(scores, member)


def test_auc_matches_mann_whitney():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ds = _random_dataset(rng, int(rng.integers(2, 201)))
        ref = oracles.mann_whitney_auc(ds.member_scores(), ds.nonmember_scores())
        assert abs(roc_and_auc(ds).auc - ref) <= 1e-9


@given(st.integers(0, 10_000))
def test_roc_properties(seed):
    rng = np.random.default_rng(seed)
    ds = _random_dataset(rng, int(rng.integers(2, 60)))
    roc = roc_and_auc(ds)
    assert np.all(np.diff(roc.thresholds) < 0)
    assert np.all(np.diff(roc.tpr) >= 0) and np.all(np.diff(roc.fpr) >= 0)
    assert roc.tpr[-1] == 1.0 and roc.fpr[-1] == 1.0 and 0.0 <= roc.auc <= 1.0
    for f in (lambda s: 3.0 * s - 7.0, lambda s: s**3 + s):
        assert abs(roc_and_auc(AttackDataset(f(ds.scores), ds.is_member)).auc - roc.auc) <= 1e-12
    # each point's rates follow from the strict rule at its threshold
    for t, tp, fp in zip(roc.thresholds, roc.tpr, roc.fpr):
        pred = ds.scores > t
        assert tp == np.mean(pred[ds.is_member]) and fp == np.mean(pred[~ds.is_member])


@given(st.integers(0, 10_000))
def test_decisions_invariant_to_record_order(seed):
    rng = np.random.default_rng(seed)
    ds = _random_dataset(rng, 40)
    thr, acc = roc_and_auc(ds).best_threshold()
    perm = rng.permutation(len(ds))
    shuffled = AttackDataset(ds.scores[perm], ds.is_member[perm])
    thr2, acc2 = roc_and_auc(shuffled).best_threshold()
    assert (thr, acc) == (thr2, acc2)
    verdicts = np.array([decide(s, thr) for s in ds.scores])
    assert np.array_equal(verdicts[perm], [decide(s, thr) for s in shuffled.scores])


def test_best_threshold_prefers_larger_on_ties():
    # "> 0.7" and "> 0.1" both give balanced accuracy 0.75
    ds = AttackDataset.from_groups([0.95, 0.6], [0.7, 0.1])
    assert roc_and_auc(ds).best_threshold() == (0.7, 0.75)


def test_attack_accuracy_examples():
    assert attack_accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert attack_accuracy([1] * 10, [1] * 5 + [0] * 5) == 0.5
    with pytest.raises(EmptyCorpus):
        attack_accuracy([], [])


def test_score_histogram():
    ds = AttackDataset.from_groups([1.0, 0.96, 0.5], [0.0, 0.02, 0.5])
    rows = score_histogram(ds)
    assert len(rows) == 20
    assert rows[0][0] == 0.025 and rows[-1][0] == 0.975
    assert sum(r[1] for r in rows) == 3 and sum(r[2] for r in rows) == 3
    assert rows[-1][1] == 2 and rows[0][2] == 2 and rows[10][1:] == (1, 1)


# -- calibration -------------------------------------------------------------------


def _shadow_sets(rng, count=6):
    members = [graph(rng, sid=i, label=i % 2) for i in range(1, count + 1)]
    nonmembers = [graph(rng, sid=100 + i, label=i % 2) for i in range(1, count + 1)]
    return members, nonmembers


def test_calibration_separable(rng):
    members, nonmembers = _shadow_sets(rng)
    model = SplitModel([g.source_id for g in members])
    cal = estimate_scaler_and_threshold(model, members, nonmembers, PerturbConfig(n_copies=5))
    assert cal.scaler == 0.1
    assert cal.threshold == 0.0
    assert cal.separable and cal.trace[0].acc == 1.0
    assert decide(1.0, cal.threshold) == 1 and decide(0.0, cal.threshold) == 0


def test_calibration_degenerate_warns(rng):
    members, nonmembers = _shadow_sets(rng)
    with pytest.warns(NonSeparableWarning):
        cal = estimate_scaler_and_threshold(ConstantModel(), members, nonmembers, PerturbConfig(n_copies=3),
                                            s_grid=(0.5, 1.0))
    assert not cal.separable
    assert all(p.acc == 0.5 and p.auc == 0.5 for p in cal.trace)


def test_calibration_empty_sets(rng):
    with pytest.raises(ConfigError):
        estimate_scaler_and_threshold(ConstantModel(), [], [graph(rng)], PerturbConfig())


def _point(s, acc, auc):
    return SweepPoint(s, 0.5, acc, auc, None)


def test_stop_rule_first_joint_decline():
    trace = [_point(0.1, 0.6, 0.6), _point(0.3, 0.7, 0.65), _point(0.5, 0.65, 0.7),
             _point(1.0, 0.8, 0.8), _point(1.5, 0.7, 0.75), _point(2.0, 0.9, 0.9)]
    assert select_from_trace(trace) == (3, True)


def test_stop_rule_fallback_ties():
    trace = [_point(0.1, 0.7, 0.6), _point(0.3, 0.8, 0.7), _point(0.5, 0.8, 0.75), _point(1.0, 0.8, 0.75)]
    assert select_from_trace(trace) == (2, False)


def test_scan_all_same_choice():
    rng = np.random.default_rng(4)
    members, nonmembers = _shadow_sets(rng, 8)
    model = GnnModel.init("GCN", 3, 6, 2, seed=3)
    base = PerturbConfig(n_copies=20)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonSeparableWarning)
        a = estimate_scaler_and_threshold(model, members, nonmembers, base)
        b = estimate_scaler_and_threshold(model, members, nonmembers, base, scan_all=True)
    assert (a.scaler, a.threshold) == (b.scaler, b.threshold)
    assert len(b.trace) == 11 and len(a.trace) <= 11
    assert [p.scaler for p in b.trace] == sorted(p.scaler for p in b.trace)


# -- baselines -----------------------------------------------------------------------


def test_gap_expected_examples():
    assert gap_attack_expected_acc(0.99, 0.51) == pytest.approx(0.74, abs=1e-15)
    assert gap_attack_expected_acc(1.0, 0.52) == pytest.approx(0.74, abs=1e-15)


def test_gap_identity_by_enumeration():
    # every correctness pattern of 4 members and 4 non-members
    m = 4
    for mask in range(1 << (2 * m)):
        correct = [(mask >> k) & 1 for k in range(2 * m)]
        truth = [1] * m + [0] * m
        acc_train = sum(correct[:m]) / m
        acc_test = sum(correct[m:]) / m
        assert attack_accuracy(correct, truth) == gap_attack_expected_acc(acc_train, acc_test)


def test_gap_attack_uses_label(rng):
    g = graph(rng, label=1)
    assert gap_attack(g, LabelOracle(ScriptedModel(1, []))) == 1
    assert gap_attack(g, LabelOracle(ScriptedModel(0, []))) == 0


def test_celoss_examples():
    assert celoss_score([0.0, 1.0], 1) == 0.0
    assert celoss_score([0.25] * 4, 2) == pytest.approx(math.log(4), abs=1e-15)
    assert celoss_score([1.0, 0.0], 1) == pytest.approx(math.log(1e12), abs=1e-12)


def test_mentr_examples():
    assert mentr_score([0.0, 1.0, 0.0], 1) == 0.0
    worst = mentr_score([1.0, 0.0], 1)
    assert math.isfinite(worst) and worst > 27.0
    expected = -0.2 * math.log(0.8) - 0.2 * math.log(0.8)
    assert mentr_score([0.8, 0.2], 0) == pytest.approx(expected, abs=1e-15)
    assert mentr_score([0.8, 0.2], 0) == pytest.approx(0.0893, abs=1e-4)
