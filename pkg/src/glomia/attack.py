"""Label-only membership inference by perturbation robustness, plus baselines and metrics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, EmptyCorpus
from .gnn import GnnModel
from .perturb import PerturbConfig, iter_copy_chunks
from .tud import Graph

logger = logging.getLogger(__name__)

DEFAULT_S_GRID = (0.1, 0.3, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0, 15.0, 20.0)


class NonSeparableWarning(UserWarning):
    """Shadow scores give no threshold better than chance."""


class LabelOracle:
    """Query access to a model that reveals predicted labels and nothing else.

    ``queries`` counts every graph (original or perturbed copy) submitted.
    """

    def __init__(self, model: GnnModel):
        self._model = model
        self.queries = 0

    def label(self, g: Graph) -> int:
        self.queries += 1
        return int(self._model.predict_labels(g))

    def labels(self, g: Graph, features: np.ndarray) -> np.ndarray:
        """Labels for a batch of feature matrices that share ``g``'s structure."""
        self.queries += len(features)
        return np.asarray(self._model.predict_labels(g, features))


# ---------------------------------------------------------------------------
# scoring


def robustness_score(g: Graph, oracle: LabelOracle, cfg: PerturbConfig) -> float:
    """Fraction of perturbed copies still labelled ``g.label``; 0 if ``g`` itself is misclassified.

    Always issues ``cfg.n_copies + 1`` label queries.
    """
    if cfg.n_copies < 1:
        raise ConfigError("robustness_score needs at least one perturbed copy")
    y_t = oracle.label(g)
    kept = 0
    for _, feats in iter_copy_chunks(g, cfg):
        kept += int(np.count_nonzero(oracle.labels(g, feats) == g.label))
    if y_t != g.label:
        return 0.0
    return kept / cfg.n_copies


def robustness_scores(graphs: Sequence[Graph], oracle: LabelOracle, cfg: PerturbConfig) -> np.ndarray:
    return np.array([robustness_score(g, oracle, cfg) for g in graphs], dtype=np.float64)


# ---------------------------------------------------------------------------
# datasets and metrics


@dataclass(frozen=True)
class AttackDataset:
    scores: np.ndarray
    is_member: np.ndarray

    @classmethod
    def from_groups(cls, member_scores, nonmember_scores) -> "AttackDataset":
        m = np.asarray(member_scores, dtype=np.float64)
        nm = np.asarray(nonmember_scores, dtype=np.float64)
        return cls(np.concatenate([m, nm]),
                   np.concatenate([np.ones(len(m), bool), np.zeros(len(nm), bool)]))

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "is_member", np.asarray(self.is_member, dtype=bool))
        if self.scores.shape != self.is_member.shape:
            raise ValueError("scores and membership bits must align")

    def __len__(self):
        return len(self.scores)

    @property
    def records(self) -> list:
        return [(float(s), int(m)) for s, m in zip(self.scores, self.is_member)]

    def member_scores(self):
        return self.scores[self.is_member]

    def nonmember_scores(self):
        return self.scores[~self.is_member]


@dataclass(frozen=True)
class RocCurve:
    """Points for the rule ``member iff score > threshold``, thresholds descending.

    The first threshold is the largest score (no positives) and the last is
    ``-inf`` (everything positive).
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def balanced_accuracy(self) -> np.ndarray:
        return 0.5 * (self.tpr + 1.0 - self.fpr)

    def best_threshold(self) -> tuple:
        """``(threshold, balanced accuracy)`` maximising accuracy; ties go to the larger threshold."""
        acc = self.balanced_accuracy()
        k = int(np.argmax(acc))  # thresholds descend, so the first max is the largest
        return float(self.thresholds[k]), float(acc[k])


def roc_and_auc(ds: AttackDataset) -> RocCurve:
    pos = int(ds.is_member.sum())
    neg = len(ds) - pos
    if pos == 0 or neg == 0:
        raise DegenerateError("ROC needs both members and non-members")
    order = np.argsort(-ds.scores, kind="stable")
    s = ds.scores[order]
    m = ds.is_member[order]
    # last index of each run of equal scores
    last = np.r_[np.nonzero(s[1:] != s[:-1])[0], len(s) - 1]
    tp = np.cumsum(m)[last]
    fp = np.cumsum(~m)[last]
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    thresholds = np.r_[s[last], -np.inf]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, tpr, fpr, auc)


def attack_accuracy(decisions, truth) -> float:
    d = np.asarray(decisions).astype(bool)
    t = np.asarray(truth).astype(bool)
    if len(d) != len(t):
        raise ValueError("decisions and truth must align")
    if len(d) == 0:
        raise EmptyCorpus("attack accuracy over an empty set")
    return float(np.mean(d == t))


def score_histogram(ds: AttackDataset, bins: int = 20) -> list:
    """Rows of ``(bin centre, member count, non-member count)`` over ``[0, 1]``."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    hm, _ = np.histogram(ds.member_scores(), bins=edges)
    hn, _ = np.histogram(ds.nonmember_scores(), bins=edges)
    centres = (2.0 * np.arange(bins) + 1.0) / (2.0 * bins)
    return [(float(c), int(a), int(b)) for c, a, b in zip(centres, hm, hn)]


# ---------------------------------------------------------------------------
# calibration on the shadow model


@dataclass
class SweepPoint:
    scaler: float
    threshold: float
    acc: float
    auc: float
    dataset: AttackDataset = field(repr=False)


@dataclass
class Calibration:
    scaler: float
    threshold: float
    trace: list
    stopped_early: bool
    separable: bool


def evaluate_scaler(model: GnnModel, members, nonmembers, cfg: PerturbConfig) -> SweepPoint:
    oracle = LabelOracle(model)
    ds = AttackDataset.from_groups(
        robustness_scores(members, oracle, cfg), robustness_scores(nonmembers, oracle, cfg)
    )
    roc = roc_and_auc(ds)
    thr, acc = roc.best_threshold()
    return SweepPoint(cfg.scaler, thr, acc, roc.auc, ds)


def select_from_trace(trace: Sequence[SweepPoint]) -> tuple:
    """Apply the stop rule to an ascending sweep.

    Returns ``(index, stopped_early)``: the point before the first step where
    accuracy and AUC both strictly drop, or else the best-accuracy point
    (ties: larger AUC, then smaller scaler).
    """
    for k in range(1, len(trace)):
        if trace[k].acc < trace[k - 1].acc and trace[k].auc < trace[k - 1].auc:
            return k - 1, True
    best = max(range(len(trace)), key=lambda k: (trace[k].acc, trace[k].auc, -trace[k].scaler))
    return best, False


def estimate_scaler_and_threshold(
    shadow_model: GnnModel,
    shadow_train: Sequence[Graph],
    shadow_test: Sequence[Graph],
    base_cfg: PerturbConfig,
    s_grid: Sequence[float] = DEFAULT_S_GRID,
    scan_all: bool = False,
) -> Calibration:
    """Sweep the scaler upward on the shadow model and pick ``(scaler, threshold)``.

    With ``scan_all`` every grid point is evaluated (for plotting); the
    selection is the same as with the early stop.
    """
    if len(shadow_train) == 0 or len(shadow_test) == 0:
        raise ConfigError("shadow train and test sets must be non-empty")
    grid = sorted(float(s) for s in s_grid)
    if not grid:
        raise ConfigError("empty scaler grid")
    trace = []
    for s in grid:
        point = evaluate_scaler(shadow_model, shadow_train, shadow_test, base_cfg.with_scaler(s))
        logger.info("scaler %-6g acc %.4f auc %.4f thr %.4f", s, point.acc, point.auc, point.threshold)
        trace.append(point)
        if not scan_all and len(trace) > 1:
            if point.acc < trace[-2].acc and point.auc < trace[-2].auc:
                break
    k, stopped = select_from_trace(trace)
    chosen = trace[k]
    separable = chosen.acc > 0.5
    if not separable:
        warnings.warn("shadow robustness scores do not separate members from non-members",
                      NonSeparableWarning, stacklevel=2)
    return Calibration(chosen.scaler, chosen.threshold, trace, stopped, separable)


# ---------------------------------------------------------------------------
# inference


@dataclass
class AttackContext:
    target_oracle: LabelOracle
    perturb_cfg: PerturbConfig
    calibrated_scaler: float
    calibrated_threshold: float
    shadow_model: Optional[GnnModel] = None

    @property
    def attack_cfg(self) -> PerturbConfig:
        return self.perturb_cfg.with_scaler(self.calibrated_scaler)


@dataclass(frozen=True)
class MembershipDecision:
    graph_id: int
    score: float
    verdict: int


def decide(score: float, threshold: float) -> int:
    return int(score > threshold)


def infer_membership(g: Graph, ctx: AttackContext) -> MembershipDecision:
    score = robustness_score(g, ctx.target_oracle, ctx.attack_cfg)
    return MembershipDecision(g.source_id, score, decide(score, ctx.calibrated_threshold))


# ---------------------------------------------------------------------------
# baselines


def gap_attack(g: Graph, oracle: LabelOracle) -> int:
    """Member iff the target labels ``g`` correctly."""
    return int(oracle.label(g) == g.label)


def gap_attack_expected_acc(acc_train, acc_test):
    """Accuracy of :func:`gap_attack` on a balanced member/non-member set.

    Works on floats or on :class:`fractions.Fraction` for an exact value.
    """
    return (1 + (acc_train - acc_test)) / 2


_CLAMP = 1e-12


def celoss_score(probs, y: int) -> float:
    """Cross-entropy of the true class (lower means more member-like)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), _CLAMP, 1.0)
    return float(-np.log(p[y]))


def mentr_score(probs, y: int) -> float:
    """Modified prediction entropy (lower means more member-like)."""
    p = np.asarray(probs, dtype=np.float64)
    py = p[y]
    others = np.delete(p, y)
    val = -(1.0 - py) * np.log(max(py, _CLAMP))
    val -= np.sum(others * np.log(np.maximum(1.0 - others, _CLAMP)))
    return float(val)
