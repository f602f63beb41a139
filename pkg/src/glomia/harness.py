"""Experiment orchestration: splits, target/shadow training, calibration, attack, baselines, reports.

Config files are flat ``key = value`` lines with dotted section keys; ``#``
starts a comment. See :data:`CONFIG_SCHEMA` for the recognised keys.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attack import (
    DEFAULT_S_GRID,
    AttackDataset,
    Calibration,
    LabelOracle,
    NonSeparableWarning,
    attack_accuracy,
    celoss_score,
    decide,
    estimate_scaler_and_threshold,
    gap_attack,
    gap_attack_expected_acc,
    mentr_score,
    robustness_scores,
    roc_and_auc,
    score_histogram,
)
from .errors import ConfigError, GlomiaError
from .gnn import Arch, GnnModel, TrainConfig, accuracy, parse_arch, train_model
from .perturb import PerturbConfig
from .tensor import derive_seed, make_rng
from .tud import Corpus, FeatureMode, parse_corpus

logger = logging.getLogger(__name__)

SUMMARY_HEADER = [
    "dataset", "model", "train_test_gap", "glo_mia_acc",
    "gap_attack_acc", "glo_mia_auc", "celoss_auc", "mentr_auc",
]
HIST_BINS = 20


# ---------------------------------------------------------------------------
# configuration


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise ValueError("seed must fit in 64 unsigned bits")
    return v


def _opt_str(text: str):
    text = text.strip()
    return text or None


# key -> (parser, default)
CONFIG_SCHEMA = {
    "dataset.name": (str, "ENZYMES"),
    "dataset.path": (str, "."),
    "dataset.feature_mode": (_opt_str, None),
    "model.arch": (str, "GCN"),
    "train.epochs": (int, 200),
    "train.lr": (float, 0.01),
    "train.hidden_dim": (int, 32),
    "perturb.n_copies": (int, 1000),
    "perturb.r_min": (float, 0.1),
    "perturb.r_max": (float, 0.5),
    "attack.s_grid": (_floats, DEFAULT_S_GRID),
    "attack.scan_all": (_bool, False),
    "attack.query_budgets": (_ints, (1, 10, 100, 1000)),
    "run.repetitions": (int, 5),
    "run.master_seed": (_seed, 0),
    "run.output_dir": (str, "out"),
}


@dataclass
class ExperimentConfig:
    dataset_name: str = "ENZYMES"
    dataset_path: str = "."
    feature_mode: Optional[str] = None
    arch: Arch = Arch.GCN
    train: TrainConfig = field(default_factory=TrainConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    s_grid: tuple = DEFAULT_S_GRID
    scan_all: bool = False
    query_budgets: tuple = (1, 10, 100, 1000)
    repetitions: int = 5
    master_seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        self.arch = parse_arch(self.arch)
        if self.repetitions < 1:
            raise ConfigError("run.repetitions must be >= 1")
        if not self.s_grid:
            raise ConfigError("attack.s_grid must not be empty")
        if any(not s > 0 for s in self.s_grid):
            raise ConfigError("attack.s_grid values must be positive")
        if self.feature_mode is not None:
            try:
                FeatureMode(self.feature_mode)
            except ValueError:
                raise ConfigError(f"unknown feature mode {self.feature_mode!r}") from None

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        values = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
        for k, v in flat.items():
            if k not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            parse, _ = CONFIG_SCHEMA[k]
            if isinstance(v, str):
                try:
                    v = parse(v)
                except ValueError as e:
                    raise ConfigError(f"{k}: {e}") from None
            values[k] = v
        try:
            arch = parse_arch(values["model.arch"])
            perturb = PerturbConfig(
                n_copies=values["perturb.n_copies"],
                r_min=values["perturb.r_min"],
                r_max=values["perturb.r_max"],
            )
            train = TrainConfig(
                epochs=values["train.epochs"], lr=values["train.lr"], hidden_dim=values["train.hidden_dim"]
            )
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return cls(
            dataset_name=values["dataset.name"],
            dataset_path=values["dataset.path"],
            feature_mode=values["dataset.feature_mode"],
            arch=arch,
            train=train,
            perturb=perturb,
            s_grid=tuple(values["attack.s_grid"]),
            scan_all=values["attack.scan_all"],
            query_budgets=tuple(values["attack.query_budgets"]),
            repetitions=values["run.repetitions"],
            master_seed=values["run.master_seed"],
            output_dir=values["run.output_dir"],
        )

    def to_flat(self) -> dict:
        return {
            "dataset.name": self.dataset_name,
            "dataset.path": self.dataset_path,
            "dataset.feature_mode": self.feature_mode,
            "model.arch": self.arch.value,
            "train.epochs": self.train.epochs,
            "train.lr": self.train.lr,
            "train.hidden_dim": self.train.hidden_dim,
            "perturb.n_copies": self.perturb.n_copies,
            "perturb.r_min": self.perturb.r_min,
            "perturb.r_max": self.perturb.r_max,
            "attack.s_grid": list(self.s_grid),
            "attack.scan_all": self.scan_all,
            "attack.query_budgets": list(self.query_budgets),
            "run.repetitions": self.repetitions,
            "run.master_seed": self.master_seed,
            "run.output_dir": self.output_dir,
        }

    def with_overrides(self, **flat) -> "ExperimentConfig":
        merged = self.to_flat()
        merged.update(flat)
        return ExperimentConfig.from_flat(merged)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` pairs; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            flat = parse_config_text(fh.read(), path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    flat.update(overrides or {})
    return ExperimentConfig.from_flat(flat)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitPlan:
    target_train: tuple
    target_test: tuple
    shadow_train: tuple
    shadow_test: tuple

    def sets(self) -> tuple:
        return (self.target_train, self.target_test, self.shadow_train, self.shadow_test)

    def check(self) -> None:
        seen = set()
        sizes = {len(s) for s in self.sets()}
        if len(sizes) != 1:
            raise ConfigError(f"split sets differ in size: {[len(s) for s in self.sets()]}")
        for s in self.sets():
            if seen.intersection(s):
                raise ConfigError("split sets overlap")
            seen.update(s)


def split_dataset(c: Corpus, seed: int) -> SplitPlan:
    """Class-stratified four-way split into equal sets of ``floor(|c| / 4)``.

    Graphs are shuffled within each class, the classes are laid end to end and
    the resulting sequence is dealt round-robin into target-train,
    target-test, shadow-train and shadow-test. Sets that received an extra
    graph drop their last one.
    """
    n = len(c)
    if n < 8:
        raise ConfigError(f"corpus too small to split: {n} graphs, need at least 8")
    rng = make_rng(seed)
    labels = c.labels()
    order = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        order.extend(rng.permutation(idx).tolist())
    size = n // 4
    buckets = [order[k::4][:size] for k in range(4)]
    plan = SplitPlan(*(tuple(sorted(b)) for b in buckets))
    plan.check()
    return plan


# ---------------------------------------------------------------------------
# one repetition


def repetition_seeds(master_seed: int, rep: int) -> dict:
    base = derive_seed(master_seed, "repetition", rep)
    return {
        "repetition": base,
        "split": derive_seed(base, "split"),
        "target_init": derive_seed(base, "target"),
        "shadow_init": derive_seed(base, "shadow"),
        "shadow_perturb": derive_seed(base, "perturb", 0),
        "target_perturb": derive_seed(base, "perturb", 1),
    }


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    return parse_corpus(cfg.dataset_path, cfg.dataset_name, cfg.feature_mode)


@dataclass
class Models:
    """Trained target and shadow models plus the graphs they were built from."""

    plan: SplitPlan
    seeds: dict
    target: GnnModel
    shadow: GnnModel
    target_train: list
    target_test: list
    shadow_train: list
    shadow_test: list


def train_role(corpus: Corpus, cfg: ExperimentConfig, rep: int, role: str):
    """Train the ``role`` model (``"target"`` or ``"shadow"``) for repetition ``rep``.

    Returns ``(model, train graphs, test graphs, plan, seeds)``.
    """
    if role not in ("target", "shadow"):
        raise ConfigError(f"role must be 'target' or 'shadow', got {role!r}")
    seeds = repetition_seeds(cfg.master_seed, rep)
    plan = split_dataset(corpus, seeds["split"])
    tr_idx, te_idx = (plan.target_train, plan.target_test) if role == "target" else (plan.shadow_train, plan.shadow_test)
    tr, te = corpus.subset(tr_idx), corpus.subset(te_idx)
    tcfg = replace(cfg.train, seed=seeds[f"{role}_init"])
    model, _ = train_model(cfg.arch, tr, corpus.class_count, tcfg)
    return model, tr, te, plan, seeds


def train_models(corpus: Corpus, cfg: ExperimentConfig, rep: int) -> Models:
    target, ttr, tte, plan, seeds = train_role(corpus, cfg, rep, "target")
    shadow, str_, ste, _, _ = train_role(corpus, cfg, rep, "shadow")
    return Models(plan, seeds, target, shadow, ttr, tte, str_, ste)


def calibrate(models: Models, cfg: ExperimentConfig, n_copies: Optional[int] = None) -> Calibration:
    base = replace(cfg.perturb, seed=models.seeds["shadow_perturb"])
    if n_copies is not None:
        base = replace(base, n_copies=n_copies)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonSeparableWarning)
        return estimate_scaler_and_threshold(
            models.shadow, models.shadow_train, models.shadow_test, base, cfg.s_grid, scan_all=cfg.scan_all
        )


def attack_target(models: Models, cfg: ExperimentConfig, cal: Calibration, n_copies: Optional[int] = None) -> dict:
    """Score target-train (members) and target-test (non-members) through label queries only."""
    acfg = replace(cfg.perturb, seed=models.seeds["target_perturb"], scaler=cal.scaler)
    if n_copies is not None:
        acfg = replace(acfg, n_copies=n_copies)
    oracle = LabelOracle(models.target)
    ds = AttackDataset.from_groups(
        robustness_scores(models.target_train, oracle, acfg),
        robustness_scores(models.target_test, oracle, acfg),
    )
    verdicts = [decide(s, cal.threshold) for s in ds.scores]
    roc = roc_and_auc(ds)
    return {
        "acc": attack_accuracy(verdicts, ds.is_member),
        "auc": roc.auc,
        "queries": oracle.queries,
        "dataset": ds,
        "roc": roc,
    }


def run_baselines(models: Models) -> dict:
    """Gap attack (labels) plus cross-entropy and modified-entropy AUCs (probabilities)."""
    members, nonmembers = models.target_train, models.target_test
    oracle = LabelOracle(models.target)
    evals = list(members) + list(nonmembers)
    truth = np.r_[np.ones(len(members), bool), np.zeros(len(nonmembers), bool)]
    gap_verdicts = [gap_attack(g, oracle) for g in evals]
    probs = [models.target.predict_proba(g) for g in evals]
    # lower loss / entropy means member, so negate to get "higher is member"
    ce = [-celoss_score(p, g.label) for p, g in zip(probs, evals)]
    me = [-mentr_score(p, g.label) for p, g in zip(probs, evals)]
    return {
        "gap_attack_acc": attack_accuracy(gap_verdicts, truth),
        "celoss_auc": roc_and_auc(AttackDataset(np.array(ce), truth)).auc,
        "mentr_auc": roc_and_auc(AttackDataset(np.array(me), truth)).auc,
    }


def _finite_or_none(x: float):
    x = float(x)
    return x if math.isfinite(x) else None


def _sweep_record(point) -> dict:
    return {
        "scaler": point.scaler,
        "threshold": _finite_or_none(point.threshold),
        "acc": point.acc,
        "auc": point.auc,
        "histogram": [list(r) for r in score_histogram(point.dataset, HIST_BINS)],
    }


def _roc_record(roc) -> list:
    return [[_finite_or_none(t), float(f), float(p)] for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr)]


def run_repetition(corpus: Corpus, cfg: ExperimentConfig, rep: int) -> dict:
    models = train_models(corpus, cfg, rep)
    acc_train = accuracy(models.target, models.target_train)
    acc_test = accuracy(models.target, models.target_test)
    cal = calibrate(models, cfg)
    atk = attack_target(models, cfg, cal)
    base = run_baselines(models)
    return {
        "repetition": rep,
        "status": "ok",
        "seeds": models.seeds,
        "split_sizes": [len(s) for s in models.plan.sets()],
        "target_train_acc": acc_train,
        "target_test_acc": acc_test,
        "train_test_gap": acc_train - acc_test,
        "shadow_train_acc": accuracy(models.shadow, models.shadow_train),
        "shadow_test_acc": accuracy(models.shadow, models.shadow_test),
        "calibrated_scaler": cal.scaler,
        "calibrated_threshold": _finite_or_none(cal.threshold),
        "stopped_early": cal.stopped_early,
        "separable": cal.separable,
        "glo_mia_acc": atk["acc"],
        "glo_mia_auc": atk["auc"],
        "queries": atk["queries"],
        "gap_attack_expected_acc": gap_attack_expected_acc(acc_train, acc_test),
        **base,
        "sweep": [_sweep_record(p) for p in cal.trace],
        "roc": _roc_record(atk["roc"]),
    }


# ---------------------------------------------------------------------------
# full experiment and report

AVERAGED_FIELDS = (
    "target_train_acc", "target_test_acc", "train_test_gap", "calibrated_scaler",
    "calibrated_threshold", "glo_mia_acc", "glo_mia_auc", "gap_attack_acc",
    "gap_attack_expected_acc", "celoss_auc", "mentr_auc",
)


@dataclass
class ExperimentReport:
    config: dict
    runs: list
    averages: dict
    partial: bool
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "runs": self.runs,
            "averages": self.averages,
            "partial": self.partial,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["config"], d["runs"], d["averages"], d["partial"], d["provenance"])

    def ok_runs(self) -> list:
        return [r for r in self.runs if r["status"] == "ok"]


def average_runs(runs: Sequence[dict]) -> dict:
    ok = [r for r in runs if r["status"] == "ok"]
    out = {"completed_runs": len(ok)}
    for k in AVERAGED_FIELDS:
        vals = [r[k] for r in ok if r.get(k) is not None]
        out[k] = sum(vals) / len(vals) if vals else None
    return out


def run_experiment(cfg: ExperimentConfig, corpus: Optional[Corpus] = None) -> ExperimentReport:
    started = time.time()
    if corpus is None:
        corpus = load_corpus(cfg)
    runs, durations = [], []
    for rep in range(cfg.repetitions):
        t0 = time.time()
        try:
            rec = run_repetition(corpus, cfg, rep)
        except Exception as e:  # an aborted repetition is recorded, the rest go on
            logger.error("repetition %d failed: %s", rep, e)
            err = e.to_dict() if isinstance(e, GlomiaError) else {"error": type(e).__name__, "message": str(e)}
            rec = {"repetition": rep, "status": "failed", "seeds": repetition_seeds(cfg.master_seed, rep), "error": err}
        runs.append(rec)
        durations.append(time.time() - t0)
        if rec["status"] == "ok":
            logger.info("rep %d: glo-mia acc %.3f auc %.3f gap acc %.3f", rep,
                        rec["glo_mia_acc"], rec["glo_mia_auc"], rec["gap_attack_acc"])
    partial = any(r["status"] != "ok" for r in runs)
    return ExperimentReport(
        config=cfg.to_flat(),
        runs=runs,
        averages=average_runs(runs),
        partial=partial,
        provenance={
            "dataset": {
                "name": corpus.name,
                "graphs": len(corpus),
                "classes": corpus.class_count,
                "feature_mode": corpus.feature_mode.value,
                "feature_dim": corpus.feature_dim,
            },
            "master_seed": cfg.master_seed,
            "numpy": np.__version__,
            "timestamps": {
                "started": started,
                "finished": time.time(),
                "repetition_seconds": durations,
            },
        },
    )


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _scaler_tag(s: float) -> str:
    return format(s, "g")


def _write_csv(path: str, header: list, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from None


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_report(report: ExperimentReport, out_dir: str) -> list:
    """Write ``report.json`` and the CSV tables into ``out_dir``; returns the paths written.

    ``sweep_<s>.csv`` has one row per completed repetition (in repetition
    order), ``hist_<s>.csv`` sums the
    shadow score histograms over repetitions, and ``roc.csv`` lists the target
    attack ROC of every repetition.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(e.errno, f"cannot create {out_dir}: {e.strerror}") from None
    written = []
    path = os.path.join(out_dir, "report.json")
    try:
        with open(path, "w") as fh:
            fh.write(report_json(report))
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}") from None
    written.append(path)

    avg = report.averages
    path = os.path.join(out_dir, "summary.csv")
    _write_csv(path, SUMMARY_HEADER, [[
        report.config["dataset.name"], report.config["model.arch"],
        *(_fmt(avg.get(k)) for k in SUMMARY_HEADER[2:]),
    ]])
    written.append(path)

    sweep_rows, hists = {}, {}
    for run in report.ok_runs():
        for p in run["sweep"]:
            s = p["scaler"]
            sweep_rows.setdefault(s, []).append([_fmt(s), _fmt(p["threshold"]), _fmt(p["acc"]), _fmt(p["auc"])])
            h = hists.setdefault(s, [[c, 0, 0] for c, _, _ in p["histogram"]])
            for row, (_, m, nm) in zip(h, p["histogram"]):
                row[1] += m
                row[2] += nm
    for s in sorted(sweep_rows):
        path = os.path.join(out_dir, f"sweep_{_scaler_tag(s)}.csv")
        _write_csv(path, ["scaler", "threshold", "acc", "auc"], sweep_rows[s])
        written.append(path)
        path = os.path.join(out_dir, f"hist_{_scaler_tag(s)}.csv")
        _write_csv(path, ["score", "member_count", "nonmember_count"],
                   [[_fmt(c), m, nm] for c, m, nm in hists[s]])
        written.append(path)

    path = os.path.join(out_dir, "roc.csv")
    _write_csv(path, ["repetition", "threshold", "fpr", "tpr"], [
        [run["repetition"], "-inf" if t is None else _fmt(t), _fmt(f), _fmt(p)]
        for run in report.ok_runs() for t, f, p in run["roc"]
    ])
    written.append(path)
    return written


def read_report(out_dir: str) -> ExperimentReport:
    with open(os.path.join(out_dir, "report.json")) as fh:
        return ExperimentReport.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# query budget


def query_budget_curve(cfg: ExperimentConfig, corpus: Optional[Corpus] = None,
                       budgets: Optional[Sequence[int]] = None) -> dict:
    """Attack accuracy as the number of perturbed copies grows.

    Models are trained once per repetition and reused for every budget; each
    budget gets its own calibration. Returns ``{budget: [acc per repetition]}``.
    """
    if corpus is None:
        corpus = load_corpus(cfg)
    budgets = sorted(int(b) for b in (budgets or cfg.query_budgets))
    if not budgets or budgets[0] < 1:
        raise ConfigError("query budgets must be positive")
    out = {b: [] for b in budgets}
    for rep in range(cfg.repetitions):
        models = train_models(corpus, cfg, rep)
        for b in budgets:
            cal = calibrate(models, cfg, n_copies=b)
            out[b].append(attack_target(models, cfg, cal, n_copies=b)["acc"])
            logger.info("rep %d budget %d acc %.3f", rep, b, out[b][-1])
    return out
