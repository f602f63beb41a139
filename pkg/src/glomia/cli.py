"""Command-line entry point (``glomia``).

Stage commands (``train``, ``calibrate``, ``attack``, ``baselines``) work on
repetition 0 of the configured experiment and pass state through files in the
output directory: ``target.ckpt`` / ``shadow.ckpt``, ``calibration.json``,
``attack.json`` and ``baselines.json``. ``run`` does every repetition and
writes the full report.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .attack import Calibration
from .errors import ConfigError, FileMissing, GlomiaError
from .gnn import accuracy, load_checkpoint, save_checkpoint, train_config_dict
from .harness import (
    Models,
    attack_target,
    calibrate,
    emit_report,
    load_config,
    load_corpus,
    repetition_seeds,
    run_baselines,
    run_experiment,
    split_dataset,
    train_role,
)
from .tud import corpus_stats, parse_corpus

logger = logging.getLogger("glomia")


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["run.master_seed"] = str(args.seed)
    if getattr(args, "out", None) is not None:
        out["run.output_dir"] = args.out
    return out


def _config(args):
    return load_config(args.config, _overrides(args))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _read_json(path: str):
    if not os.path.isfile(path):
        raise FileMissing(f"{path} not found; run the earlier stage first")
    with open(path) as fh:
        return json.load(fh)


def _checkpoint(out_dir: str, role: str):
    path = os.path.join(out_dir, f"{role}.ckpt")
    if not os.path.isfile(path):
        raise FileMissing(f"{path} not found; run 'glomia train --role {role}' first")
    return load_checkpoint(path)


def _models_from_disk(cfg, corpus, need_target=True, need_shadow=True) -> Models:
    seeds = repetition_seeds(cfg.master_seed, 0)
    plan = split_dataset(corpus, seeds["split"])
    return Models(
        plan, seeds,
        _checkpoint(cfg.output_dir, "target") if need_target else None,
        _checkpoint(cfg.output_dir, "shadow") if need_shadow else None,
        corpus.subset(plan.target_train), corpus.subset(plan.target_test),
        corpus.subset(plan.shadow_train), corpus.subset(plan.shadow_test),
    )


def cmd_parse(args) -> int:
    corpus = parse_corpus(args.dataset, args.name, args.feature_mode)
    info = {
        "name": corpus.name,
        "feature_mode": corpus.feature_mode.value,
        "feature_dim": corpus.feature_dim,
        "class_values": list(corpus.class_values),
    }
    if args.stats:
        info["stats"] = corpus_stats(corpus).rounded(2)
    _emit(info)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = load_corpus(cfg)
    model, tr, te, _, seeds = train_role(corpus, cfg, 0, args.role)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"{args.role}.ckpt")
    meta = train_config_dict(cfg.train)
    meta["seed"] = seeds[f"{args.role}_init"]
    save_checkpoint(model, path, meta)
    _emit({"role": args.role, "checkpoint": path,
           "train_acc": accuracy(model, tr), "test_acc": accuracy(model, te)})
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    models = _models_from_disk(cfg, load_corpus(cfg), need_target=False)
    cal = calibrate(models, cfg)
    out = {
        "scaler": cal.scaler,
        "threshold": cal.threshold,
        "stopped_early": cal.stopped_early,
        "separable": cal.separable,
        "trace": [{"scaler": p.scaler, "threshold": p.threshold, "acc": p.acc, "auc": p.auc} for p in cal.trace],
    }
    _write_json(os.path.join(cfg.output_dir, "calibration.json"), out)
    _emit(out)
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    models = _models_from_disk(cfg, load_corpus(cfg), need_shadow=False)
    c = _read_json(os.path.join(cfg.output_dir, "calibration.json"))
    cal = Calibration(c["scaler"], c["threshold"], [], c["stopped_early"], c["separable"])
    res = attack_target(models, cfg, cal)
    ds = res["dataset"]
    graphs = models.target_train + models.target_test
    out = {
        "acc": res["acc"],
        "auc": res["auc"],
        "queries": res["queries"],
        "decisions": [
            {"graph_id": g.source_id, "score": float(s), "verdict": int(s > cal.threshold), "member": bool(m)}
            for g, s, m in zip(graphs, ds.scores, ds.is_member)
        ],
    }
    _write_json(os.path.join(cfg.output_dir, "attack.json"), out)
    _emit({k: out[k] for k in ("acc", "auc", "queries")})
    return 0


def cmd_baselines(args) -> int:
    cfg = _config(args)
    models = _models_from_disk(cfg, load_corpus(cfg), need_shadow=False)
    out = run_baselines(models)
    _write_json(os.path.join(cfg.output_dir, "baselines.json"), out)
    _emit(out)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg)
    paths = emit_report(report, cfg.output_dir)
    _emit({"averages": report.averages, "partial": report.partial, "written": paths})
    return 0


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's defaults from clobbering flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=lambda s: int(s, 0), help="master seed (overrides run.master_seed)")
    common.add_argument("--out", help="output directory (overrides run.output_dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="glomia", parents=[common],
                                description="Label-only membership inference against graph classifiers.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", parents=[common], help="parse a TU-format dataset")
    sp.add_argument("--dataset", required=True, help="directory holding NAME_*.txt")
    sp.add_argument("--name", required=True)
    sp.add_argument("--feature-mode", default=None)
    sp.add_argument("--stats", action="store_true")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("train", parents=[common], help="train the target or shadow model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--role", required=True, choices=["target", "shadow"])
    sp.set_defaults(func=cmd_train)

    for name, func, text in (
        ("calibrate", cmd_calibrate, "pick scaler and threshold on the shadow model"),
        ("attack", cmd_attack, "attack the target model"),
        ("baselines", cmd_baselines, "gap, cross-entropy and entropy baselines"),
        ("run", cmd_run, "full pipeline over all repetitions"),
    ):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--config", required=True)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except GlomiaError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
