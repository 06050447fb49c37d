"""Command line: ``train``, ``attack``, ``evaluate`` and ``plot``.

Exit status is 0 on success and nonzero with a one-line diagnostic on stderr otherwise.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import attack as attack_lib
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DEFAULT_L2_THRESHOLD, REGIMES, AttackConfig, ConfigError, build_config, load_config
from .data import DATASETS, DataError, load_dataset
from .defense import Trainer
from .evaluation import (EvalResult, adversarial_accuracy, clean_accuracy_of_records, emit_report, evaluate_adversarial,
                         evaluate_clean, fit_classifiers, plot_curves, robustness_curve, write_curve)

log = logging.getLogger("scae_defense")


def _config(path):
    return load_config(path) if path else build_config({})


def _train_subset(dataset, n, seed):
    if n is None or n >= len(dataset):
        return dataset
    return dataset.subset(np.sort(np.random.default_rng(seed).choice(len(dataset), n, replace=False)))


def _load_teacher(path):
    model, _, meta = load_checkpoint(path)
    log.info("teacher %s (regime %s)", path, meta.get("regime"))
    return model


def cmd_train(args):
    cfg = _config(args.config)
    defense = replace(cfg.defense, regime=args.regime).validate()
    torch.manual_seed(args.seed)
    train = load_dataset(args.dataset, "train", canvas_size=cfg.scae.canvas_size)
    train = _train_subset(train, args.subset, args.seed)
    teacher = None
    if args.regime in ("ad", "hat"):
        if args.teacher:
            teacher = _load_teacher(args.teacher)
        else:
            log.info("no --teacher given, pre-training a plain teacher for %d epochs", defense.n_ep)
            teacher, _ = Trainer(cfg.scae, replace(defense, regime="plain"), seed=args.seed).fit(train)

    out = Path(args.out)
    meta = {"regime": args.regime, "seed": args.seed, "dataset": args.dataset, "train_size": len(train)}

    def on_epoch(trainer, rec):
        log.info("epoch %d [%s] loss %.4f rec %.4f non_rec %.4f distill %.4f adv %d normal %d",
                 rec.epoch, rec.phase, rec.total_loss, rec.rec, rec.non_rec, rec.distill,
                 rec.adv_batches, rec.normal_batches)
        every = defense.checkpoint_every
        if every and rec.epoch % every == 0:
            save_checkpoint(trainer.model, {}, out.with_name(f"{out.stem}.epoch{rec.epoch}{out.suffix}"),
                            {**meta, "epoch": rec.epoch})

    trainer = Trainer(cfg.scae, defense, seed=args.seed, teacher=teacher, on_epoch=on_epoch)
    model, report = trainer.fit(train)
    classifiers = fit_classifiers(model, train, seed=args.seed, linear_epochs=defense.linear_epochs,
                                  linear_lr=defense.linear_lr)
    save_checkpoint(model, classifiers, out, {**meta, "epoch": trainer.epoch})
    report.checkpoint = str(out)
    report.write_csv(out.with_suffix(".train.csv"))
    print(f"saved {out} after {trainer.epoch} epochs")
    return 0


def _attack_config(cfg, profile):
    if profile == "train":
        gen = cfg.defense.generator
        return AttackConfig.training(**{k: getattr(gen, k) for k in vars(gen)}), True
    return cfg.attack, False


def cmd_attack(args):
    cfg = _config(args.config)
    model, classifiers, meta = load_checkpoint(args.ckpt)
    clf = classifiers[f"{args.classifier}_kmeans"]
    dataset = load_dataset(args.dataset or meta.get("dataset", "mnist"), "test",
                           canvas_size=model.config.canvas_size)
    attack_cfg, sign = _attack_config(cfg, args.profile)
    idx = np.sort(np.random.default_rng(args.seed).choice(len(dataset), args.n, replace=False))
    results = []
    for start in range(0, len(idx), args.batch):
        chunk = idx[start:start + args.batch]
        results += attack_lib.run_evasion_attack(
            torch.from_numpy(dataset.images[chunk]), model, clf, attack_cfg, sample_ids=chunk,
            labels=dataset.labels[chunk], seed=args.seed, sign_steps=sign)
        log.info("attacked %d/%d", len(results), len(idx))
    out = Path(args.out or Path(args.ckpt).with_suffix(f".{args.classifier}.records.csv"))
    attack_lib.write_records(results, out)
    n_ok = sum(r.success for r in results)
    print(f"wrote {len(results)} records to {out} ({n_ok} successful attacks)")
    return 0


def cmd_evaluate(args):
    model, classifiers, meta = load_checkpoint(args.ckpt)
    dataset_name = meta.get("dataset", "mnist")
    threshold = args.threshold if args.threshold is not None else DEFAULT_L2_THRESHOLD[dataset_name]
    records = attack_lib.read_records(args.records)
    clf_name = f"{args.classifier}_kmeans"
    test = load_dataset(dataset_name, "test", canvas_size=model.config.canvas_size)
    clean = evaluate_clean(model, classifiers[clf_name], test)
    grid = build_config({"l2_threshold": threshold}).evaluation.thresholds()
    curve = robustness_curve(records, grid, model_id=meta.get("regime", ""), classifier_id=clf_name)
    adv = adversarial_accuracy(records, threshold)
    result = EvalResult(clf_name, meta.get("regime", ""), dataset_name, clean, adv, curve)
    out_dir = Path(args.out_dir or Path(args.records).with_suffix(""))
    emit_report([result], out_dir, threshold)
    print(f"clean_acc {clean:.4f}  adv_acc@{threshold:g} {adv:.4f}  "
          f"(attacked-set clean {clean_accuracy_of_records(records):.4f}) report in {out_dir}")
    return 0


def cmd_plot(args):
    records = attack_lib.read_records(args.records)
    threshold = args.threshold if args.threshold is not None else DEFAULT_L2_THRESHOLD["mnist"]
    grid = build_config({"l2_threshold": threshold}).evaluation.thresholds()
    curve = robustness_curve(records, grid, model_id=Path(args.records).stem)
    out = Path(args.out)
    plot_curves([curve], out, threshold)
    write_curve(curve, out.with_suffix(".csv"))
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="scae-defense", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one regime and write a checkpoint")
    p.add_argument("--regime", choices=REGIMES, default="plain")
    p.add_argument("--dataset", choices=DATASETS, default="mnist")
    p.add_argument("--config", help="flat JSON object of configuration overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (.scae)")
    p.add_argument("--teacher", help="plain checkpoint used as the distillation teacher")
    p.add_argument("--subset", type=int, help="train on a seeded random subset of this size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack test samples and write per-sample records")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--classifier", choices=("prior", "posterior"), default="prior")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--profile", choices=("eval", "train"), default="eval")
    p.add_argument("--config")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=50)
    p.add_argument("--out", help="records CSV path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="clean/adversarial accuracy and curve report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--classifier", choices=("prior", "posterior"), default="prior")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render the robustness curve of a records file")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="image path, e.g. curve.png")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, KeyError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
