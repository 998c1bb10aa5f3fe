"""Command-line interface.

Subcommands:

  train            train one classifier (optionally key-encrypted)
  encrypt-preview  encrypt sample images and write PNG previews
  attack           run the attack suite against a checkpoint
  evaluate         Acc/ASR of one target on one saved AE batch
  transfer-matrix  full source -> target grid from a config file
  reproduce        scripted desk-scale experiments with trend checks
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attacks, crypto, data, harness, metrics, models


def _log(msg):
    print(msg, flush=True)


def _load_data(args):
    return data.load_cifar10(getattr(args, "dataset", None), args.n_train,
                             args.n_test, seed=args.seed)


def _add_common(p, output_default):
    p.add_argument("--output-dir", default=output_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default=None,
                   help="CIFAR-10 binary directory; synthetic data when omitted")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)


def _key_args(p):
    p.add_argument("--transform", choices=crypto.TRANSFORMS, default=None)
    p.add_argument("--block-size", type=int, default=4, choices=(1, 2, 4, 8, 16, 32))
    p.add_argument("--key-seed", type=int, default=0)


def _key_from(args) -> crypto.EncryptionKey | None:
    if args.transform is None:
        return None
    return crypto.EncryptionKey(args.key_seed, args.transform, args.block_size)


def cmd_train(args) -> int:
    train, test = _load_data(args)
    cfg = models.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                             lr=args.lr, seed=args.seed)
    model = models.train(models.ModelSpec(args.architecture), train, cfg,
                         key=_key_from(args), test_data=test, log=_log)
    os.makedirs(args.output_dir, exist_ok=True)
    path = os.path.join(args.output_dir, args.name + ".ckpt")
    model.save(path)
    _log(f"saved {path}; metrics {model.metrics}")
    return 0


def cmd_encrypt_preview(args) -> int:
    from PIL import Image
    key = _key_from(args)
    if key is None:
        raise SystemExit("encrypt-preview requires --transform")
    _, test = _load_data(args)
    imgs = test.images[:args.n_images]
    enc = crypto.encrypt_batch(imgs, key)
    os.makedirs(args.output_dir, exist_ok=True)
    for i in range(len(imgs)):
        pair = np.concatenate([imgs[i], enc[i]], axis=1)
        path = os.path.join(args.output_dir,
                            f"preview_{i:02d}_{key.transform}_M{key.block_size}.png")
        Image.fromarray(pair).save(path)
        _log(f"wrote {path} (plain | encrypted)")
    return 0


def cmd_attack(args) -> int:
    model = models.Classifier.load(args.checkpoint)
    _, test = _load_data(args)
    images = test.images[:args.n_images].astype(np.float32) / 255.0
    labels = test.labels[:args.n_images]
    configs = attacks.default_configs(args.seed, args.epsilon, args.n_iter,
                                      args.square_queries)
    if args.attacks:
        configs = {k: configs[k] for k in args.attacks}
    result = attacks.run_attack_suite(model, images, labels, configs, log=_log)
    for kind, batch in result.batches.items():
        attacks.save_batch(batch, os.path.join(args.output_dir, kind),
                           cfg=configs[kind])
    for kind, msg in result.errors.items():
        _log(f"{kind}: skipped ({msg})")
    return 0


def cmd_evaluate(args) -> int:
    source = models.Classifier.load(args.source)
    target = models.Classifier.load(args.target)
    batch = attacks.load_batch(args.batch_dir)
    records = metrics.EvalRecords(
        batch.labels,
        source.logits(batch.originals).argmax(axis=1),
        target.logits(batch.originals).argmax(axis=1),
        target.logits(batch.adversarials).argmax(axis=1))
    cell = metrics.evaluate_cell(args.source, args.target, batch.attack_kind, records)
    _log(f"N={cell.n} N_c={cell.n_c} Acc={metrics.round2(cell.acc)} "
         f"ASR={metrics.round2(cell.asr)}")
    return 0


def cmd_transfer_matrix(args) -> int:
    cfg = harness.ExperimentConfig.from_ini(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    cfg.master_seed = args.seed if args.seed is not None else cfg.master_seed
    cfg.workers = args.workers or cfg.workers
    _, report = harness.run_experiment(cfg, log=_log)
    _log(harness.format_table(report))
    _log(f"report written to {cfg.output_dir}")
    return 0


def cmd_reproduce(args) -> int:
    base = (harness.ExperimentConfig.from_ini(args.config) if args.config
            else harness.ExperimentConfig())
    if args.output_dir:
        base.output_dir = args.output_dir
    if args.seed is not None:
        base.master_seed = args.seed
    if args.workers:
        base.workers = args.workers
    _, report, checks = harness.reproduce(args.experiment, base, log=_log)
    _log(harness.format_table(report))
    failed = [name for name, ok, _ in checks if not ok]
    if failed:
        _log(f"trend checks FAILED: {failed}")
        return 1
    _log("all trend checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="enctransfer")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a classifier")
    _add_common(t, "runs/train")
    _key_args(t)
    t.add_argument("--architecture", choices=models.ARCHITECTURES, default="cnn_small")
    t.add_argument("--name", default="model")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--lr", type=float, default=0.05)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encrypt-preview", help="write plain|encrypted PNG pairs")
    _add_common(e, "runs/preview")
    _key_args(e)
    e.add_argument("--n-images", type=int, default=4)
    e.set_defaults(func=cmd_encrypt_preview)

    a = sub.add_parser("attack", help="run the attack suite on a checkpoint")
    _add_common(a, "runs/attack")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--n-images", type=int, default=256)
    a.add_argument("--epsilon", type=float, default=harness.EPSILON_DEFAULT)
    a.add_argument("--n-iter", type=int, default=100)
    a.add_argument("--square-queries", type=int, default=1000)
    a.add_argument("--attacks", nargs="*", choices=attacks.ATTACK_KINDS)
    a.set_defaults(func=cmd_attack)

    v = sub.add_parser("evaluate", help="Acc/ASR of a target on a saved AE batch")
    v.add_argument("--source", required=True, help="source checkpoint path")
    v.add_argument("--target", required=True, help="target checkpoint path")
    v.add_argument("--batch-dir", required=True)
    v.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("transfer-matrix", help="full grid from a config file")
    m.add_argument("--config", required=True)
    m.add_argument("--output-dir", default=None)
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--workers", type=int, default=None)
    m.set_defaults(func=cmd_transfer_matrix)

    r = sub.add_parser("reproduce", help="scripted experiments with trend checks")
    r.add_argument("--experiment", required=True, choices=harness.EXPERIMENTS)
    r.add_argument("--config", default=None, help="optional base config file")
    r.add_argument("--output-dir", default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
