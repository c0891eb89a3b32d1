"""Command-line entry point: train, evaluate, predict, inspect, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from nablanet import data as D
from nablanet.checkpoint import read_checkpoint
from nablanet.config import RunConfig
from nablanet.models import build_model, count_params, layer_shapes


def _cmd_train(args) -> int:
    from nablanet.train import train

    cfg = RunConfig.load(args.config, args.override)
    result = train(cfg)
    last = result.log.rows[-1] if result.log.rows else {}
    print(f"checkpoint: {result.checkpoint}")
    print(f"epochs: {len(result.log.rows)}")
    if last:
        print(f"final_train_loss: {last['train_loss']:.6f}")
        print(f"final_train_accuracy: {last['train_accuracy']:.6f}")
    return 0


def _cmd_evaluate(args) -> int:
    from nablanet.train import evaluate

    result = evaluate(args.checkpoint, args.data, args.split, args.task)
    text = result.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _cmd_predict(args) -> int:
    from nablanet.train import predict

    paths = predict(args.checkpoint, args.image, args.out, args.gt, args.threshold)
    for key, p in paths.items():
        print(f"{key}: {p}")
    return 0


def recipe_lines(cfg: RunConfig) -> list:
    lines = [
        f"task: {cfg.task}",
        f"optimizer: {cfg.optimizer}",
        f"lr: {cfg.lr!r}",
    ]
    if cfg.optimizer == "sgd":
        lines.append(f"momentum: {cfg.momentum!r}")
    lines += [
        f"epochs: {cfg.epochs}",
        f"batch_size: {cfg.batch_size}",
        f"loss: {cfg.loss}",
    ]
    drops = cfg.lr_milestones()
    if drops:
        lines.append(f"lr_drops_at: {','.join(str(e) for e in drops)}")
        lines.append(f"lr_drop_factor: {cfg.lr_step_factor:g}")
    else:
        lines.append("lr_schedule: constant")
    return lines


def _cmd_inspect(args) -> int:
    if args.checkpoint:
        ckpt = read_checkpoint(args.checkpoint)
        spec = ckpt.spec
        print(f"checkpoint_epoch: {ckpt.epoch}")
        print(f"tensors: {len(ckpt.entries)}")
    else:
        cfg = RunConfig.load(args.config)
        for line in recipe_lines(cfg):
            print(line)
        spec = cfg.model_spec()
    model = build_model(spec)
    print(f"spec: {spec.to_json()}")
    print(f"parameters: {count_params(model)}")
    if not args.brief:
        for name, shape in layer_shapes(model):
            print(f"  {name} {'x'.join(str(s) for s in shape)}")
    return 0


def _cmd_synth(args) -> int:
    records = D.synth_lesions(args.n, args.size, args.classes, args.seed, args.task)
    if args.task == "segment":
        D.write_segmentation_dataset(records, args.out)
    else:
        D.write_classification_dataset(records, args.out)
    print(f"records: {len(records)}")
    print(f"out: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nablanet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", help="split.json written by train; restricts to its test ids")
    e.add_argument("--task", choices=("segment", "classify"))
    e.add_argument("--out", help="also write the CSV report here")
    e.set_defaults(func=_cmd_evaluate)

    pr = sub.add_parser("predict", help="write a binary mask and contour overlay for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--gt")
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.set_defaults(func=_cmd_predict)

    i = sub.add_parser("inspect", help="print spec, recipe, parameter count and layer shapes")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    i.add_argument("--brief", action="store_true", help="omit per-layer shapes")
    i.set_defaults(func=_cmd_inspect)

    s = sub.add_parser("synth", help="write a synthetic lesion dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--task", choices=("segment", "classify"), default="segment")
    s.add_argument("--classes", type=int, default=7)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line error contract
        msg = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
