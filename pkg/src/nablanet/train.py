"""Training, evaluation and prediction loops."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from nablanet import data as D
from nablanet.checkpoint import load_checkpoint, save_checkpoint, transfer_load
from nablanet.config import RunConfig
from nablanet.metrics import (
    MetricsReport,
    binarize,
    classification_report,
    confusion_counts,
    evaluate_dataset,
    reports_to_csv,
)
from nablanet.models import Model, build_model
from nablanet.optim import bce_loss, cce_loss, make_optimizer
from nablanet.render import overlay
from nablanet.tensor import Tape, Tensor, backward, no_grad, zero_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_accuracy", "train_dice", "val_accuracy", "val_dice")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


@dataclass
class TrainResult:
    model: Model
    log: TrainLog
    checkpoint: Optional[Path]
    train_records: list
    val_records: list


def resolve_dataset(cfg: RunConfig) -> list:
    if cfg.data_dir:
        records = D.load_dataset_dir(cfg.data_dir)
    elif cfg.synth_n > 0:
        task = "segment" if cfg.task == "segment" else "classify"
        records = D.synth_lesions(cfg.synth_n, cfg.synth_size, cfg.classes, cfg.synth_seed, task)
    else:
        raise TrainingError("no dataset: set data_dir or synth_n")
    if not records:
        raise TrainingError("dataset is empty")
    if cfg.task == "segment" and not isinstance(records[0], D.SegRecord):
        raise TrainingError("segment task needs image/mask records")
    if cfg.task == "classify" and not isinstance(records[0], D.ClsRecord):
        raise TrainingError("classify task needs labelled records")
    return records


def prepare_records(records: Sequence, size: int) -> list:
    return [r if r.image.shape[:2] == (size, size) else D.resize_record(r, size) for r in records]


def _batch_scores(task: str, out: np.ndarray, y: np.ndarray) -> tuple:
    """(correct, total, ConfusionCounts or None) for one batch."""
    if task == "segment":
        pred = binarize(out)
        c = confusion_counts(pred, y.astype(np.uint8))
        return c.tp + c.tn, c.total, c
    labels = out.reshape(out.shape[0], -1).argmax(axis=1)
    return int(np.sum(labels == y)), len(y), None


def _dice(counts) -> float:
    den = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if den == 0 else 2 * counts.tp / den


def predict_batch(model: Model, x: Tensor, mode: str = "infer") -> np.ndarray:
    with no_grad():
        return model.forward(x, mode).data


def score_records(model: Model, records: Sequence, batch_size: int = 8, mode: str = "infer") -> dict:
    """Accuracy (pixel or sample) and, for segmentation, micro Dice."""
    task = "segment" if model.spec.family == "nabla" else "classify"
    correct = total = 0
    counts = None
    for x, y in D.make_batches(records, batch_size, shuffle=False, channels=model.spec.in_channels):
        out = predict_batch(model, x, mode)
        c, t, cc = _batch_scores(task, out, y)
        correct, total = correct + c, total + t
        if cc is not None:
            counts = cc if counts is None else counts + cc
    return {"accuracy": correct / total, "dice": _dice(counts) if counts is not None else float("nan")}


def train(cfg: RunConfig, records: Optional[list] = None, write: bool = True) -> TrainResult:
    """Run the configured recipe; writes log.csv and checkpoints under ``cfg.output_dir``."""
    spec = cfg.model_spec()
    records = prepare_records(records if records is not None else resolve_dataset(cfg), spec.input_size)
    out_dir = Path(cfg.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")

    if cfg.train_fraction is not None or cfg.train_count is not None:
        plan = D.split(records, cfg.train_fraction or 0.8, cfg.seed, cfg.train_count)
        records, test = plan.partition(records)
        if write:
            (out_dir / "split.json").write_text(json.dumps({"train": plan.train_ids, "test": plan.test_ids}, indent=1))
    val: list = []
    if cfg.val_fraction > 0 and len(records) > 1:
        sub = D.split(records, 1 - cfg.val_fraction, cfg.seed + 1)
        if sub.test_ids:
            records, val = sub.partition(records)
    train_records = D.augment_flips(records) if cfg.augment else list(records)

    model = build_model(spec)
    if cfg.transfer_from:
        rep = transfer_load(model, cfg.transfer_from)
        log.info("transfer: loaded %d tensors, skipped %d", len(rep.loaded), len(rep.skipped))
        if rep.warning:
            log.warning(rep.warning)
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum)
    loss_fn = bce_loss if cfg.loss == "bce" else cce_loss

    train_log = TrainLog()
    best_score, last_ckpt = -np.inf, None
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        opt.lr = lr
        loss_sum = seen = correct = total = 0
        counts = None
        for b, (x, y) in enumerate(
            D.make_batches(train_records, cfg.batch_size, cfg.seed, epoch, channels=spec.in_channels)
        ):
            zero_grad(params)
            with Tape() as tape:
                out = model.forward(x, "train")
                loss = loss_fn(out, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            backward(tape, loss)
            opt.step()
            n = x.shape[0]
            loss_sum += value * n
            seen += n
            c, t, cc = _batch_scores(cfg.task, out.data, y)
            correct, total = correct + c, total + t
            if cc is not None:
                counts = cc if counts is None else counts + cc
        row = dict(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / seen,
            train_accuracy=correct / total,
            train_dice=_dice(counts) if counts is not None else float("nan"),
            val_accuracy=float("nan"),
            val_dice=float("nan"),
        )
        if val:
            s = score_records(model, val, cfg.batch_size)
            row["val_accuracy"], row["val_dice"] = s["accuracy"], s["dice"]
        train_log.append(**row)
        log.info("epoch %d lr %.3g loss %.4f acc %.4f", epoch, lr, row["train_loss"], row["train_accuracy"])

        if write:
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"epoch_{epoch + 1:04d}.nbln", epoch + 1, opt)
            score = row["val_dice"] if cfg.task == "segment" else row["val_accuracy"]
            if val and score > best_score:
                best_score = score
                save_checkpoint(model, out_dir / "best.nbln", epoch + 1, opt)
            (out_dir / "log.csv").write_text(train_log.to_csv())
    if write:
        last_ckpt = save_checkpoint(model, out_dir / "final.nbln", cfg.epochs, opt)
        (out_dir / "log.csv").write_text(train_log.to_csv())
    return TrainResult(model, train_log, last_ckpt, train_records, val)


@dataclass
class EvalResult:
    task: str
    reports: list = field(default_factory=list)  # segmentation: micro + per-image-mean
    classification: Optional[object] = None

    def to_csv(self) -> str:
        if self.task == "segment":
            return reports_to_csv(self.reports)
        return self.classification.to_csv()

    @property
    def micro(self) -> Optional[MetricsReport]:
        return self.reports[0] if self.reports else None


def evaluate_model(model: Model, records: Sequence, batch_size: int = 8, mode: str = "infer") -> EvalResult:
    records = prepare_records(records, model.spec.input_size)
    if not records:
        raise ValueError("evaluate: empty dataset")
    seg = model.spec.family == "nabla"
    if seg != isinstance(records[0], D.SegRecord):
        raise ValueError(f"evaluate: {model.spec.family} checkpoint does not match the dataset's task")
    preds, gts = [], []
    for x, y in D.make_batches(records, batch_size, shuffle=False, channels=model.spec.in_channels):
        out = predict_batch(model, x, mode)
        if seg:
            preds += list(binarize(out)[:, 0])
            gts += list(y[:, 0].astype(np.uint8))
        else:
            preds += list(out.reshape(out.shape[0], -1).argmax(axis=1))
            gts += list(y)
    if seg:
        return EvalResult(
            "segment",
            [evaluate_dataset(preds, gts, "micro"), evaluate_dataset(preds, gts, "per-image-mean")],
        )
    return EvalResult("classify", classification=classification_report(preds, gts, model.spec.classes))


def evaluate(checkpoint, data_dir, split_file=None, task: Optional[str] = None) -> EvalResult:
    model, _ = load_checkpoint(checkpoint)
    if task is not None and (task == "segment") != (model.spec.family == "nabla"):
        raise ValueError(f"checkpoint holds a {model.spec.family} model, not a {task} model")
    records = D.load_dataset_dir(data_dir)
    if split_file:
        keep = set(json.loads(Path(split_file).read_text())["test"])
        records = [r for r in records if r.id in keep]
    return evaluate_model(model, records)


def predict(checkpoint, image_path, out_dir, gt_path=None, threshold: float = 0.5) -> dict:
    """Write ``<stem>_mask.png`` ({0, 255}) and ``<stem>_overlay.png``."""
    model, _ = load_checkpoint(checkpoint)
    if model.spec.family != "nabla":
        raise ValueError("predict needs a segmentation checkpoint")
    image = D.read_image(image_path)
    h, w = image.shape[:2]
    size = model.spec.input_size
    x = D.to_tensor_image(D.resize(image, (size, size)), model.spec.in_channels)[None]
    prob = predict_batch(model, Tensor(x))[0, 0]
    mask = D.resize(binarize(prob, threshold), (h, w), "nearest")
    gt = D.read_mask(gt_path) if gt_path else None
    if gt is not None and gt.shape != (h, w):
        gt = D.resize(gt, (h, w), "nearest")
    out_dir = Path(out_dir)
    stem = Path(image_path).stem
    mask_path = out_dir / f"{stem}_mask.png"
    overlay_path = out_dir / f"{stem}_overlay.png"
    D.write_png(mask_path, (mask * 255).astype(np.uint8))
    D.write_png(overlay_path, overlay(image, mask, gt))
    return {"mask": mask_path, "overlay": overlay_path}
