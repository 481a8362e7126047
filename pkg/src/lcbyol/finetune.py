"""Supervised fine-tuning and linear probing with focal loss and fold cross-validation."""
from __future__ import annotations

import copy
import json
import logging
import math
import queue
import threading
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import gradcore as gc
from .assess import ConfusionMatrix, evaluate_patches, per_class_f1
from .augment import AugPolicy, joint_augment, patch_rng
from .nets import Encoder, LinearProbe, SegModel, recalibrate_batchnorm, save_probe, save_segmodel

log = logging.getLogger(__name__)


@dataclass
class FocalConfig:
    gamma: float = 2.0
    ignore_index: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def focal_loss(probs, labels, config: FocalConfig | None = None, reduction="mean"):
    """Mean over labeled pixels of -(1 - p_t)^gamma * log(p_t).

    ``labels`` hold class codes 1..C (0 ignored); p_t is clamped to [1e-7, 1].
    With ``reduction="sum"`` the pixel sum and count are returned instead.
    """
    config = config or FocalConfig()
    labels = torch.as_tensor(labels).long()
    valid = labels != config.ignore_index
    idx = (labels - 1).clamp(min=0).unsqueeze(1)
    pt = probs.gather(1, idx).squeeze(1).clamp(1e-7, 1.0)
    if config.gamma == 0:
        per_pixel = -torch.log(pt)
    else:
        per_pixel = -((1 - pt) ** config.gamma) * torch.log(pt)
    per_pixel = torch.where(valid, per_pixel, torch.zeros_like(per_pixel))
    count = int(valid.sum())
    if reduction == "sum":
        return per_pixel.sum(), count
    if count == 0:
        warnings.warn("every pixel is ignored; focal loss is 0")
        return per_pixel.sum() * 0.0
    return per_pixel.sum() / count


def macro_f1(confusion) -> float:
    """Unweighted mean over classes of 2TP / (2TP + FP + FN); empty classes add 0."""
    cm = confusion if isinstance(confusion, ConfusionMatrix) else ConfusionMatrix(np.asarray(confusion))
    if cm.n_classes < 2:
        raise ValueError("macro F1 needs at least two classes")
    tp = np.diag(cm.counts)
    empty = (2 * tp + (cm.counts.sum(0) - tp) + (cm.counts.sum(1) - tp)) == 0
    if empty.any():
        warnings.warn(f"{int(empty.sum())} classes have no samples or predictions; they contribute F1 = 0")
    return float(per_class_f1(cm).mean())


# ---------------------------------------------------------------- plans and loops


@dataclass
class CvRun:
    index: int
    train_folds: list
    val_fold: int


@dataclass
class CvPlan:
    n_folds: int
    n_train_folds: int
    runs: list

    @classmethod
    def build(cls, n_folds=4, n_train_folds=1):
        """Run i validates on fold i and trains on folds i+1..i+N (cyclic)."""
        if not 1 <= n_train_folds < n_folds:
            raise ValueError(f"need 1 <= training folds < {n_folds}")
        runs = [CvRun(i, [(i + j) % n_folds for j in range(1, n_train_folds + 1)], i) for i in range(n_folds)]
        return cls(n_folds, n_train_folds, runs)


@dataclass
class TrainLoop:
    max_epochs: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    warmup_start_lr: float = 1e-5
    warmup_epochs: int = 10
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    early_stop_patience: int = 50
    min_delta: float = 1e-6
    weight_decay: float = 0.01
    gamma: float = 2.0
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.early_stop_patience < self.plateau_patience:
            raise ValueError("early-stop patience must be >= plateau patience")

    def schedule(self):
        return gc.LrSchedule("plateau", self.warmup_epochs, self.lr, 0.0, self.max_epochs,
                             self.warmup_start_lr, self.plateau_patience, self.plateau_factor, self.min_delta)


@dataclass
class TrainResult:
    model: torch.nn.Module
    train_loss: list
    val_loss: list
    lr: list
    best_epoch: int
    stopped_epoch: int
    seen_ids: set = field(default_factory=set)

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch] if self.val_loss else math.nan


def _probs(model, x):
    return torch.softmax(model(x), dim=1)


def prefetch(iterable, depth=2):
    """Iterate ``iterable`` from a background thread through a bounded queue."""
    q = queue.Queue(maxsize=depth)
    done = object()

    def produce():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def validation_loss(model, images_u8, labels, focal: FocalConfig, batch=16):
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(images_u8), batch):
            x = torch.from_numpy(images_u8[s:s + batch].astype(np.float32) / 255.0)
            loss, n = focal_loss(_probs(model, x), torch.from_numpy(labels[s:s + batch]), focal, "sum")
            total += loss.item()
            count += n
    return total / max(count, 1)


def train_model(model, train_images, train_labels, val_images, val_labels, loop: TrainLoop,
                policy: AugPolicy | None = None, train_ids=None) -> TrainResult:
    """Train ``model`` (trainable parameters only) and return it at its best validation loss."""
    policy = policy or AugPolicy()
    focal = FocalConfig(loop.gamma)
    torch.manual_seed(loop.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = gc.AdamW(params, lr=loop.lr, weight_decay=loop.weight_decay)
    schedule = loop.schedule()
    n = len(train_images)
    ids = list(train_ids) if train_ids is not None else list(range(n))
    rng = np.random.default_rng(loop.seed)
    tr_hist, va_hist, lr_hist = [], [], []
    best, best_epoch, best_state, stopped = math.inf, -1, None, loop.max_epochs - 1
    seen = set()

    def batches(epoch, order):
        for s in range(0, n, loop.batch_size):
            batch = order[s:s + loop.batch_size]
            if len(batch) < 2 and n >= 2:
                continue  # batchnorm needs two samples
            xs, ys = [], []
            for i in batch:
                img = train_images[i].astype(np.float32) / 255.0
                if loop.augment:
                    img, lab = joint_augment(img, train_labels[i], policy, patch_rng(loop.seed, epoch, ids[i]))
                else:
                    lab = train_labels[i]
                xs.append(img)
                ys.append(lab)
            yield [ids[i] for i in batch], torch.from_numpy(np.stack(xs)), torch.from_numpy(
                np.stack(ys).astype(np.int64))

    for epoch in range(loop.max_epochs):
        opt.lr = gc.lr_at(schedule, epoch, va_hist)
        lr_hist.append(opt.lr)
        model.train()
        total, count = 0.0, 0
        for batch_ids, x, y in prefetch(batches(epoch, rng.permutation(n))):
            seen.update(batch_ids)
            opt.zero_grad()
            loss = focal_loss(_probs(model, x), y, focal)
            if not torch.isfinite(loss):
                log.warning("non-finite training loss at epoch %d; batch skipped", epoch)
                continue
            gc.backward(loss, retain_graph=False)
            opt.step()
            total += loss.item() * len(batch_ids)
            count += len(batch_ids)
        tr_hist.append(total / max(count, 1))
        va = validation_loss(model, val_images, val_labels, focal)
        va_hist.append(va)
        if va < best - loop.min_delta:
            best, best_epoch = va, epoch
            best_state = copy.deepcopy(model.state_dict())
        if gc.epochs_since_improvement(va_hist, loop.min_delta) >= loop.early_stop_patience:
            stopped = epoch
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, tr_hist, va_hist, lr_hist, best_epoch, stopped, seen)


@dataclass
class RunReport:
    run: int
    train_folds: list
    val_fold: int
    best_epoch: int
    stopped_epoch: int
    best_val_loss: float
    val_loss: list
    train_loss: list
    macro_f1: float
    f1: list
    eval_source: str
    checkpoint: str | None = None


def _evaluate(model, eval_set, val_images, val_labels):
    predict = lambda x: _probs(model, x)  # noqa: E731
    if eval_set is not None:
        cm = evaluate_patches(predict, *eval_set)
        source = "eval-set"
    else:
        cm = evaluate_patches(predict, val_images, val_labels)
        source = "validation-fold"
    return cm, source


def _collect(folds, fold_ids):
    images = np.concatenate([folds[f][0] for f in fold_ids])
    labels = np.concatenate([folds[f][1] for f in fold_ids])
    ids = [(f, j) for f in fold_ids for j in range(len(folds[f][0]))]
    return images, labels, ids


def run_cv(plan: CvPlan, kind, folds, loop: TrainLoop, encoder_init=None, encoder_config=None,
           eval_set=None, out_dir=None, policy=None, n_classes=8, runs=None, probe_stages=None,
           recalibrate_bn=False, meta=None):
    """Train one model per run of ``plan``.

    ``folds`` maps fold id -> (images uint8, labels).  ``encoder_init`` is None
    (random) or a state dict / Encoder to start from.  ``kind="PROBE"`` trains a
    linear probe on the frozen encoder instead of a segmentation model; with
    ``recalibrate_bn`` its batchnorm statistics are first re-estimated on the
    run's training images.
    """
    missing = [f for f in range(plan.n_folds) if f not in folds]
    if missing:
        raise ValueError(f"fold data missing for folds {missing}")
    reports, models = [], []
    for run in plan.runs:
        if runs is not None and run.index not in runs:
            continue
        torch.manual_seed(loop.seed * 1000 + run.index)
        model = _build(kind, encoder_init, encoder_config, n_classes, probe_stages)
        tr_x, tr_y, tr_ids = _collect(folds, run.train_folds)
        va_x, va_y = folds[run.val_fold]
        if recalibrate_bn and kind == "PROBE":
            recalibrate_batchnorm(model.encoder, torch.from_numpy(tr_x.astype(np.float32) / 255.0))
        run_loop = TrainLoop(**{**asdict(loop), "seed": loop.seed * 1000 + run.index})
        res = train_model(model, tr_x, tr_y, va_x, va_y, run_loop, policy, tr_ids)
        if any(f == run.val_fold for f, _ in res.seen_ids):
            raise AssertionError("validation patches leaked into training batches")
        cm, source = _evaluate(model, eval_set, va_x, va_y)
        ckpt = None
        if out_dir is not None:
            ckpt = str(Path(out_dir) / f"run{run.index}")
            run_meta = {**(meta or {}), "run": run.index, "train_folds": run.train_folds,
                        "val_fold": run.val_fold}
            (save_probe if kind == "PROBE" else save_segmodel)(model, ckpt, run_meta)
        reports.append(RunReport(run.index, run.train_folds, run.val_fold, res.best_epoch, res.stopped_epoch,
                                 res.best_val_loss, res.val_loss, res.train_loss, macro_f1(cm),
                                 per_class_f1(cm).tolist(), source, ckpt))
        models.append(model)
        log.info("run %d: macro F1 %.4f (best epoch %d)", run.index, reports[-1].macro_f1, res.best_epoch)
    return reports, models


def _build(kind, encoder_init, encoder_config, n_classes, probe_stages=None):
    if kind == "PROBE":
        enc = Encoder(encoder_config)
        if encoder_init is not None:
            enc.load_state_dict(encoder_init.state_dict() if isinstance(encoder_init, torch.nn.Module)
                                else encoder_init)
        return LinearProbe(enc, n_classes, probe_stages or (4,))
    model = SegModel(kind, encoder_config, n_classes)
    if encoder_init is not None:
        model.encoder.load_state_dict(encoder_init.state_dict() if isinstance(encoder_init, torch.nn.Module)
                                      else encoder_init)
    return model


def train_probe(plan: CvPlan, encoder: Encoder, folds, loop: TrainLoop, eval_set=None, out_dir=None,
                policy=None, n_classes=8, runs=None, stages=(4,), recalibrate_bn=False, meta=None):
    """Linear probing: only the 1x1 classifier trains; the encoder stays frozen."""
    return run_cv(plan, "PROBE", folds, loop, encoder, encoder.config, eval_set, out_dir, policy, n_classes,
                  runs, stages, recalibrate_bn, meta)


def write_cv_report(path, reports, config=None):
    doc = {
        "config": config or {},
        "runs": [asdict(r) for r in reports],
        "mean_macro_f1": float(np.mean([r.macro_f1 for r in reports])) if reports else None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc
