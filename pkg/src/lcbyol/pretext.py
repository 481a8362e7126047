"""BYOL self-distillation: online/target networks, cosine regression loss, EMA target."""
from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import gradcore as gc
from .augment import AugPolicy, augment_image, patch_rng
from .nets import ByolHeads, Encoder, EncoderConfig, global_pool, save_encoder

log = logging.getLogger(__name__)


class OnlineNet(nn.Module):
    def __init__(self, encoder: Encoder, heads: ByolHeads):
        super().__init__()
        self.encoder = encoder
        self.projector = heads.projector
        self.predictor = heads.predictor

    def project(self, x):
        return self.projector(global_pool(self.encoder(x)[-1]))

    def forward(self, x):
        return self.predictor(self.project(x))


class TargetNet(nn.Module):
    """Encoder + projector copy of the online network; never receives gradients."""

    def __init__(self, online: OnlineNet):
        super().__init__()
        self.encoder = copy.deepcopy(online.encoder)
        self.projector = copy.deepcopy(online.projector)
        for p in self.parameters():
            p.requires_grad_(False)
        for m in self.modules():
            if isinstance(m, gc.BatchNorm2d):
                m.update_running = False  # running stats come from the EMA only

    def forward(self, x):
        with torch.no_grad():
            return self.projector(global_pool(self.encoder(x)[-1]))


@dataclass
class EmaPair:
    online: OnlineNet
    target: TargetNet
    tau: float = 0.996

    @classmethod
    def create(cls, encoder_config: EncoderConfig | None = None, hidden=256, dim=64, encoder=None, tau=0.996):
        encoder = encoder or Encoder(encoder_config)
        heads = ByolHeads(encoder.config.stage_widths[-1], hidden, dim)
        online = OnlineNet(encoder, heads)
        return cls(online, TargetNet(online), tau)

    def shared_pairs(self):
        """(target, online) tensor pairs: parameters and batchnorm running statistics."""
        t = dict(self.target.named_parameters()) | dict(self.target.named_buffers())
        o = dict(self.online.named_parameters()) | dict(self.online.named_buffers())
        return [(t[k], o[k]) for k in t]


def byol_loss(p, z):
    """Mean of 2 - 2 cos(p_i, z_i); z is a constant target.

    A zero-norm row has its cosine defined as 0 (loss 2).
    """
    z = z.detach()
    if p.shape != z.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and target {tuple(z.shape)} differ in shape")
    pn = p.norm(dim=1)
    zn = z.norm(dim=1)
    degenerate = (pn == 0) | (zn == 0)
    if bool(degenerate.any()):
        warnings.warn(f"{int(degenerate.sum())} zero-norm vectors in BYOL loss; cosine taken as 0")
    denom = torch.where(degenerate, torch.ones_like(pn), pn * zn)
    cos = torch.where(degenerate, torch.zeros_like(pn), (p * z).sum(1) / denom)
    return (2 - 2 * cos.clamp(-1, 1)).mean()


@torch.no_grad()
def ema_update(pair: EmaPair, tau: float):
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for t, o in pair.shared_pairs():
        if t.shape != o.shape:
            raise ValueError(f"EMA shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
        if tau == 0.0:
            t.copy_(o)
        elif tau != 1.0:
            t.mul_(tau).add_(o, alpha=1 - tau)
    pair.tau = tau
    return pair


def tau_at(step, total_steps, tau_base=0.996):
    if total_steps <= 0:
        return 1.0
    step = min(max(step, 0), total_steps)
    return 1 - (1 - tau_base) * (math.cos(math.pi * step / total_steps) + 1) / 2


@dataclass
class PretrainConfig:
    epochs: int = 300
    base_lr: float = 1e-3
    warmup_epochs: int = 10
    batch_size: int = 4096
    microbatch: int = 256
    tau_base: float = 0.996
    weight_decay: float = 0.01
    symmetrize: bool = False
    hidden: int = 256
    dim: int = 64
    seed: int = 0
    policy: AugPolicy = field(default_factory=AugPolicy)

    def __post_init__(self):
        if self.batch_size % self.microbatch:
            raise ValueError("batch size must be divisible by the microbatch size")


def directional_loss(pair: EmaPair, v1, v2):
    return byol_loss(pair.online(v1), pair.target(v2))


def batch_loss(pair: EmaPair, v1, v2, symmetrize=False):
    loss = directional_loss(pair, v1, v2)
    if symmetrize:
        loss = 0.5 * (loss + directional_loss(pair, v2, v1))
    return loss


def pretrain_step(pair: EmaPair, opt: gc.AdamW, microbatches, tau, symmetrize=False):
    """One optimiser step over accumulated microbatch gradients, then one EMA update.

    ``microbatches`` is a list of (v1, v2) tensors.  Returns the mean loss, or
    None when the step was skipped for a non-finite loss.
    """
    opt.zero_grad()
    losses = []
    for v1, v2 in microbatches:
        loss = batch_loss(pair, v1, v2, symmetrize)
        if not torch.isfinite(loss):
            log.warning("non-finite BYOL loss; step skipped")
            opt.zero_grad()
            return None
        gc.backward(loss, retain_graph=False)
        losses.append(loss.item())
    opt.step(grad_scale=1.0 / len(microbatches))
    ema_update(pair, tau)
    return float(np.mean(losses))


def make_views(images_u8, ids, policy, seed, epoch):
    v1, v2 = [], []
    for i in ids:
        rng = patch_rng(seed, epoch, i)
        img = images_u8[i].astype(np.float32) / 255.0
        v1.append(augment_image(img, policy, rng))
        v2.append(augment_image(img, policy, rng))
    return torch.from_numpy(np.stack(v1)), torch.from_numpy(np.stack(v2))


@torch.no_grad()
def evaluate_loss(pair: EmaPair, images_u8, policy, seed, microbatch=256, symmetrize=False):
    """Eval-mode BYOL loss on fixed views; parameters and statistics are untouched."""
    was = pair.online.training, pair.target.training
    pair.online.eval()
    pair.target.eval()
    total, n = 0.0, 0
    try:
        for s in range(0, len(images_u8), microbatch):
            ids = range(s, min(s + microbatch, len(images_u8)))
            v1, v2 = make_views(images_u8, ids, policy, seed, -1)
            total += float(batch_loss(pair, v1, v2, symmetrize)) * len(ids)
            n += len(ids)
    finally:
        pair.online.train(was[0])
        pair.target.train(was[1])
    return total / max(n, 1)


@dataclass
class PretrainResult:
    pair: EmaPair
    history: list  # rows (epoch, train_loss, val_loss)
    best_epoch: int
    skipped_steps: int = 0


def pretrain(images_u8, val_images_u8, config: PretrainConfig, encoder_config=None, out_dir=None,
             init_encoder: Encoder | None = None, meta=None) -> PretrainResult:
    """Run BYOL on unlabeled (N, 3, H, W) uint8 patches.

    Writes ``encoder_final``/``encoder_best`` checkpoints and
    ``pretrain_history.csv`` to ``out_dir`` when given.
    """
    n = len(images_u8)
    if n == 0:
        raise ValueError("pretraining dataset is empty")
    torch.manual_seed(config.seed)
    pair = EmaPair.create(encoder_config, config.hidden, config.dim, encoder=init_encoder,
                          tau=config.tau_base)
    opt = gc.AdamW(pair.online.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
    schedule = gc.LrSchedule("cosine", config.warmup_epochs, config.base_lr, 0.0, config.epochs)
    batch = min(config.batch_size, n)
    micro = min(config.microbatch, batch)
    steps_per_epoch = math.ceil(n / batch)
    total_steps = steps_per_epoch * config.epochs
    rng = np.random.default_rng(config.seed)
    history, best, best_epoch, best_state, step, skipped = [], math.inf, -1, None, 0, 0
    pair.online.train()
    pair.target.train()
    for epoch in range(config.epochs):
        opt.lr = gc.lr_at(schedule, epoch)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch):
            ids = order[s:s + batch]
            if len(ids) < 2:
                continue  # batchnorm needs at least two samples
            v1, v2 = make_views(images_u8, ids, config.policy, config.seed, epoch)
            mbs = [(v1[j:j + micro], v2[j:j + micro]) for j in range(0, len(ids), micro)]
            if len(mbs) > 1 and len(mbs[-1][0]) < 2:
                mbs[-2] = (torch.cat([mbs[-2][0], mbs[-1][0]]), torch.cat([mbs[-2][1], mbs[-1][1]]))
                mbs.pop()
            loss = pretrain_step(pair, opt, mbs, tau_at(step, total_steps, config.tau_base), config.symmetrize)
            step += 1
            if loss is None:
                skipped += 1
            else:
                losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = (evaluate_loss(pair, val_images_u8, config.policy, config.seed, config.microbatch,
                                  config.symmetrize) if len(val_images_u8) else math.nan)
        history.append((epoch, train_loss, val_loss))
        log.info("pretrain epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        score = val_loss if not math.isnan(val_loss) else train_loss
        if score < best:
            best, best_epoch = score, epoch
            best_state = copy.deepcopy(pair.online.encoder.state_dict())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(meta or {})
        save_encoder(pair.online.encoder, out / "encoder_final", {**meta, "epoch": config.epochs - 1})
        best_enc = copy.deepcopy(pair.online.encoder)
        if best_state is not None:
            best_enc.load_state_dict(best_state)
        save_encoder(best_enc, out / "encoder_best", {**meta, "epoch": best_epoch})
        write_history(out / "pretrain_history.csv", history)
    return PretrainResult(pair, history, best_epoch, skipped)


def write_history(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in rows:
            w.writerow([epoch, f"{tr:.8f}", f"{va:.8f}"])
