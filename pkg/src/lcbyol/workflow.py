"""Glue between a RunConfig and the library: world, split plan, datasets and training settings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import strata
from .config import RunConfig
from .finetune import CvPlan, TrainLoop
from .nets import EncoderConfig
from .pretext import PretrainConfig
from .synth import SynthWorld, synth_world


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(tuple(cfg.encoder.widths), tuple(cfg.encoder.blocks))


def pretrain_config(cfg: RunConfig, seed=None) -> PretrainConfig:
    b = cfg.byol
    return PretrainConfig(b.epochs, b.base_lr, b.warmup_epochs, b.batch_size, b.microbatch, b.tau_base,
                          b.weight_decay, b.symmetrize, b.hidden, b.dim,
                          cfg.seeds.pretrain if seed is None else seed, b.augment.policy())


def train_loop(cfg: RunConfig, probe=False, seed=None) -> TrainLoop:
    f = cfg.finetune
    lr = f.probe_lr if probe else f.lr
    start = f.warmup_start_lr * (lr / f.lr)
    return TrainLoop(f.max_epochs, f.batch_size, lr, start, f.warmup_epochs, f.plateau_patience,
                     f.plateau_factor, f.early_stop_patience, f.min_delta, f.weight_decay, f.gamma,
                     cfg.seeds.finetune if seed is None else seed, f.augment and not probe)


def cv_plan(cfg: RunConfig) -> CvPlan:
    return CvPlan.build(cfg.dataset.n_folds, cfg.finetune.n_train_folds)


def make_world(cfg: RunConfig, seed=None) -> SynthWorld:
    return synth_world(cfg.seeds.world if seed is None else seed, cfg.dataset.world_size, cfg.dataset.ref_res)


@dataclass
class Sample:
    grid: strata.PatchGrid
    plan: strata.SplitPlan
    summary: strata.StrataSummary
    point_labels: list


def sample(cfg: RunConfig, reference, ref_res, truth=None, width=None, height=None, seed=None,
           grid=None, features=None) -> Sample:
    """Grid, stratify and split; assessment points are labeled from ``truth`` when given."""
    d = cfg.dataset
    if truth is not None:
        height, width = truth.shape
    if grid is None:
        grid = strata.grid_cells((width, height), d.patch, d.grid_stride)
    sc = strata.StratifyConfig(d.n_strata, d.samples_per_stratum, d.n_folds, d.pca_threshold,
                               cfg.seeds.sample if seed is None else seed)
    rule = strata.ExclusionRule(d.min_dist_patch, d.min_dist_point)
    plan, summary = strata.stratified_plan(grid, reference, ref_res, sc, rule, d.n_points,
                                           (d.pretrain_fraction, d.pretrain_val_fraction), d.split_basis,
                                           d.n_classes, features=features)
    labels = [int(truth[r, c]) for r, c in plan.points] if truth is not None else []
    return Sample(grid, plan, summary, labels)


def held_out_ids(s: Sample):
    """Valid candidates used by neither the folds nor pretraining."""
    used = set(s.plan.labeled_ids) | set(s.plan.pretrain_ids) | set(s.plan.pretrain_val_ids)
    return [i for i in np.flatnonzero(s.grid.valid) if int(i) not in used]


def fold_arrays(s: Sample, image, truth):
    return {f: (strata.extract_cells(image, s.grid, ids), strata.extract_cells(truth, s.grid, ids))
            for f, ids in enumerate(s.plan.folds)}
