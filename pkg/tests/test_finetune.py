import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lcbyol import finetune as F
from lcbyol import gradcore as gc
from lcbyol.assess import REFERENCE_COUNTS
from lcbyol.nets import Encoder, EncoderConfig

SMALL = EncoderConfig((8, 8, 16, 16, 16), (1, 1, 1, 1))


def one_hot_probs(labels, c=8, p=1.0):
    labels = torch.as_tensor(labels)
    probs = torch.full((*labels.shape, c), (1 - p) / (c - 1), dtype=torch.float64)
    probs.scatter_(-1, (labels - 1).clamp(min=0).unsqueeze(-1), p)
    return probs.movedim(-1, 1)


def test_focal_examples():
    labels = torch.tensor([[[1, 3], [8, 2]]])
    assert float(F.focal_loss(one_hot_probs(labels), labels)) == 0.0
    probs = torch.tensor([0.5, 0.5], dtype=torch.float64).view(1, 2, 1, 1)
    got = F.focal_loss(probs, torch.tensor([[[1]]]))
    assert float(got) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert round(float(got), 6) == 0.173287


def test_focal_gamma_zero_is_cross_entropy(rng):
    logits = torch.from_numpy(rng.standard_normal((2, 8, 4, 4)))
    labels = torch.from_numpy(rng.integers(0, 9, (2, 4, 4)))
    probs = torch.softmax(logits, 1)
    got = F.focal_loss(probs, labels, F.FocalConfig(gamma=0))
    valid = labels > 0
    ce = torch.nn.functional.nll_loss(torch.log(probs), (labels - 1).clamp(min=0), reduction="none")[valid].mean()
    assert abs(float(got) - float(ce)) < 1e-12


def test_focal_ignores_nodata():
    probs = one_hot_probs(torch.tensor([[[1, 2]]]), p=0.6)
    with pytest.warns(UserWarning, match="ignored"):
        assert float(F.focal_loss(probs, torch.zeros(1, 1, 2, dtype=torch.long))) == 0.0
    single = F.focal_loss(probs[..., :1], torch.tensor([[[1]]]))
    both = F.focal_loss(probs, torch.tensor([[[1, 0]]]))
    assert float(single) == float(both)
    with pytest.raises(ValueError):
        F.FocalConfig(gamma=-1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.019), st.floats(0, 5))
def test_focal_decreasing_in_pt(pt, step, gamma):
    cfg = F.FocalConfig(gamma)
    lab = torch.tensor([[[1]]])

    def loss(p):
        return float(F.focal_loss(torch.tensor([p, 1 - p], dtype=torch.float64).view(1, 2, 1, 1), lab, cfg))
    assert loss(pt) >= 0
    assert loss(pt + step) < loss(pt)


def test_macro_f1_examples():
    assert F.macro_f1(np.diag([3, 5, 7])) == 1.0
    assert F.macro_f1(np.array([[50, 0], [50, 0]])) == pytest.approx(1 / 3)
    assert round(F.macro_f1(REFERENCE_COUNTS) * 100, 2) == 75.58
    with pytest.warns(UserWarning, match="no samples"):
        assert F.macro_f1(np.array([[4, 0, 0], [0, 2, 0], [0, 0, 0]])) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        F.macro_f1(np.array([[3]]))


def test_cv_plan_construction():
    plan = F.CvPlan.build(4, 1)
    assert [r.train_folds for r in plan.runs] == [[1], [2], [3], [0]]
    assert [r.val_fold for r in plan.runs] == [0, 1, 2, 3]
    plan = F.CvPlan.build(4, 3)
    for r in plan.runs:
        assert r.val_fold not in r.train_folds and len(set(r.train_folds)) == 3
    with pytest.raises(ValueError):
        F.CvPlan.build(4, 4)
    with pytest.raises(ValueError):
        F.TrainLoop(plateau_patience=10, early_stop_patience=5)


def cube_patches(n_per_class, size=32, seed=0):
    """Single-class patches coloured by the corners of the RGB cube, plus mild noise."""
    rng = np.random.default_rng(seed)
    corners = np.array([[(c >> b) & 1 for b in range(3)] for c in range(8)], dtype=np.float64)
    xs, ys = [], []
    for c in range(8):
        for _ in range(n_per_class):
            img = 0.15 + 0.7 * corners[c][:, None, None] + rng.normal(0, 0.005, (3, size, size))
            xs.append(np.clip(img * 255, 0, 255).astype(np.uint8))
            ys.append(np.full((size, size), c + 1, dtype=np.uint8))
    return np.stack(xs), np.stack(ys)


def folds_of(n_per_class=2, n_folds=4):
    return {f: cube_patches(n_per_class, seed=f) for f in range(n_folds)}


def test_probe_on_separable_patches():
    torch.manual_seed(0)
    enc = Encoder(SMALL)
    loop = F.TrainLoop(max_epochs=80, batch_size=16, lr=5e-2, warmup_start_lr=5e-3, warmup_epochs=2,
                       plateau_patience=10, early_stop_patience=20, augment=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reports, models = F.train_probe(F.CvPlan.build(4, 1), enc, folds_of(), loop, runs=[0],
                                        recalibrate_bn=True)
    assert reports[0].macro_f1 > 0.95, reports[0].macro_f1
    probe = models[0]
    assert sum(p.numel() for p in probe.parameters() if p.requires_grad) == 16 * 8 + 8


def tiny_loop(**kw):
    base = dict(max_epochs=12, batch_size=8, lr=3e-3, warmup_start_lr=3e-4, warmup_epochs=2,
                plateau_patience=2, early_stop_patience=4, seed=5)
    return F.TrainLoop(**{**base, **kw})


def test_training_replay_and_best_checkpoint():
    x, y = cube_patches(2, seed=1)
    vx, vy = cube_patches(1, seed=2)
    loop = tiny_loop()
    torch.manual_seed(0)
    from lcbyol.nets import SegModel
    model = SegModel("FCN", SMALL)
    res = F.train_model(model, x, y, vx, vy, loop)
    assert res.best_val_loss == min(res.val_loss)
    assert res.best_epoch == int(np.argmin(res.val_loss))
    # the recorded lr and stop epoch follow from the validation history alone
    sched = loop.schedule()
    assert res.lr == [gc.lr_at(sched, e, res.val_loss[:e]) for e in range(len(res.lr))]
    stop = next((e for e in range(len(res.val_loss))
                 if gc.epochs_since_improvement(res.val_loss[:e + 1], loop.min_delta) >= 4), loop.max_epochs - 1)
    assert res.stopped_epoch == stop and len(res.val_loss) == stop + 1
    torch.testing.assert_close(torch.tensor(F.validation_loss(res.model, vx, vy, F.FocalConfig())),
                               torch.tensor(res.best_val_loss), rtol=1e-6, atol=1e-7)


def test_run_cv_reproducible_and_leak_free(tmp_path):
    folds = folds_of(1)
    loop = tiny_loop(max_epochs=3)
    plan = F.CvPlan.build(4, 2)
    a, _ = F.run_cv(plan, "UNET", folds, loop, encoder_config=SMALL, out_dir=tmp_path, runs=[0, 3])
    b, _ = F.run_cv(plan, "UNET", folds, loop, encoder_config=SMALL, runs=[0, 3])
    assert [r.val_loss for r in a] == [r.val_loss for r in b]
    assert [r.macro_f1 for r in a] == [r.macro_f1 for r in b]
    assert a[1].train_folds == [0, 1] and a[1].val_fold == 3
    assert (tmp_path / "run0" / "manifest.json").exists()
    doc = F.write_cv_report(tmp_path / "cv_report.json", a, {"arch": "UNET"})
    assert len(doc["runs"]) == 2 and doc["runs"][0]["checkpoint"].endswith("run0")
    with pytest.raises(ValueError, match="missing"):
        F.run_cv(plan, "UNET", {0: folds[0]}, loop, encoder_config=SMALL)


def test_seen_ids_exclude_validation_fold():
    folds = folds_of(1)
    plan = F.CvPlan.build(4, 3)
    x, y, ids = F._collect(folds, plan.runs[2].train_folds)
    res = F.train_model(__import__("lcbyol.nets", fromlist=["SegModel"]).SegModel("FCN", SMALL),
                        x, y, *folds[2], tiny_loop(max_epochs=1), train_ids=ids)
    assert {f for f, _ in res.seen_ids} == {0, 1, 3}
    assert len(res.seen_ids) == len(x)


def test_encoder_is_unfrozen_for_finetuning():
    enc = Encoder(SMALL)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    _, models = F.run_cv(F.CvPlan.build(4, 1), "UNET", folds_of(1), tiny_loop(max_epochs=2), enc, SMALL, runs=[0])
    after = models[0].encoder.state_dict()
    assert any(not torch.equal(before[k], after[k]) for k in before if before[k].is_floating_point())
    # the source encoder itself is not modified
    assert all(torch.equal(v, enc.state_dict()[k]) for k, v in before.items())


def test_prefetch_order_and_errors():
    assert list(F.prefetch(iter(range(10)), depth=2)) == list(range(10))

    def broken():
        yield 1
        raise RuntimeError("boom")
    with pytest.raises(RuntimeError, match="boom"):
        list(F.prefetch(broken()))
