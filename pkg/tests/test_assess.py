import json
import warnings

import numpy as np
import pytest
import torch

from lcbyol import assess as A
from lcbyol.finetune import macro_f1

FINAL_F1 = [92.91, 75.83, 69.85, 67.77, 94.93, 78.40, 78.00, 46.96]


@pytest.fixture
def reference_matrix():
    return A.ConfusionMatrix(A.REFERENCE_COUNTS)


def test_reference_matrix_metrics(reference_matrix):
    assert reference_matrix.total == 25000 and np.trace(reference_matrix.counts) == 21785
    assert A.overall_accuracy(reference_matrix) == pytest.approx(0.8714, abs=5e-5)
    pa, ua = A.producers_accuracy(reference_matrix), A.users_accuracy(reference_matrix)
    assert pa[0] == pytest.approx(511 / 572) and round(pa[0] * 100, 2) == 89.34
    assert round(pa[7] * 100, 2) == 32.29
    assert round(ua[0] * 100, 2) == 96.78 and round(ua[6] * 100, 2) == 65.91
    rep = A.report(reference_matrix)
    assert round(rep.macro_f1 * 100, 2) == 75.58
    assert round(rep.mean_producers_accuracy * 100, 2) == 75.60
    assert round(rep.mean_users_accuracy * 100, 2) == 80.18
    np.testing.assert_allclose(np.array(rep.f1) * 100, FINAL_F1, atol=0.005)


def test_identities(reference_matrix):
    pa, ua, f1 = (np.array(v) for v in (A.producers_accuracy(reference_matrix), A.users_accuracy(reference_matrix),
                                         A.per_class_f1(reference_matrix)))
    np.testing.assert_allclose(f1, 2 * pa * ua / (pa + ua), atol=1e-12)
    perm = np.random.default_rng(0).permutation(8)
    shuffled = A.ConfusionMatrix(reference_matrix.counts[np.ix_(perm, perm)])
    assert A.overall_accuracy(shuffled) == A.overall_accuracy(reference_matrix)
    assert macro_f1(shuffled) == pytest.approx(macro_f1(reference_matrix), abs=1e-15)
    np.testing.assert_allclose(A.per_class_f1(shuffled), f1[perm])


def test_trivial_matrices():
    eye = A.ConfusionMatrix(np.eye(8, dtype=int) * 3)
    rep = A.report(eye)
    assert rep.overall_accuracy == rep.macro_f1 == rep.mean_producers_accuracy == rep.mean_users_accuracy == 1.0
    off = A.ConfusionMatrix(np.ones((3, 3), dtype=int) - np.eye(3, dtype=int))
    assert A.overall_accuracy(off) == 0.0
    col = np.zeros((3, 3), dtype=int)
    col[1, 1] = 4
    col[0, 0] = 1
    assert A.users_accuracy(A.ConfusionMatrix(col))[1] == 1.0
    with pytest.raises(ValueError):
        A.ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        A.ConfusionMatrix(-np.eye(2))


def test_absent_class_reported_as_na():
    counts = np.array([[5, 1, 0], [2, 3, 0], [0, 0, 0]])
    cm = A.ConfusionMatrix(counts)
    with pytest.warns(UserWarning):
        rep = A.report(cm)
    assert np.isnan(rep.producers_accuracy[2])
    assert rep.to_dict()["producers_accuracy"][2] is None
    assert "n/a" in A.format_table(cm, rep)


def test_from_labels_and_addition():
    cm = A.ConfusionMatrix.from_labels([1, 2, 2, 0, 3], [1, 2, 3, 5, 3], 3)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    assert (cm + cm).total == 8
    with pytest.raises(ValueError):
        A.ConfusionMatrix.from_labels([1], [4], 3)


def test_load_matrix_formats(tmp_path, reference_matrix):
    (tmp_path / "m.json").write_text(json.dumps({"confusion_matrix": reference_matrix.counts.tolist()}))
    (tmp_path / "rows.json").write_text(json.dumps(reference_matrix.counts.tolist()))
    (tmp_path / "m.csv").write_text("\n".join(",".join(map(str, r)) for r in reference_matrix.counts))
    for name in ("m.json", "rows.json", "m.csv"):
        assert np.array_equal(A.load_matrix(tmp_path / name).counts, reference_matrix.counts)


def test_write_assessment(tmp_path, reference_matrix):
    A.write_assessment(tmp_path, reference_matrix, {"config_hash": "abc"})
    doc = json.loads((tmp_path / "assessment.json").read_text())
    assert doc["config_hash"] == "abc" and doc["metrics"]["total"] == 25000
    text = (tmp_path / "assessment.txt").read_text()
    assert "87.14%" in text and "Open Water" in text


def test_constant_predictor_on_reference_matrix_marginals(reference_matrix):
    rows = reference_matrix.counts.sum(1)
    truth = np.repeat(np.arange(1, 9), rows)
    cm = A.ConfusionMatrix.from_labels(truth, np.full_like(truth, 5))
    assert np.array_equal(cm.counts[:, 4], rows) and cm.counts.sum() == cm.counts[:, 4].sum()


def test_extract_centered(rng):
    img = rng.random((3, 10, 12))
    w = A.extract_centered(img, 5, 6, 4)
    assert np.array_equal(w, img[:, 3:7, 4:8])
    assert w[:, 2, 2].tolist() == img[:, 5, 6].tolist()
    edge = A.extract_centered(img, 0, 0, 4)
    assert edge.shape == (3, 4, 4) and edge[0, 2, 2] == img[0, 0, 0]
    assert edge[0, 1, 2] == img[0, 0, 0] and edge[0, 0, 2] == img[0, 1, 0]


class Pixelwise:
    def __init__(self, c=8):
        self.w = torch.randn(c, 3, generator=torch.Generator().manual_seed(0)) * 4

    def __call__(self, x):
        return torch.softmax(torch.einsum("ck,nkhw->nchw", self.w, x), dim=1)


def test_points_raster_and_model_agree(rng):
    img = rng.integers(0, 256, (3, 40, 50)).astype(np.uint8)
    model = Pixelwise()
    with torch.no_grad():
        raster = (model(torch.from_numpy(img.astype(np.float32) / 255)[None])[0].argmax(0) + 1).numpy()
    points = [(int(r), int(c)) for r, c in zip(rng.integers(0, 40, 30), rng.integers(0, 50, 30))]
    labels = rng.integers(1, 9, 30).tolist()
    a, _ = A.evaluate_points(points, labels, class_raster=raster)
    b, _ = A.evaluate_points(points, labels, model=model, image=img, patch=16)
    assert np.array_equal(a.counts, b.counts) and a.total == 30
    perfect, _ = A.evaluate_points(points, [int(raster[r, c]) for r, c in points], class_raster=raster)
    assert np.trace(perfect.counts) == 30


def test_points_outside_are_skipped():
    raster = np.ones((5, 5), dtype=np.uint8)
    with pytest.warns(UserWarning, match="skipped"):
        cm, skipped = A.evaluate_points([(1, 1), (7, 2), (-1, 0)], [1, 1, 1], class_raster=raster)
    assert skipped == [1, 2] and cm.total == 1
    with pytest.raises(ValueError):
        A.evaluate_points([(0, 0)], [1])


def test_evaluate_patches():
    labels = np.array([[[1, 2], [0, 2]]], dtype=np.uint8)

    def model(x):
        p = torch.zeros(x.shape[0], 8, *x.shape[2:])
        p[:, 1] = 1
        return p
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cm = A.evaluate_patches(model, np.zeros((1, 3, 2, 2), dtype=np.uint8), labels)
    assert cm.counts[0, 1] == 1 and cm.counts[1, 1] == 2 and cm.total == 3
