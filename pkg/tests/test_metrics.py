import numpy as np
import pytest

from oct_engine import data as D
from oct_engine import metrics as M


def auc_pair_oracle(scores, labels):
    """Brute-force pair-ordering statistic: ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    num2 = 0
    for p in pos:
        for n in neg:
            if p > n:
                num2 += 2
            elif p == n:
                num2 += 1
    return num2 / (2 * len(pos) * len(neg))


class TestConfusionMatrix:
    def test_perfect_250_750_split(self):
        # binary task with 250 normal / 750 abnormal, all predicted correctly
        labels = np.array([0] * 250 + [1] * 750)
        cm = M.confusion_matrix(labels, labels, 2)
        np.testing.assert_array_equal(cm, [[250, 0], [0, 750]])

    def test_all_one_class_predictor(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, size=60)
        preds = np.full(60, 2)
        cm = M.confusion_matrix(preds, labels, 4)
        assert cm[:, [0, 1, 3]].sum() == 0
        assert cm[:, 2].sum() == 60

    def test_total_equals_n(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            n = int(rng.integers(1, 50))
            cm = M.confusion_matrix(rng.integers(0, 3, n), rng.integers(0, 3, n), 3)
            assert cm.sum() == n

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="class ids"):
            M.confusion_matrix([0, 4], [0, 1], 4)


class TestBinaryMetrics:
    def test_perfect_split_is_100_100(self):
        out = M.binary_metrics(np.array([[250, 0], [0, 750]]))
        assert out["sensitivity"] == 1.0
        assert out["specificity"] == 1.0

    def test_mixed_counts(self):
        # TP=90, FN=10, TN=80, FP=20
        out = M.binary_metrics(np.array([[80, 20], [10, 90]]))
        assert out["sensitivity"] == pytest.approx(0.90)
        assert out["specificity"] == pytest.approx(0.80)

    def test_no_positives_sensitivity_absent(self):
        out = M.binary_metrics(np.array([[5, 3], [0, 0]]))
        assert out["sensitivity"] is None
        assert out["specificity"] == pytest.approx(5 / 8)

    def test_wrong_shape(self):
        with pytest.raises(ValueError, match="2x2"):
            M.binary_metrics(np.zeros((3, 3)))

    def test_matches_per_sample_counting(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            labels = rng.integers(0, 2, size=40)
            preds = rng.integers(0, 2, size=40)
            cm = M.confusion_matrix(preds, labels, 2)
            out = M.binary_metrics(cm)
            tp = int(((labels == 1) & (preds == 1)).sum())
            fn = int(((labels == 1) & (preds == 0)).sum())
            tn = int(((labels == 0) & (preds == 0)).sum())
            fp = int(((labels == 0) & (preds == 1)).sum())
            if tp + fn:
                assert out["sensitivity"] == pytest.approx(tp / (tp + fn))
            if tn + fp:
                assert out["specificity"] == pytest.approx(tn / (tn + fp))


class TestPrf1:
    def test_perfect_four_class(self):
        cm = np.diag([250, 240, 260, 250])
        for row in M.prf1(cm):
            assert row["precision"] == 1.0
            assert row["recall"] == 1.0
            assert row["f1"] == 1.0

    def test_one_false_positive_into_class(self):
        # 99 true hits plus 1 false positive: precision 0.99, recall 1.0
        cm = np.array([
            [100, 1, 0, 0],
            [0, 99, 0, 0],
            [0, 0, 100, 0],
            [0, 0, 0, 100],
        ])
        rows = M.prf1(cm)
        assert rows[1]["precision"] == pytest.approx(0.99)
        assert rows[1]["recall"] == 1.0
        # honest F1, not the rounded headline value
        assert rows[1]["f1"] == pytest.approx(2 * 0.99 / 1.99)

    def test_absent_class_all_none(self):
        cm = np.array([[5, 0, 0], [0, 3, 0], [0, 0, 0]])
        row = M.prf1(cm)[2]
        assert row == {"precision": None, "recall": None, "f1": None}


class TestRocAuc:
    def test_perfect_separation(self):
        curve = M.roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
        assert curve.auc == 1.0

    def test_constant_scores_half(self):
        curve = M.roc_auc([0.4] * 10, [1, 0] * 5)
        assert curve.auc == 0.5

    def test_three_of_four_pairs(self):
        curve = M.roc_auc([0.9, 0.2, 0.6, 0.1], [1, 1, 0, 0])
        assert curve.auc == 0.75

    def test_oracle_equivalence_with_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(2, 21))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            # coarse grid of scores forces plenty of ties
            scores = rng.integers(0, 5, size=n) / 4.0
            curve = M.roc_auc(scores, labels)
            assert curve.auc == auc_pair_oracle(scores, labels)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        a = M.roc_auc(scores, labels).auc
        b = M.roc_auc(np.exp(scores), labels).auc
        c = M.roc_auc(3 * scores - 7, labels).auc
        assert a == b == c

    def test_points_monotone_and_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(4, 40))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            curve = M.roc_auc(rng.normal(size=n), labels)
            pts = np.asarray(curve.points)
            assert tuple(pts[0]) == (0.0, 0.0)
            assert tuple(pts[-1]) == (1.0, 1.0)
            assert np.all(np.diff(pts[:, 0]) >= 0)
            assert np.all(np.diff(pts[:, 1]) >= 0)
            assert 0.0 <= curve.auc <= 1.0

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            M.roc_auc([0.1, 0.2], [1, 1])


class TestCollapseToBinary:
    def test_certain_normal(self):
        np.testing.assert_array_equal(
            M.collapse_to_binary(np.array([[1.0, 0, 0, 0]])), [0.0])

    def test_uniform(self):
        np.testing.assert_allclose(
            M.collapse_to_binary(np.array([[0.25] * 4])), [0.75])

    def test_complement_identity(self):
        rng = np.random.default_rng(6)
        probs = rng.dirichlet(np.ones(4), size=50)
        scores = M.collapse_to_binary(probs)
        np.testing.assert_allclose(scores + probs[:, 0], 1.0, atol=1e-6)

    def test_malformed_rows(self):
        with pytest.raises(ValueError, match="sum to 1"):
            M.collapse_to_binary(np.array([[0.5, 0.1, 0.1, 0.1]]))


class _StubModel:
    """Probability reader keyed on mean intensity, for heatmap geometry tests."""

    def predict_proba(self, x):
        m = x.mean(axis=(1, 2, 3), dtype=np.float64)
        z = np.stack([m, -m], axis=1)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


class TestOcclusionHeatmap:
    def test_uniform_image_constant_heat(self):
        img = np.full((3, 16, 16), 0.4, dtype=np.float32)
        res = M.occlusion_heatmap(_StubModel(), img, 0, patch=4, stride=4)
        assert res.grid.max() - res.grid.min() < 1e-3

    def test_grid_dims_formula(self):
        img = np.zeros((3, 20, 20), dtype=np.float32)
        for patch in (3, 5, 8, 20):
            for stride in (1, 2, 3, 7):
                res = M.occlusion_heatmap(_StubModel(), img, 0, patch, stride)
                expected = ((20 - patch) // stride + 1, (20 - patch) // stride + 1)
                assert res.grid.shape == expected, (patch, stride)

    def test_full_patch_single_cell(self):
        rng = np.random.default_rng(7)
        img = rng.normal(size=(3, 12, 12)).astype(np.float32)
        model = _StubModel()
        res = M.occlusion_heatmap(model, img, 0, patch=12, stride=1)
        assert res.grid.shape == (1, 1)
        occluded = np.full_like(img, np.float32(img.mean(dtype=np.float64)))
        expected = (model.predict_proba(img[None])[0, 0]
                    - model.predict_proba(occluded[None])[0, 0])
        assert res.grid[0, 0] == pytest.approx(expected, abs=1e-6)

    def test_patch_too_large(self):
        with pytest.raises(ValueError, match="patch"):
            M.occlusion_heatmap(_StubModel(), np.zeros((3, 8, 8)), 0, 9, 1)

    def test_artifacts_written(self, tmp_path):
        img = np.random.default_rng(8).normal(size=(3, 16, 16)).astype(np.float32)
        res = M.occlusion_heatmap(_StubModel(), img, 0, 4, 4)
        written = M.save_heatmap_artifacts(res, tmp_path / "h" / "img0")
        for p in written:
            assert p.is_file() and p.stat().st_size > 0
        assert {p.suffix for p in written} == {".pgm", ".csv"}


class _FeatureStub:
    def __init__(self, dim=5):
        self.dim = dim

    def features(self, x):
        pooled = x.mean(axis=(2, 3), dtype=np.float64)
        reps = -(-self.dim // pooled.shape[1])
        return np.tile(pooled, (1, reps))[:, :self.dim].astype(np.float32)


class TestExportFeatures:
    def make_records(self, tmp_path):
        manifest = D.synth_generate(2, 16, 0, tmp_path / "d")
        return D.load_manifest(manifest)

    def cfg(self):
        return D.AugmentConfig(resize=(16, 16), crop=(16, 16), mask_count_range=(0, 0))

    def test_row_and_column_counts(self, tmp_path):
        records = self.make_records(tmp_path)
        out = M.export_features(_FeatureStub(5), records, self.cfg(),
                                tmp_path / "f.csv")
        lines = out.read_text().strip().split("\n")
        assert len(lines) == len(records) + 1
        assert lines[0].split(",") == ["path", "label", "f_0", "f_1", "f_2", "f_3", "f_4"]
        assert all(len(l.split(",")) == 7 for l in lines[1:])

    def test_deterministic_bytes(self, tmp_path):
        records = self.make_records(tmp_path)
        a = M.export_features(_FeatureStub(3), records, self.cfg(), tmp_path / "a.csv")
        b = M.export_features(_FeatureStub(3), records, self.cfg(), tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()


class TestClassificationReport:
    def test_structure_and_perfect_values(self):
        labels = np.array([0] * 5 + [1] * 5 + [2] * 5 + [3] * 5)
        probs = np.full((20, 4), 0.05)
        probs[np.arange(20), labels] = 0.85
        report = M.classification_report(probs, labels)
        assert report["sensitivity"] == 1.0
        assert report["specificity"] == 1.0
        assert report["binary_auc"] == 1.0
        np.testing.assert_array_equal(np.array(report["confusion"]), np.diag([5] * 4))
        for row in report["per_class"]:
            assert row["precision"] == 1.0 and row["recall"] == 1.0
            assert row["f1"] == 1.0 and row["auc_ovr"] == 1.0
        pts = np.asarray(report["roc_points"])
        assert tuple(pts[0]) == (0.0, 0.0) and tuple(pts[-1]) == (1.0, 1.0)
