import numpy as np
import pytest

from warpmarks import data as D
from warpmarks import regress as R
from warpmarks.detector import Detector
from warpmarks.tps import ConfigError, WarpSamplerConfig
from warpmarks.trainer import params_digest

PLAIN = D.PreprocessSpec()
STILL = WarpSamplerConfig(grid_size=4, extra_prob=0.0)


def zero_detector(k=3):
    det = Detector.create(k=k, in_channels=1, rng=0)
    for name in det.params:
        if name.endswith(".weight"):
            det.params[name] = det.params[name] * 0.0
    return det


def annotated_samples(n=6, size=20, m=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = rng.uniform(0, 1, (size, size, 1)).astype(np.float32)
        ann = rng.uniform(-0.8, 0.8, (m, 2))
        out.append(D.Sample(img, f"s{i}", annotations=ann))
    return out


class TestPredict:
    def test_zero_matrix_maps_to_origin(self):
        lm = np.random.default_rng(0).uniform(-1, 1, (4, 2))
        out = R.predict(np.zeros((6, 8)), lm)
        assert out.shape == (3, 2)
        assert np.all(out == 0)

    def test_selection_matrix_copies_landmark(self):
        # pick out landmark 1: rows select flat entries (x2, y2)
        w = np.zeros((2, 6))
        w[0, 2] = 1.0
        w[1, 3] = 1.0
        lm = np.array([[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]])
        out = R.predict(w, lm)
        assert np.allclose(out, [[0.3, -0.4]])

    def test_matches_naive_product(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 10))
        lm = rng.uniform(-1, 1, (5, 2))
        x = lm.reshape(-1)
        expected = np.array([w[i] @ x for i in range(4)]).reshape(2, 2)
        assert np.abs(R.predict(w, lm) - expected).max() < 1e-6

    def test_linearity(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(4, 6))
        lm = rng.uniform(-1, 1, (3, 2))
        assert np.allclose(R.predict(w, 3.0 * lm), 3.0 * R.predict(w, lm))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            R.predict(np.zeros((2, 6)), np.zeros((4, 2)))


class TestFitLinear:
    def test_zero_targets_give_zero_weights(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 6))
        y = np.zeros((50, 4))
        for method in ("ridge", "adam"):
            w = R.fit_linear(x, y, R.FitConfig(method=method, steps=500))
            assert np.linalg.norm(w) < 1e-3

    def test_ridge_recovers_generating_matrix(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=(4, 8))
        x = rng.normal(size=(200, 8))
        w = R.fit_linear(x, x @ w0.T, R.FitConfig(method="ridge"))
        rel = np.linalg.norm(w - w0) / np.linalg.norm(w0)
        assert rel < 1e-3

    def test_adam_recovers_generating_matrix(self):
        rng = np.random.default_rng(4)
        w0 = rng.normal(size=(2, 4))
        x = rng.normal(size=(100, 4))
        w = R.fit_linear(x, x @ w0.T,
                         R.FitConfig(method="adam", learning_rate=1e-2, steps=4000))
        rel = np.linalg.norm(w - w0) / np.linalg.norm(w0)
        assert rel < 1e-3

    def test_selection_targets_recover_selection_matrix(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (120, 8))
        y = x[:, [2, 3, 6, 7]]  # targets are landmarks 1 and 3 verbatim
        w = R.fit_linear(x, y, R.FitConfig(method="ridge"))
        expect = np.zeros((4, 8))
        expect[0, 2] = expect[1, 3] = expect[2, 6] = expect[3, 7] = 1.0
        assert np.abs(w - expect).max() < 1e-3

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            R.fit_linear(np.zeros((4, 2)), np.zeros((4, 2)), R.FitConfig(method="sgd"))


class TestFitRegressor:
    def test_detector_untouched_and_shape(self):
        det = Detector.create(k=3, in_channels=1, rng=1)
        samples = annotated_samples()
        before = params_digest(det.params)
        w = R.fit_regressor(det, samples, PLAIN, R.FitConfig(method="ridge"))
        assert w.shape == (6, 6)
        assert params_digest(det.params) == before

    def test_zero_targets(self):
        det = Detector.create(k=2, in_channels=1, rng=2)
        samples = annotated_samples(m=2)
        for s in samples:
            s.annotations = np.zeros((2, 2))
        w = R.fit_regressor(det, samples, PLAIN, R.FitConfig(method="ridge"))
        assert np.linalg.norm(w) < 1e-3

    def test_missing_annotations_rejected(self):
        det = Detector.create(k=2, in_channels=1, rng=0)
        samples = annotated_samples()
        samples[2].annotations = None
        with pytest.raises(R.DataError, match="s2"):
            R.fit_regressor(det, samples, PLAIN, R.FitConfig(method="ridge"))

    def test_inconsistent_annotation_count_rejected(self):
        det = Detector.create(k=2, in_channels=1, rng=0)
        samples = annotated_samples()
        samples[1].annotations = samples[1].annotations[:2]
        with pytest.raises(R.DataError, match="s1"):
            R.fit_regressor(det, samples, PLAIN, R.FitConfig(method="ridge"))


class TestDesignMatrices:
    def test_augmentation_row_count(self):
        det = Detector.create(k=2, in_channels=1, rng=0)
        samples = annotated_samples(n=4)
        x, y = R.design_matrices(det, samples, PLAIN, augment=STILL,
                                 augment_per_sample=2)
        assert x.shape == (12, 4) and y.shape == (12, 6)

    def test_identity_augmentation_matches_plain_rows(self):
        det = Detector.create(k=2, in_channels=1, rng=3)
        samples = annotated_samples(n=2)
        x, y = R.design_matrices(det, samples, PLAIN, augment=STILL,
                                 augment_per_sample=1)
        # rows alternate plain, augmented per sample
        assert np.abs(x[0] - x[1]).max() < 1e-5
        assert np.array_equal(y[0], y[1])


class TestEvaluate:
    def test_perfect_predictions_zero_error(self):
        det = zero_detector()
        samples = annotated_samples(n=3, m=3)
        for s in samples:
            s.annotations = np.zeros((3, 2))  # all targets at the frame center
        rep = R.evaluate(np.zeros((6, 6)), det, samples, PLAIN, normalization="width")
        assert rep.mean_error == pytest.approx(0.0, abs=1e-6)
        assert rep.skipped == 0

    def test_one_landmark_off_by_one_iod(self):
        # zero detector predicts the center for both targets; the first
        # target sits at the center (hit) and the second is one inter-ocular
        # distance away (miss), so the per-image error is 1/M = 0.5
        det = zero_detector(k=2)
        sample = annotated_samples(n=1, m=2)[0]
        sample.annotations = np.array([[0.0, 0.0], [0.5, 0.0]])
        rep = R.evaluate(np.zeros((4, 4)), det, [sample], PLAIN,
                         normalization="iod", eye_indices=(0, 1))
        assert rep.mean_error == pytest.approx(0.5, abs=1e-6)

    def test_matches_hand_summation(self):
        rng = np.random.default_rng(7)
        det = Detector.create(k=2, in_channels=1, rng=4)
        samples = annotated_samples(n=4, m=3, seed=8)
        w = rng.normal(size=(6, 4)) * 0.1
        rep = R.evaluate(w, det, samples, PLAIN, normalization="width")
        from warpmarks.tps import norm_to_pixel
        expected = []
        for s in samples:
            plain = D.preprocess_plain(s.image, PLAIN)
            lm = R._detect_np(det, plain)
            pred = R.predict(w, lm)
            size = (plain.shape[1], plain.shape[0])
            d = np.linalg.norm(norm_to_pixel(pred, size) - norm_to_pixel(s.annotations, size), axis=1)
            expected.append(d.mean() / plain.shape[1])
        assert rep.mean_error == pytest.approx(np.mean(expected), abs=1e-9)
        assert rep.mean_error == pytest.approx(np.mean(rep.per_image), abs=1e-9)

    def test_zero_iod_skipped_with_warning(self):
        det = zero_detector(k=2)
        samples = annotated_samples(n=2, m=2)
        samples[0].annotations = np.array([[0.3, 0.3], [0.3, 0.3]])  # eyes coincide
        warnings = []
        rep = R.evaluate(np.zeros((4, 4)), det, samples, PLAIN,
                         normalization="iod", warn=warnings.append)
        assert rep.skipped == 1
        assert len(rep.per_image) == 1
        assert len(warnings) == 1 and "s0" in warnings[0]

    def test_unknown_normalization_rejected(self):
        with pytest.raises(ConfigError):
            R.evaluate(np.zeros((4, 4)), zero_detector(k=2),
                       annotated_samples(m=2), PLAIN, normalization="bogus")


class TestContributionGraph:
    def test_single_source_single_edge(self):
        w = np.zeros((2, 6))
        w[0, 2] = 1.0
        w[1, 3] = -2.0
        assert R.contribution_graph(w) == [(1, 0, 1.0)]

    def test_equal_split_two_edges(self):
        w = np.zeros((2, 4))
        w[0, 0] = 1.0
        w[1, 3] = -1.0
        edges = R.contribution_graph(w)
        assert edges == [(0, 0, 0.5), (1, 0, 0.5)]

    def test_threshold_drops_small_entry(self):
        w = np.zeros((2, 4))
        w[0, 0] = 0.85
        w[0, 2] = 0.15
        edges = R.contribution_graph(w)
        assert len(edges) == 1
        assert edges[0][:2] == (0, 0)
        assert edges[0][2] == pytest.approx(0.85)

    def test_zero_block_yields_no_edges(self):
        w = np.zeros((4, 4))
        w[2, 0] = 1.0  # only target 1 has coefficients
        edges = R.contribution_graph(w)
        assert all(t == 1 for _, t, _ in edges)

    def test_weights_normalized_before_threshold(self):
        rng = np.random.default_rng(9)
        w = rng.normal(size=(6, 8))
        edges = R.contribution_graph(w, threshold=0.0)
        for t in range(3):
            total = sum(wt for _, tt, wt in edges if tt == t)
            assert total == pytest.approx(1.0)
        kept = R.contribution_graph(w, threshold=0.2)
        for t in range(3):
            total = sum(wt for _, tt, wt in kept if tt == t)
            assert total <= 1.0 + 1e-12
