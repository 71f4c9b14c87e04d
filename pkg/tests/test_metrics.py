import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unsq.metrics import iou, mask_from_logits, predict_mask
from unsq.unet import UnetConfig, build


def set_iou(pred, true):
    """Reference IoU over pixel-coordinate sets."""
    p = {tuple(ix) for ix in np.argwhere(pred)}
    t = {tuple(ix) for ix in np.argwhere(true)}
    union = p | t
    return 1.0 if not union else len(p & t) / len(union)


def quadrant_patterns():
    bits = (np.arange(2 ** 16)[:, None] >> np.arange(16)) & 1
    return bits.reshape(-1, 4, 4).astype(bool)


class TestExamples:
    def test_identical(self):
        m = np.zeros((1, 1, 4, 4))
        m[0, 0, 1:3, 1:3] = 1
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4)), np.zeros((4, 4))
        a[0, 0], b[3, 3] = 1, 1
        assert iou(a, b) == 0.0

    def test_half_overlap(self):
        a, b = np.zeros((1, 4)), np.zeros((1, 4))
        a[0, :2], b[0, 1:3] = 1, 1
        assert iou(a, b) == pytest.approx(1 / 3)

    def test_half_coverage_no_false_positives(self):
        true = np.zeros((6, 6))
        true[1:5, 1:5] = 1
        pred = np.zeros((6, 6))
        pred[1:3, 1:5] = 1
        assert iou(pred, true) == 0.5

    def test_both_empty(self):
        assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_pooled_not_per_image_mean(self):
        pred = np.zeros((2, 1, 2, 2))
        true = np.zeros((2, 1, 2, 2))
        pred[0, 0] = 1
        true[0, 0] = 1
        true[1, 0, 0, 0] = 1
        # pooled 4/5; a per-image mean would give (1 + 0) / 2
        assert iou(pred, true) == pytest.approx(0.8)

    def test_classes_average(self):
        a, b = np.zeros((1, 4)), np.zeros((1, 4))
        a[0, :2], b[0, 1:3] = 1, 1
        assert iou(a, b, average="classes") == pytest.approx(0.5 * (1 / 3 + 1 / 3))

    def test_errors(self):
        with pytest.raises(ValueError, match="binary"):
            iou(np.full((2, 2), 0.5), np.zeros((2, 2)))
        with pytest.raises(ValueError, match="shapes"):
            iou(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            iou(np.zeros((2, 2)), np.zeros((2, 2)), average="micro")


class TestExhaustive:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_quadrant_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        true = rng.random((8, 8)) > 0.6
        base = rng.random((8, 8)) > 0.6
        preds = np.repeat(base[None], 2 ** 16, axis=0)
        preds[:, :4, :4] = quadrant_patterns()
        # vectorized count oracle for all 65536 pairs, set oracle on a subsample
        inter = (preds & true).sum(axis=(1, 2))
        union = (preds | true).sum(axis=(1, 2))
        expected = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
        got = np.array([iou(p, true) for p in preds])
        assert np.array_equal(got, expected)
        for k in rng.choice(2 ** 16, size=300, replace=False):
            assert got[k] == set_iou(preds[k], true)

    def test_empty_true_quadrant_world(self):
        # true mask empty: IoU is 1 only for the empty prediction
        true = np.zeros((8, 8), bool)
        preds = np.zeros((2 ** 16, 8, 8), bool)
        preds[:, 4:, 4:] = quadrant_patterns()
        got = np.array([iou(p, true) for p in preds])
        assert got[0] == 1.0 and np.all(got[1:] == 0.0)


masks = arrays(np.uint8, (2, 1, 4, 4), elements=st.integers(0, 1))


class TestProperties:
    @given(a=masks, b=masks)
    @settings(max_examples=100, deadline=None)
    def test_symmetric_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert v == set_iou(a, b)

    @given(a=masks, b=masks, seed=st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_pixel_permutation_invariant(self, a, b, seed):
        perm = np.random.default_rng(seed).permutation(a.size)
        assert iou(a, b) == iou(a.ravel()[perm], b.ravel()[perm])


class TestPrediction:
    def test_tie_goes_to_background(self):
        logits = np.zeros((1, 2, 2, 2))
        logits[0, 1, 0, 0] = 1e-12
        mask = mask_from_logits(logits)
        assert mask.shape == (1, 1, 2, 2)
        assert mask.ravel().tolist() == [1, 0, 0, 0]

    def test_foreground_larger_everywhere(self):
        z = np.zeros((2, 2, 3, 3))
        z[:, 1] = 0.1
        assert np.all(mask_from_logits(z) == 1)

    def test_equal_logits_all_background(self):
        assert not mask_from_logits(np.full((1, 2, 4, 4), 0.7)).any()

    @given(scale=st.floats(1e-3, 1e3))
    @settings(max_examples=25, deadline=None)
    def test_positive_scale_invariant(self, scale):
        z = np.random.default_rng(0).normal(size=(2, 2, 4, 4))
        assert np.array_equal(mask_from_logits(z), mask_from_logits(scale * z))

    def test_predict_mask_batches_agree(self):
        m = build(UnetConfig(2, batch_norm_contracting=True), 0)
        x = np.random.default_rng(0).random((5, 1, 16, 16))
        a = predict_mask(m, x, batch_size=2)
        b = predict_mask(m, x, batch_size=5)
        assert a.shape == (5, 1, 16, 16)
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1.0}
