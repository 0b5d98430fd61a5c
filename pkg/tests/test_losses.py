"""Objective values pinned against hand-computed oracles."""

import numpy as np
import pytest

from warpseg import geometry, losses
from warpseg.autodiff import Tensor
from warpseg.autodiff import ops
from warpseg.geometry import AffineMap2D
from warpseg.losses import DICE_EPS


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestSoftDice:
    def test_counting_oracle(self):
        # h: 3 ones, t: 2 ones, overlap 1
        h = np.zeros(8)
        t = np.zeros(8)
        h[:3] = 1.0
        t[2:4] = 1.0
        expected = (2 * 1 + DICE_EPS) / (3 + 2 + DICE_EPS) * 100
        assert losses.soft_dice(h, t).item() == pytest.approx(expected, rel=1e-12)

    def test_self_match_is_100(self, rng):
        h = rng.uniform(0, 1, size=(4, 4))
        assert losses.soft_dice(h, h).item() == pytest.approx(100.0, abs=1e-3)

    def test_empty_vs_empty_is_100(self):
        z = np.zeros(10)
        assert losses.soft_dice(z, z).item() == pytest.approx(100.0)

    def test_disjoint_is_near_zero(self):
        h = np.array([1.0, 0.0])
        t = np.array([0.0, 1.0])
        assert losses.soft_dice(h, t).item() == pytest.approx(
            DICE_EPS / (2 + DICE_EPS) * 100, rel=1e-9)

    def test_soft_values_squared_denominator(self):
        h = np.array([0.5])
        t = np.array([1.0])
        expected = (2 * 0.5 + DICE_EPS) / (0.25 + 1.0 + DICE_EPS) * 100
        assert losses.soft_dice(h, t).item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            losses.soft_dice(np.zeros(3), np.zeros(4))

    def test_per_item_matches_loop(self, rng):
        h = T(rng.uniform(0, 1, size=(5, 3, 3)))
        t = rng.integers(0, 2, size=(5, 3, 3)).astype(np.float64)
        per = losses.soft_dice_per_item(h, t).data
        for i in range(5):
            assert per[i] == pytest.approx(
                losses.soft_dice(h.data[i], t[i]).item(), rel=1e-12)

    def test_gradient_flows(self):
        h = T([0.3, 0.7])
        losses.soft_dice(h, np.array([0.0, 1.0])).backward()
        assert np.all(np.isfinite(h.grad))
        assert np.any(h.grad != 0)


class TestPoseLoss:
    def test_perfect_alignment_near_zero(self):
        m = np.zeros((2, 1, 4, 4))
        m[:, :, 1:3, 1:3] = 1.0
        lv = losses.stn1_loss(T(m), m.copy())
        assert lv.item() == pytest.approx(0.0, abs=1e-3)
        assert lv.components["soft_dice"] == pytest.approx(100.0, abs=1e-3)

    def test_reference_broadcast_matches_explicit(self, rng):
        h = T(rng.uniform(0, 1, size=(3, 1, 4, 4)))
        ref = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(np.float64)
        a = losses.stn1_loss(h, ref).item()
        b = losses.stn1_loss(h, np.repeat(ref, 3, axis=0)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_is_100_minus_mean_dice(self, rng):
        h = T(rng.uniform(0, 1, size=(4, 1, 5, 5)))
        t = rng.integers(0, 2, size=(4, 1, 5, 5)).astype(np.float64)
        per = losses.soft_dice_per_item(Tensor(h.data), t).data
        assert losses.stn1_loss(h, t).item() == pytest.approx(100 - per.mean(), rel=1e-12)

    def test_bad_reference_shape(self):
        with pytest.raises(ValueError):
            losses.stn1_loss(T(np.zeros((2, 1, 4, 4))), np.zeros((3, 1, 4, 4)))


class TestCropLoss:
    def test_closed_form(self):
        h = T(np.full((2, 1, 2, 2), 0.25))
        t = np.zeros((2, 1, 2, 2))
        th = T(np.zeros((2, 2, 3)))
        tt = np.zeros((2, 2, 3))
        tt[0, 0, 0] = 3.0
        tt[1, 1, 2] = 4.0
        lv = losses.stn2_loss(h, t, th, tt)
        # l1 = 0.25; l2 = sqrt((9 + 16) / 2)
        assert lv.components["l1"] == pytest.approx(0.25, rel=1e-12)
        assert lv.components["l2"] == pytest.approx(np.sqrt(12.5), rel=1e-12)
        assert lv.item() == pytest.approx(0.25 + np.sqrt(12.5), rel=1e-12)

    def test_zero_at_perfect_prediction(self, rng):
        crop = rng.uniform(size=(3, 1, 4, 4))
        theta = rng.uniform(size=(3, 2, 3))
        lv = losses.stn2_loss(T(crop), crop.copy(), T(theta), theta.copy())
        assert lv.item() == pytest.approx(0.0, abs=1e-12)

    def test_batch_mismatch_raises(self):
        with pytest.raises(ValueError):
            losses.stn2_loss(T(np.zeros((2, 1, 2, 2))), np.zeros((2, 1, 2, 2)),
                             T(np.zeros((3, 2, 3))), np.zeros((3, 2, 3)))

    def test_gradients_reach_both_inputs(self, rng):
        h = T(rng.uniform(size=(2, 1, 3, 3)))
        th = T(rng.uniform(size=(2, 2, 3)))
        losses.stn2_loss(h, rng.uniform(size=(2, 1, 3, 3)),
                         th, rng.uniform(size=(2, 2, 3))).total.backward()
        assert np.any(h.grad != 0)
        assert np.any(th.grad != 0)


class TestCrossEntropy:
    def test_hand_oracle(self):
        # two pixels, three classes
        p = np.array([[[[0.7]], [[0.2]], [[0.1]]],
                      [[[0.1]], [[0.8]], [[0.1]]]])
        labels = np.array([[[0]], [[1]]])
        expected = -(np.log(0.7) + np.log(0.8)) / 2
        assert losses.cross_entropy(T(p), labels).item() == pytest.approx(expected, rel=1e-9)

    def test_probability_floor(self):
        p = np.zeros((1, 2, 1, 1))
        p[0, 1] = 1.0
        labels = np.zeros((1, 1, 1), dtype=np.int64)
        val = losses.cross_entropy(T(p), labels).item()
        assert val == pytest.approx(-np.log(losses.PROB_FLOOR), rel=1e-9)

    def test_label_out_of_range(self):
        p = T(np.full((1, 2, 2, 2), 0.5))
        with pytest.raises(ValueError):
            losses.cross_entropy(p, np.full((1, 2, 2), 5))

    def test_label_shape_mismatch(self):
        with pytest.raises(ValueError):
            losses.cross_entropy(T(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 3, 3)))


class TestSegmentationLoss:
    @staticmethod
    def probs_for(labels, c=3, sharp=0.9):
        n, h, w = labels.shape
        p = np.full((n, c, h, w), (1 - sharp) / (c - 1))
        np.put_along_axis(p, labels[:, None].astype(np.int64), sharp, axis=1)
        return p

    def test_single_level_is_ce_plus_dice_gap(self, rng):
        labels = rng.integers(0, 3, size=(2, 6, 6))
        p = T(self.probs_for(labels))
        lv = losses.unet_loss([p], None, None, labels, restore=False)
        ce = losses.cross_entropy(Tensor(p.data), labels).item()
        fg = losses.foreground_soft_dice(Tensor(p.data), labels).item()
        assert lv.item() == pytest.approx(ce + 100 - fg, rel=1e-9)

    def test_two_equal_levels_weighted_1_5(self, rng):
        labels = rng.integers(0, 3, size=(2, 8, 8))
        p0 = T(self.probs_for(labels))
        one = losses.unet_loss([p0], None, None, labels, restore=False).item()
        both = losses.unet_loss(
            [p0, T(p0.data.copy())], None, None, labels, restore=False).item()
        # second level at the same resolution scores identically: x * (1 + 1/2)
        assert both == pytest.approx(1.5 * one, rel=1e-9)

    def test_coarse_level_upsampled(self, rng):
        labels = rng.integers(0, 3, size=(1, 8, 8))
        p0 = T(self.probs_for(labels))
        p1 = T(self.probs_for(labels)[:, :, ::2, ::2])
        lv = losses.unet_loss([p0, p1], None, None, labels, restore=False)
        assert np.isfinite(lv.item())

    def test_restore_identity_matches_norestore(self, rng):
        labels = rng.integers(0, 3, size=(2, 8, 8))
        p = self.probs_for(labels)
        ident = AffineMap2D.identity()
        a = losses.unet_loss([T(p)], ident, ident, labels, restore=True).item()
        b = losses.unet_loss([T(p)], None, None, labels, restore=False).item()
        assert a == pytest.approx(b, rel=1e-9)

    def test_restore_scores_in_original_frame(self, rng):
        # crop covers the right half of the frame; prediction perfect in
        # the crop must also be near-perfect once restored
        side = 16
        labels = np.zeros((1, side, side), dtype=np.int64)
        labels[0, 1:6, 9:14] = 1     # fully inside the cropped quadrant
        t1 = AffineMap2D.identity()
        t2 = geometry.bbox_to_crop_map(geometry.BBox(0.0, -1.0, 1.0, 0.0))
        # build crop-frame labels by nearest-warping the originals
        crop_labels = geometry.warp_image_np(
            labels[0].astype(np.uint8), geometry.compose(t1, t2), side, side,
            mode="nearest").astype(np.int64)
        p = self.probs_for(crop_labels[None], c=2, sharp=0.99)
        lv = losses.unet_loss([T(p)], t1, t2, labels, restore=True)
        assert lv.components["mean_fg_soft_dice"] > 90.0

    def test_empty_preds_rejected(self):
        with pytest.raises(ValueError):
            losses.unet_loss([], None, None, np.zeros((1, 4, 4)), restore=False)

    def test_inconsistent_level_batch_rejected(self, rng):
        labels = rng.integers(0, 2, size=(2, 4, 4))
        p0 = T(self.probs_for(labels, c=2))
        p1 = T(self.probs_for(labels[:1], c=2))
        with pytest.raises(ValueError):
            losses.unet_loss([p0, p1], None, None, labels, restore=False)


class TestRestoreGrids:
    def test_identity_grids(self):
        ident = AffineMap2D.identity()
        g = losses.restore_grids(ident, ident, 2, 5, 5)
        assert g.shape == (2, 5, 5, 2)
        ref = geometry.affine_grid_np(ident, 5, 5)
        assert np.allclose(g[0], ref, atol=1e-6)

    def test_accepts_batch_and_single(self, rng):
        t1 = rng.uniform(-0.5, 0.5, size=(3, 2, 3)) + np.array([[1, 0, 0], [0, 1, 0]])
        ident = AffineMap2D.identity()
        g = losses.restore_grids(t1, ident, 3, 4, 4)
        for i in range(3):
            r = geometry.restore_map(AffineMap2D(t1[i]), ident)
            assert np.allclose(g[i], geometry.affine_grid_np(r, 4, 4), atol=1e-6)

    def test_wrong_batch_rejected(self):
        with pytest.raises(ValueError):
            losses.restore_grids(np.zeros((2, 2, 3)), AffineMap2D.identity(), 3, 4, 4)


class TestHardDice:
    def test_counting_oracle(self):
        pred = np.array([[1, 1, 0], [0, 0, 0]])
        ref = np.array([[1, 0, 0], [1, 0, 0]])
        # |A|=2, |B|=2, |AnB|=1 -> 2*1/(2+2)*100 = 50
        assert losses.hard_dice(pred, ref, 1) == pytest.approx(50.0)

    def test_perfect_and_disjoint(self):
        a = np.array([1, 1, 0, 0])
        assert losses.hard_dice(a, a, 1) == pytest.approx(100.0)
        assert losses.hard_dice(a, 1 - a, 1) == pytest.approx(0.0)

    def test_empty_vs_empty_counts_as_100(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert losses.hard_dice(z, z, 2) == pytest.approx(100.0)

    def test_empty_vs_nonempty_is_zero(self):
        z = np.zeros(4)
        o = np.array([2, 2, 0, 0])
        assert losses.hard_dice(z, o, 2) == pytest.approx(0.0)

    def test_unknown_class_raises(self):
        with pytest.raises(ValueError):
            losses.hard_dice(np.zeros(3), np.zeros(3), 7)
        with pytest.raises(ValueError):
            losses.hard_dice(np.zeros(3), np.zeros(3), -1)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            losses.hard_dice(np.zeros(3), np.zeros(4), 1)


class TestForegroundSoftDice:
    def test_mean_over_classes_and_items(self, rng):
        labels = rng.integers(0, 3, size=(2, 5, 5))
        p = TestSegmentationLoss.probs_for(labels)
        pt = Tensor(p)
        got = losses.foreground_soft_dice(pt, labels).item()
        parts = []
        for cls in (1, 2):
            target = (labels == cls).astype(np.float64)
            parts.append(losses.soft_dice_per_item(
                ops.channel(pt, cls), target).data)
        assert got == pytest.approx(np.concatenate(parts).mean(), rel=1e-9)
