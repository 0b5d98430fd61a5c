"""Optimizer arithmetic, schedules, run logs, and the training loops."""

import math

import numpy as np
import pytest

from warpseg import data as datamod
from warpseg import geometry, losses
from warpseg import train as trainmod
from warpseg.autodiff import Tensor
from warpseg.nets import build_crop_stn, build_pose_stn
from warpseg.train import (
    RunLog,
    TrainConfig,
    check_patch,
    crop_target,
    evaluate_stn1,
    poly_lr,
    sgd_step,
    state_checksum,
    train_stn1,
    train_unet,
    _DivergenceGuard,
    _shuffled_batches,
)


class TestSGD:
    def step(self, params, velocity, **kw):
        sgd_step(params, velocity, **kw)
        return params["w"].data.copy()

    def test_nesterov_hand_recurrence(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        w.grad = np.array([0.5])
        params, velocity = {"w": w}, {}
        # v1 = g; step1 = g + m*v1
        got1 = self.step(params, velocity, lr=0.1, momentum=0.9,
                         nesterov=True, weight_decay=0.0)
        assert np.allclose(got1, 1.0 - 0.1 * (0.5 + 0.9 * 0.5))
        # v2 = m*v1 + g; step2 = g + m*v2
        w.grad = np.array([0.5])
        got2 = self.step(params, velocity, lr=0.1, momentum=0.9,
                         nesterov=True, weight_decay=0.0)
        v2 = 0.9 * 0.5 + 0.5
        assert np.allclose(got2, got1 - 0.1 * (0.5 + 0.9 * v2))

    def test_plain_momentum(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        w.grad = np.array([1.0])
        params, velocity = {"w": w}, {}
        got = self.step(params, velocity, lr=0.5, momentum=0.9,
                        nesterov=False, weight_decay=0.0)
        assert np.allclose(got, 2.0 - 0.5 * 1.0)

    def test_weight_decay_enters_gradient(self):
        w = Tensor(np.array([10.0]), requires_grad=True)
        w.grad = np.array([0.0])
        params, velocity = {"w": w}, {}
        got = self.step(params, velocity, lr=0.1, momentum=0.0,
                        nesterov=False, weight_decay=0.01)
        # g = 0 + 0.01*10 = 0.1; w -= 0.1*0.1
        assert np.allclose(got, 10.0 - 0.01)

    def test_missing_gradient_named(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError, match="'w'"):
            sgd_step({"w": w}, {}, lr=0.1)

    def test_velocity_persists_across_steps(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        params, velocity = {"w": w}, {}
        w.grad = np.array([1.0])
        sgd_step(params, velocity, lr=0.0, momentum=0.5, nesterov=False,
                 weight_decay=0.0)
        w.grad = np.array([0.0])
        sgd_step(params, velocity, lr=0.0, momentum=0.5, nesterov=False,
                 weight_decay=0.0)
        assert np.allclose(velocity["w"], 0.5)


class TestGradClip:
    def test_large_gradients_scaled_to_norm(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        a.grad = np.full(3, 3.0)
        b.grad = np.full(4, 4.0)
        params = {"a": a, "b": b}
        pre = trainmod.clip_grad_norm(params, max_norm=5.0)
        assert math.isclose(pre, math.sqrt(3 * 9 + 4 * 16))
        post = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
        assert math.isclose(post, 5.0, rel_tol=1e-9)
        # direction is preserved
        assert np.allclose(a.grad / b.grad[0], 3.0 / 4.0)

    def test_small_gradients_untouched(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([0.3, -0.4])
        pre = trainmod.clip_grad_norm({"a": a}, max_norm=5.0)
        assert math.isclose(pre, 0.5)
        assert np.array_equal(a.grad, [0.3, -0.4])


class TestSchedule:
    def test_poly_lr_pins(self):
        assert poly_lr(0, 80, 0.01) == 0.01
        assert math.isclose(poly_lr(40, 80, 0.01, 0.9), 0.01 * 0.5 ** 0.9)
        assert poly_lr(80, 80, 0.01) == 0.0
        assert math.isclose(poly_lr(1, 100, 1.0, 1.0), 0.99)

    def test_poly_lr_monotone(self):
        vals = [poly_lr(e, 50, 0.01) for e in range(51)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_poly_lr_range(self):
        with pytest.raises(ValueError, match="outside"):
            poly_lr(81, 80, 0.01)
        with pytest.raises(ValueError, match="outside"):
            poly_lr(-1, 80, 0.01)

    def test_check_patch(self):
        assert check_patch(64, 64) == 64
        assert check_patch(32, 64) == 32
        assert check_patch(16, 64) == 16
        with pytest.raises(ValueError, match="patch"):
            check_patch(20, 64)


class TestConfig:
    def test_defaults_valid(self):
        TrainConfig()

    def test_bad_settings(self):
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(lr0=0.0)
        with pytest.raises(ValueError, match="optimizer"):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError, match="positive"):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError, match="max_epochs"):
            TrainConfig(unet_min_epochs=10, unet_max_epochs=5)
        with pytest.raises(ValueError, match="stopping"):
            TrainConfig(patience=-1)


class TestRunLog:
    def test_monotone_epochs(self):
        log = RunLog("x")
        log.add({"epoch": 0})
        log.add({"epoch": 1})
        with pytest.raises(ValueError, match="monotone"):
            log.add({"epoch": 3})

    def test_round_trip(self, tmp_path):
        log = RunLog("stn1")
        log.add({"epoch": 0, "train_loss": 3.5})
        log.add({"epoch": 1, "train_loss": 2.5})
        log.final = {"val_soft_dice": 91.25}
        p = tmp_path / "run.jsonl"
        log.save(p)
        back = RunLog.load(p)
        assert back.kind == "stn1"
        assert back.records == log.records
        assert back.final == log.final

    def test_load_rejects_garbage(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text('{"hello": 1}\n')
        with pytest.raises(ValueError, match="not a run log"):
            RunLog.load(p)


class TestChecksum:
    def test_order_invariant_value_sensitive(self):
        a = {"x": np.arange(4.0), "y": np.ones(3)}
        b = {"y": np.ones(3), "x": np.arange(4.0)}
        assert state_checksum(a) == state_checksum(b)
        b["x"] = b["x"] + 1e-9
        assert state_checksum(a) != state_checksum(b)

    def test_shape_and_dtype_matter(self):
        a = {"x": np.zeros((2, 3))}
        b = {"x": np.zeros((3, 2))}
        c = {"x": np.zeros((2, 3), dtype=np.float32)}
        assert state_checksum(a) != state_checksum(b)
        assert state_checksum(a) != state_checksum(c)


class TestBatching:
    def test_shuffled_batches_partition(self):
        rng = np.random.default_rng(0)
        ids = list(range(23))
        batches = _shuffled_batches(ids, 5, rng)
        assert [len(b) for b in batches] == [5, 5, 5, 5, 3]
        flat = [i for b in batches for i in b]
        assert sorted(flat) == ids and flat != ids


class TestCropTarget:
    def test_tight_square_box(self):
        side = 64
        labels = np.zeros((side, side), bool)
        labels[10:21, 30:41] = True  # rows 10..20, cols 30..40
        box, crop_map = crop_target(labels, side, min_side=0.1)
        s = 2.0 / 63
        assert math.isclose(box.x0, -1 + 30 * s)
        assert math.isclose(box.y0, -1 + 10 * s)
        assert math.isclose(box.x1, -1 + 40 * s)
        assert math.isclose(box.y1, -1 + 20 * s)
        # the crop map sends grid corners to the box corners
        corners = geometry.AffineMap2D(crop_map.m).apply(
            np.array([[-1.0, -1.0], [1.0, 1.0]]))
        assert np.allclose(corners, [[box.x0, box.y0], [box.x1, box.y1]])

    def test_min_side_enforced(self):
        labels = np.zeros((64, 64), bool)
        labels[31:34, 31:34] = True
        box, _ = crop_target(labels, 64, min_side=0.5)
        assert math.isclose(box.x1 - box.x0, 0.5)
        assert math.isclose(box.y1 - box.y0, 0.5)

    def test_empty_labels_full_frame(self):
        box, crop_map = crop_target(np.zeros((64, 64), bool), 64, min_side=0.4)
        assert (box.x0, box.y0, box.x1, box.y1) == (-1.0, -1.0, 1.0, 1.0)
        assert np.allclose(crop_map.m, geometry.AffineMap2D.identity().m)


class TestDivergenceGuard:
    def test_trips_after_three(self):
        class Toy:
            def state_dict(self):
                return {"w": np.array([1.0])}

        guard = _DivergenceGuard("toy")
        guard.snapshot(Toy())
        guard.check(float("nan"), None)
        guard.check(float("inf"), None)
        with pytest.raises(trainmod.DivergenceError, match="3 consecutive"):
            guard.check(float("nan"), None)

    def test_finite_resets_streak(self):
        guard = _DivergenceGuard("toy")
        guard.check(float("nan"), None)
        guard.check(float("nan"), None)
        guard.check(1.0, None)
        guard.check(float("nan"), None)
        guard.check(float("nan"), None)  # streak 2, no raise

    def test_recovery_state_attached(self):
        class Toy:
            def state_dict(self):
                return {"w": np.array([7.0])}

        guard = _DivergenceGuard("toy")
        guard.snapshot(Toy())
        for _ in range(2):
            guard.check(float("nan"), None)
        with pytest.raises(trainmod.DivergenceError) as exc:
            guard.check(float("nan"), None)
        assert np.allclose(exc.value.last_finite_state["w"], 7.0)


# -- live loops on a handful of phantoms ---------------------------------------------


@pytest.fixture(scope="module")
def tiny_prep():
    from warpseg import preprocess
    cfg = datamod.PhantomConfig(side=64, seed=21)
    cases = []
    i = 0
    while len(cases) < 8:
        c = datamod.generate_phantom(cfg, i)
        i += 1
        if c.has_tumor:
            cases.append(preprocess.preprocess_case(c, side=64))
    return cases


class TestStn1Loop:
    def test_two_epochs_deterministic(self, tiny_prep):
        cfg = TrainConfig(stn_epochs=2, seed=5)
        ref = datamod.select_reference(tiny_prep)
        stn1a, loga = train_stn1(cfg, tiny_prep, tiny_prep[:4], ref)
        stn1b, logb = train_stn1(cfg, tiny_prep, tiny_prep[:4], ref)
        assert loga.final["checkpoint_sha256"] == logb.final["checkpoint_sha256"]
        assert [r["train_loss"] for r in loga.records] == \
               [r["train_loss"] for r in logb.records]
        cfg2 = TrainConfig(stn_epochs=2, seed=6)
        _, logc = train_stn1(cfg2, tiny_prep, tiny_prep[:4], ref)
        assert loga.final["checkpoint_sha256"] != logc.final["checkpoint_sha256"]

    def test_log_schedule_matches_poly(self, tiny_prep):
        cfg = TrainConfig(stn_epochs=3, seed=5)
        ref = datamod.select_reference(tiny_prep)
        _, log = train_stn1(cfg, tiny_prep[:4], tiny_prep[4:6], ref)
        for rec in log.records:
            want = poly_lr(rec["epoch"], 3, cfg.stn1_lr, cfg.poly_exponent)
            assert math.isclose(rec["lr"], want)
            assert math.isfinite(rec["val_soft_dice"])

    def test_identity_init_score_is_raw_overlap(self, tiny_prep):
        stn1 = build_pose_stn(64, seed=0)
        ref = tiny_prep[0]
        got = evaluate_stn1(stn1, tiny_prep[:4], ref.mask.astype(np.float32))
        masks = np.stack([c.mask for c in tiny_prep[:4]])[:, None].astype(np.float32)
        refs = np.repeat(ref.mask[None, None].astype(np.float32), 4, axis=0)
        want = float(np.mean(losses.soft_dice_per_item(Tensor(masks), refs).data))
        assert math.isclose(got, want, rel_tol=1e-6)


class TestUNetLoop:
    def test_mode_validation(self, tiny_prep):
        cfg = TrainConfig(unet_min_epochs=1, unet_max_epochs=1)
        with pytest.raises(ValueError, match="mode"):
            train_unet(cfg, tiny_prep, tiny_prep, "warp")
        with pytest.raises(ValueError, match="pose network"):
            train_unet(cfg, tiny_prep, tiny_prep, "stn1")
        with pytest.raises(ValueError, match="crop network"):
            train_unet(cfg, tiny_prep, tiny_prep, "stn1+stn2",
                       stn1=build_pose_stn(64))

    def test_early_stopping_uses_patience_and_min_delta(self, tiny_prep,
                                                        monkeypatch):
        series = iter([50.0, 50.05, 51.0, 51.0, 51.0, 51.0])

        def fake_eval(unet, cases, mode, stn1, stn2, patch, batch_size=16):
            v = next(series)
            return {"kidney": v, "tumor": v, "mean": v}

        monkeypatch.setattr(trainmod, "evaluate_unet", fake_eval)
        cfg = TrainConfig(unet_min_epochs=1, unet_max_epochs=6, patience=3,
                          seed=0)
        _, log = train_unet(cfg, tiny_prep[:2], tiny_prep[:2], "plain")
        # 50.05 is within min_delta of 50.0 and does not reset patience;
        # 51.0 at epoch 2 does; three stale epochs later training stops
        assert log.final["best_epoch"] == 2
        assert log.final["epochs_run"] == 6
        assert len(log.records) == 6

    def test_restores_best_checkpoint(self, tiny_prep, monkeypatch):
        series = iter([60.0, 20.0, 20.0])
        states = []

        real_eval = trainmod.evaluate_unet

        def fake_eval(unet, cases, mode, stn1, stn2, patch, batch_size=16):
            states.append(unet.state_dict())
            v = next(series)
            return {"kidney": v, "tumor": v, "mean": v}

        monkeypatch.setattr(trainmod, "evaluate_unet", fake_eval)
        cfg = TrainConfig(unet_min_epochs=3, unet_max_epochs=3, patience=0,
                          seed=0)
        unet, log = train_unet(cfg, tiny_prep[:2], tiny_prep[:2], "plain")
        assert log.final["best_epoch"] == 0
        got = unet.state_dict()
        want = states[0]  # snapshot at the best epoch
        assert all(np.array_equal(got[k], want[k]) for k in want)

    def test_two_epochs_deterministic(self, tiny_prep):
        cfg = TrainConfig(unet_min_epochs=2, unet_max_epochs=2, patience=0,
                          seed=3)
        _, loga = train_unet(cfg, tiny_prep[:4], tiny_prep[4:6], "plain")
        _, logb = train_unet(cfg, tiny_prep[:4], tiny_prep[4:6], "plain")
        assert loga.final["checkpoint_sha256"] == logb.final["checkpoint_sha256"]
        assert loga.final["unet_activation_bytes"] > 0

    def test_patch_mode_cuts_activation_memory(self, tiny_prep):
        stn1 = build_pose_stn(64, seed=0)
        stn2 = build_crop_stn(64, seed=0)
        base = TrainConfig(unet_min_epochs=1, unet_max_epochs=1, patience=0)
        _, log64 = train_unet(base, tiny_prep[:4], tiny_prep[:2], "stn1",
                              stn1=stn1)
        cropped = TrainConfig(unet_min_epochs=1, unet_max_epochs=1,
                              patience=0, patch=16)
        _, log16 = train_unet(cropped, tiny_prep[:4], tiny_prep[:2],
                              "stn1+stn2", stn1=stn1, stn2=stn2)
        full = log64.final["unet_activation_bytes"]
        small = log16.final["unet_activation_bytes"]
        assert small < full * 0.4

    def test_quota_batches_accepted(self, tiny_prep):
        idx = datamod.build_index(tiny_prep, seed=0,
                                  fractions={"train": 1.0, "val": 0.0,
                                             "test": 0.0})
        cfg = TrainConfig(unet_min_epochs=1, unet_max_epochs=1, patience=0,
                          batch_size=4, seed=0)
        _, log = train_unet(cfg, tiny_prep, tiny_prep[:2], "plain", index=idx)
        assert len(log.records) == 1

    def test_augment_hook_applied(self, tiny_prep):
        calls = []

        def aug(case, rng):
            calls.append(case.id)
            return case

        cfg = TrainConfig(unet_min_epochs=1, unet_max_epochs=1, patience=0,
                          batch_size=4, seed=0)
        train_unet(cfg, tiny_prep[:4], tiny_prep[:2], "plain", augment=aug)
        assert sorted(calls) == sorted(c.id for c in tiny_prep[:4])

    def test_joint_mode_updates_pose_net(self, tiny_prep):
        stn1 = build_pose_stn(64, seed=1)
        before = {k: v.copy() for k, v in stn1.state_dict().items()}
        cfg = TrainConfig(unet_min_epochs=1, unet_max_epochs=1, patience=0,
                          batch_size=4, seed=0, joint=True)
        train_unet(cfg, tiny_prep[:4], tiny_prep[:2], "stn1", stn1=stn1)
        after = stn1.state_dict()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_frozen_mode_leaves_pose_net_alone(self, tiny_prep):
        stn1 = build_pose_stn(64, seed=1)
        before = {k: v.copy() for k, v in stn1.state_dict().items()}
        cfg = TrainConfig(unet_min_epochs=1, unet_max_epochs=1, patience=0,
                          batch_size=4, seed=0, joint=False)
        train_unet(cfg, tiny_prep[:4], tiny_prep[:2], "stn1", stn1=stn1)
        after = stn1.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)


@pytest.mark.slow
class TestOverfit:
    def test_four_cases_reach_high_dice(self, tiny_prep):
        cfg = TrainConfig(unet_min_epochs=120, unet_max_epochs=120, patience=0,
                          batch_size=4, seed=0)
        _, log = train_unet(cfg, tiny_prep[:4], tiny_prep[:4], "plain")
        best = log.final["best_val_mean_dice"]
        assert best > 97.0, f"overfit stalled at {best}"
