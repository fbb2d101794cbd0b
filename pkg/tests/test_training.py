import math

import numpy as np
import pytest

from vigunet import (
    Adam,
    CosineSchedule,
    ModelConfig,
    ShapeError,
    StateError,
    Tensor,
    augment_sample,
    bce_loss,
    build_vig_unet,
    channel_stats,
    dice_loss,
    dice_metric,
    evaluate,
    fit,
    iou_metric,
    mixed_loss,
    normalize_image,
    predict_mask,
    train_epoch,
)
from gradcheck import assert_gradients_match


def logits_of(arr):
    return Tensor(np.asarray(arr, dtype=np.float64).reshape(1, 1, 1, -1))


class TestLosses:
    def test_bce_confident_correct_is_near_zero(self):
        n = 16
        val = float(bce_loss(logits_of([20.0] * n), np.ones((1, 1, 1, n))).data)
        assert 0.0 < val < 1e-6

    def test_bce_at_zero_logit_is_log_two(self):
        for target in (0.0, 1.0):
            val = float(bce_loss(logits_of([0.0]), np.full((1, 1, 1, 1), target)).data)
            assert val == pytest.approx(math.log(2.0), abs=1e-12)

    def test_bce_hand_values(self):
        # softplus(-1) and softplus(-1) + 1
        assert float(bce_loss(logits_of([-1.0]), np.zeros((1, 1, 1, 1))).data) \
            == pytest.approx(0.31326168751822286, abs=1e-12)
        assert float(bce_loss(logits_of([-1.0]), np.ones((1, 1, 1, 1))).data) \
            == pytest.approx(1.3132616875182228, abs=1e-12)

    def test_bce_averages_over_all_pixels(self, rng):
        x = rng.normal(size=(2, 1, 3, 3))
        y = (rng.random(size=(2, 1, 3, 3)) > 0.5).astype(float)
        whole = float(bce_loss(Tensor(x), y).data)
        manual = np.mean(np.logaddexp(0.0, x) - x * y)
        assert whole == pytest.approx(manual, rel=1e-9)

    def test_dice_perfect_prediction_near_zero(self):
        n = 100
        val = float(dice_loss(logits_of([20.0] * n), np.ones((1, 1, 1, n))).data)
        assert val == pytest.approx(0.0, abs=1e-6)

    def test_dice_all_background_prediction(self):
        # predicted probabilities ~0 against 100 positive pixels:
        # 1 - (0 + 1) / (0 + 100 + 1)
        y = np.zeros((1, 1, 1, 200))
        y[..., :100] = 1.0
        val = float(dice_loss(logits_of([-50.0] * 200), y).data)
        assert val == pytest.approx(1.0 - 1.0 / 101.0, abs=1e-9)

    def test_dice_smooth_term_keeps_empty_case_finite(self):
        val = float(dice_loss(logits_of([-50.0] * 8), np.zeros((1, 1, 1, 8))).data)
        assert val == pytest.approx(0.0, abs=1e-6)

    def test_mixed_is_half_bce_plus_dice(self, rng):
        for _ in range(20):
            x = rng.normal(size=(2, 1, 4, 4)) * 3
            y = (rng.random(size=(2, 1, 4, 4)) > 0.5).astype(float)
            mixed = float(mixed_loss(Tensor(x), y).data)
            parts = 0.5 * float(bce_loss(Tensor(x), y).data) \
                + float(dice_loss(Tensor(x), y).data)
            assert mixed == pytest.approx(parts, abs=1e-12)

    def test_loss_gradients_match_finite_differences(self, rng):
        y = (rng.random(size=(1, 1, 3, 3)) > 0.5).astype(float)
        for fn in (bce_loss, dice_loss, mixed_loss):
            assert_gradients_match(lambda x: fn(x, y),
                                   [rng.normal(size=(1, 1, 3, 3))], tol=1e-4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            bce_loss(logits_of([0.0, 0.0]), np.zeros((1, 1, 1, 3)))


class TestMetrics:
    def test_hand_example(self):
        pred = np.array([1, 1, 0, 0])
        target = np.array([1, 0, 1, 0])
        assert iou_metric(pred, target) == pytest.approx(1.0 / 3.0)
        assert dice_metric(pred, target) == pytest.approx(0.5)

    def test_both_empty_is_one(self):
        z = np.zeros(10)
        assert iou_metric(z, z) == 1.0
        assert dice_metric(z, z) == 1.0

    def test_disjoint_is_zero(self):
        pred = np.array([1, 0])
        assert iou_metric(pred, 1 - pred) == 0.0
        assert dice_metric(pred, 1 - pred) == 0.0

    def test_dice_iou_identity(self, rng):
        for _ in range(200):
            pred = rng.random(size=30) > rng.random()
            target = rng.random(size=30) > rng.random()
            i = iou_metric(pred, target)
            d = dice_metric(pred, target)
            assert abs(d - 2 * i / (1 + i)) < 1e-12

    def test_predict_mask_threshold(self):
        logits = logits_of([-0.1, 0.0, 0.1])
        mask = predict_mask(logits)
        assert mask.dtype == np.uint8
        np.testing.assert_array_equal(mask.reshape(-1), [0, 1, 1])


class TestAdam:
    def test_zero_gradient_leaves_params_alone(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        p.grad = np.array([3.0, -0.5])
        opt = Adam([p], lr=0.01)
        opt.step()
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)

    def test_matches_reference_recurrence(self):
        grads = [0.3, -1.2, 0.05, 0.9, -0.4]
        p = Tensor(np.array([0.7]), requires_grad=True)
        opt = Adam([p], lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8)
        for g in grads:
            p.grad = np.array([g])
            opt.step()
        # independent scalar re-implementation
        theta, m, v = 0.7, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            theta -= 0.05 * mh / (math.sqrt(vh) + 1e-8)
        assert float(p.data[0]) == pytest.approx(theta, abs=1e-12)

    def test_missing_gradient_raises(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p])
        with pytest.raises(StateError):
            opt.step()

    def test_zero_grad_resets(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([5.0])
        Adam([p]).zero_grad()
        assert p.grad is None


class TestCosineSchedule:
    def test_endpoints_exact(self):
        sched = CosineSchedule(lr_max=1e-4, lr_min=1e-5, t_max=200)
        assert sched(0) == 1e-4
        assert sched(200) == 1e-5

    def test_midpoint(self):
        sched = CosineSchedule(lr_max=1e-4, lr_min=1e-5, t_max=200)
        assert sched(100) == pytest.approx(5.5e-5, rel=1e-12)

    def test_monotone_and_bounded(self):
        sched = CosineSchedule(lr_max=1e-3, lr_min=1e-5, t_max=50)
        values = [sched(e) for e in range(51)]
        assert all(b <= a for a, b in zip(values, values[1:]))
        assert all(1e-5 <= v <= 1e-3 for v in values)

    def test_validation(self):
        with pytest.raises(ValueError):
            CosineSchedule(t_max=0)
        with pytest.raises(ValueError):
            CosineSchedule(lr_max=1e-5, lr_min=1e-4, t_max=10)
        with pytest.raises(ValueError):
            CosineSchedule(t_max=10)(11)
        with pytest.raises(ValueError):
            CosineSchedule(t_max=10)(-1)


class TestNormalization:
    def test_channel_stats_oracle(self):
        img = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
        mean, std = channel_stats([img])
        assert mean[0] == pytest.approx(1.5)
        assert std[0] == pytest.approx(math.sqrt(1.25))

    def test_constant_channel_std_is_floored(self):
        img = np.full((2, 2, 2), 0.3, dtype=np.float32)
        _, std = channel_stats([img])
        np.testing.assert_array_equal(std, np.float32(1e-6))

    def test_normalize_oracle(self):
        img = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
        out = normalize_image(img, [1.0], [2.0])
        np.testing.assert_allclose(out, (img - 1.0) / 2.0)


def dihedral_orbit(img):
    """All 8 rotation/flip variants of an array (last two axes)."""
    out = []
    for k in range(4):
        r = np.rot90(img, k=k, axes=(-2, -1))
        out.append(r)
        out.append(r[..., ::-1])
    return out


class TestAugment:
    def test_deterministic_given_seed(self, rng):
        img = rng.random(size=(3, 6, 6)).astype(np.float32)
        mask = (rng.random(size=(6, 6)) > 0.5).astype(np.float32)
        a = augment_sample(img, mask, np.random.default_rng(5))
        b = augment_sample(img, mask, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_image_and_mask_move_together(self, rng):
        mask = (rng.random(size=(8, 8)) > 0.5).astype(np.float32)
        img = np.broadcast_to(mask, (3, 8, 8)).copy()
        for seed in range(10):
            im2, mk2 = augment_sample(img, mask, np.random.default_rng(seed))
            np.testing.assert_array_equal(im2[0], mk2)

    def test_output_is_a_dihedral_transform_and_all_occur(self, rng):
        img = rng.random(size=(1, 4, 4)).astype(np.float32)
        mask = np.zeros((4, 4), dtype=np.float32)
        orbit = dihedral_orbit(img)
        seen = set()
        for seed in range(200):
            out, _ = augment_sample(img, mask, np.random.default_rng(seed))
            matches = [i for i, ref in enumerate(orbit)
                       if np.array_equal(out, ref)]
            assert matches
            seen.add(matches[0])
        assert len(seen) == 8

    def test_mask_stays_binary_and_unnormalized(self, rng):
        img = rng.random(size=(3, 4, 4)).astype(np.float32)
        mask = (rng.random(size=(4, 4)) > 0.5).astype(np.float32)
        im2, mk2 = augment_sample(img, mask, np.random.default_rng(0),
                                  mean=[0.5] * 3, std=[0.1] * 3)
        assert set(np.unique(mk2)) <= {0.0, 1.0}
        assert im2.min() < 0  # normalization shifted the image

    def test_non_square_rejected(self, rng):
        with pytest.raises(ValueError):
            augment_sample(np.zeros((3, 4, 6)), np.zeros((4, 6)),
                           np.random.default_rng(0))


def micro_model(seed=0):
    cfg = ModelConfig(image_h=32, image_w=32, dims=(2, 4, 8, 16, 32),
                      k=2, heads=1, ffn_ratio=1)
    return build_vig_unet(cfg, rng=np.random.default_rng(seed))


def micro_samples(n, rng):
    out = []
    for _ in range(n):
        img = rng.random(size=(3, 32, 32)).astype(np.float32)
        mask = (rng.random(size=(32, 32)) > 0.5).astype(np.float32)
        out.append((img, mask))
    return out


class TestLoops:
    def test_train_epoch_returns_batch_losses_and_updates(self, rng):
        model = micro_model()
        samples = micro_samples(6, rng)
        opt = Adam([p for _, p in model.named_parameters()], lr=1e-3)
        before = model.enc_graphers[0].fc_in.weight.data.copy()
        losses = train_epoch(model, samples, opt, np.random.default_rng(0),
                             batch_size=4)
        assert len(losses) == 2
        assert all(np.isfinite(v) for v in losses)
        assert not np.array_equal(before, model.enc_graphers[0].fc_in.weight.data)

    def test_train_epoch_is_seed_deterministic(self, rng):
        samples = micro_samples(6, rng)

        def run():
            model = micro_model(seed=3)
            opt = Adam([p for _, p in model.named_parameters()], lr=1e-3)
            return train_epoch(model, samples, opt, np.random.default_rng(11))

        assert run() == run()

    def test_empty_dataset_rejected(self, rng):
        model = micro_model()
        opt = Adam([p for _, p in model.named_parameters()])
        with pytest.raises(ValueError):
            train_epoch(model, [], opt, rng)
        with pytest.raises(ValueError):
            evaluate(model, [])

    def test_evaluate_perfect_predictor_scores_one(self, rng):
        class Oracle:
            def forward(self, x, mode="eval", **kw):
                return (x[:, 0:1, :, :] - 0.5) * 80.0

        samples = []
        for _ in range(3):
            mask = (rng.random(size=(8, 8)) > 0.4).astype(np.float32)
            img = np.broadcast_to(mask, (3, 8, 8)).copy()
            samples.append((img, mask))
        report = evaluate(Oracle(), samples, batch_size=2)
        assert report.mean_iou == 1.0
        assert report.mean_dice == 1.0
        assert len(report.per_iou) == 3

    def test_fit_history_rows(self, rng):
        model = micro_model()
        train = micro_samples(4, rng)
        val = micro_samples(2, rng)
        sched = CosineSchedule(lr_max=1e-3, lr_min=1e-4, t_max=2)
        seen = []
        history = fit(model, train, val, epochs=2, rng=np.random.default_rng(0),
                      schedule=sched, on_epoch=seen.append)
        assert len(history) == 2
        assert history[0]["epoch"] == 0
        assert history[0]["lr"] == sched(0)
        assert history[1]["lr"] == sched(1)
        assert seen == history
        for row in history:
            assert np.isfinite(row["train_loss"])
            assert 0.0 <= row["val_iou"] <= 1.0

    def test_fit_without_validation_reports_nan(self, rng):
        model = micro_model()
        history = fit(model, micro_samples(2, rng), [], epochs=1,
                      rng=np.random.default_rng(0), batch_size=2)
        assert math.isnan(history[0]["val_iou"])
