"""Patch transformer: forward contracts, losses, gradients, thresholding."""

import math

import numpy as np
import pytest

from neurotwin.errors import (
    DegenerateStatsError,
    InvalidInputError,
    ShapeError,
)
from neurotwin.vit import (
    LossConfig,
    PatchGrid,
    PatchProbMap,
    VitConfig,
    adaptive_threshold,
    attention_entropy,
    attention_entropy_loss,
    bce_loss,
    classify_patches,
    forward,
    grad_check,
    init_params,
    load_model,
    loss_and_grads,
    make_scan_corpus,
    mean_attention_entropy,
    patch_attribution,
    patchify,
    reassemble,
    resize_image,
    save_model,
    select_reg_maps,
    synth_scan,
    threshold_from_stats,
    total_loss,
    train,
    train_step,
)

TINY = VitConfig(image_size=32, patch_size=16, d_model=8, n_heads=1,
                 n_layers=1, d_ff=16)
FULL = VitConfig()


def tiny_batch(n=2, seed=5):
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(n):
        image, labels = synth_scan(rng, TINY)
        batch.append((patchify(image, TINY.patch_size), labels))
    return batch


class TestPatchify:
    def test_64x64_gives_16_patches_of_256(self):
        image = np.zeros((64, 64))
        grid = patchify(image, 16)
        assert grid.patches.shape == (16, 256)

    def test_reassemble_inverse(self):
        rng = np.random.default_rng(1)
        image = rng.uniform(0, 1, (64, 64))
        np.testing.assert_array_equal(reassemble(patchify(image, 16)), image)

    def test_600x600_not_divisible(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((600, 600)), 16)

    def test_row_major_patch_order(self):
        image = np.zeros((32, 32))
        image[0:16, 16:32] = 1.0  # row 0, col 1 -> patch index 1
        grid = patchify(image, 16)
        assert grid.patches[1].min() == 1.0
        assert grid.patches[0].max() == 0.0

    def test_resize_conforms_clinical_export(self):
        rng = np.random.default_rng(2)
        big = rng.uniform(0, 1, (600, 600))
        small = resize_image(big, 64, 64)
        assert small.shape == (64, 64)
        assert 0.0 <= small.min() and small.max() <= 1.0


class TestForward:
    def test_zero_weights_give_half_probs_uniform_attention(self):
        params = init_params(FULL, 0, zero=True)
        rng = np.random.default_rng(3)
        image, _ = synth_scan(rng, FULL)
        probs, maps, _ = forward(params, patchify(image, 16), FULL)
        np.testing.assert_allclose(probs.probs, 0.5, atol=1e-15)
        for alpha in maps:
            np.testing.assert_allclose(alpha, 1.0 / 16.0, atol=1e-15)

    def test_prob_count_matches_patches(self):
        params = init_params(FULL, 1)
        rng = np.random.default_rng(4)
        image, _ = synth_scan(rng, FULL)
        probs, maps, _ = forward(params, patchify(image, 16), FULL)
        assert probs.probs.shape == (16,)
        assert len(maps) == FULL.n_layers * FULL.n_heads

    def test_rows_stochastic_after_every_forward(self):
        rng = np.random.default_rng(5)
        for seed in range(5):
            params = init_params(FULL, seed)
            image, _ = synth_scan(rng, FULL)
            _, maps, _ = forward(params, patchify(image, 16), FULL)
            for alpha in maps:
                np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)
                assert alpha.min() >= 0.0 and alpha.max() <= 1.0

    def test_permutation_equivariant_without_positions(self):
        config = VitConfig(use_positions=False)
        params = init_params(config, 7)
        rng = np.random.default_rng(6)
        image, _ = synth_scan(rng, config)
        grid = patchify(image, 16)
        perm = rng.permutation(16)
        grid_perm = PatchGrid(grid.patches[perm], grid.image_hw, grid.patch_size)
        out_a, _, _ = forward(params, grid, config)
        out_b, _, _ = forward(params, grid_perm, config)
        np.testing.assert_allclose(out_b.probs, out_a.probs[perm], atol=1e-12)


class TestEntropy:
    def test_uniform_row_attains_log_n(self):
        alpha = np.full((16, 16), 1.0 / 16.0)
        h = attention_entropy(alpha)
        np.testing.assert_allclose(h, math.log(16), atol=1e-6)

    def test_one_hot_row_near_zero(self):
        h = attention_entropy(np.eye(16))
        assert np.all(np.abs(h) < 1e-7)

    def test_two_patch_uniform(self):
        h = attention_entropy(np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(h[0], math.log(2), atol=1e-6)

    def test_row_sum_violation_detected(self):
        bad = np.full((4, 4), 0.3)
        with pytest.raises(InvalidInputError):
            attention_entropy(bad)

    def test_entropy_bounds_on_softmax_outputs(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            logits = rng.normal(0, 3, (16, 16))
            alpha = np.exp(logits)
            alpha /= alpha.sum(axis=1, keepdims=True)
            h = attention_entropy(alpha)
            assert np.all(h >= 0.0)
            assert np.all(h <= math.log(16) + 1e-6)


class TestLosses:
    def test_uniform_maps_loss_is_minus_log_n(self):
        alpha = np.full((16, 16), 1.0 / 16.0)
        np.testing.assert_allclose(attention_entropy_loss([alpha]),
                                   -math.log(16), atol=1e-6)

    def test_one_hot_maps_loss_near_zero(self):
        assert abs(attention_entropy_loss([np.eye(16)])) < 1e-7

    def test_loss_ordering_by_concentration(self):
        uniform = np.full((16, 16), 1.0 / 16.0)
        half = np.full((16, 16), 0.5 / 15.0)
        np.fill_diagonal(half, 0.5)
        one_hot = np.eye(16)
        losses = [attention_entropy_loss([m]) for m in (uniform, half, one_hot)]
        assert losses[0] < losses[1] < losses[2]

    def test_loss_in_valid_range_for_softmax_maps(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            logits = rng.normal(0, 2, (16, 16))
            alpha = np.exp(logits)
            alpha /= alpha.sum(axis=1, keepdims=True)
            val = attention_entropy_loss([alpha])
            assert -math.log(16) - 1e-6 <= val <= 0.0

    def test_bce_exact_labels(self):
        pm = PatchProbMap(np.array([1.0, 0.0]))
        assert bce_loss(pm, np.array([1, 0])) < 1e-11

    def test_bce_half_is_log_two(self):
        pm = PatchProbMap(np.full(8, 0.5))
        np.testing.assert_allclose(bce_loss(pm, np.array([0, 1] * 4)),
                                   math.log(2), atol=1e-12)

    def test_bce_hand_case(self):
        pm = PatchProbMap(np.array([0.9, 0.2]))
        expected = -(math.log(0.9) + math.log(0.8)) / 2.0
        np.testing.assert_allclose(bce_loss(pm, np.array([1, 0])), expected,
                                   atol=1e-12)

    def test_total_reduces_to_bce_at_zero_weight(self):
        params = init_params(TINY, 3)
        grid, labels = tiny_batch(1)[0]
        probs, maps, _ = forward(params, grid, TINY)
        zero_cfg = LossConfig(entropy_weight=0.0)
        assert total_loss(probs, labels, maps, zero_cfg) == bce_loss(probs, labels)

    def test_total_hand_sum(self):
        alpha = np.full((16, 16), 1.0 / 16.0)
        pm = PatchProbMap(np.full(16, 0.5))
        labels = np.array([0, 1] * 8)
        val = total_loss(pm, labels, [alpha], LossConfig(entropy_weight=1.0))
        np.testing.assert_allclose(val, math.log(2) - math.log(16), atol=1e-6)

    def test_total_monotone_in_weight(self):
        params = init_params(TINY, 3)
        grid, labels = tiny_batch(1)[0]
        probs, maps, _ = forward(params, grid, TINY)
        vals = [total_loss(probs, labels, maps, LossConfig(entropy_weight=w))
                for w in (0.0, 0.5, 1.0)]
        assert vals[0] > vals[1] > vals[2]  # entropy term is negative


class TestGradients:
    def test_analytic_matches_finite_differences(self):
        params = init_params(TINY, 42)
        err = grad_check(params, tiny_batch(), TINY, LossConfig(entropy_weight=0.7))
        assert err <= 1e-4

    def test_reg_gradient_only_touches_attention_paths(self):
        config = VitConfig(image_size=32, patch_size=16, d_model=8, n_heads=2,
                           n_layers=2, d_ff=12)
        params = init_params(config, 11)
        batch = []
        rng = np.random.default_rng(12)
        image, labels = synth_scan(rng, config)
        batch.append((patchify(image, 16), labels))
        _, g_ce = loss_and_grads(params, batch, config,
                                 LossConfig(entropy_weight=0.0))
        _, g_total = loss_and_grads(params, batch, config,
                                    LossConfig(entropy_weight=1.0))
        diff = {name: arr2 - arr1
                for (name, arr1), (_, arr2) in zip(g_ce.named_arrays(),
                                                   g_total.named_arrays())}
        # downstream of every attention map: no reg gradient
        for name in ("head.w", "head.b", "layers.1.wv", "layers.1.wo",
                     "layers.1.w1", "layers.1.w2"):
            assert np.allclose(diff[name], 0.0, atol=1e-15), name
        # the attention projections feel it
        assert np.abs(diff["layers.0.wq"]).max() > 0
        assert np.abs(diff["layers.1.wk"]).max() > 0

    def test_training_loss_nonincreasing_at_small_lr(self):
        corpus = make_scan_corpus(seed=77, n_images=4, config=FULL)
        params = init_params(FULL, 3)
        _, history = train(params, corpus, FULL, LossConfig(entropy_weight=0.5),
                           lr=0.01, steps=50)
        totals = [h["total"] for h in history]
        violations = sum(1 for a, b in zip(totals[:-1], totals[1:]) if b > a)
        assert violations <= 5

    def test_train_step_requires_positive_lr(self):
        params = init_params(TINY, 0)
        with pytest.raises(InvalidInputError):
            train_step(params, tiny_batch(), TINY, LossConfig(), lr=0.0)


class TestAdaptiveThreshold:
    def test_high_noise_worked_example(self):
        stats = threshold_from_stats(0.32, 0.12, 1.5)
        assert abs(stats.threshold - 0.50) < 1e-12

    def test_clean_worked_example(self):
        stats = threshold_from_stats(0.20, 0.06, 1.5)
        assert abs(stats.threshold - 0.29) < 1e-12

    def test_zero_sigma_gives_mean(self):
        stats = threshold_from_stats(0.4, 0.0, 1.5)
        assert stats.threshold == 0.4

    def test_threshold_identity_holds(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            probs = rng.uniform(0, 1, 64)
            stats = adaptive_threshold(probs)
            assert stats.threshold == stats.mean_bg + stats.k * stats.std_bg

    def test_classification_rule_is_strict(self):
        probs = np.array([0.2, 0.5, 0.8])
        flags = classify_patches(probs, 0.5)
        assert list(flags) == [False, False, True]

    def test_too_few_background_patches(self):
        with pytest.raises(DegenerateStatsError):
            adaptive_threshold(np.array([0.1, 0.9]))

    def test_repeated_scan_same_threshold(self):
        rng = np.random.default_rng(14)
        probs = rng.uniform(0, 1, 256)
        a = adaptive_threshold(probs)
        b = adaptive_threshold(probs.copy())
        assert a.threshold == b.threshold


class TestAttribution:
    def test_zero_model_flat_heatmap(self):
        params = init_params(FULL, 0, zero=True)
        rng = np.random.default_rng(15)
        image, _ = synth_scan(rng, FULL)
        heat = patch_attribution(params, patchify(image, 16), FULL)
        np.testing.assert_array_equal(heat, np.zeros(16))

    def test_overfit_single_patch_argmax(self):
        image = np.full((64, 64), 0.2)
        image[16:32, 32:48] += 0.6  # patch (1, 2) -> index 6
        image = np.clip(image, 0, 1)
        labels = np.zeros(16, dtype=int)
        labels[6] = 1
        grid = patchify(image, 16)
        params = init_params(FULL, 8)
        params, _ = train(params, [(grid, labels)], FULL,
                          LossConfig(entropy_weight=0.1), lr=0.1, steps=150)
        heat = patch_attribution(params, grid, FULL)
        assert int(np.argmax(heat)) == 6

    def test_heatmap_always_in_unit_range(self):
        rng = np.random.default_rng(16)
        for seed in range(5):
            params = init_params(FULL, seed)
            image, _ = synth_scan(rng, FULL)
            heat = patch_attribution(params, patchify(image, 16), FULL)
            assert heat.min() >= 0.0 and heat.max() <= 1.0


class TestScopeAndCheckpoints:
    def test_final_scope_selects_last_layer_maps(self):
        params = init_params(FULL, 2)
        rng = np.random.default_rng(17)
        image, _ = synth_scan(rng, FULL)
        _, maps, _ = forward(params, patchify(image, 16), FULL)
        final_cfg = VitConfig(reg_layer_scope="final")
        assert len(select_reg_maps(maps, final_cfg)) == FULL.n_heads
        assert select_reg_maps(maps, FULL) == maps

    def test_checkpoint_round_trip(self, tmp_path):
        params = init_params(FULL, 9)
        path = str(tmp_path / "model.json")
        save_model(path, params, FULL)
        loaded, config = load_model(path)
        assert config == FULL
        for (name, a), (_, b) in zip(params.named_arrays(),
                                     loaded.named_arrays()):
            np.testing.assert_array_equal(a, b), name

    def test_mean_entropy_diagnostic_bounded(self):
        params = init_params(FULL, 10)
        corpus = make_scan_corpus(seed=3, n_images=2, config=FULL)
        val = mean_attention_entropy(params, corpus, FULL)
        assert 0.0 < val <= math.log(16) + 1e-6
