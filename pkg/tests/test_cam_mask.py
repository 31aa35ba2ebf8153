import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

import advdiffusion as adv
from advdiffusion.cam_mask import MaskConfig


def numpy_conv(x, w, b, stride, pad):
    """Loop-based reference convolution, independent of the tensor library."""
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    co, ci, kh, kw = w.shape
    h_out = (x.shape[1] - kh) // stride + 1
    w_out = (x.shape[2] - kw) // stride + 1
    out = np.zeros((co, h_out, w_out))
    for o in range(co):
        for i in range(h_out):
            for j in range(w_out):
                patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def reference_gradcam(classifier, x, y):
    """Step-by-step re-implementation: forward with loops, analytic grads.

    The tail after the activation map is linear (GAP then a dense layer),
    so d(logit_y)/dA_k is exactly fc_w[k, y] / (H' * W'); the per-channel
    weight is its spatial mean, i.e. the same constant.
    """
    p = classifier.params
    h1 = np.maximum(numpy_conv(x.astype(np.float64), p["conv1_w"],
                               p["conv1_b"], 1, 1), 0.0)
    acts = np.maximum(numpy_conv(h1, p["conv2_w"], p["conv2_b"], 2, 1), 0.0)
    hw = acts.shape[1] * acts.shape[2]
    weights = p["fc_w"][:, y] / hw
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    factor = x.shape[-1] // cam.shape[-1]
    cam = np.repeat(np.repeat(cam, factor, axis=0), factor, axis=1)
    lo, hi = cam.min(), cam.max()
    if hi - lo < 1e-12:
        return np.full(cam.shape, 0.5)
    return (cam - lo) / (hi - lo)


class TestGradcam:
    def test_values_in_unit_interval(self, classifier, dataset16):
        cam = adv.gradcam(classifier, dataset16.images[0], 0)
        assert cam.shape == (32, 32)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        assert cam.min() == pytest.approx(0.0) and cam.max() == pytest.approx(1.0)

    def test_deterministic(self, classifier, dataset16):
        a = adv.gradcam(classifier, dataset16.images[1], 2)
        b = adv.gradcam(classifier, dataset16.images[1], 2)
        assert np.array_equal(a, b)

    def test_matches_independent_reimplementation(self, classifier, dataset16):
        for idx, y in ((0, 0), (3, 5)):
            x = dataset16.images[idx]
            got = adv.gradcam(classifier, x, y)
            want = reference_gradcam(classifier, x, y)
            assert np.abs(got - want).max() < 1e-5

    def test_invalid_class_rejected(self, classifier, dataset16):
        with pytest.raises(ValueError):
            adv.gradcam(classifier, dataset16.images[0], 8)
        with pytest.raises(ValueError):
            adv.gradcam(classifier, dataset16.images[0], -1)

    def test_degenerate_constant_map_normalizes_to_half(self, dataset16):
        flat = adv.ClassifierModel(n_classes=8, seed=0)
        flat.params["conv2_w"] = np.zeros_like(flat.params["conv2_w"])
        flat.params["conv2_b"] = np.ones_like(flat.params["conv2_b"])
        cam = adv.gradcam(flat, dataset16.images[0], 1)
        assert np.array_equal(cam, np.full((32, 32), 0.5))


class TestCamToProb:
    def test_uniform_cam_gives_uniform_distribution(self):
        p = adv.cam_to_prob(np.full((6, 5), 0.4))
        assert np.allclose(p, 1.0 / 30)

    def test_sums_to_one(self):
        cam = np.random.default_rng(0).uniform(0, 1, (32, 32))
        assert adv.cam_to_prob(cam).sum() == pytest.approx(1.0, abs=1e-6)

    def test_hand_evaluated_binary_grid(self):
        cam = np.array([[0.0, 1.0], [0.0, 1.0]])
        p = adv.cam_to_prob(cam, 0.3, 0.7)
        assert np.allclose(p, np.array([[0.15, 0.35], [0.15, 0.35]]))

    def test_fully_supported_after_clamping(self):
        cam = np.zeros((16, 16))
        cam[3, 3] = 1.0
        p = adv.cam_to_prob(cam, 0.3, 0.7)
        assert p.min() >= 0.3 / (16 * 16 * 0.7)

    def test_invalid_range_rejected(self):
        with pytest.raises(ValueError):
            adv.cam_to_prob(np.ones((4, 4)), 0.7, 0.3)


class TestSampleMask:
    def test_interior_patch_has_k_squared_ones(self):
        p = np.zeros((32, 32))
        p[16, 16] = 1.0
        mask = adv.sample_mask(p, 8, np.random.default_rng(0))
        assert mask.sum() == 64
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_border_patch_is_truncated(self):
        p = np.zeros((32, 32))
        p[0, 0] = 1.0
        mask = adv.sample_mask(p, 8, np.random.default_rng(0))
        assert 0 < mask.sum() < 64

    def test_ones_never_exceed_k_squared(self):
        rng = np.random.default_rng(1)
        p = adv.cam_to_prob(rng.uniform(0, 1, (32, 32)))
        for _ in range(50):
            assert adv.sample_mask(p, 8, rng).sum() <= 64

    def test_multiple_patches(self):
        p = np.full((32, 32), 1.0 / 1024)
        mask = adv.sample_mask(p, 8, np.random.default_rng(2), patches_per_step=4)
        assert mask.sum() >= 64  # several patches, possibly overlapping

    def test_unnormalized_distribution_rejected(self):
        with pytest.raises(ValueError):
            adv.sample_centers(np.full((4, 4), 1.0), 10, np.random.default_rng(0))

    def test_cover_rate_tracks_probability(self):
        # pixels with higher sampling mass get reverted more often
        rng = np.random.default_rng(9)
        cam = rng.uniform(0, 1, (32, 32))
        p = adv.cam_to_prob(cam, 0.3, 0.7)
        cover = np.zeros((32, 32))
        draws = 20000
        centers = adv.sample_centers(p, draws, rng)
        for c in centers:
            cy, cx = divmod(int(c), 32)
            y0, x0 = max(0, cy - 4), max(0, cx - 4)
            cover[y0:cy + 4, x0:cx + 4] += 1
        rho = spearmanr(p.ravel(), (cover / draws).ravel()).statistic
        assert rho > 0.5


class TestBlend:
    def test_mask_zero_keeps_generated(self):
        rng = np.random.default_rng(3)
        x_t, x_til = rng.uniform(0, 1, (3, 8, 8)), rng.uniform(0, 1, (3, 8, 8))
        assert np.array_equal(adv.blend(x_t, x_til, np.zeros((8, 8))), x_til)

    def test_mask_one_keeps_renoised_original(self):
        rng = np.random.default_rng(4)
        x_t, x_til = rng.uniform(0, 1, (3, 8, 8)), rng.uniform(0, 1, (3, 8, 8))
        assert np.array_equal(adv.blend(x_t, x_til, np.ones((8, 8))), x_t)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 16 - 1))
    def test_equal_inputs_unaffected_by_mask(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, (3, 4, 4))
        m = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(float)
        assert np.allclose(adv.blend(x, x, m), x)

    def test_mask_broadcasts_across_channels(self):
        x_t = np.ones((3, 4, 4))
        x_til = np.zeros((3, 4, 4))
        m = np.zeros((4, 4))
        m[1, 2] = 1.0
        out = adv.blend(x_t, x_til, m)
        assert np.array_equal(out[0], m) and np.array_equal(out[2], m)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adv.blend(np.ones((3, 4, 4)), np.ones((3, 4, 4)), np.ones((5, 5)))


class TestMaskConfig:
    def test_defaults_follow_reference_setting(self):
        cfg = MaskConfig()
        assert cfg.k == 8 and cfg.clip_lo == 0.3 and cfg.clip_hi == 0.7

    @pytest.mark.parametrize("kwargs", [
        dict(k=0), dict(clip_lo=0.5, clip_hi=0.5), dict(clip_lo=-0.1),
        dict(clip_hi=1.5), dict(patches_per_step=0),
    ])
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            MaskConfig(**kwargs)


class TestClassifier:
    def test_logit_vector_length(self, classifier, dataset16):
        assert classifier.logits(dataset16.images[0]).shape == (8,)

    def test_training_beats_chance(self, dataset16):
        model = adv.train_classifier(dataset16.images, dataset16.labels,
                                     steps=120, seed=3)
        hits = sum(model.predict(dataset16.images[i]) == dataset16.labels[i]
                   for i in range(len(dataset16)))
        assert hits / len(dataset16) > 0.25  # chance is 1/8

    def test_bad_inputs_rejected(self):
        with pytest.raises(ValueError):
            adv.train_classifier(np.zeros((0, 3, 8, 8)), np.zeros(0))

    def test_save_load_round_trip(self, tmp_path, classifier, dataset16):
        adv.save_classifier(classifier, tmp_path / "clf")
        loaded = adv.load_classifier(tmp_path / "clf")
        x = dataset16.images[2]
        assert np.allclose(classifier.logits(x), loaded.logits(x), atol=1e-6)
