"""Noise blend algebra: decay weights, guidance composition, the
autoregressive editing loop, and mask query sampling."""

import numpy as np
import pytest

from driftsplat.blend import (
    BlendConfig,
    NoiseField,
    SyntheticDenoiser,
    autoregressive_edit,
    blended_noise,
    cfg_compose,
    decay_weights,
    sample_query_points,
    score_estimate,
)
from driftsplat.core import Frame


class TestNoiseField:
    def test_algebra(self):
        a = NoiseField(np.full((2, 2), 3.0))
        b = NoiseField(np.full((2, 2), 1.0))
        np.testing.assert_array_equal((a + b).data, 4.0)
        np.testing.assert_array_equal((a - b).data, 2.0)
        np.testing.assert_array_equal((a * 0.5).data, 1.5)
        np.testing.assert_array_equal((0.5 * a).data, 1.5)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            NoiseField(np.array([np.inf]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            NoiseField(np.zeros(3)) + NoiseField(np.zeros(4))

    def test_zeros(self):
        z = NoiseField.zeros((3, 2))
        assert z.shape == (3, 2)
        assert z.data.sum() == 0.0


class TestDecayWeights:
    def test_sum_to_one(self):
        for w in (1, 2, 3, 5, 8):
            for lam in (0.1, 0.5, 0.9, 1.0):
                assert abs(sum(decay_weights(w, lam)) - 1.0) < 1e-12

    def test_consecutive_ratio_is_inverse_lambda(self):
        ws = decay_weights(5, 0.7)
        for older, newer in zip(ws, ws[1:]):
            assert newer / older == pytest.approx(1.0 / 0.7, rel=1e-12)

    def test_half_decay_window_three_exact(self):
        assert decay_weights(3, 0.5) == [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]

    def test_newest_dominates(self):
        ws = decay_weights(4, 0.3)
        assert ws == sorted(ws)
        assert ws[-1] > 0.5

    def test_lambda_one_uniform(self):
        assert decay_weights(4, 1.0) == [0.25] * 4

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            decay_weights(0, 0.5)
        with pytest.raises(ValueError):
            decay_weights(3, 0.0)
        with pytest.raises(ValueError):
            decay_weights(3, 1.5)


class TestBlendedNoise:
    def test_weighted_average(self):
        fields = [NoiseField(np.full((2,), 1.0)), NoiseField(np.full((2,), 5.0))]
        out = blended_noise(fields, [0.25, 0.75])
        np.testing.assert_allclose(out.data, 4.0)

    def test_rejects_unnormalized_weights(self):
        fields = [NoiseField(np.zeros(2)), NoiseField(np.zeros(2))]
        with pytest.raises(ValueError):
            blended_noise(fields, [0.5, 0.6])

    def test_rejects_empty_and_mismatched(self):
        with pytest.raises(ValueError):
            blended_noise([], [])
        with pytest.raises(ValueError):
            blended_noise([NoiseField(np.zeros(2)), NoiseField(np.zeros(3))], [0.5, 0.5])


class TestGuidance:
    def test_closed_form_value(self):
        u = NoiseField(np.full((2, 2), 1.0))
        i = NoiseField(np.full((2, 2), 2.0))
        f = NoiseField(np.full((2, 2), 3.0))
        out = cfg_compose(u, i, f, s_f=1.5, s_t=7.5)
        # 1 + 1.5 * (2 - 1) + 7.5 * (3 - 2) = 10
        np.testing.assert_allclose(out.data, 10.0)

    def test_unit_scales_telescope_to_full(self):
        rng = np.random.default_rng(0)
        u = NoiseField(rng.normal(size=(4, 4)))
        i = NoiseField(rng.normal(size=(4, 4)))
        f = NoiseField(rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(cfg_compose(u, i, f, 1.0, 1.0).data, f.data)

    def test_zero_scales_collapse_to_uncond(self):
        rng = np.random.default_rng(1)
        u = NoiseField(rng.normal(size=(4, 4)))
        i = NoiseField(rng.normal(size=(4, 4)))
        f = NoiseField(rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(cfg_compose(u, i, f, 0.0, 0.0).data, u.data)

    def test_score_mix(self):
        t = NoiseField(np.full((2,), 1.0))
        b = NoiseField(np.full((2,), 2.0))
        out = score_estimate(t, b, gamma_f=0.7, gamma_e=0.3)
        np.testing.assert_allclose(out.data, 0.7 * 1.0 + 0.3 * 2.0)


class TestBlendConfig:
    def test_defaults_valid(self):
        cfg = BlendConfig()
        assert cfg.w == 3 and cfg.steps == 20

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            BlendConfig(w=0)
        with pytest.raises(ValueError):
            BlendConfig(lambda_d=0.0)
        with pytest.raises(ValueError):
            BlendConfig(steps=0)


class TestAutoregressiveEdit:
    def constant_frames(self, values, shape=(4, 4)):
        return [Frame(image=np.full(shape + (3,), v)) for v in values]

    def full_masks(self, n, shape=(4, 4)):
        return [np.ones(shape) for _ in range(n)]

    def test_first_frame_closed_form(self):
        # constant image v, linear denoiser: every field stays constant, so
        # the per-step update has an exact scalar recurrence
        v = 0.5
        a, b, c = 0.25, 0.5, 0.125
        cfg = BlendConfig(steps=3, s_f=1.5, s_t=7.5, gamma_f=0.7, gamma_e=0.3)
        frames = self.constant_frames([v])
        out = autoregressive_edit(frames, self.full_masks(1), SyntheticDenoiser(a, b, c), cfg)
        x = v
        for _ in range(cfg.steps):
            eps_u = a * x
            eps_i = a * x + b * v
            eps_fl = a * x + b * v + c
            tilde = eps_u + cfg.s_f * (eps_i - eps_u) + cfg.s_t * (eps_fl - eps_i)
            x = x - (cfg.gamma_f * tilde) / cfg.steps
        np.testing.assert_allclose(out[0], x, atol=1e-9)

    def test_window_recurrence_closed_form(self):
        # three constant frames, full masks: each edited frame is a constant
        # image whose value follows the scalar recurrence over the window
        vals = [0.2, 0.6, 0.9]
        a, b, c = 0.25, 0.5, 0.125
        cfg = BlendConfig(w=2, lambda_d=0.5, steps=4, s_f=1.5, s_t=7.5,
                          gamma_f=0.7, gamma_e=0.3)
        frames = self.constant_frames(vals)
        out = autoregressive_edit(frames, self.full_masks(3), SyntheticDenoiser(a, b, c), cfg)

        edited_vals = []
        for n, v in enumerate(vals):
            window = edited_vals[max(0, n - cfg.w):n]
            x = v
            for _ in range(cfg.steps):
                tilde = (a * x) + cfg.s_f * b * v + cfg.s_t * c
                if window:
                    betas = decay_weights(len(window), cfg.lambda_d)
                    bar = sum(bb * (a * x + b * e) for bb, e in zip(betas, window))
                else:
                    bar = 0.0
                x = x - (cfg.gamma_f * tilde + cfg.gamma_e * bar) / cfg.steps
            edited_vals.append(x)
        for got, want in zip(out, edited_vals):
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_zero_gamma_e_matches_single_frame_path(self):
        # with the window term weightless, editing a sequence must equal
        # editing each frame alone
        rng = np.random.default_rng(2)
        imgs = [rng.uniform(size=(4, 4, 3)) for _ in range(3)]
        frames = [Frame(image=im) for im in imgs]
        cfg = BlendConfig(gamma_e=0.0, steps=5)
        seq = autoregressive_edit(frames, self.full_masks(3), SyntheticDenoiser(), cfg)
        for i, frame in enumerate(frames):
            solo = autoregressive_edit([frame], self.full_masks(1), SyntheticDenoiser(), cfg)
            np.testing.assert_allclose(seq[i], solo[0], atol=1e-12)

    def test_mask_composites_hard(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(4, 4, 3))
        mask = np.zeros((4, 4))
        mask[:2] = 1.0
        out = autoregressive_edit([Frame(image=img)], [mask], SyntheticDenoiser(),
                                  BlendConfig(steps=3))[0]
        np.testing.assert_array_equal(out[2:], img[2:])
        assert np.abs(out[:2] - img[:2]).max() > 1e-6

    def test_none_mask_passthrough(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(size=(4, 4, 3))
        out = autoregressive_edit([Frame(image=img)], [None], SyntheticDenoiser(),
                                  BlendConfig(steps=3))[0]
        np.testing.assert_array_equal(out, img)

    def test_trace_covers_every_step(self):
        rows = []
        frames = self.constant_frames([0.3, 0.7])
        cfg = BlendConfig(steps=4)
        autoregressive_edit(frames, self.full_masks(2), SyntheticDenoiser(), cfg,
                            trace=rows.append)
        assert len(rows) == 2 * 4
        assert rows[0]["frame"] == 0 and rows[0]["step"] == 4
        assert {"eps_tilde_mean", "eps_bar_mean", "score_mean", "latent_mean"} <= set(rows[0])

    def test_empty_frames_rejected(self):
        with pytest.raises(ValueError):
            autoregressive_edit([], None, SyntheticDenoiser(), BlendConfig())


class TestQueryPoints:
    def test_single_blob_medoid_near_center(self):
        mask = np.zeros((21, 21))
        yy, xx = np.mgrid[:21, :21]
        mask[(yy - 10) ** 2 + (xx - 10) ** 2 <= 36] = 1.0
        pts = sample_query_points(mask, k=1, seed=0)
        assert pts.shape == (1, 2)
        assert abs(pts[0, 0] - 10) <= 1 and abs(pts[0, 1] - 10) <= 1

    def test_two_blobs_one_medoid_each(self):
        mask = np.zeros((10, 30))
        mask[3:7, 2:8] = 1.0
        mask[3:7, 22:28] = 1.0
        pts = sample_query_points(mask, k=2, seed=0)
        cols = sorted(pts[:, 1].tolist())
        assert cols[0] < 10 and cols[1] > 20

    def test_points_lie_on_mask(self):
        rng = np.random.default_rng(5)
        mask = (rng.uniform(size=(16, 16)) > 0.6).astype(float)
        pts = sample_query_points(mask, k=4, seed=1)
        for r, c in pts:
            assert mask[r, c] == 1.0

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(6)
        mask = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
        a = sample_query_points(mask, k=3, seed=2)
        b = sample_query_points(mask, k=3, seed=2)
        np.testing.assert_array_equal(a, b)

    def test_k_beyond_foreground_rejected(self):
        mask = np.zeros((8, 8))
        mask[0, 0] = 1.0
        mask[5, 5] = 1.0
        with pytest.raises(ValueError):
            sample_query_points(mask, k=10, seed=0)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            sample_query_points(np.zeros((8, 8)), k=2)
