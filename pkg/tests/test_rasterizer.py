"""Renderer against the brute-force oracle, plus gradient spot checks."""

import numpy as np
import pytest
import torch

from driftsplat import rasterizer
from driftsplat.core import CameraIntrinsics, GaussianScene, PoseSE3

from oracles import brute_force_render
from synth import make_wall_scene


def random_scene(rng, n, sh_degree=0, spread=0.8, z=2.0):
    k = (sh_degree + 1) ** 2
    means = np.concatenate([
        rng.uniform(-spread, spread, (n, 2)),
        rng.uniform(z, z + 1.0, (n, 1)),
    ], axis=1)
    return GaussianScene.from_arrays(
        means=means,
        log_scales=rng.uniform(-2.5, -1.0, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-1.0, 2.0, n),
        sh=rng.normal(size=(n, k, 3)) * 0.5,
        m=rng.normal(size=(n, 2)),
    )


def small_intrinsics(size=12, focal=14.0):
    return CameraIntrinsics(fx=focal, fy=focal, cx=size / 2, cy=size / 2,
                            width=size, height=size)


def random_pose(rng, scale=0.08):
    return PoseSE3.exp(rng.normal(size=6) * scale)


class TestForwardAgainstOracle:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_single_tile(self, seed):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, n=8, sh_degree=seed % 3)
        intr = small_intrinsics()
        pose = random_pose(rng)
        out = rasterizer.render(scene, pose, intr, background=(0.1, 0.2, 0.3))
        ref = brute_force_render(scene, pose, intr, background=(0.1, 0.2, 0.3))
        np.testing.assert_allclose(out.color, ref["color"], atol=1e-12)
        np.testing.assert_allclose(out.alpha, ref["alpha"], atol=1e-12)
        np.testing.assert_allclose(out.depth, ref["depth"], atol=1e-12)
        np.testing.assert_allclose(out.identity, ref["identity"], atol=1e-12)
        np.testing.assert_array_equal(out.contrib_count, ref["contrib"])

    def test_matches_brute_force_multi_tile(self):
        rng = np.random.default_rng(42)
        scene = random_scene(rng, n=25, spread=1.4)
        intr = CameraIntrinsics(fx=30.0, fy=30.0, cx=20.0, cy=12.0, width=40, height=24)
        pose = random_pose(rng)
        out = rasterizer.render(scene, pose, intr)
        ref = brute_force_render(scene, pose, intr)
        np.testing.assert_allclose(out.color, ref["color"], atol=1e-12)
        np.testing.assert_allclose(out.alpha, ref["alpha"], atol=1e-12)
        np.testing.assert_allclose(out.identity, ref["identity"], atol=1e-12)
        np.testing.assert_array_equal(out.contrib_count, ref["contrib"])

    def test_sh_degree_3_view_dependence(self):
        rng = np.random.default_rng(7)
        scene = random_scene(rng, n=5, sh_degree=3)
        intr = small_intrinsics()
        out0 = rasterizer.render(scene, PoseSE3.identity(), intr)
        shifted = PoseSE3.exp(np.array([0.0, 0.25, 0.0, 0.0, 0.0, 0.0]))
        out1 = rasterizer.render(scene, shifted, intr)
        ref0 = brute_force_render(scene, PoseSE3.identity(), intr)
        np.testing.assert_allclose(out0.color, ref0["color"], atol=1e-12)
        assert not np.allclose(out0.color, out1.color)


class TestCompositingProperties:
    def test_empty_scene_is_background(self):
        scene = GaussianScene.from_arrays(
            means=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)), opacity_logits=np.zeros(0),
            sh=np.zeros((0, 1, 3)),
        )
        intr = small_intrinsics(8)
        out = rasterizer.render(scene, PoseSE3.identity(), intr, background=(0.4, 0.5, 0.6))
        np.testing.assert_allclose(out.color, np.broadcast_to([0.4, 0.5, 0.6], (8, 8, 3)))
        assert out.alpha.max() == 0.0
        assert out.contrib_count.max() == 0

    def test_identity_channels_sum_to_alpha(self):
        rng = np.random.default_rng(3)
        scene = random_scene(rng, n=12)
        intr = small_intrinsics()
        out = rasterizer.render(scene, random_pose(rng), intr)
        np.testing.assert_allclose(out.identity.sum(axis=2), out.alpha, atol=1e-12)

    def test_behind_camera_culled(self):
        rng = np.random.default_rng(4)
        scene = random_scene(rng, n=4)
        scene.means[:2, 2] = -1.0
        intr = small_intrinsics()
        out = rasterizer.render(scene, PoseSE3.identity(), intr)
        front_only = scene.subset([2, 3])
        out2 = rasterizer.render(front_only, PoseSE3.identity(), intr)
        np.testing.assert_allclose(out.color, out2.color, atol=0)

    def test_termination_freezes_far_splats(self):
        # a deep stack of nearly opaque splats: the far tail must not matter
        n = 40
        means = np.zeros((n, 3))
        means[:, 2] = np.linspace(1.0, 3.0, n)
        scene = GaussianScene.from_arrays(
            means=means, log_scales=np.full((n, 3), -1.0),
            rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
            opacity_logits=np.full(n, 5.0),
            sh=np.linspace(0, 1, n)[:, None, None] * np.ones((n, 1, 3)),
        )
        intr = small_intrinsics(4, focal=6.0)
        out_full = rasterizer.render(scene, PoseSE3.identity(), intr)
        moved = scene.clone()
        moved.sh[-1] += 100.0  # far splat, behind the termination horizon
        out_moved = rasterizer.render(moved, PoseSE3.identity(), intr)
        np.testing.assert_allclose(out_full.color, out_moved.color, atol=0)
        assert out_full.contrib_count.max() < n

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        scene = random_scene(rng, n=30, spread=1.2)
        intr = CameraIntrinsics(fx=24.0, fy=24.0, cx=16.0, cy=16.0, width=32, height=32)
        pose = random_pose(rng)
        a = rasterizer.render(scene, pose, intr)
        b = rasterizer.render(scene, pose, intr)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)

    def test_depth_of_single_splat_is_its_camera_depth(self):
        scene = GaussianScene.from_arrays(
            means=[[0.0, 0.0, 2.0]], log_scales=[[-1.0, -1.0, -1.0]],
            rotations=[[1.0, 0, 0, 0]], opacity_logits=[3.0],
            sh=np.zeros((1, 1, 3)),
        )
        intr = small_intrinsics(8, focal=10.0)
        out = rasterizer.render(scene, PoseSE3.identity(), intr)
        center = out.depth[4, 4]
        assert abs(center - 2.0) < 1e-9


class TestGradients:
    def fd_check(self, scene, pose, intr, cot, params=("means", "log_scales", "rotations",
                                                       "opacity_logits", "sh", "m")):
        h = 1e-4
        grads = rasterizer.render_backward(scene, pose, intr, cot)

        def objective(s):
            out = rasterizer.render(s, pose, intr)
            total = 0.0
            for key, weight in cot.items():
                total += float(np.sum(getattr(out, key) * weight))
            return total

        checked = 0
        for name in params:
            g = getattr(grads, name)
            flat_g = g.reshape(-1)
            flat_idx = np.argsort(-np.abs(flat_g))[:6]
            for fi in flat_idx:
                if abs(flat_g[fi]) < 1e-6:
                    continue
                pert = scene.clone()
                t = getattr(pert, name).reshape(-1)
                t[fi] += h
                up = objective(pert)
                t[fi] -= 2 * h
                down = objective(pert)
                fd = (up - down) / (2 * h)
                rel = abs(fd - flat_g[fi]) / max(abs(fd), abs(flat_g[fi]))
                assert rel < 1e-3, f"{name}[{fi}]: fd {fd} vs analytic {flat_g[fi]}"
                checked += 1
        assert checked > 10

    def test_parameter_gradients_match_fd(self):
        rng = np.random.default_rng(11)
        scene = random_scene(rng, n=6, sh_degree=1)
        intr = small_intrinsics(8, focal=9.0)
        pose = random_pose(rng, scale=0.05)
        cot = {"color": rng.normal(size=(8, 8, 3))}
        self.fd_check(scene, pose, intr, cot)

    def test_pose_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        scene = random_scene(rng, n=6)
        intr = small_intrinsics(8, focal=9.0)
        pose = random_pose(rng, scale=0.05)
        cot = {"color": np.ones((8, 8, 3))}
        grads = rasterizer.render_backward(scene, pose, intr, cot)
        v = pose.tangent
        h = 1e-5
        for k in range(6):
            vp = v.copy(); vp[k] += h
            vm = v.copy(); vm[k] -= h
            up = float(rasterizer.render(scene, PoseSE3.exp(vp), intr).color.sum())
            down = float(rasterizer.render(scene, PoseSE3.exp(vm), intr).color.sum())
            fd = (up - down) / (2 * h)
            g = grads.pose_tangent[k]
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-9)
            assert rel < 1e-3, f"pose[{k}]: fd {fd} vs analytic {g}"

    def test_multi_channel_cotangents(self):
        rng = np.random.default_rng(13)
        scene = random_scene(rng, n=5)
        intr = small_intrinsics(8, focal=9.0)
        pose = random_pose(rng, scale=0.05)
        cot = {
            "color": rng.normal(size=(8, 8, 3)),
            "alpha": rng.normal(size=(8, 8)),
            "identity": rng.normal(size=(8, 8, 2)),
        }
        self.fd_check(scene, pose, intr, cot, params=("means", "opacity_logits", "m"))

    def test_unknown_cotangent_key_rejected(self):
        rng = np.random.default_rng(14)
        scene = random_scene(rng, n=3)
        intr = small_intrinsics(8)
        with pytest.raises(ValueError):
            rasterizer.render_backward(scene, PoseSE3.identity(), intr,
                                       {"colour": np.zeros((8, 8, 3))})

    def test_grad_stats_accumulate(self):
        rng = np.random.default_rng(15)
        scene = random_scene(rng, n=6)
        intr = small_intrinsics()
        pose = random_pose(rng, scale=0.05)
        before = scene.denom.clone()
        rasterizer.render_backward(scene, pose, intr, {"color": np.ones((12, 12, 3))})
        assert scene.denom.sum() > before.sum()
        assert scene.grad_accum.max() > 0


class TestOnWallScene:
    def test_wall_scene_renders_consistently(self):
        scene, _ = make_wall_scene(seed=0, grid=6)
        intr = CameraIntrinsics(fx=38.4, fy=38.4, cx=16.0, cy=16.0, width=32, height=32)
        out = rasterizer.render(scene, PoseSE3.identity(), intr)
        ref = brute_force_render(scene, PoseSE3.identity(), intr)
        np.testing.assert_allclose(out.color, ref["color"], atol=1e-12)
        assert out.alpha.mean() > 0.2
