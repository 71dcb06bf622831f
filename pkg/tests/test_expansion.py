"""Scene bootstrap, densification, anchoring, and the incremental loop."""

import math

import numpy as np
import pytest
import torch

from driftsplat import expansion, losses, rasterizer
from driftsplat.core import SH_C0, CameraIntrinsics, Frame, GaussianScene, PoseSE3
from driftsplat.expansion import (
    ExpansionConfig,
    ReconstructionError,
    densify_and_prune,
    expand_scene,
    init_scene_from_frame,
    scene_extent,
    update_anchors,
)
from driftsplat.losses import LossWeights
from driftsplat.pose import PoseEstimateConfig

from synth import make_orbit, make_wall_scene, render_dataset


INTR = CameraIntrinsics(fx=28.8, fy=28.8, cx=12.0, cy=12.0, width=24, height=24)


def labeled_scene(n=10, seed=0):
    rng = np.random.default_rng(seed)
    m = np.zeros((n, 2))
    m[: n // 2, 1] = 4.0  # identity 1
    m[n // 2 :, 0] = 4.0  # identity 0
    return GaussianScene.from_arrays(
        means=rng.normal(size=(n, 3)),
        log_scales=np.full((n, 3), -2.0),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacity_logits=np.full(n, 2.0),
        sh=rng.normal(size=(n, 1, 3)) * 0.3,
        m=m,
    )


class TestBootstrap:
    def test_unprojection_geometry(self):
        img = np.full((8, 8, 3), 0.5)
        depth = np.full((8, 8), 2.0)
        intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)
        scene = init_scene_from_frame(Frame(image=img, depth=depth), intr, stride=2,
                                      sh_degree=0, init_opacity=0.25)
        assert len(scene) == 16  # 4x4 sampling grid
        means = scene.means.numpy()
        np.testing.assert_allclose(means[:, 2], 2.0)
        # first sample is pixel (0, 0): center (0.5, 0.5)
        np.testing.assert_allclose(means[0, 0], (0.5 - 4.0) / 10.0 * 2.0)
        np.testing.assert_allclose(means[0, 1], (0.5 - 4.0) / 10.0 * 2.0)
        logit = math.log(0.25 / 0.75)
        np.testing.assert_allclose(scene.opacity_logits.numpy(), logit)

    def test_color_seeds_dc_band(self):
        img = np.zeros((4, 4, 3))
        img[..., 0] = 0.9
        depth = np.ones((4, 4))
        intr = CameraIntrinsics(fx=5.0, fy=5.0, cx=2.0, cy=2.0, width=4, height=4)
        scene = init_scene_from_frame(Frame(image=img, depth=depth), intr, stride=1, sh_degree=0)
        np.testing.assert_allclose(scene.sh[:, 0, 0].numpy(), (0.9 - 0.5) / SH_C0, atol=1e-12)
        np.testing.assert_allclose(scene.sh[:, 0, 1].numpy(), (0.0 - 0.5) / SH_C0, atol=1e-12)

    def test_zero_depth_pixels_skipped(self):
        img = np.full((4, 4, 3), 0.5)
        depth = np.zeros((4, 4))
        depth[0, 0] = 1.5
        intr = CameraIntrinsics(fx=5.0, fy=5.0, cx=2.0, cy=2.0, width=4, height=4)
        scene = init_scene_from_frame(Frame(image=img, depth=depth), intr, stride=1)
        assert len(scene) == 1

    def test_missing_depth_rejected(self):
        img = np.full((4, 4, 3), 0.5)
        with pytest.raises(ValueError):
            init_scene_from_frame(Frame(image=img), INTR)

    def test_footprint_scales_with_stride_and_depth(self):
        img = np.full((8, 8, 3), 0.5)
        intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8)
        near = init_scene_from_frame(Frame(image=img, depth=np.full((8, 8), 1.0)), intr, stride=2)
        far = init_scene_from_frame(Frame(image=img, depth=np.full((8, 8), 4.0)), intr, stride=2)
        ratio = torch.exp(far.log_scales[0, 0] - near.log_scales[0, 0])
        assert float(ratio) == pytest.approx(4.0, rel=1e-9)


class TestSceneExtent:
    def test_known_radius(self):
        scene = labeled_scene()
        scene.means = torch.tensor([[1.0, 0, 0], [-1.0, 0, 0], [0, 0, 0]], dtype=torch.float64)
        scene.log_scales = scene.log_scales[:3]
        scene.rotations = scene.rotations[:3]
        scene.opacity_logits = scene.opacity_logits[:3]
        scene.sh = scene.sh[:3]
        scene.m = scene.m[:3]
        scene.created_at = scene.created_at[:3]
        scene.grad_accum = scene.grad_accum[:3]
        scene.denom = scene.denom[:3]
        assert scene_extent(scene) == pytest.approx(1.0)

    def test_empty_scene_unit(self):
        scene = GaussianScene.from_arrays(
            means=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)), opacity_logits=np.zeros(0), sh=np.zeros((0, 1, 3)),
        )
        assert scene_extent(scene) == 1.0


class TestAnchors:
    def test_only_identity_one_anchored(self):
        scene = labeled_scene(10)
        anchors = update_anchors(scene, None, None, step=5)
        assert len(anchors) == 5
        assert (scene.kea_identity()[anchors.indices] == 1).all()

    def test_survivors_keep_snapshots(self):
        scene = labeled_scene(10)
        first = update_anchors(scene, None, None, step=0)
        stored = first.vectors.clone()
        scene.means += 0.5  # drift the scene after snapshotting
        second = update_anchors(scene, first, None, step=10)
        assert torch.equal(second.vectors, stored)

    def test_newcomers_snapshot_current(self):
        scene = labeled_scene(10)
        first = update_anchors(scene, None, None, step=0)
        scene.m[6, 1] = 9.0  # splat 6 flips to identity 1 later
        scene.means += 0.25
        second = update_anchors(scene, first, None, step=10)
        assert len(second) == 6
        vec_now = losses.param_vector(scene).detach()
        row = (second.indices == 6).nonzero()[0, 0]
        assert torch.equal(second.vectors[row], vec_now[6])
        old_row = (second.indices == 0).nonzero()[0, 0]
        assert torch.equal(second.vectors[old_row], first.vectors[0])

    def test_index_map_remaps_and_drops(self):
        scene = labeled_scene(10)
        first = update_anchors(scene, None, None, step=0)
        # splat 0 removed, others shift down one
        smaller = scene.subset(torch.arange(1, 10))
        index_map = torch.full((10,), -1, dtype=torch.int64)
        index_map[1:] = torch.arange(9)
        second = update_anchors(smaller, first, index_map, step=10)
        assert len(second) == 4
        row = (second.indices == 0).nonzero()[0, 0]  # old splat 1 is new 0
        assert torch.equal(second.vectors[row], first.vectors[1])


class TestDensify:
    def base_scene(self, n=8):
        scene = labeled_scene(n)
        scene.log_scales[:] = -3.0
        return scene

    def test_prunes_transparent(self):
        scene = self.base_scene()
        scene.opacity_logits[3] = -12.0  # sigmoid ~ 6e-6, below threshold
        out, index_map, report = densify_and_prune(scene, ExpansionConfig(), 10,
                                                   torch.Generator().manual_seed(0))
        assert report["pruned"] == 1
        assert len(out) == 7
        assert index_map[3] == -1
        assert index_map[4] == 3

    def test_clones_small_high_gradient(self):
        scene = self.base_scene()
        scene.log_scales[:] = -5.0  # well under the clone/split size cutoff
        scene.grad_accum[2] = 1.0
        scene.denom[2] = 1
        cfg = ExpansionConfig(densify_grad_threshold=0.5)
        out, _, report = densify_and_prune(scene, cfg, 10, torch.Generator().manual_seed(0))
        assert report["cloned"] == 1 and report["split"] == 0
        assert len(out) == 9
        assert int(out.created_at[-1]) == 10  # the clone carries the step stamp

    def test_splits_large_high_gradient(self):
        scene = self.base_scene()
        scene.log_scales[5] = 1.0  # much larger than clone cutoff
        scene.grad_accum[5] = 1.0
        scene.denom[5] = 1
        cfg = ExpansionConfig(densify_grad_threshold=0.5)
        out, index_map, report = densify_and_prune(scene, cfg, 10, torch.Generator().manual_seed(0))
        assert report["split"] == 1
        assert len(out) == 9  # parent removed, two children added
        assert index_map[5] == -1
        children_scales = out.log_scales[-2:]
        np.testing.assert_allclose(children_scales.numpy(), 1.0 - math.log(1.6), atol=1e-12)

    def test_max_points_blocks_growth(self):
        scene = self.base_scene()
        scene.grad_accum[:] = 1.0
        scene.denom[:] = 1
        cfg = ExpansionConfig(densify_grad_threshold=0.5, max_points=8)
        out, _, report = densify_and_prune(scene, cfg, 10, torch.Generator().manual_seed(0))
        assert report["cloned"] == 0 and report["split"] == 0
        assert len(out) == 8

    def test_gradient_stats_reset(self):
        scene = self.base_scene()
        scene.grad_accum[:] = 1.0
        scene.denom[:] = 1
        out, _, _ = densify_and_prune(scene, ExpansionConfig(densify_grad_threshold=0.5),
                                      10, torch.Generator().manual_seed(0))
        assert out.grad_accum.max() == 0
        assert out.denom.max() == 0


class TestConfigValidation:
    def test_bad_window_mode(self):
        with pytest.raises(ValueError):
            ExpansionConfig(window_mode="windowed")

    def test_bad_sh_degree(self):
        with pytest.raises(ValueError):
            ExpansionConfig(sh_degree=4)

    def test_nonpositive_iters(self):
        with pytest.raises(ValueError):
            ExpansionConfig(iters_per_frame=0)


class TestIncrementalLoop:
    def small_run(self, n_frames=3, **overrides):
        scene, _ = make_wall_scene(seed=3, grid=10, jitter=0.05, size=0.1, opacity=2.5)
        poses = make_orbit(n_frames, step_deg=1.2)
        frames = render_dataset(scene, poses, INTR)
        kwargs = dict(
            iters_per_frame=50, init_iters=120, densify_interval=60, densify_settle=20,
            init_stride=2, init_opacity=0.6, sh_degree=0, seed=0, refine_pose=False,
            final_sweep_rounds=1, final_settle_iters=40,
        )
        kwargs.update(overrides)
        config = ExpansionConfig(**kwargs)
        result = expand_scene(frames, INTR, config,
                              pose_config=PoseEstimateConfig(max_iters=120))
        return result, frames, poses

    def test_shapes_and_gauge(self):
        result, frames, poses = self.small_run()
        assert len(result.trajectory) == 3
        assert len(result.relative_poses) == 2
        assert len(result.pose_results) == 2
        np.testing.assert_allclose(result.trajectory[0].matrix, np.eye(4), atol=0)
        assert len(result.scene) > 0
        assert len(result.loss_history) > 0

    def test_reconstruction_fits_frames(self):
        result, frames, _ = self.small_run()
        for frame, c2w in zip(frames, result.trajectory):
            out = rasterizer.render(result.scene, c2w.inverse(), INTR)
            err = float(np.abs(out.color - frame.image).mean())
            assert err < 0.05, f"frame fit {err}"

    def test_trajectory_composes_relatives(self):
        result, _, _ = self.small_run()
        acc = result.trajectory[0]
        for m, expect in zip(result.relative_poses, result.trajectory[1:]):
            acc = acc.compose(m)
            np.testing.assert_allclose(acc.matrix, expect.matrix, atol=1e-9)

    def test_divergence_carries_partial_result(self):
        scene, _ = make_wall_scene(seed=4, grid=8)
        frames = render_dataset(scene, make_orbit(2, step_deg=1.0), INTR)
        bad = Frame(image=np.full_like(frames[1].image, np.nan), index=1)
        config = ExpansionConfig(iters_per_frame=20, init_iters=30, init_opacity=0.6,
                                 sh_degree=0, seed=0, final_pose_sweep=False,
                                 reestimate_pose=False)
        with pytest.raises(ReconstructionError) as exc_info:
            expand_scene([frames[0], bad], INTR, config,
                         pose_config=PoseEstimateConfig(max_iters=40))
        err = exc_info.value
        assert err.frame_index == 1
        assert len(err.partial.trajectory) == 1
        assert len(err.partial.scene) > 0

    def test_progress_callback_sees_every_step(self):
        seen = []
        scene, _ = make_wall_scene(seed=5, grid=8)
        frames = render_dataset(scene, make_orbit(2, step_deg=1.0), INTR)
        config = ExpansionConfig(iters_per_frame=20, init_iters=30, init_opacity=0.6,
                                 sh_degree=0, seed=0, final_pose_sweep=False,
                                 reestimate_pose=False)
        expand_scene(frames, INTR, config, pose_config=PoseEstimateConfig(max_iters=40),
                     progress=seen.append)
        assert len(seen) == 50
        assert all("total" in c and "step" in c for c in seen)

    def test_no_frames_rejected(self):
        with pytest.raises(ValueError):
            expand_scene([], INTR, ExpansionConfig())
