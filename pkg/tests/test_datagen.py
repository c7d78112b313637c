import json

import numpy as np
import pytest

from poseact.datagen import (
    GROUP_NAMES, LARGE, SMALL, AugmentConfig, BackgroundPool, EmptyPoolError, OccluderPool,
    SampleContext, augment_patch, generate_dataset, generate_sample, motion_kernel,
    sample_gt_pose, sample_render_config, sample_rng, sample_seed_offset,
)
from poseact.geometry import STOP, CameraIntrinsics, Pose, compute_crop, project_points
from poseact.mesh import save_image
from poseact.policy import oracle_decide

SMALL_K = CameraIntrinsics(160.0, 160.0, 80.0, 80.0, 160, 160)


@pytest.fixture(scope="module")
def plain_ctx():
    from poseact.mesh import textured_cube
    return SampleContext(textured_cube(), SMALL_K, augment=None, patch_side=64)


@pytest.fixture(scope="module")
def aug_ctx():
    from poseact.mesh import textured_cube
    cfg = AugmentConfig(occluder_pool_size=8)
    return SampleContext(textured_cube(), SMALL_K,
                         BackgroundPool.procedural(0, 4, SMALL_K.width, SMALL_K.height),
                         OccluderPool.build(0, 8), cfg, patch_side=128)


class TestSeedOffsets:
    def test_small_stop_frequency(self):
        rng = np.random.default_rng(0)
        zeros = sum(not sample_seed_offset("small", rng).any() for _ in range(13000))
        assert abs(zeros / 13000 - 1 / 13) < 0.01

    @pytest.mark.parametrize("group,ranges", [("small", SMALL), ("large", LARGE)])
    def test_single_axis_ranges(self, group, ranges):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            off = sample_seed_offset(group, rng)
            nz = np.flatnonzero(off)
            assert len(nz) <= 1
            for a in nz:
                lo, hi = ranges.axis_range(a)
                assert lo <= abs(off[a]) <= hi

    def test_small_tx_range(self):
        rng = np.random.default_rng(2)
        tx = [o[0] for o in (sample_seed_offset("small", rng) for _ in range(3000)) if o[0]]
        assert min(np.abs(tx)) == 1 and max(np.abs(tx)) == 5
        assert min(tx) < 0 < max(tx)

    def test_mixed_one_large_axis(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            off = sample_seed_offset("mixed", rng)
            in_small = [SMALL.axis_range(a)[0] <= abs(off[a]) <= SMALL.axis_range(a)[1]
                        or off[a] == 0 for a in range(6)]
            in_large = [LARGE.axis_range(a)[0] <= abs(off[a]) <= LARGE.axis_range(a)[1]
                        for a in range(6)]
            # ranges overlap, so some axis is large and every other one small
            assert any(in_large[a] and all(in_small[b] for b in range(6) if b != a)
                       for a in range(6))

    def test_random_groups_all_axes(self):
        rng = np.random.default_rng(4)
        for group, ranges in (("random_small", SMALL), ("random_large", LARGE)):
            for _ in range(500):
                off = sample_seed_offset(group, rng)
                for a in range(6):
                    lo, hi = ranges.axis_range(a)
                    assert lo <= abs(off[a]) <= hi

    def test_unknown_group(self):
        with pytest.raises(ValueError):
            sample_seed_offset("tiny", np.random.default_rng(0))


class TestBackgrounds:
    def test_single_image(self):
        pool = BackgroundPool([np.zeros((4, 4, 3))])
        rng = np.random.default_rng(0)
        assert all(pool.sample(rng) is pool.images[0] for _ in range(20))

    def test_two_images_uniform(self):
        pool = BackgroundPool([np.zeros((2, 2, 3)), np.ones((2, 2, 3))])
        rng = np.random.default_rng(0)
        frac = np.mean([pool.sample(rng)[0, 0, 0] for _ in range(10000)])
        assert abs(frac - 0.5) < 0.02

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyPoolError):
            BackgroundPool([])
        with pytest.raises(EmptyPoolError):
            BackgroundPool.from_directory(tmp_path, 32, 32)

    def test_directory_skips_non_images(self, tmp_path, caplog):
        save_image(tmp_path / "a.png", np.full((40, 80, 3), 0.25))
        (tmp_path / "notes.txt").write_text("not an image")
        with caplog.at_level("WARNING"):
            pool = BackgroundPool.from_directory(tmp_path, 32, 24)
        assert len(pool) == 1 and pool.images[0].shape == (24, 32, 3)
        assert any("notes.txt" in m for m in caplog.messages)

    def test_procedural_deterministic(self):
        a = BackgroundPool.procedural(3, 2, 40, 30)
        b = BackgroundPool.procedural(3, 2, 40, 30)
        assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
        assert a.images[0].shape == (30, 40, 3)


class TestAugment:
    def test_deterministic(self, aug_ctx):
        patch = np.random.default_rng(0).uniform(0, 1, (128, 128, 3))
        a = augment_patch(patch, aug_ctx.augment, np.random.default_rng(9), aug_ctx.occluders)
        b = augment_patch(patch, aug_ctx.augment, np.random.default_rng(9), aug_ctx.occluders)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1

    def test_branch_frequencies(self):
        cfg = AugmentConfig()
        recs = []
        for i in range(3000):
            r = {}
            augment_patch(np.full((72, 72, 3), 0.5), cfg, sample_rng(5, i), None, r)
            recs.append(r)
        motion = np.mean([r["blur"] == "motion" for r in recs])
        counts = np.bincount([r["occluders"] for r in recs], minlength=5) / len(recs)
        masked = np.mean([r["mask_crop"] for r in recs])
        # 3000 draws: 3 sigma of a 0.25 branch is about 0.024
        assert abs(motion - 0.75) < 0.025
        assert np.max(np.abs(counts - cfg.occluder_probs)) < 0.03
        assert abs(masked - 0.25) < 0.025
        jit = np.concatenate([r["jitter"] for r in recs])
        assert jit.min() >= 0.95 and jit.max() <= 1.25

    def test_mask_crop_zeroes_outside(self):
        cfg = AugmentConfig(p_mask_crop=1.0, occluder_probs=(1, 0, 0, 0, 0))
        out = augment_patch(np.ones((128, 128, 3)), cfg, np.random.default_rng(0))
        nz = np.argwhere(out.sum(axis=-1) > 0)
        side = nz.max(axis=0) - nz.min(axis=0) + 1
        assert 72 <= side[0] <= 96 and side[0] == side[1]

    def test_occluders_change_patch(self, aug_ctx):
        cfg = AugmentConfig(occluder_probs=(0, 0, 0, 0, 1), p_mask_crop=0.0, noise_sigma=0.0)
        clean_cfg = AugmentConfig(occluder_probs=(1, 0, 0, 0, 0), p_mask_crop=0.0, noise_sigma=0.0)
        patch = np.full((128, 128, 3), 0.5)
        a = augment_patch(patch, cfg, np.random.default_rng(1), aug_ctx.occluders)
        b = augment_patch(patch, clean_cfg, np.random.default_rng(1), aug_ctx.occluders)
        assert np.abs(a - b).max() > 0.1

    def test_render_config_ranges(self):
        cfg = AugmentConfig()
        rng = np.random.default_rng(0)
        unlit = 0
        for _ in range(2000):
            lights, material, rec = sample_render_config(cfg, rng)
            assert len(lights.lights) == 5
            assert len({l.color for l in lights.lights}) == 1
            assert all(0.5 <= l.intensity <= 1.5 for l in lights.lights)
            unlit += material.mode == "unlit"
        assert abs(unlit / 2000 - 0.2) < 0.03

    def test_motion_kernel_normalized(self):
        for ang in np.linspace(0, np.pi, 7):
            k = motion_kernel(ang)
            assert k.shape == (9, 9) and abs(k.sum() - 1) < 1e-12 and k.min() >= 0

    def test_probabilities_validated(self):
        with pytest.raises(ValueError):
            AugmentConfig(occluder_probs=(0.5, 0.5, 0.5, 0, 0))


class TestSamples:
    def test_gt_pose_in_frame(self, cube_points):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose = sample_gt_pose(cube_points, SMALL_K, rng)
            uv = project_points(pose, SMALL_K, cube_points)
            assert 0.5 <= pose.z <= 2.0
            assert uv.min() >= 0 and uv[:, 0].max() <= 160 and uv[:, 1].max() <= 160

    def test_zero_offset_stop(self, plain_ctx):
        s = generate_sample(plain_ctx, "small", np.random.default_rng(0), offsets=np.zeros(6))
        assert s.label == STOP and s.gt.allclose(s.hypothesis)

    def test_plus_tx_label(self, plain_ctx):
        s = generate_sample(plain_ctx, "small", np.random.default_rng(1), offsets=(4, 0, 0, 0, 0, 0))
        assert s.label == 1

    def test_label_recomputed(self, plain_ctx):
        for i in range(30):
            group = GROUP_NAMES[i % len(GROUP_NAMES)]
            s = generate_sample(plain_ctx, group, sample_rng(11, i))
            crop = compute_crop(s.hypothesis, SMALL_K, plain_ctx.points, plain_ctx.patch_side)
            assert s.label == oracle_decide(s.hypothesis, s.gt, crop, plain_ctx.steps, SMALL_K)

    def test_stack_layout(self, aug_ctx):
        s = generate_sample(aug_ctx, "small", np.random.default_rng(2))
        assert s.stack.shape == (128, 128, 8) and s.stack.dtype == np.float32
        assert np.array_equal(s.stack[..., 7] > 0, s.stack[..., 6] > 0)
        assert {"blur", "jitter", "occluders", "mask_crop", "light_intensity"} <= set(s.record)

    def test_same_seed_same_sample(self, aug_ctx):
        a = generate_sample(aug_ctx, "large", sample_rng(3, 7))
        b = generate_sample(aug_ctx, "large", sample_rng(3, 7))
        assert np.array_equal(a.stack, b.stack) and a.label == b.label


class TestDataset:
    def test_counts_and_determinism(self, plain_ctx, tmp_path):
        counts = {g: 2 for g in GROUP_NAMES}
        m1 = generate_dataset(plain_ctx, counts, tmp_path / "a", base_seed=4)
        generate_dataset(plain_ctx, counts, tmp_path / "b", base_seed=4)
        assert m1["total"] == 10
        assert m1["counts"] == counts
        assert [e["group"] for e in m1["samples"]].count("mixed") == 2
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        assert a == (tmp_path / "b" / "manifest.json").read_bytes()
        meta = json.loads((tmp_path / "a" / "000003.json").read_text())
        crop = compute_crop(Pose.from_dict(meta["hypothesis"]), SMALL_K, plain_ctx.points, 64)
        assert meta["label"] == oracle_decide(Pose.from_dict(meta["hypothesis"]),
                                              Pose.from_dict(meta["gt"]), crop,
                                              plain_ctx.steps, SMALL_K)

    def test_workers_independent(self, plain_ctx, tmp_path):
        counts = {"small": 3, "large": 3}
        generate_dataset(plain_ctx, counts, tmp_path / "w1", workers=1, base_seed=8)
        generate_dataset(plain_ctx, counts, tmp_path / "w2", workers=2, base_seed=8)
        for p in sorted((tmp_path / "w1").iterdir()):
            assert p.read_bytes() == (tmp_path / "w2" / p.name).read_bytes(), p.name

    def test_unknown_group(self, plain_ctx, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(plain_ctx, {"bogus": 1}, tmp_path)
