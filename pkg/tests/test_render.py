import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_gaussians, planar_scene
from splatstream.core import Camera, GaussianSet, RenderConfig, StereoRig, frustum_mask
from splatstream.exceptions import ContractViolation, ProtocolError
from splatstream.render import (
    bin_tiles, decode_png, decode_ppm, depth_sort, disparity, encode_png, encode_ppm, merge_tile_lists,
    preprocess, rasterize_mono, rasterize_naive, rasterize_stereo, read_image, stereo_schedule,
    validate_schedule, widened_fov, write_image,
)
from splatstream.scene import SceneSpec, generate_synthetic_scene, random_gaussians

CFG = RenderConfig()
GOLDEN = Path(__file__).parent / "fixtures" / "golden_mono.png"


def small_camera(size=64, focal=80.0, eye=(0.0, -3.0, 0.5), near=0.5):
    return Camera.look_at(eye, [0, 0, 0], focal=focal, principal=(size / 2, size / 2), width=size,
                          height=size, near=near)


def small_scene(seed, n=120):
    return random_gaussians(n, seed=seed, extent=1.0, scale_range=(0.02, 0.2))


def axis_camera(size=32, focal=100.0):
    return Camera(np.eye(3), np.zeros(3), focal=focal, principal=(size / 2, size / 2), width=size,
                  height=size, near=0.5)


def render(gs, cam, cfg=CFG):
    return rasterize_mono(depth_sort(preprocess(gs, cam, cfg)), cam, cfg)


class TestCulling:
    def test_widened_margin(self):
        cam = Camera(np.eye(3), np.zeros(3), focal=1000.0, principal=(32.0, 32.0), width=64, height=64,
                     near=3.75)
        assert widened_fov(StereoRig(cam, 0.06)).guard == (0.0, 16.0, 0.0, 0.0)

    def test_degenerate_rig(self):
        cam = small_camera()
        assert widened_fov(StereoRig(cam, 0.0)) == cam

    def test_right_eye_visibility_covered(self):
        gs = random_gaussians(5000, seed=2, extent=6.0)
        for k in range(5):
            cam = small_camera(eye=(np.cos(k), -4.0, 0.3 * k), near=0.3, focal=20.0)
            rig = StereoRig(cam, 0.06)
            right_vis, *_ = frustum_mask(rig.right, gs.positions)
            wide_vis, *_ = frustum_mask(widened_fov(rig), gs.positions)
            assert right_vis.any() and np.all(wide_vis[right_vis])

    def test_behind_near_culled(self):
        cam = axis_camera()
        gs = make_gaussians([[0, 0, 0.25], [0, 0, 2.0]])
        assert preprocess(gs, cam, CFG).ids.tolist() == [1]


class TestPreprocess:
    def test_isotropic_on_axis(self):
        cam = axis_camera(focal=100.0)
        s, z = 0.05, 4.0
        proj = preprocess(make_gaussians([[0, 0, z]], scales=s), cam, CFG)
        expect = (100.0 * s / z) ** 2 + 0.3
        assert proj.cov2d[0, 0] == pytest.approx(expect, rel=1e-12)
        assert proj.cov2d[0, 2] == pytest.approx(expect, rel=1e-12)
        assert proj.cov2d[0, 1] == 0.0

    @pytest.mark.parametrize("seed", range(4))
    def test_span_covers_alpha_footprint(self, seed):
        cam = small_camera()
        proj = preprocess(small_scene(seed, 60), cam, CFG)
        ys, xs = np.mgrid[0:cam.height, 0:cam.width]
        t = cam.tile_size
        for i in range(len(proj)):
            a, b, c = proj.conic[i]
            dx = xs - proj.means[i, 0]
            dy = ys - proj.means[i, 1]
            q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
            alpha = np.minimum(CFG.alpha_cap, proj.opacities[i] * np.exp(-0.5 * q))
            hit_y, hit_x = np.nonzero(alpha >= CFG.alpha_star)
            tx0, ty0, tx1, ty1 = proj.span[i]
            assert np.all((hit_x // t >= tx0) & (hit_x // t <= tx1) & (hit_y // t >= ty0) & (hit_y // t <= ty1))

    def test_sort_rules(self):
        cam = axis_camera()
        gs = make_gaussians([[0, 0, 3], [0.1, 0, 2], [0.2, 0, 3], [0, 0.1, 2]])
        proj = depth_sort(preprocess(gs, cam, CFG))
        assert proj.ids.tolist() == [1, 3, 0, 2]
        again = depth_sort(proj)
        assert again.ids.tolist() == proj.ids.tolist()
        perm = proj.take(np.random.default_rng(0).permutation(len(proj)))
        assert depth_sort(perm).ids.tolist() == proj.ids.tolist()

    def test_unsorted_rejected(self):
        cam = axis_camera()
        proj = preprocess(make_gaussians([[0, 0, 3], [0, 0, 2]]), cam, CFG)
        with pytest.raises(ContractViolation, match="not sorted"):
            rasterize_mono(proj, cam, CFG)


class TestMono:
    def test_single_term_blend(self):
        cam = axis_camera()
        gs = make_gaussians([[0, 0, 2]], opacity=0.5, rgb=(1, 0, 0))
        fb = render(gs, cam)
        assert np.allclose(fb.color[16, 16], [0.5, 0.0, 0.0], atol=1e-12)

    def test_two_terms(self):
        cam = axis_camera()
        gs = make_gaussians([[0, 0, 2], [0, 0, 2]], opacity=0.5, rgb=(1, 0, 0))
        fb = render(gs, cam)
        assert np.allclose(fb.color[16, 16], [0.75, 0.0, 0.0], atol=1e-12)
        assert fb.transmittance[16, 16] == pytest.approx(0.25)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive(self, seed):
        cam = small_camera()
        proj = depth_sort(preprocess(small_scene(seed), cam, CFG))
        tiled = rasterize_mono(proj, cam, CFG)
        naive = rasterize_naive(proj, cam, CFG)
        assert np.array_equal(tiled.color, naive.color)
        assert np.array_equal(tiled.transmittance, naive.transmittance)

    def test_bounds(self):
        cam = small_camera()
        fb = render(small_scene(3, 400), cam)
        assert fb.color.min() >= 0 and fb.color.max() <= 1
        assert fb.transmittance.min() >= 0 and fb.transmittance.max() <= 1
        # accumulated colour never exceeds the opacity that was laid down
        assert np.all(fb.color <= 1.0 - fb.transmittance[..., None] + 1e-12)

    def test_empty_scene(self):
        cam = small_camera()
        fb = render(GaussianSet.empty(1), cam)
        assert not fb.color.any() and fb.alpha_evals == 0

    def test_golden_image(self):
        cam = small_camera(eye=(1.0, -3.0, 1.0))
        img = render(small_scene(42, 200), cam).to_u8()
        if os.environ.get("SPLATSTREAM_REGEN_GOLDEN"):
            write_image(GOLDEN, img)
        assert np.array_equal(read_image(GOLDEN), img)


class TestDisparity:
    rig = StereoRig(Camera(np.eye(3), np.zeros(3), focal=1000.0, principal=(32.0, 32.0), width=64, height=64,
                           near=3.75, far=100.0), 0.06)

    def test_values(self):
        assert disparity(10.0, self.rig) == pytest.approx(6.0)
        assert disparity(100.0, self.rig) == pytest.approx(0.06 * 1000 / 100)
        assert disparity(3.75, self.rig) == pytest.approx(16.0)

    def test_below_near(self):
        with pytest.raises(ContractViolation):
            disparity(1.0, self.rig)


class TestMerge:
    def test_in_order(self):
        assert merge_tile_lists([[1], [2], [3], [4]]) == [1, 2, 3, 4]

    def test_dedup(self):
        assert merge_tile_lists([[1, 5], [5, 7], [], [2]]) == [1, 2, 5, 7]

    def test_unsorted_input(self):
        with pytest.raises(ContractViolation):
            merge_tile_lists([[3, 1]])

    @given(st.lists(st.lists(st.tuples(st.floats(0, 10, allow_nan=False), st.integers(0, 50)), max_size=12),
                    min_size=4, max_size=4))
    def test_matches_sort_dedup(self, lists):
        lists = [sorted(set(lst)) for lst in lists]
        assert merge_tile_lists(lists) == sorted(set().union(*map(set, lists)))


class TestStereo:
    def test_zero_baseline(self):
        cam = small_camera()
        rig = StereoRig(cam, 0.0)
        proj = depth_sort(preprocess(small_scene(1, 300), rig, CFG))
        left, right, _ = rasterize_stereo(proj, rig, CFG)
        assert np.array_equal(left.color, right.color)
        assert np.array_equal(left.color, rasterize_mono(proj, cam, CFG).color)

    @pytest.mark.parametrize("seed", range(3))
    def test_planar_scene_bit_identical(self, seed):
        gs, rig = planar_scene(seed)
        proj = depth_sort(preprocess(gs, rig, CFG))
        assert np.all(disparity(proj.depths, rig) == 4.0)
        res = rasterize_stereo(proj, rig, CFG, verify=True)
        s = res.stats
        assert s.antecedent_violations == 0 and s.implication_failures == 0
        assert s.tiles_equivalent == s.tiles_checked
        assert np.array_equal(res.right.color, res.oracle_right.color)
        assert np.array_equal(res.right.transmittance, res.oracle_right.transmittance)

    @pytest.mark.parametrize("seed", range(3))
    def test_list_implication_on_general_scenes(self, seed):
        cam = small_camera(size=96, focal=90.0, eye=(0.3, -3.0, 0.4), near=0.5)
        rig = StereoRig(cam, 0.06)
        proj = depth_sort(preprocess(small_scene(seed, 500), rig, CFG))
        s = rasterize_stereo(proj, rig, CFG, verify=True).stats
        assert s.implication_failures == 0
        assert s.tiles_checked > 0
        assert s.mismatch_rate < 0.05

    def test_right_eye_pixels_sample_shifted_means(self):
        gs, rig = planar_scene(0, 200)
        proj = depth_sort(preprocess(gs, rig, CFG))
        right = rasterize_stereo(proj, rig, CFG).right
        shifted = proj.take(np.arange(len(proj)))
        shifted.means = proj.means - [4.0, 0.0]
        naive = rasterize_naive(shifted, rig.left, CFG)
        assert np.array_equal(right.color, naive.color)

    def test_schedule_matches_batch(self):
        cam = small_camera(size=64)
        rig = StereoRig(cam, 0.06)
        proj = depth_sort(preprocess(small_scene(5, 300), rig, CFG))
        batch = rasterize_stereo(proj, rig, CFG)
        piped = rasterize_stereo(proj, rig, CFG, schedule=stereo_schedule(cam.tiles_x))
        assert np.array_equal(batch.left.color, piped.left.color)
        assert np.array_equal(batch.right.color, piped.right.color)
        assert batch.stats.stereo_alpha_evals == piped.stats.stereo_alpha_evals

    def test_schedule_dependencies(self):
        sched = stereo_schedule(8)
        validate_schedule(sched, 8)
        assert sched[:5] == [("L", 0), ("L", 1), ("L", 2), ("L", 3), ("R", 0)]
        early = [("L", 0), ("R", 0)] + [t for t in sched if t not in (("L", 0), ("R", 0))]
        with pytest.raises(ContractViolation, match="before left columns"):
            validate_schedule(early, 8)
        with pytest.raises(ContractViolation):
            validate_schedule(sched[:-1], 8)

    def test_counts_less_work_than_two_monos(self):
        scene = generate_synthetic_scene(SceneSpec(cells_x=4, cells_y=4, per_cell=300, seed=1))
        # three border columns are rendered independently, so reuse needs a wide enough image
        cam = Camera.look_at([20, -12, 10], [20, 20, 0], focal=240.0, principal=(128.0, 96.0), width=256,
                             height=192, near=2.0)
        rig = StereoRig(cam, 0.06)
        proj = depth_sort(preprocess(scene, rig, CFG))
        s = rasterize_stereo(proj, rig, CFG, verify=True).stats
        assert s.stereo_alpha_evals < s.mono_pair_alpha_evals
        assert s.reuse_fraction >= 0.95

    def test_disparity_cap_enforced(self):
        cam = small_camera(near=0.2)
        rig = StereoRig(cam, 0.06)
        with pytest.raises(ContractViolation, match="max disparity"):
            rasterize_stereo(depth_sort(preprocess(small_scene(0, 10), StereoRig(cam, 0.0), CFG)), rig, CFG)

    def test_bin_tiles_lists_sorted(self):
        cam = small_camera()
        proj = depth_sort(preprocess(small_scene(2, 200), cam, CFG))
        lists = bin_tiles(proj.span, cam)
        for t in range(len(lists)):
            items = lists.get(t)
            assert np.all(np.diff(items) > 0)


class TestImages:
    img = (np.arange(4 * 6 * 3) * 7 % 256).astype(np.uint8).reshape(4, 6, 3)

    def test_ppm_layout(self):
        data = encode_ppm(self.img)
        assert data.startswith(b"P6\n6 4\n255\n") and len(data) == 11 + 72
        assert np.array_equal(decode_ppm(data), self.img)

    def test_png_round_trip(self, tmp_path):
        assert np.array_equal(decode_png(encode_png(self.img)), self.img)
        path = write_image(tmp_path / "a.png", self.img)
        assert np.array_equal(read_image(path), self.img)

    def test_png_readable_by_pillow(self, tmp_path):
        image_mod = pytest.importorskip("PIL.Image")
        path = write_image(tmp_path / "b.png", self.img)
        with image_mod.open(path) as im:
            assert np.array_equal(np.asarray(im.convert("RGB")), self.img)

    def test_float_input_quantised(self):
        assert decode_ppm(encode_ppm(np.full((1, 1, 3), 0.5)))[0, 0].tolist() == [128, 128, 128]

    def test_bad_files(self, tmp_path):
        with pytest.raises(ProtocolError):
            decode_png(b"not a png")
        with pytest.raises(ProtocolError):
            decode_ppm(b"P6\n2 2\n255\nabc")
        with pytest.raises(ValueError):
            write_image(tmp_path / "x.bmp", self.img)
