"""Ray clipping, sampling, activation, compositing, occupancy, rendering."""

import numpy as np
import pytest

from voxfield.contraction import ContractionConfig
from voxfield.grid import create_grid, new_grad_buffer
from voxfield.rendering import (ALPHA_CAP, Camera, OccupancyMask, Ray,
                                RenderSettings, alpha_shift, backward_rays,
                                composite, density_to_alpha, forward_rays,
                                pixel_rays, ray_aabb_intersect,
                                ray_aabb_intersect_batch, render_image,
                                sample_points, update_occupancy)

from conftest import rel_err

UNIT = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def bounded_settings(aabb=UNIT, **kw):
    cfg = ContractionConfig(mode="bounded", aabb=aabb)
    defaults = dict(step_size=0.5, halt_threshold=1e-3, near=0.01, far=100.0)
    defaults.update(kw)
    return RenderSettings(contraction=cfg, **defaults)


class TestRayAabb:
    def test_axis_aligned_entry_exit(self):
        ray = Ray(origin=[-2.0, 0.5, 0.5], direction=[1.0, 0.0, 0.0],
                  near=0.01, far=100.0)
        assert ray_aabb_intersect(ray, UNIT) == (2.0, 3.0)

    def test_pointing_away_misses(self):
        ray = Ray(origin=[-2.0, 0.5, 0.5], direction=[-1.0, 0.0, 0.0],
                  near=0.01, far=100.0)
        assert ray_aabb_intersect(ray, UNIT) is None

    def test_clipped_by_near_far(self):
        ray = Ray(origin=[-2.0, 0.5, 0.5], direction=[1.0, 0.0, 0.0],
                  near=2.5, far=2.8)
        assert ray_aabb_intersect(ray, UNIT) == (2.5, 2.8)

    def test_endpoints_lie_on_box_surface(self, rng):
        # origins pushed outside the box so neither endpoint is a near/far clip
        origins = rng.normal(0, 2.0, size=(10000, 3))
        origins += 3.0 * np.sign(origins - 0.5)
        dirs = rng.normal(size=(10000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t0, t1, hit = ray_aabb_intersect_batch(origins, dirs, UNIT, 1e-9, 1e9)
        assert hit.any()
        for k in np.flatnonzero(hit)[:2000]:
            for t in (t0[k], t1[k]):
                p = origins[k] + t * dirs[k]
                face_dist = np.minimum(np.abs(p - 0.0), np.abs(p - 1.0)).min()
                inside = np.all(p >= -1e-9) and np.all(p <= 1 + 1e-9)
                assert inside and face_dist <= 1e-9

    def test_parallel_ray_inside_slab(self):
        ray = Ray(origin=[0.5, 0.5, -3.0], direction=[0.0, 0.0, 1.0],
                  near=0.01, far=100.0)
        assert ray_aabb_intersect(ray, UNIT) == (3.0, 4.0)
        ray2 = Ray(origin=[2.0, 0.5, -3.0], direction=[0.0, 0.0, 1.0],
                   near=0.01, far=100.0)
        assert ray_aabb_intersect(ray2, UNIT) is None


class TestDensityToAlpha:
    def test_zero_raw_gives_alpha_init_at_reference_step(self):
        for alpha_init in (1e-4, 1e-2):
            for delta0 in (0.01, 0.2):
                shift = alpha_shift(alpha_init, delta0)
                got = density_to_alpha(0.0, delta0, shift)
                assert got == pytest.approx(alpha_init, rel=1e-10)

    def test_zero_interval_gives_zero_alpha(self):
        shift = alpha_shift(1e-4, 0.1)
        assert density_to_alpha(5.0, 0.0, shift) == 0.0

    def test_alpha_in_range(self, rng):
        shift = alpha_shift(1e-4, 0.1)
        a = density_to_alpha(rng.normal(0, 50, 1000), 0.1, shift)
        assert np.all(a >= 0.0) and np.all(a < 1.0)

    def test_gradient_matches_finite_differences(self, rng):
        shift = alpha_shift(1e-3, 0.05)
        raw = rng.normal(0, 3.0, 200)
        _, grad = density_to_alpha(raw, 0.05, shift, with_grad=True)
        eps = 1e-6
        fd = (density_to_alpha(raw + eps, 0.05, shift)
              - density_to_alpha(raw - eps, 0.05, shift)) / (2 * eps)
        assert rel_err(grad, fd) <= 1e-6

    def test_negative_interval_rejected(self):
        with pytest.raises(ValueError):
            density_to_alpha(0.0, -0.1, 0.0)


class TestSamplePoints:
    def test_boundary_and_midpoint_counts(self):
        """A span of exactly 10 voxels at half-voxel steps yields 20
        boundaries and 19 midpoint samples."""
        st = bounded_settings()
        # grid 21 nodes over [0,1]: voxel 0.05; ray crosses half the box
        o = np.array([[-1.0, 0.5, 0.5]])
        d = np.array([[1.0, 0.0, 0.0]])
        st.far = 1.5  # clips the exit at x = 0.5 -> span 0.5 = 10 voxels
        s = sample_points(o, d, st, (21, 21, 21))
        assert s.counts()[0] == 19
        off, bounds = s.boundaries()
        assert bounds.shape[0] == 20

    def test_miss_yields_zero_samples(self):
        st = bounded_settings()
        s = sample_points(np.array([[-2.0, 0.5, 0.5]]),
                          np.array([[-1.0, 0.0, 0.0]]), st, (9, 9, 9))
        assert s.counts()[0] == 0
        assert s.n_samples == 0

    def test_s_sequences_strictly_increasing_in_unit_range(self, rng):
        st = bounded_settings()
        o = rng.normal(0.5, 1.5, size=(200, 3))
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        s = sample_points(o, d, st, (17, 17, 17))
        off, bounds = s.boundaries()
        assert bounds.min() >= 0.0 and bounds.max() <= 1.0
        for r in range(off.shape[0] - 1):
            seg = bounds[off[r] + r: off[r + 1] + r + 1]
            assert np.all(np.diff(seg) > 0)

    def test_positions_lie_on_the_ray(self, rng):
        st = bounded_settings()
        o = np.array([[-1.0, 0.4, 0.6]])
        d = np.array([[1.0, 0.1, -0.05]])
        d /= np.linalg.norm(d)
        s = sample_points(o, d, st, (9, 9, 9))
        world = o + s.t[:, None] * d
        np.testing.assert_allclose(s.positions, world, atol=1e-12)

    def test_occupancy_skips_free_cells(self):
        st = bounded_settings()
        mask = OccupancyMask.all_occupied((2, 2, 2))
        mask.occupied[0] = False  # free the x < 0.5 half
        o = np.array([[-1.0, 0.25, 0.25]])
        d = np.array([[1.0, 0.0, 0.0]])
        dense = sample_points(o, d, st, (17, 17, 17))
        trimmed = sample_points(o, d, st, (17, 17, 17), mask)
        assert trimmed.counts()[0] < dense.counts()[0]
        assert np.all(trimmed.positions[:, 0] >= 0.5 - 1e-9)
        # midpoints stay strictly increasing despite the gap
        off, bounds = trimmed.boundaries()
        assert np.all(np.diff(bounds) > 0)

    def test_forward_facing_sample_counts(self):
        cfg = ContractionConfig(mode="forward_facing", num_layers=256, near=1.0)
        st = RenderSettings(contraction=cfg, step_size=1.0,
                            ff_world_to_ref=np.eye(4),
                            ff_tan=np.array([1.0, 1.0]))
        o = np.array([[0.0, 0.0, 2.0]])
        d = np.array([[0.0, 0.0, -1.0]])  # straight down the reference axis
        s = sample_points(o, d, st, (256, 64, 64))
        assert s.counts()[0] == 256
        st.step_size = 0.5
        s2 = sample_points(o, d, st, (256, 64, 64))
        assert s2.counts()[0] == 2 * 256 - 1

    def test_unbounded_march_uniform_in_contracted_space(self, rng):
        from voxfield.contraction import contract
        cfg = ContractionConfig(mode="unbounded", b=1.0, p=2.0)
        st = RenderSettings(contraction=cfg, step_size=0.5, near=0.05, far=1e5)
        o = np.array([[0.2, -0.1, 0.05]])
        d = rng.normal(size=(1, 3))
        d /= np.linalg.norm(d)
        res = (33, 33, 33)
        s = sample_points(o, d, st, res)
        assert s.counts()[0] > 10
        world = o + s.t[:, None] * d
        c = contract(world, cfg)
        steps = np.linalg.norm(np.diff(c, axis=0), axis=1)
        # normalized cube coordinates: delta is in raw contracted units
        step_norm = s.delta / (2.0 * cfg.grid_halfwidth)
        assert np.all(np.abs(steps - step_norm) <= 0.25 * step_norm)
        off, bounds = s.boundaries()
        assert np.all(np.diff(bounds) > 0)
        assert bounds.max() <= 1.0


class TestComposite:
    def test_all_zero_alphas_give_background(self):
        rgb, w, t = composite(np.zeros(10), np.zeros((10, 3)), [0.3, 0.5, 0.9],
                              halt_threshold=1e-3)
        np.testing.assert_allclose(rgb[0], [0.3, 0.5, 0.9], atol=1e-15)
        assert t[0] == 1.0
        assert np.all(w == 0.0)

    def test_saturated_first_sample_takes_all(self):
        alphas = np.array([ALPHA_CAP, 0.5])
        colors = np.array([[0.2, 0.4, 0.6], [1.0, 1.0, 1.0]])
        rgb, w, t = composite(alphas, colors, [0.0, 0.0, 0.0])
        np.testing.assert_allclose(rgb[0], colors[0], atol=1e-5)
        assert w[0] == pytest.approx(1.0, abs=2e-6)

    def test_weight_sum_plus_transmittance_is_one(self, rng):
        counts = rng.integers(1, 200, size=500)
        offsets = np.zeros(501, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        alphas = rng.uniform(0, 0.97, int(offsets[-1]))
        colors = rng.random((int(offsets[-1]), 3))
        _, w, t = composite(alphas, colors, [1, 1, 1], offsets, 1e-3)
        wsum = np.add.reduceat(w, offsets[:-1])
        assert np.abs(wsum + t - 1.0).max() <= 1e-6

    def test_early_termination_error_bound(self, rng):
        counts = rng.integers(1, 300, size=2000)
        offsets = np.zeros(2001, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        alphas = rng.uniform(0, 0.9, int(offsets[-1]))
        colors = rng.random((int(offsets[-1]), 3))
        bg = rng.random(3)
        rgb_h, _, _ = composite(alphas, colors, bg, offsets, 1e-3)
        rgb_f, _, _ = composite(alphas, colors, bg, offsets, 0.0)
        assert np.abs(rgb_h - rgb_f).max() <= 2e-3

    def test_zero_alpha_split_invariance(self, rng):
        """Splitting a zero-alpha sample into two changes nothing."""
        alphas = np.array([0.3, 0.0, 0.5])
        colors = rng.random((3, 3))
        rgb_a, _, t_a = composite(alphas, colors, [1, 1, 1], halt_threshold=0.0)
        alphas2 = np.array([0.3, 0.0, 0.0, 0.5])
        colors2 = np.vstack([colors[:2], colors[1:]])
        rgb_b, _, t_b = composite(alphas2, colors2, [1, 1, 1], halt_threshold=0.0)
        np.testing.assert_allclose(rgb_a, rgb_b, atol=1e-15)
        assert t_a[0] == t_b[0]

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="alphas"):
            composite(np.array([1.0]), np.zeros((1, 3)), [0, 0, 0])
        with pytest.raises(ValueError, match="alphas"):
            composite(np.array([-0.1]), np.zeros((1, 3)), [0, 0, 0])


class TestOccupancy:
    def test_fresh_low_density_grid_goes_all_free(self):
        grid = create_grid((16, 16, 16), 1, UNIT, 0.0)
        st = bounded_settings()
        shift = st.shift(grid.resolution)  # zero grid sits at alpha_init 1e-4
        mask = OccupancyMask.all_occupied((8, 8, 8))
        update_occupancy(grid, mask, 1e-3, shift, st.reference_delta(grid.resolution))
        assert mask.fraction_occupied() == 0.0

    def test_hot_node_keeps_its_cell_occupied(self):
        grid = create_grid((16, 16, 16), 1, UNIT, 0.0)
        grid.data[4, 9, 12, 0] = 100.0
        st = bounded_settings()
        shift = st.shift(grid.resolution)
        mask = OccupancyMask.all_occupied((8, 8, 8))
        update_occupancy(grid, mask, 1e-3, shift,
                         st.reference_delta(grid.resolution))
        assert mask.occupied[2, 4, 6]
        # padding keeps the neighbor cells that can interpolate the node
        assert 0 < mask.fraction_occupied() < 0.1

    def test_mask_only_ever_clears(self):
        grid = create_grid((8, 8, 8), 1, UNIT, 0.0)
        st = bounded_settings()
        shift = st.shift(grid.resolution)
        mask = OccupancyMask.all_occupied((4, 4, 4))
        update_occupancy(grid, mask, 1e-3, shift, st.reference_delta(grid.resolution))
        grid.data[:] = 100.0  # density grows back
        update_occupancy(grid, mask, 1e-3, shift, st.reference_delta(grid.resolution))
        assert mask.fraction_occupied() == 0.0

    def test_masked_render_close_to_unmasked(self, rng):
        """On a settled scene the masked render differs by < 1e-2."""
        grid = create_grid((16, 16, 16), 1, UNIT, -3.0)
        grid.data[6:10, 6:10, 6:10, 0] = 20.0
        color = create_grid((16, 16, 16), 3, UNIT, 1.5)
        st = bounded_settings(far=10.0)
        shift = st.shift(grid.resolution)
        st.alpha_shift_override = shift
        mask = OccupancyMask.all_occupied((8, 8, 8))
        update_occupancy(grid, mask, 1e-3, shift, st.reference_delta(grid.resolution))
        assert 0 < mask.fraction_occupied() < 1
        cam = _look_at_camera((16, 16), np.array([0.5, 0.5, -1.6]),
                              np.array([0.5, 0.5, 0.5]))
        with_mask = render_image(grid, color, cam, st, mask)[0]
        without = render_image(grid, color, cam, st, None)[0]
        assert np.abs(with_mask - without).max() <= 1e-2


def _look_at_camera(size, position, target, angle=1.0):
    z = position - target
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(up, z)) > 0.95:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, position
    return Camera.from_angle(size[0], size[1], angle, c2w)


class TestRenderImage:
    def test_empty_scene_is_pure_background(self):
        dens = create_grid((8, 8, 8), 1, UNIT, -40.0)  # activated ~ 0
        col = create_grid((8, 8, 8), 3, UNIT, 0.0)
        st = bounded_settings(background=[0.9, 0.1, 0.4], far=10.0)
        cam = _look_at_camera((8, 8), np.array([0.5, 0.5, -2.0]),
                              np.array([0.5, 0.5, 0.5]))
        rgb, depth, trans = render_image(dens, col, cam, st)
        assert np.abs(rgb - np.array([0.9, 0.1, 0.4])).max() <= 1e-6
        assert np.abs(trans - 1.0).max() <= 1e-9

    def test_resolution_doubling_shares_pixel_centers(self):
        """Rays are indexed from the principal point, so pixel (2i, 2j) of a
        double-resolution render matches pixel (i, j)."""
        rng = np.random.default_rng(2)
        dens = create_grid((8, 8, 8), 1, UNIT, 0.0)
        dens.data[:] = rng.normal(2.0, 2.0, dens.data.shape)
        col = create_grid((8, 8, 8), 3, UNIT, 0.0)
        col.data[:] = rng.normal(size=col.data.shape)
        st = bounded_settings(far=10.0)
        cam_lo = _look_at_camera((8, 8), np.array([0.5, 0.4, -1.8]),
                                 np.array([0.5, 0.5, 0.5]))
        cam_hi = _look_at_camera((16, 16), np.array([0.5, 0.4, -1.8]),
                                 np.array([0.5, 0.5, 0.5]))
        lo = render_image(dens, col, cam_lo, st)[0]
        hi = render_image(dens, col, cam_hi, st)[0]
        np.testing.assert_allclose(hi[::2, ::2], lo, atol=1e-6)

    def test_depth_is_weighted_distance(self):
        dens = create_grid((8, 8, 8), 1, UNIT, 60.0)  # a dense slab
        col = create_grid((8, 8, 8), 3, UNIT, 0.0)
        st = bounded_settings(far=10.0)
        cam = _look_at_camera((4, 4), np.array([0.5, 0.5, -1.0]),
                              np.array([0.5, 0.5, 0.5]))
        _, depth, trans = render_image(dens, col, cam, st)
        # the on-axis ray (pixel 2,2) hits the face one unit out; nearly all
        # weight lands on the first half-step sample behind it
        assert depth[2, 2] == pytest.approx(1.0, abs=0.05)
        assert trans[2, 2] <= 1e-3

    def test_invalid_camera_rejected(self):
        dens = create_grid((4, 4, 4), 1, UNIT, 0.0)
        col = create_grid((4, 4, 4), 3, UNIT, 0.0)
        cam = Camera(width=4, height=4, focal=-1.0, cx=2, cy=2, c2w=np.eye(4))
        with pytest.raises(ValueError, match="intrinsics"):
            render_image(dens, col, cam, bounded_settings())

    def test_forward_weights_nonnegative_and_unitary(self, rng):
        """Through the real render path (halting on): w >= 0 and per ray
        sum(w) + T_final = 1 +- 1e-6 before the background blend."""
        dens = create_grid((8, 8, 8), 1, UNIT, 0.0)
        dens.data[:] = rng.normal(0.0, 4.0, dens.data.shape)
        col = create_grid((8, 8, 8), 3, UNIT, 0.0)
        st = bounded_settings(far=10.0)
        cam = _look_at_camera((8, 8), np.array([0.4, 0.6, -1.7]),
                              np.array([0.5, 0.5, 0.5]))
        origins, dirs = pixel_rays(cam)
        shift = st.shift(dens.resolution)
        s = sample_points(origins, dirs, st, dens.resolution)
        f = forward_rays(dens, col, s, st, shift)
        assert np.all(f.w >= 0.0)
        ray_of = np.repeat(np.arange(s.n_rays), s.counts())
        wsum = np.bincount(ray_of, weights=f.w, minlength=s.n_rays)
        assert np.abs(wsum + f.t_final - 1.0).max() <= 1e-6


class TestEndToEndGradient:
    def test_full_chain_matches_finite_differences(self, rng):
        """Pixel MSE gradient w.r.t. both grids on a 4^3 scene, 2x2 image."""
        dens = create_grid((4, 4, 4), 1, UNIT, 0.0)
        col = create_grid((4, 4, 4), 3, UNIT, 0.0)
        dens.data[:] = rng.normal(0, 2.0, dens.data.shape)
        col.data[:] = rng.normal(0, 1.0, col.data.shape)
        st = bounded_settings(halt_threshold=0.0, alpha_init=1e-2, far=10.0)
        cam = _look_at_camera((2, 2), np.array([0.45, 0.55, -1.4]),
                              np.array([0.5, 0.5, 0.5]))
        origins, dirs = pixel_rays(cam)
        gt = rng.random((4, 3))
        shift = st.shift(dens.resolution)

        def mse():
            s = sample_points(origins, dirs, st, dens.resolution)
            f = forward_rays(dens, col, s, st, shift)
            return float(np.mean((f.rgb - gt) ** 2))

        s = sample_points(origins, dirs, st, dens.resolution)
        f = forward_rays(dens, col, s, st, shift)
        d_rgb = 2.0 * (f.rgb - gt) / f.rgb.size
        dg = new_grad_buffer(dens)
        cg = new_grad_buffer(col)
        touched = np.zeros(dens.resolution, dtype=np.bool_)
        backward_rays(s, f, d_rgb, st, shift, dg, cg, touched)

        eps = 1e-5
        for grid, buf in ((dens, dg), (col, cg)):
            flat = grid.data.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                v = flat[i]
                flat[i] = v + eps
                fp = mse()
                flat[i] = v - eps
                fm = mse()
                flat[i] = v
                fd[i] = (fp - fm) / (2 * eps)
            assert rel_err(buf.reshape(-1), fd) <= 1e-4

    def test_touched_cells_cover_scattered_gradient(self, rng):
        dens = create_grid((6, 6, 6), 1, UNIT, 1.0)
        col = create_grid((6, 6, 6), 3, UNIT, 0.0)
        st = bounded_settings(far=10.0)
        cam = _look_at_camera((4, 4), np.array([0.5, 0.5, -1.5]),
                              np.array([0.5, 0.5, 0.5]))
        origins, dirs = pixel_rays(cam)
        shift = st.shift(dens.resolution)
        s = sample_points(origins, dirs, st, dens.resolution)
        f = forward_rays(dens, col, s, st, shift)
        d_rgb = np.ones_like(f.rgb)
        dg = new_grad_buffer(dens)
        cg = new_grad_buffer(col)
        touched = np.zeros(dens.resolution, dtype=np.bool_)
        backward_rays(s, f, d_rgb, st, shift, dg, cg, touched)
        assert np.all(touched[np.abs(dg[..., 0]) > 0])
        assert np.all(touched[np.abs(cg).max(axis=-1) > 0])


class TestRayValidation:
    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            Ray(origin=[0, 0, 0], direction=[1.0, 1.0, 0.0])

    def test_bad_clip_range_rejected(self):
        with pytest.raises(ValueError, match="near"):
            Ray(origin=[0, 0, 0], direction=[1.0, 0.0, 0.0], near=5.0, far=1.0)
