"""Dataset IO, synthetic scene generation, and the reference renderer."""

import json
import math

import numpy as np
import pytest

from voxfield.contraction import ContractionConfig
from voxfield.datasets import (SceneDataset, SceneSpec, gen_synthetic_scene,
                               load_dataset, reference_render, save_dataset)
from voxfield.grid import create_grid
from voxfield.rendering import Camera, RenderSettings, alpha_shift, render_image


@pytest.fixture(scope="module")
def small_scene():
    return gen_synthetic_scene(7, SceneSpec(n_train=5, n_test=2, image_size=40))


class TestLoader:
    def test_focal_from_camera_angle(self, tmp_path, small_scene):
        _, ds = small_scene
        save_dataset(tmp_path, ds)
        loaded = load_dataset(tmp_path)
        # closed form: focal = 0.5 W / tan(angle / 2)
        manifest = json.loads((tmp_path / "transforms.json").read_text())
        angle = manifest["camera_angle_x"]
        assert loaded.focal == pytest.approx(
            0.5 * loaded.width / math.tan(0.5 * angle), rel=1e-12)

    def test_closed_form_focal_example(self, tmp_path, small_scene):
        _, ds = small_scene
        ds2 = SceneDataset(camera_angle_x=math.pi / 2, width=100, height=100,
                           poses=ds.poses[:2].copy(),
                           images=np.zeros((2, 100, 100, 3)),
                           split=["train", "test"])
        assert ds2.focal == pytest.approx(50.0, rel=1e-12)

    def test_round_trip_identity(self, tmp_path, small_scene):
        _, ds = small_scene
        save_dataset(tmp_path, ds)
        loaded = load_dataset(tmp_path)
        np.testing.assert_array_equal(loaded.poses, ds.poses)
        np.testing.assert_array_equal(loaded.images, ds.images)
        assert loaded.split == ds.split
        assert loaded.camera_angle_x == ds.camera_angle_x
        np.testing.assert_array_equal(loaded.background, ds.background)

    def test_non_rigid_rotation_rejected_naming_frame(self, tmp_path, small_scene):
        _, ds = small_scene
        save_dataset(tmp_path, ds)
        manifest = json.loads((tmp_path / "transforms.json").read_text())
        manifest["frames"][3]["transform_matrix"][0][0] *= 1.5
        (tmp_path / "transforms.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="frame 3"):
            load_dataset(tmp_path)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_missing_image_rejected(self, tmp_path, small_scene):
        _, ds = small_scene
        save_dataset(tmp_path, ds)
        (tmp_path / "images" / "frame_0002.png").unlink()
        with pytest.raises(FileNotFoundError, match="frame 2"):
            load_dataset(tmp_path)

    def test_untagged_manifest_holds_out_last_frame(self, tmp_path, small_scene):
        _, ds = small_scene
        save_dataset(tmp_path, ds)
        manifest = json.loads((tmp_path / "transforms.json").read_text())
        for fr in manifest["frames"]:
            del fr["split"]
        (tmp_path / "transforms.json").write_text(json.dumps(manifest))
        loaded = load_dataset(tmp_path)
        assert loaded.split[-1] == "test"
        assert all(s == "train" for s in loaded.split[:-1])


class TestSyntheticScene:
    def test_deterministic_for_fixed_seed(self):
        gt1, ds1 = gen_synthetic_scene(3, SceneSpec(n_train=3, n_test=1,
                                                    image_size=24))
        gt2, ds2 = gen_synthetic_scene(3, SceneSpec(n_train=3, n_test=1,
                                                    image_size=24))
        np.testing.assert_array_equal(gt1.density.data, gt2.density.data)
        np.testing.assert_array_equal(ds1.images, ds2.images)
        np.testing.assert_array_equal(ds1.poses, ds2.poses)

    def test_zero_boxes_gives_pure_background(self):
        gt, ds = gen_synthetic_scene(1, SceneSpec(n_boxes=0, n_train=3,
                                                  n_test=1, image_size=16))
        assert np.abs(ds.images - 1.0).max() <= 1 / 255 + 1e-12

    def test_box_outside_scene_rejected(self):
        spec = SceneSpec(boxes=[((-2.0, 0, 0), (0.5, 0.5, 0.5), (1, 0, 0))])
        with pytest.raises(ValueError, match="outside"):
            gen_synthetic_scene(0, spec)

    def test_test_views_disjoint_from_train(self, small_scene):
        _, ds = small_scene
        assert set(ds.indices("train")) & set(ds.indices("test")) == set()
        assert len(ds.indices("test")) == 2

    def test_main_renderer_agrees_with_reference(self, small_scene):
        """Training-quadrature render vs the fine-step oracle: <= 5e-3 per
        channel (different quadrature, same field)."""
        gt, ds = small_scene
        cfg = ContractionConfig(mode="bounded", aabb=gt.density.aabb)
        st = RenderSettings(contraction=cfg, step_size=0.5, halt_threshold=1e-3,
                            background=ds.background, alpha_init=1e-4,
                            near=ds.near, far=ds.far)
        st.alpha_shift_override = gt.shift
        for k in (0, 5):
            cam = ds.camera(k)
            got = render_image(gt.density, gt.color, cam, st)[0]
            ref = reference_render(gt.density, gt.color, cam, gt.shift,
                                   ds.background, 0.25, ds.near, ds.far)
            assert np.abs(got - ref).max() <= 5e-3

    def test_matched_settings_agreement(self, small_scene):
        """Same step, no halting: the two independent implementations agree
        to float tolerance."""
        gt, ds = small_scene
        cfg = ContractionConfig(mode="bounded", aabb=gt.density.aabb)
        st = RenderSettings(contraction=cfg, step_size=0.25, halt_threshold=0.0,
                            background=ds.background, alpha_init=1e-4,
                            near=ds.near, far=ds.far)
        st.alpha_shift_override = gt.shift
        cam = ds.camera(1)
        got = render_image(gt.density, gt.color, cam, st)[0]
        ref = reference_render(gt.density, gt.color, cam, gt.shift,
                               ds.background, 0.25, ds.near, ds.far)
        assert np.abs(got - ref).max() <= 1e-6

    def test_unbounded_variant_places_content_beyond_unit_ball(self):
        gt, ds = gen_synthetic_scene(5, SceneSpec(mode="unbounded", n_train=4,
                                                  n_test=1, image_size=16))
        assert ds.mode == "unbounded"
        hot = gt.density.data[..., 0] > 0
        res = gt.density.resolution
        axes = [np.linspace(gt.density.aabb[0][a], gt.density.aabb[1][a], res[a])
                for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        r = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)
        assert r[hot].max() > 1.2  # content outside the camera shell


class TestReferenceRenderer:
    def test_empty_grids_give_background(self):
        dens = create_grid((8, 8, 8), 1, [[-1, -1, -1], [1, 1, 1]], -40.0)
        col = create_grid((8, 8, 8), 3, [[-1, -1, -1], [1, 1, 1]], 0.0)
        shift = alpha_shift(1e-4, 0.5 * dens.voxel_edge)
        cam = _camera_at(np.array([0.0, 0.0, 2.5]))
        img = reference_render(dens, col, cam, shift, (0.2, 0.4, 0.8))
        assert np.abs(img - np.array([0.2, 0.4, 0.8])).max() <= 1e-6

    def test_opaque_voxel_blob_color(self):
        """A single hot node with the color field set to its color shows a
        blob at image center whose pixel is within 0.05 of that color."""
        dens = create_grid((33, 33, 33), 1, [[-1, -1, -1], [1, 1, 1]], -10.0)
        dens.data[16, 16, 16, 0] = 500.0
        col = create_grid((33, 33, 33), 3, [[-1, -1, -1], [1, 1, 1]], 0.0)
        target = np.array([0.8, 0.3, 0.2])
        col.data[:] = np.log(target / (1 - target))
        shift = alpha_shift(1e-4, 0.5 * dens.voxel_edge)
        cam = _camera_at(np.array([0.0, 0.0, 2.0]))
        img = reference_render(dens, col, cam, shift, (1.0, 1.0, 1.0))
        h, w = img.shape[:2]
        center = img[h // 2, w // 2]
        assert np.abs(center - target).max() <= 0.05
        # surrounded by background away from the blob
        assert np.abs(img[2, 2] - 1.0).max() <= 1e-3

    def test_color_scaling_linearity(self, small_scene):
        """Halving all colors halves the foreground contribution where the
        ray is fully absorbed (T ~ 0): compositing is linear in color."""
        gt, ds = small_scene
        dens = create_grid((17, 17, 17), 1, [[-1, -1, -1], [1, 1, 1]], 25.0)
        c_hi = create_grid((17, 17, 17), 3, [[-1, -1, -1], [1, 1, 1]], 0.0)
        target = np.array([0.8, 0.6, 0.4])
        c_hi.data[:] = np.log(target / (1 - target))
        c_lo = create_grid((17, 17, 17), 3, [[-1, -1, -1], [1, 1, 1]], 0.0)
        half = target / 2
        c_lo.data[:] = np.log(half / (1 - half))
        shift = alpha_shift(1e-4, 0.5 * dens.voxel_edge)
        cam = _camera_at(np.array([0.0, 0.0, 2.5]))
        hi = reference_render(dens, c_hi, cam, shift, (0.0, 0.0, 0.0))
        lo = reference_render(dens, c_lo, cam, shift, (0.0, 0.0, 0.0))
        hw = hi.shape[0] // 2
        np.testing.assert_allclose(lo[hw, hw], hi[hw, hw] / 2, atol=1e-6)

    def test_sampling_converged(self, small_scene):
        gt, ds = small_scene
        cam = ds.camera(0)
        a = reference_render(gt.density, gt.color, cam, gt.shift,
                             ds.background, 0.25, ds.near, ds.far)
        b = reference_render(gt.density, gt.color, cam, gt.shift,
                             ds.background, 0.125, ds.near, ds.far)
        assert np.abs(a - b).max() <= 1e-3

    def test_deterministic(self, small_scene):
        gt, ds = small_scene
        cam = ds.camera(0)
        a = reference_render(gt.density, gt.color, cam, gt.shift, ds.background)
        b = reference_render(gt.density, gt.color, cam, gt.shift, ds.background)
        np.testing.assert_array_equal(a, b)


def _camera_at(position, size=33, angle=1.1):
    z = position / np.linalg.norm(position)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, position
    return Camera.from_angle(size, size, angle, c2w)
