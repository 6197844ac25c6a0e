import math

import numpy as np
import pytest
from scipy.stats import chisquare

from mvcape.datagen import (
    FOV_DEG,
    Box,
    Dataset,
    PoseRanges,
    Scene,
    Sphere,
    build_dataset,
    generate_dataset,
    read_dataset,
    read_ppm,
    render_view,
    sample_batch,
    sample_view_indices,
    write_ppm,
)
from mvcape.pose import Pose4, Pose6, RadiusBounds

ON_AXIS = Pose4(0.0, math.pi / 2, 0.0, 3.0)


def test_empty_scene_is_black():
    img = render_view(Scene(), ON_AXIS, 32).image
    assert img.shape == (32, 32, 3)
    assert not img.any()


def test_centered_sphere_center_lit():
    scene = Scene((Sphere((0, 0, 0), 1.0, (1.0, 1.0, 1.0)),), light_dir=(1.0, 0.0, 0.0))
    img = render_view(scene, ON_AXIS, 32).image
    # light comes from the camera side
    assert img[15:17, 15:17].min() > 0.9
    assert not img[0, 0].any() and not img[-1, -1].any()
    mask = img.sum(-1) > 0
    assert np.array_equal(mask, mask[::-1]) and np.array_equal(mask, mask[:, ::-1])


@pytest.mark.parametrize("radius,dist", [(1.0, 3.0), (0.5, 2.0), (0.3, 4.0)])
def test_silhouette_matches_pinhole_projection(radius, dist):
    side = 32
    scene = Scene((Sphere((0, 0, 0), radius, (0.5, 0.5, 0.5)),))
    img = render_view(scene, Pose4(0.7, 1.2, 0.0, dist), side).image
    focal = 0.5 * side / math.tan(math.radians(FOV_DEG) / 2)
    expected = focal * math.tan(math.asin(radius / dist))
    mask = img.sum(-1) > 0
    assert abs(math.sqrt(mask.sum() / math.pi) - expected) < 1.0
    row = mask[side // 2]
    assert abs(row.sum() / 2 - expected) < 1.0


def test_box_is_rendered_with_face_shading():
    scene = Scene((Box((0, 0, 0), (0.5, 0.5, 0.5), (1.0, 0.5, 0.25)),), light_dir=(1.0, 0.0, 0.0))
    img = render_view(scene, ON_AXIS, 32).image
    # camera on +x axis sees the +x face head-on: ambient + full diffuse
    np.testing.assert_allclose(img[16, 16], [1.0, 0.5, 0.25], atol=1e-6)


def test_nearest_hit_wins():
    near = Sphere((1.0, 0, 0), 0.3, (1.0, 0.0, 0.0))
    far = Sphere((-1.0, 0, 0), 0.8, (0.0, 0.0, 1.0))
    img = render_view(Scene((far, near)), ON_AXIS, 32).image
    assert img[16, 16, 0] > 0 and img[16, 16, 2] == 0


def test_render_deterministic():
    rng = np.random.default_rng(0)
    from mvcape.datagen import random_scene

    scene = random_scene(rng)
    a = render_view(scene, ON_AXIS).image
    b = render_view(scene, ON_AXIS).image
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(a).all() and a.min() >= 0 and a.max() <= 1


def test_pose_ranges():
    rng = np.random.default_rng(3)
    pr = PoseRanges()
    for _ in range(500):
        p = pr.sample(rng)
        assert math.radians(30) - 1e-12 <= p.elevation <= math.radians(150) + 1e-12
        assert pr.bounds.r_min <= p.radius <= pr.bounds.r_max
        assert p.roll == 0.0


class TestDatasetFile:
    def test_counts_and_header(self, tmp_path):
        ds = generate_dataset(tmp_path / "d.bin", 10, 12, seed=5, image_side=16)
        back = read_dataset(tmp_path / "d.bin")
        assert back.images.shape == (10, 12, 16, 16, 3)
        assert back.bounds == PoseRanges().bounds
        assert back.images.tobytes() == ds.images.tobytes()
        assert back.poses.tobytes() == ds.poses.tobytes()

    def test_same_seed_byte_identical(self, tmp_path):
        generate_dataset(tmp_path / "a.bin", 3, 4, seed=7, image_side=16)
        generate_dataset(tmp_path / "b.bin", 3, 4, seed=7, image_side=16)
        generate_dataset(tmp_path / "c.bin", 3, 4, seed=8, image_side=16)
        a, b, c = ((tmp_path / n).read_bytes() for n in ("a.bin", "b.bin", "c.bin"))
        assert a == b and a != c

    def test_threads_do_not_change_output(self, tmp_path, monkeypatch):
        one = build_dataset(3, 4, seed=2, image_side=16)
        monkeypatch.setenv("CAPE_NUM_THREADS", "3")
        three = build_dataset(3, 4, seed=2, image_side=16)
        assert one.images.tobytes() == three.images.tobytes()

    def test_custom_bounds_recorded(self, tmp_path):
        ranges = PoseRanges(bounds=RadiusBounds(2.0, 3.0))
        generate_dataset(tmp_path / "d.bin", 2, 2, seed=1, image_side=8, ranges=ranges)
        assert read_dataset(tmp_path / "d.bin").bounds == RadiusBounds(2.0, 3.0)

    def test_layout(self, tmp_path):
        ds = generate_dataset(tmp_path / "d.bin", 2, 3, seed=1, image_side=8)
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:8] == b"CAPEDAT1"
        header = 8 + 4 * 4 + 2 * 8
        rec = 4 * 8 + 8 * 8 * 3 * 4
        assert len(raw) == header + 6 * rec
        first_pose = np.frombuffer(raw, "<f8", 4, header)
        np.testing.assert_array_equal(first_pose, ds.poses[0, 0])

    def test_6dof_mode(self, tmp_path):
        ds = generate_dataset(tmp_path / "d.bin", 2, 3, seed=1, image_side=8, pose_mode=6)
        back = read_dataset(tmp_path / "d.bin")
        assert back.poses.shape == (2, 3, 12)
        assert isinstance(back.pose(1, 2), Pose6)
        np.testing.assert_array_equal(back.pose(0, 0).as_array(), ds.poses[0, 0])

    def test_corrupt_files(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOTADATA" + bytes(40))
        with pytest.raises(ValueError):
            read_dataset(p)
        generate_dataset(tmp_path / "d.bin", 1, 1, seed=1, image_side=8)
        (tmp_path / "t.bin").write_bytes((tmp_path / "d.bin").read_bytes()[:-4])
        with pytest.raises(ValueError):
            read_dataset(tmp_path / "t.bin")

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            generate_dataset(tmp_path / "missing" / "d.bin", 1, 1, image_side=8)


class TestSampling:
    def test_default_batch(self):
        ds = build_dataset(4, 12, seed=0, image_side=8)
        b = sample_batch(ds, rng=0)
        assert b.ref_images.shape == (1, 3, 8, 8, 3) and b.tgt_images.shape == (1, 3, 8, 8, 3)
        assert b.view_index.shape == (1, 6) and b.view_index.max() < 12
        s = b.scenes[0]
        for i, v in enumerate(b.view_index[0][:3]):
            np.testing.assert_array_equal(b.ref_images[0, i], ds.images[s, v])
            assert b.ref_poses[0][i] == ds.pose(s, v)

    def test_minimal_batch(self):
        ds = build_dataset(1, 1, seed=0, image_side=8)
        b = sample_batch(ds, 1, 1, rng=0, batch_size=2)
        assert b.view_index.tolist() == [[0, 0], [0, 0]]

    def test_duplicates_occur(self):
        rng = np.random.default_rng(0)
        dup = sum(len(set(sample_view_indices(12, 3, 3, rng))) < 6 for _ in range(200))
        # P(all distinct) = 12*11*10*9*8*7 / 12^6 ~ 0.22
        assert dup > 100

    def test_uniform_frequency(self):
        rng = np.random.default_rng(11)
        draws = np.concatenate([sample_view_indices(12, 3, 3, rng) for _ in range(100_000 // 6 + 1)])[:100_000]
        freq = np.bincount(draws, minlength=12) / len(draws)
        assert np.max(np.abs(freq - 1 / 12)) < 0.01
        counts = np.bincount(draws, minlength=12)
        assert chisquare(counts).pvalue > 1e-3

    def test_empty(self):
        with pytest.raises(ValueError):
            sample_view_indices(0, 1, 1, np.random.default_rng())
        empty = Dataset(np.zeros((0, 1, 8, 8, 3), np.float32), np.zeros((0, 1, 4)), 4, RadiusBounds())
        with pytest.raises(ValueError):
            sample_batch(empty)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    write_ppm(tmp_path / "x.ppm", img)
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    np.testing.assert_allclose(read_ppm(tmp_path / "x.ppm"), img, atol=1 / 510 + 1e-7)
