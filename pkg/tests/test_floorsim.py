import math
import threading

import numpy as np
import pytest

from config import PALETTE
from services.floorsim import (ColorClass, FloorFormatError, FloorSpec, PoseLog, RenderedRun,
                               generate_eval_run, generate_floor, generate_mapping_run, load_floor,
                               load_run, map_frames, noise_field, perturb_log, persist_run,
                               render_labels, render_view, save_floor)
from services.geometry import Pose2D

from conftest import make_floor


def test_floor_is_seeded():
    a = generate_floor(FloorSpec(0.1, 0.1, rng_seed=3))
    b = generate_floor(FloorSpec(0.1, 0.1, rng_seed=3))
    c = generate_floor(FloorSpec(0.1, 0.1, rng_seed=4))
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.colors, b.colors)
    assert not np.array_equal(a.centers, c.centers)


def test_floor_blob_count_and_ranges():
    floor = generate_floor(FloorSpec(0.1, 0.1))
    assert len(floor) == 60
    assert ((floor.centers >= 0) & (floor.centers <= 0.1)).all()
    assert ((floor.axes_mm[:, 0] >= 0.8) & (floor.axes_mm[:, 0] <= 2.5)).all()
    assert (floor.axes_mm[:, 1] <= floor.axes_mm[:, 0]).all()
    assert set(np.unique(floor.colors)) <= {1, 2, 3, 4}


def test_color_weights_select_classes():
    floor = generate_floor(FloorSpec(0.05, 0.05, color_weights=(0, 0, 1, 0)))
    assert (floor.colors == ColorClass.B).all()


def test_floor_spec_validation():
    with pytest.raises(ValueError):
        FloorSpec(0, 1)
    with pytest.raises(ValueError):
        FloorSpec(1, 1, blob_radius_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        FloorSpec(1, 1, color_weights=(0, 0, 0, 0))


def test_camera_pixel_scales(cam):
    assert cam.px_scale_x == pytest.approx(49.5 / 632)
    assert cam.px_scale_y == pytest.approx(28.0 / 480)
    assert cam.principal_point == (316.0, 240.0)
    assert cam.pixel_to_camera([(316, 240)])[0] == pytest.approx((0.0, 0.0))


def test_camera_round_trip(cam):
    pose = Pose2D(0.4, 0.7, 2.0)
    pixels = np.array([(0, 0), (631, 479), (100.5, 300.25)])
    back = cam.world_to_pixel(pose, cam.pixel_to_world(pose, pixels))
    assert back == pytest.approx(pixels)


def test_render_blob_under_principal_point(cam):
    floor = make_floor([(0.05, 0.05, 2.0, 1.0, 0.0, ColorClass.G)])
    labels = render_labels(floor, cam, Pose2D(0.05, 0.05, 0.7))
    assert labels[240, 316] == ColorClass.G
    assert labels[0, 0] == ColorClass.BG


def test_render_respects_heading(cam):
    # blob 10 mm along world +y, camera turned to face +y: it appears along +u
    floor = make_floor([(0.05, 0.06, 1.0, 0.8, 0.0, ColorClass.R)])
    labels = render_labels(floor, cam, Pose2D(0.05, 0.05, math.pi / 2))
    u = int(round(316 + 10.0 / cam.px_scale_x))
    assert labels[240, u] == ColorClass.R
    assert labels[240, 316] == ColorClass.BG


def test_render_view_noise_free_matches_palette(cam):
    floor = make_floor([(0.05, 0.05, 2.0, 1.0, 0.3, ColorClass.W)])
    pose = Pose2D(0.05, 0.05, 0.0)
    frame = render_view(floor, cam, pose, noise_sigma=0.0, frame_id=9)
    expected = np.asarray(PALETTE, dtype=np.uint8)[render_labels(floor, cam, pose)]
    assert frame.image.shape == (480, 632, 3)
    assert frame.image.dtype == np.uint8
    assert frame.frame_id == 9
    assert np.array_equal(frame.image, expected)


def test_render_view_noise_is_seeded_per_frame(cam):
    floor = make_floor([])
    pose = Pose2D(0.05, 0.05, 0.0)
    a = render_view(floor, cam, pose, seed=1, frame_id=3).image
    b = render_view(floor, cam, pose, seed=1, frame_id=3).image
    c = render_view(floor, cam, pose, seed=1, frame_id=4).image
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_empty_floor_renders_background(cam):
    labels = render_labels(make_floor([]), cam, Pose2D(0.1, 0.1, 0.0))
    assert (labels == ColorClass.BG).all()


def test_mapping_run_lane_count(cam):
    floor = make_floor([], width=0.2, height=0.2)
    log = generate_mapping_run(floor, cam, 0.2, spacing=0.014)
    assert len(np.unique(np.round(log.y, 9))) == 15
    assert (np.diff(log.timestamps) > 0).all()
    forward = np.isclose(log.theta, 0.0)
    backward = np.isclose(log.theta, math.pi)
    assert (forward | backward).all()
    assert forward.any() and backward.any()


def test_mapping_run_timestamps_follow_speed(cam):
    floor = make_floor([], width=0.1, height=0.1)
    log = generate_mapping_run(floor, cam, 0.1, speed=0.2, rate=60.0)
    step = np.hypot(np.diff(log.x), np.diff(log.y))
    assert np.diff(log.timestamps) == pytest.approx(step / 0.2)


def test_mapping_run_rejects_gapped_lanes(cam):
    floor = make_floor([], width=0.2, height=0.2)
    with pytest.raises(ValueError, match='coverage'):
        generate_mapping_run(floor, cam, 0.2, spacing=0.028)
    with pytest.raises(ValueError):
        generate_mapping_run(floor, cam, 0.3)


def test_eval_run_stays_inside_area(cam):
    floor = make_floor([], width=1.0, height=1.0)
    area = (0.0, 0.0, 0.5, 0.5)
    log = generate_eval_run(floor, cam, area, path_seed=12, n_frames=600)
    assert len(log) == 600
    assert ((log.x >= 0) & (log.x <= 0.5) & (log.y >= 0) & (log.y <= 0.5)).all()
    assert np.hypot(np.diff(log.x), np.diff(log.y)).max() <= 0.3 / 60.0 + 1e-12


def test_eval_run_noise_keeps_path(cam):
    floor = make_floor([], width=1.0, height=1.0)
    area = (0.0, 0.0, 1.0, 1.0)
    clean = generate_eval_run(floor, cam, area, path_seed=5, n_frames=100)
    noisy = generate_eval_run(floor, cam, area, path_seed=5, n_frames=100, pose_noise_sigma=0.0005)
    offsets = np.hypot(noisy.x - clean.x, noisy.y - clean.y)
    assert np.array_equal(noisy.theta, clean.theta)
    assert 0 < offsets.mean() < 0.002


def test_eval_run_rejects_area_outside_floor(cam):
    floor = make_floor([], width=0.5, height=0.5)
    with pytest.raises(ValueError):
        generate_eval_run(floor, cam, (0.0, 0.0, 1.0, 1.0), path_seed=1)


def test_perturb_log_zero_sigma_is_identity():
    log = PoseLog([0, 1], [0.0, 0.1], [0.0, 0.1], [0.0, 0.0], [0.0, 0.0])
    assert perturb_log(log, 0.0, 1) is log


def test_poselog_validation():
    with pytest.raises(ValueError):
        PoseLog([0, 1], [0.0, 0.0], [0, 0], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        PoseLog([0, 0], [0.0, 0.1], [0, 0], [0, 0], [0, 0])


def test_poselog_concat():
    a = PoseLog([0, 1, 2], [0.0, 0.1, 0.2], [0, 1, 2], [0, 0, 0], [0, 0, 0], capture_rate=10.0)
    b = PoseLog([0, 1], [5.0, 5.1], [7, 8], [1, 1], [0, 0], capture_rate=10.0)
    joined = PoseLog.concat([a, b])
    assert joined.frame_ids.tolist() == [0, 1, 2, 3, 4]
    assert joined.x.tolist() == [0, 1, 2, 7, 8]
    assert (np.diff(joined.timestamps) > 0).all()


def test_persist_and_load_run(tmp_path, cam):
    floor = make_floor([(0.05, 0.05, 2.0, 1.2, 0.4, ColorClass.B)])
    log = PoseLog([0, 1, 2], [0.0, 1 / 60, 2 / 60], [0.05, 0.051, 0.052], [0.05, 0.05, 0.05],
                  [0.0, 0.0, 0.1])
    frames = RenderedRun(floor, cam, log, noise_sigma=3.0, seed=2)
    persist_run(frames, log, str(tmp_path))

    disk, loaded = load_run(str(tmp_path))
    assert loaded.frame_ids.tolist() == [0, 1, 2]
    assert loaded.x == pytest.approx(log.x, abs=1e-6)
    assert loaded.capture_rate == 60.0
    for original, reread in zip(frames, disk):
        assert reread.frame_id == original.frame_id
        assert np.array_equal(reread.image, original.image)


def test_persist_run_rejects_mismatched_frames(tmp_path, cam):
    log = PoseLog([0, 1], [0.0, 0.1], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0])
    frames = RenderedRun(make_floor([]), cam, log.select([True, False]))
    with pytest.raises(ValueError):
        persist_run(frames, log, str(tmp_path))


def test_floor_file_round_trip(tmp_path):
    floor = generate_floor(FloorSpec(0.05, 0.05, rng_seed=9))
    path = str(tmp_path / 'floor.kflt')
    save_floor(floor, path)
    loaded = load_floor(path)
    assert len(loaded) == len(floor)
    assert np.array_equal(loaded.centers, floor.centers)
    assert np.array_equal(loaded.axes_mm, floor.axes_mm)
    assert np.array_equal(loaded.orientations, floor.orientations)
    assert np.array_equal(loaded.colors, floor.colors)


def test_floor_file_errors(tmp_path):
    floor = generate_floor(FloorSpec(0.05, 0.05))
    path = tmp_path / 'floor.kflt'
    save_floor(floor, str(path))
    data = path.read_bytes()

    path.write_bytes(b'XXXX' + data[4:])
    with pytest.raises(FloorFormatError, match='magic'):
        load_floor(str(path))
    path.write_bytes(data[:-5])
    with pytest.raises(FloorFormatError, match='Truncated'):
        load_floor(str(path))


def grid_labels(floor, cam, pose):
    """Per-blob rasterization over a full camera-frame coordinate grid."""
    labels = np.zeros((cam.image_height, cam.image_width), dtype=np.uint8)
    v, u = np.mgrid[0:cam.image_height, 0:cam.image_width]
    grid = cam.pixel_to_camera(np.column_stack((u.ravel(), v.ravel()))).reshape(
        cam.image_height, cam.image_width, 2)
    local = pose.to_transform().inverse().apply(floor.centers)
    for i in range(len(floor)):
        a, b = floor.axes_mm[i] / 1000.0
        offset = grid - local[i]
        psi = floor.orientations[i] - pose.theta
        c, s = math.cos(psi), math.sin(psi)
        along = offset[..., 0] * c + offset[..., 1] * s
        across = -offset[..., 0] * s + offset[..., 1] * c
        labels[(along / a) ** 2 + (across / b) ** 2 <= 1.0] = floor.colors[i]
    return labels


@pytest.mark.parametrize('pose', [Pose2D(0.06, 0.06, 0.0), Pose2D(0.03, 0.09, 2.3), Pose2D(0.1, 0.02, -0.8)])
def test_render_labels_match_grid_reference(cam, small_floor, pose):
    ours = render_labels(small_floor, cam, pose)
    reference = grid_labels(small_floor, cam, pose)
    assert (ours != reference).sum() <= 3
    assert (ours != 0).sum() > 0


def test_visible_blob_area_matches_ellipse(cam):
    floor = make_floor([(0.05, 0.05, 2.0, 1.2, 0.6, ColorClass.R)])
    labels = render_labels(floor, cam, Pose2D(0.05, 0.05, 0.2))
    expected = math.pi * 2.0 * 1.2 / (cam.px_scale_x * cam.px_scale_y)
    assert (labels == ColorClass.R).sum() == pytest.approx(expected, rel=0.25)


def test_coverage_fraction(cam):
    assert cam.coverage_fraction(144.0) == pytest.approx(9.625e-6, rel=1e-9)
    assert cam.coverage_fraction(cam.footprint_m[0] * cam.footprint_m[1]) == pytest.approx(1.0)


def test_mapping_lanes_see_every_blob_twice(cam):
    floor = generate_floor(FloorSpec(0.1, 0.1, rng_seed=13))
    log = generate_mapping_run(floor, cam, 0.1, spacing=0.027)
    half_w, half_h = cam.footprint_m[0] / 2.0, cam.footprint_m[1] / 2.0
    for center in floor.centers:
        sightings = 0
        for i in range(len(log)):
            lx, ly = log.pose(i).to_transform().inverse().apply([center])[0]
            sightings += abs(lx) <= half_w and abs(ly) <= half_h
        assert sightings >= 2, center


def test_eval_run_pose_noise_has_requested_spread(cam):
    floor = make_floor([], width=1.0, height=1.0)
    area = (0.0, 0.0, 1.0, 1.0)
    clean = generate_eval_run(floor, cam, area, path_seed=8, n_frames=2000)
    noisy = generate_eval_run(floor, cam, area, path_seed=8, n_frames=2000, pose_noise_sigma=0.0005)
    for axis in ('x', 'y'):
        spread = float(np.std(getattr(noisy, axis) - getattr(clean, axis)))
        assert spread == pytest.approx(0.0005, rel=0.2)


def test_render_noise_statistics(cam):
    floor = make_floor([])
    background = np.asarray(PALETTE[0], dtype=np.float64)
    images = [render_view(floor, cam, Pose2D(0.05, 0.05, 0.0), noise_sigma=3.0, seed=2, frame_id=k).image
              for k in range(3)]
    for image in images:
        residual = image.astype(np.float64) - background
        assert abs(residual.mean()) < 0.1
        assert residual.std() == pytest.approx(3.0, rel=0.1)
    assert not np.array_equal(images[0], images[1])
    assert noise_field(2, 3.0, cam.image_height, cam.image_width).flags.writeable is False


def test_render_noise_is_clipped_to_8_bits(cam):
    floor = make_floor([(0.05, 0.05, 2.0, 1.2, 0.0, ColorClass.W)])
    image = render_view(floor, cam, Pose2D(0.05, 0.05, 0.0), noise_sigma=200.0, seed=1).image
    assert image.dtype == np.uint8
    assert image.min() == 0 and image.max() == 255


class CountingRun(RenderedRun):
    """Rendered run that records how many frames were rendered and by which threads."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.rendered = 0
        self.threads = set()
        self.lock = threading.Lock()

    def __getitem__(self, i):
        with self.lock:
            self.rendered += 1
            self.threads.add(threading.current_thread().name)
        return super().__getitem__(i)


def straight_log(n):
    return PoseLog(np.arange(n), np.arange(n) / 60.0, np.linspace(0.04, 0.06, n), np.full(n, 0.05),
                   np.zeros(n))


def test_map_frames_bounds_frames_in_flight(cam):
    run = CountingRun(make_floor([]), cam, straight_log(40), noise_sigma=0.0)
    seen = []
    backlog = 0
    for frame_id in map_frames(lambda frame: frame.frame_id, run, workers=4):
        seen.append(frame_id)
        backlog = max(backlog, run.rendered - len(seen))
    assert seen == list(range(40))
    assert run.rendered == 40
    assert backlog <= 8
    assert threading.current_thread().name not in run.threads


def test_map_frames_filters_ids(cam):
    run = CountingRun(make_floor([]), cam, straight_log(10), noise_sigma=0.0)
    assert list(map_frames(lambda frame: frame.frame_id, run, workers=2, frame_ids={1, 4, 7})) == [1, 4, 7]
    assert run.rendered == 3
    frames = list(RenderedRun(make_floor([]), cam, straight_log(5), noise_sigma=0.0))
    assert list(map_frames(lambda frame: frame.frame_id, frames, frame_ids={0, 3})) == [0, 3]
