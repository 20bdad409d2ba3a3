import math
import random

import numpy as np
import pytest

from services.floorsim import (CameraModel, FloorSpec, Frame, RenderedRun, generate_floor,
                               generate_mapping_run, render_view)
from services.geometry import Pose2D, pose_delta
from services.localizer import (FailureReason, LocalizationParams, LocalizationResult, Localizer,
                                estimate_position, read_predictions, select_mode, write_predictions)
from services.mapdb import Match
from services.mapper import MappingParams, build_map

from conftest import SCENE_BLOBS, SCENE_POSE, map_from_frame, scene_floor


def match(q, entry_id, distance, pos):
    return Match(q, entry_id, distance, pos)


def test_mode_filter_keeps_dense_cluster():
    matches = [
        match(0, 1, 0.01, (0.100, 0.100)),
        match(1, 2, 0.02, (0.110, 0.105)),
        match(2, 3, 0.03, (0.095, 0.090)),
        match(0, 9, 0.05, (0.900, 0.900)),
        match(1, 8, 0.04, (0.500, 0.100)),
    ]
    kept = select_mode(matches)
    assert [m.entry_id for m in kept] == [1, 2, 3]


def test_mode_filter_one_match_per_keypoint():
    matches = [
        match(0, 1, 0.05, (0.100, 0.100)),
        match(0, 2, 0.01, (0.101, 0.100)),
        match(1, 3, 0.02, (0.102, 0.100)),
    ]
    kept = select_mode(matches)
    assert [(m.query_keypoint_idx, m.entry_id) for m in kept] == [(0, 2), (1, 3)]


def test_mode_filter_breaks_ties_by_distance():
    matches = [
        match(0, 1, 0.20, (0.0, 0.0)),
        match(1, 2, 0.10, (1.0, 1.0)),
    ]
    assert [m.entry_id for m in select_mode(matches)] == [2]


def test_mode_filter_empty():
    assert select_mode([]) == []


def test_params_validation():
    with pytest.raises(ValueError):
        LocalizationParams(k=0)
    with pytest.raises(ValueError):
        LocalizationParams(min_filtered_matches=2)
    assert LocalizationParams(seed=5).frame_seed(3) == 6


def test_localizes_mapped_frame(scene, cam):
    _, frame, db = scene
    result = estimate_position(frame, db, cam=cam)
    assert result.success, result.status
    distance, angle = pose_delta(result.pose, SCENE_POSE)
    assert distance < 1e-6
    assert angle < 1e-6
    assert result.n_keypoints == len(SCENE_BLOBS)
    assert result.n_inliers >= 3
    assert result.status == 'ok'


def test_localizes_fresh_view(scene, cam):
    floor, _, db = scene
    pose = Pose2D(SCENE_POSE.x + 0.001, SCENE_POSE.y - 0.0005, SCENE_POSE.theta + 0.05)
    frame = render_view(floor, cam, pose, noise_sigma=3.0, seed=77, frame_id=4)
    result = estimate_position(frame, db, cam=cam)
    assert result.success, result.status
    distance, angle = pose_delta(result.pose, pose)
    assert distance < 0.001
    assert angle < math.radians(1.0)


def test_blank_frame_has_no_keypoints(scene):
    _, _, db = scene
    frame = Frame(np.full((480, 632, 3), 8, dtype=np.uint8), Pose2D(0, 0), 3)
    result = estimate_position(frame, db)
    assert not result.success
    assert result.failure == FailureReason.NO_KEYPOINTS
    assert result.status == 'no_keypoints'
    assert result.pose is None


def test_two_keypoints_are_too_few(cam):
    floor = scene_floor(blobs=SCENE_BLOBS[:2])
    frame = render_view(floor, cam, SCENE_POSE, seed=3)
    db = map_from_frame(frame, SCENE_POSE, cam)
    result = estimate_position(frame, db, cam=cam)
    assert result.failure == FailureReason.TOO_FEW_MATCHES


def test_results_do_not_depend_on_frame_order(scene):
    floor, _, db = scene
    cam = CameraModel()
    rng = np.random.default_rng(0)
    frames = []
    for frame_id in range(6):
        pose = Pose2D(SCENE_POSE.x + rng.uniform(-0.002, 0.002), SCENE_POSE.y + rng.uniform(-0.002, 0.002),
                      SCENE_POSE.theta + rng.uniform(-0.1, 0.1))
        frames.append(render_view(floor, cam, pose, seed=9, frame_id=frame_id))
    frames.append(Frame(np.full((480, 632, 3), 8, dtype=np.uint8), Pose2D(0, 0), 6))

    localizer = Localizer(db, cam=cam, params=LocalizationParams(seed=13))
    ordered = localizer.localize_all(frames)
    shuffled = frames[:]
    random.Random(1).shuffle(shuffled)
    assert localizer.localize_all(shuffled) == ordered
    assert localizer.localize_all(shuffled, workers=3) == ordered
    assert [r.frame_id for r in ordered] == list(range(7))


def test_predictions_csv(tmp_path):
    results = [
        LocalizationResult(0, Pose2D(0.5, 0.25, 1.0), None, 12, 0, 8, 6),
        LocalizationResult(1, None, FailureReason.TOO_FEW_MATCHES, 2, 0, 2, 0),
        LocalizationResult(2, None, FailureReason.NO_KEYPOINTS),
    ]
    path = tmp_path / 'predictions.csv'
    write_predictions(results, str(path))

    lines = path.read_text().splitlines()
    assert lines[0] == 'frame_id,status,x,y,theta,inliers,n_keypoints,n_matches_filtered'
    assert lines[2] == '1,too_few_matches,,,,0,2,2'

    reread = read_predictions(str(path))
    assert [r.status for r in reread] == ['ok', 'too_few_matches', 'no_keypoints']
    assert reread[0].pose.x == pytest.approx(0.5)
    assert reread[0].n_inliers == 6
    assert reread[1].pose is None


@pytest.fixture(scope='module')
def strip_map():
    """Map of a 12 cm tile at the left end of a 90 cm floor strip."""
    cam = CameraModel()
    floor = generate_floor(FloorSpec(0.9, 0.2, blob_density=1.0, rng_seed=11))
    log = generate_mapping_run(floor, cam, 0.12, origin=(0.02, 0.04))
    db = build_map([(RenderedRun(floor, cam, log, seed=3), log)], params=MappingParams(workers=2), cam=cam)
    return floor, db


def test_frames_far_off_the_map_fail(strip_map, cam):
    floor, db = strip_map
    assert db.positions[:, 0].max() < 0.17
    rng = np.random.default_rng(17)
    frames = [render_view(floor, cam, Pose2D(rng.uniform(0.68, 0.86), rng.uniform(0.05, 0.15),
                                             rng.uniform(-math.pi, math.pi)), seed=19, frame_id=k)
              for k in range(100)]
    results = Localizer(db, cam=cam).localize_all(frames, workers=2)
    assert len(results) == 100
    assert sum(not r.success for r in results) >= 95
