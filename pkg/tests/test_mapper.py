import math
import time

import numpy as np
import pytest

from services.descriptor import HistogramDescriptor
from services.detector import SegmentationDetector
from services.floorsim import CameraModel, Frame, PoseLog, RenderedRun, generate_mapping_run
from services.geometry import Pose2D
from services.mapper import (ClusterParams, MapEmptyError, MappingParams, ObservedKeypoint,
                             OutlierFilterParams, build_map, cluster_keypoints, filter_pose_outliers,
                             merge_clusters, observe_frame, outlier_mask, project_keypoint)


def straight_log(n=40, step=0.2 / 60):
    x = np.arange(n) * step
    return PoseLog(np.arange(n), np.arange(n) / 60.0, x, np.zeros(n), np.zeros(n))


def unit(*values):
    v = np.zeros(30)
    v[:len(values)] = values
    return v / np.linalg.norm(v)


def observation(x, y, frame_id, descriptor=None, run_id=0, u=316.0, v=240.0):
    return ObservedKeypoint(np.array([x, y]), unit(1.0) if descriptor is None else descriptor,
                            frame_id, (u, v), run_id)


def test_straight_track_keeps_everything():
    log = straight_log()
    assert outlier_mask(log).all()
    assert len(filter_pose_outliers(log)) == len(log)


def test_spliced_jump_is_removed():
    log = straight_log()
    log.y[20] += 0.05
    keep = outlier_mask(log)
    assert not keep[20]
    assert keep.sum() == len(log) - 1


def test_huge_alpha_keeps_everything():
    log = straight_log()
    log.y[20] += 0.05
    assert outlier_mask(log, OutlierFilterParams(alpha=1e9)).all()


def test_short_log_is_returned_unfiltered(caplog):
    log = straight_log(n=5)
    log.y[2] += 0.05
    assert filter_pose_outliers(log) is log
    assert 'shorter than the window' in caplog.text


def test_project_keypoint(cam):
    pose = Pose2D(1.0, 2.0, math.pi / 2)
    pixel = (316 + 100, 240)
    x, y = project_keypoint(pose, cam, pixel)
    assert x == pytest.approx(1.0)
    assert y == pytest.approx(2.0 + 100 * cam.px_scale_x / 1000.0)


def test_four_views_make_one_cluster():
    obs = [observation(0.1 + 0.0005 * k, 0.1, frame_id=k) for k in range(4)]
    clusters = cluster_keypoints(obs)
    assert len(clusters) == 1
    assert len(clusters[0].members) == 4
    assert clusters[0].seed is obs[0]


def test_three_views_are_not_enough():
    obs = [observation(0.1 + 0.0005 * k, 0.1, frame_id=k) for k in range(3)]
    assert cluster_keypoints(obs) == []


def test_same_image_counts_once():
    obs = [observation(0.1, 0.1, frame_id=0), observation(0.1001, 0.1, frame_id=0, u=320),
           observation(0.1002, 0.1, frame_id=1), observation(0.1003, 0.1, frame_id=2)]
    assert cluster_keypoints(obs) == []


def test_images_are_told_apart_by_run():
    obs = [observation(0.1, 0.1, frame_id=0, run_id=r) for r in range(4)]
    assert len(cluster_keypoints(obs)) == 1


def test_dissimilar_descriptors_stay_apart():
    obs = [observation(0.1, 0.1, frame_id=k) for k in range(4)]
    obs.append(observation(0.1, 0.1, frame_id=9, descriptor=unit(0.0, 1.0)))
    clusters = cluster_keypoints(obs)
    assert len(clusters) == 1
    assert obs[4] not in clusters[0].members


def test_far_observations_stay_apart():
    obs = [observation(0.1 + 0.004 * k, 0.1, frame_id=k) for k in range(4)]
    assert cluster_keypoints(obs, ClusterParams(position_radius=0.005)) == []


def test_clusters_are_disjoint():
    rng = np.random.default_rng(0)
    obs = [observation(rng.uniform(0, 0.02), rng.uniform(0, 0.02), frame_id=k) for k in range(200)]
    clusters = cluster_keypoints(obs)
    members = [id(m) for c in clusters for m in c.members]
    assert len(members) == len(set(members))
    assert all(len(c.members) >= 4 for c in clusters)


def test_merge_clusters():
    obs = [observation(0.1 + 0.001 * k, 0.2, frame_id=k, descriptor=unit(1.0, 0.1 * k)) for k in range(4)]
    entries = merge_clusters(cluster_keypoints(obs))
    assert len(entries) == 1
    entry = entries[0]
    assert entry.entry_id == 0
    assert entry.world_pos == pytest.approx((0.1015, 0.2))
    assert entry.member_count == 4
    assert np.linalg.norm(entry.descriptor) == pytest.approx(1.0)


def test_blank_runs_give_empty_map(cam):
    log = straight_log(n=20)
    frames = [Frame(np.full((480, 632, 3), 8, dtype=np.uint8), log.pose(i), int(fid))
              for i, fid in enumerate(log.frame_ids)]
    with pytest.raises(MapEmptyError) as info:
        build_map([(frames, log)])
    assert info.value.diagnostics['frames'] == 20
    assert info.value.diagnostics['observations'] == 0


def test_build_map_needs_runs():
    with pytest.raises(ValueError):
        build_map([])


@pytest.fixture(scope='module')
def mapped_tile(small_floor):
    cam = CameraModel()
    log = generate_mapping_run(small_floor, cam, 0.06, origin=(0.03, 0.03))
    run = RenderedRun(small_floor, cam, log, noise_sigma=3.0, seed=1)
    db, clusters = build_map([(run, log)], params=MappingParams(keep_patches=True, workers=2),
                             cam=cam, return_clusters=True)
    return db, clusters


def test_map_from_mapping_run(mapped_tile):
    db, clusters = mapped_tile
    assert len(db) == len(clusters) > 0
    assert db.metadata['frames'] >= db.metadata['frames_after_filter'] > 0
    assert ((db.positions > 0) & (db.positions < 0.12)).all()
    assert (db.member_counts >= 4).all()


def test_map_entries_sit_on_floor_blobs(mapped_tile, small_floor):
    db, _ = mapped_tile
    for x, y in db.positions:
        nearest = np.hypot(*(small_floor.centers - (x, y)).T).min()
        assert nearest < 0.005


def test_cluster_members_share_one_keypoint(mapped_tile):
    _, clusters = mapped_tile
    for cluster in clusters:
        images = [m.image for m in cluster.members]
        assert len(images) == len(set(images))
        assert all(m.patch is not None for m in cluster.members)


def test_clusters_gather_one_floor_blob(mapped_tile, small_floor):
    _, clusters = mapped_tile
    params = ClusterParams()
    majority = 0
    members = 0
    for cluster in clusters:
        seed = cluster.seed
        blob_ids = [int(np.argmin(np.hypot(*(small_floor.centers - m.world_pos).T))) for m in cluster.members]
        majority += np.bincount(blob_ids).max()
        members += len(blob_ids)
        assert len(cluster.members) >= params.min_members
        for m in cluster.members:
            assert 1.0 - float(m.descriptor @ seed.descriptor) < params.cosine_threshold
            assert np.hypot(*(m.world_pos - seed.world_pos)) <= params.position_radius
    assert majority / members >= 0.95


def test_repeating_a_run_keeps_entry_positions(small_floor, cam):
    log = generate_mapping_run(small_floor, cam, 0.04, origin=(0.04, 0.04))
    run = RenderedRun(small_floor, cam, log, noise_sigma=3.0, seed=2)
    once = build_map([(run, log)], cam=cam)
    twice = build_map([(run, log), (run, log)], params=MappingParams(workers=2), cam=cam)
    for position in once.positions:
        assert np.hypot(*(twice.positions - position).T).min() <= 0.001


@pytest.mark.slow
def test_per_frame_cost(small_floor, cam):
    log = generate_mapping_run(small_floor, cam, 0.06, origin=(0.03, 0.03))
    run = RenderedRun(small_floor, cam, log, noise_sigma=3.0, seed=1)
    detector = SegmentationDetector()
    descriptor = HistogramDescriptor(cam)
    observe_frame(run[0], log.pose(0), detector, descriptor, cam)

    n = min(len(log), 100)
    start = time.perf_counter()
    for i in range(n):
        observe_frame(run[i], log.pose(i), detector, descriptor, cam)
    per_frame = (time.perf_counter() - start) / n
    # the 2 m benchmark maps about 121k frames with 4 workers inside 10 minutes
    assert per_frame < 0.015
