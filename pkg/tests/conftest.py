import os
import math

import numpy as np
import pytest

from services.descriptor import HistogramDescriptor
from services.detector import SegmentationDetector, SegMask
from services.floorsim import CameraModel, FloorSpec, FloorTruth, generate_floor, render_view
from services.geometry import Pose2D
from services.mapdb import MapEntry, build_index

ACCEPTANCE = os.getenv('KOALA_ACCEPTANCE') == '1'


def pytest_collection_modifyitems(config, items):
    if ACCEPTANCE:
        return
    skip = pytest.mark.skip(reason="acceptance check; set KOALA_ACCEPTANCE=1")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


# Pose of the hand-made localization scene and its blobs in camera millimeters:
# (dx, dy, major, minor, orientation, color)
SCENE_POSE = Pose2D(0.1, 0.1, 0.3)
SCENE_BLOBS = [
    (0.0, 0.0, 2.0, 1.2, 0.2, 1),
    (-15.0, -7.0, 1.4, 0.84, 1.0, 2),
    (-5.0, 6.0, 1.6, 0.96, 2.1, 3),
    (5.0, -6.0, 1.8, 1.08, 0.7, 4),
    (15.0, 7.0, 2.2, 1.32, 2.8, 1),
    (-10.0, 1.0, 1.5, 0.9, 1.6, 2),
    (10.0, -1.0, 1.9, 1.14, 0.3, 3),
]


def make_floor(blobs, width=0.2, height=0.2):
    """Floor from (x, y, major_mm, minor_mm, orientation, color) rows, world coordinates."""
    spec = FloorSpec(width, height)
    if not blobs:
        return FloorTruth.empty(spec)
    rows = np.array(blobs, dtype=np.float64)
    return FloorTruth(spec, rows[:, 0:2].copy(), rows[:, 2:4].copy(), rows[:, 4].copy(),
                      rows[:, 5].astype(np.uint8))


def scene_floor(pose=SCENE_POSE, blobs=SCENE_BLOBS):
    transform = pose.to_transform()
    rows = []
    for dx, dy, a, b, phi, color in blobs:
        x, y = transform.apply([(dx / 1000.0, dy / 1000.0)])[0]
        rows.append((x, y, a, b, phi + pose.theta, color))
    return make_floor(rows)


def map_from_frame(frame, pose, cam):
    """Map whose entries are the keypoints of one frame placed with its true pose."""
    detection = SegmentationDetector().detect(frame)
    vectors, _ = HistogramDescriptor(cam).compute(detection.mask, detection.keypoints)
    centers = np.array([kp.center for kp in detection.keypoints])
    world = cam.pixel_to_world(pose, centers)
    entries = [MapEntry(i, tuple(world[i]), vectors[i], 4) for i in range(len(vectors))]
    return build_index(entries)


@pytest.fixture
def cam():
    return CameraModel()


@pytest.fixture
def blank_mask(cam):
    return SegMask(np.zeros((cam.image_height, cam.image_width), dtype=np.uint8))


@pytest.fixture(scope='session')
def scene():
    cam = CameraModel()
    floor = scene_floor()
    frame = render_view(floor, cam, SCENE_POSE, noise_sigma=3.0, seed=5, frame_id=0)
    return floor, frame, map_from_frame(frame, SCENE_POSE, cam)


@pytest.fixture(scope='session')
def small_floor():
    return generate_floor(FloorSpec(0.12, 0.12, blob_density=1.0, rng_seed=7))


def heading_poses(x, y):
    return [Pose2D(x, y, k * math.pi / 4.0) for k in range(4)]
