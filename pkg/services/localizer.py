"""
Localizer Service
Memoryless per-frame pose estimation against a sealed map: detect, describe,
retrieve, mode-filter and align with RANSAC.
"""
import math
import time
import logging
from enum import Enum
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .descriptor import HistogramDescriptor
from .detector import SegmentationDetector
from .floorsim import CameraModel, map_frames
from .geometry import Pose2D, RansacParams, RansacError, ransac_rigid
from .mapdb import query_knn

logger = logging.getLogger(__name__)


class FailureReason(str, Enum):
    NO_KEYPOINTS = 'no_keypoints'
    TOO_FEW_MATCHES = 'too_few_matches'
    RANSAC_FAILED = 'ransac_failed'


@dataclass(frozen=True)
class LocalizationParams:
    """Defaults: k = 20, mode radius = half the footprint diagonal, RANSAC 3 / 2 mm / 100."""
    k: int = 20
    mode_radius: float = 0.0285
    min_filtered_matches: int = 3
    ransac: RansacParams = RansacParams()
    seed: int = 0
    knn_mode: str = 'auto'

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.mode_radius > 0:
            raise ValueError(f"mode_radius must be positive, got {self.mode_radius}")
        if self.min_filtered_matches < self.ransac.min_samples:
            raise ValueError("min_filtered_matches must be >= ransac.min_samples")

    def frame_seed(self, frame_id):
        return int(self.seed) ^ int(frame_id)


@dataclass
class LocalizationResult:
    frame_id: int
    pose: Pose2D = None
    failure: FailureReason = None
    n_keypoints: int = 0
    n_matches: int = 0
    n_matches_filtered: int = 0
    n_inliers: int = 0
    elapsed_s: float = field(default=0.0, compare=False)

    @property
    def success(self):
        return self.pose is not None

    @property
    def status(self):
        return 'ok' if self.success else self.failure.value


def select_mode(all_matches, params=LocalizationParams()):
    """
    Keep the matches around the densest spot of candidate map positions.

    Every match counts the matches (of any query keypoint) whose map position
    lies within mode_radius of its own. The match with the highest count wins
    (ties: smaller cosine distance, then smaller entry id); the matches within
    mode_radius of the winner are returned, at most one per query keypoint
    (the one with the smallest distance, then entry id).

    Args:
        all_matches (list): Matches carrying map positions
        params (LocalizationParams): Mode radius

    Returns:
        list: Filtered matches ordered by query keypoint index
    """
    if not all_matches:
        return []

    positions = np.array([m.map_pos for m in all_matches], dtype=np.float64)
    distances = np.array([m.cosine_distance for m in all_matches])
    entry_ids = np.array([m.entry_id for m in all_matches])

    pairwise = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    near = pairwise <= params.mode_radius
    counts = near.sum(axis=1)
    winner = np.lexsort((entry_ids, distances, -counts))[0]

    best = {}
    for i in np.nonzero(near[winner])[0]:
        m = all_matches[i]
        current = best.get(m.query_keypoint_idx)
        if current is None or (m.cosine_distance, m.entry_id) < (current.cosine_distance, current.entry_id):
            best[m.query_keypoint_idx] = m
    return [best[q] for q in sorted(best)]


def estimate_position(frame, db, detector=None, descriptor=None, params=LocalizationParams(), cam=None):
    """
    Estimate the pose of a single frame with no prior.

    Args:
        frame (Frame): Input frame
        db (MapDatabase): Sealed map
        detector: Object with detect(frame)
        descriptor: Object with compute(mask, keypoints, keep_patches)
        params (LocalizationParams): Parameters
        cam (CameraModel): Camera

    Returns:
        LocalizationResult: Pose, or the reason no pose was produced
    """
    started = time.perf_counter()
    cam = cam or CameraModel()
    detector = detector or SegmentationDetector()
    descriptor = descriptor or HistogramDescriptor(cam)
    result = LocalizationResult(frame.frame_id)

    def done():
        result.elapsed_s = time.perf_counter() - started
        return result

    detection = detector.detect(frame)
    result.n_keypoints = len(detection.keypoints)
    if not detection.keypoints:
        result.failure = FailureReason.NO_KEYPOINTS
        return done()

    vectors, _ = descriptor.compute(detection.mask, detection.keypoints)
    matches = []
    for q, vector in enumerate(vectors):
        matches.extend(query_knn(db, vector, params.k, params.knn_mode, query_keypoint_idx=q))
    result.n_matches = len(matches)

    filtered = select_mode(matches, params)
    result.n_matches_filtered = len(filtered)
    if len(filtered) < params.min_filtered_matches:
        result.failure = FailureReason.TOO_FEW_MATCHES
        return done()

    pixels = np.array([detection.keypoints[m.query_keypoint_idx].center for m in filtered])
    src = cam.pixel_to_camera(pixels)
    dst = np.array([m.map_pos for m in filtered])
    ransac = RansacParams(params.ransac.min_samples, params.ransac.residual_threshold,
                          params.ransac.max_trials, params.frame_seed(frame.frame_id))
    try:
        fit = ransac_rigid(src, dst, ransac)
    except RansacError as e:
        result.failure = (FailureReason.TOO_FEW_MATCHES if e.reason == RansacError.TOO_FEW_MATCHES
                          else FailureReason.RANSAC_FAILED)
        return done()

    result.pose = fit.transform.to_pose()
    result.n_inliers = fit.n_inliers
    logger.debug("Frame %d: pose (%.4f, %.4f, %.3f), %d inliers", frame.frame_id,
                 result.pose.x, result.pose.y, result.pose.theta, result.n_inliers)
    return done()


class Localizer:
    """Binds a map, detector, descriptor and camera for repeated localization."""

    def __init__(self, db, detector=None, descriptor=None, params=None, cam=None):
        """Initialize the localizer."""
        self.db = db
        self.cam = cam or CameraModel()
        self.detector = detector or SegmentationDetector()
        self.descriptor = descriptor or HistogramDescriptor(self.cam)
        self.params = params or LocalizationParams()

    def localize(self, frame):
        return estimate_position(frame, self.db, self.detector, self.descriptor, self.params, self.cam)

    def localize_all(self, frames, workers=1):
        """
        Localize frames independently.

        Args:
            frames (iterable): Frames
            workers (int): Thread count

        Returns:
            list: Results ordered by frame id
        """
        results = list(map_frames(self.localize, frames, workers))
        results.sort(key=lambda r: r.frame_id)
        succeeded = sum(r.success for r in results)
        logger.info("Localized %d/%d frames", succeeded, len(results))
        return results


PREDICTION_COLUMNS = ['frame_id', 'status', 'x', 'y', 'theta', 'inliers', 'n_keypoints',
                      'n_matches_filtered']


def predictions_frame(results):
    rows = []
    for r in results:
        rows.append({
            'frame_id': r.frame_id,
            'status': r.status,
            'x': r.pose.x if r.success else math.nan,
            'y': r.pose.y if r.success else math.nan,
            'theta': r.pose.theta if r.success else math.nan,
            'inliers': r.n_inliers,
            'n_keypoints': r.n_keypoints,
            'n_matches_filtered': r.n_matches_filtered,
        })
    return pd.DataFrame(rows, columns=PREDICTION_COLUMNS)


def write_predictions(results, path):
    """
    Write the prediction CSV; pose fields are empty on failure.

    Args:
        results (list): LocalizationResults
        path (str): Destination file
    """
    try:
        predictions_frame(results).to_csv(path, index=False, float_format='%.6f', na_rep='',
                                          lineterminator='\n')
    except OSError as e:
        raise OSError(f"Cannot write predictions '{path}': {e}") from e


def read_predictions(path):
    """
    Read a prediction CSV back into results (timing is not stored).

    Args:
        path (str): Source file

    Returns:
        list: LocalizationResults
    """
    try:
        df = pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise OSError(f"Cannot read predictions '{path}': {e}") from e

    results = []
    for row in df.itertuples(index=False):
        ok = row.status == 'ok'
        results.append(LocalizationResult(
            frame_id=int(row.frame_id),
            pose=Pose2D(row.x, row.y, row.theta) if ok else None,
            failure=None if ok else FailureReason(row.status),
            n_keypoints=int(row.n_keypoints),
            n_matches_filtered=int(row.n_matches_filtered),
            n_inliers=int(row.inliers),
        ))
    return results
