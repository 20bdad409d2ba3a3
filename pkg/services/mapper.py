"""
Mapper Service
Builds the keypoint map from mapping runs: pose outlier removal, keypoint
projection, clustering of re-observed keypoints and merging into entries.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .descriptor import HistogramDescriptor
from .detector import SegmentationDetector
from .floorsim import CameraModel, map_frames
from .mapdb import MapEntry, build_index

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutlierFilterParams:
    """Centred window of `window_size` samples; sigma floored per axis."""
    window_size: int = 15
    alpha: float = 0.8
    sigma_floor: float = 0.001

    def __post_init__(self):
        if self.window_size < 3:
            raise ValueError(f"window_size must be >= 3, got {self.window_size}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class ClusterParams:
    position_radius: float = 0.005
    cosine_threshold: float = 0.1
    min_members: int = 4

    def __post_init__(self):
        if not (self.position_radius > 0 and self.cosine_threshold > 0 and self.min_members > 0):
            raise ValueError("Cluster parameters must be positive")


@dataclass(eq=False)
class ObservedKeypoint:
    """
    A keypoint placed in the world. `image` identifies the source image
    across runs as (run index, frame id).
    """
    world_pos: np.ndarray
    descriptor: np.ndarray = field(repr=False)
    frame_id: int
    pixel: tuple
    run_id: int = 0
    patch: object = field(default=None, repr=False)

    @property
    def image(self):
        return (self.run_id, self.frame_id)


@dataclass(eq=False)
class Cluster:
    cluster_id: int
    members: list
    representative_pos: np.ndarray
    representative_descriptor: np.ndarray = field(repr=False)

    @property
    def seed(self):
        return self.members[0]


@dataclass(frozen=True)
class MappingParams:
    outlier: OutlierFilterParams = OutlierFilterParams()
    cluster: ClusterParams = ClusterParams()
    keep_patches: bool = False
    workers: int = 1


class MapEmptyError(RuntimeError):
    """No cluster survived; `diagnostics` holds per-stage counts."""

    def __init__(self, diagnostics):
        super().__init__(f"Map empty: {diagnostics}")
        self.diagnostics = diagnostics


def outlier_mask(log, params=OutlierFilterParams()):
    """
    Flag positions that deviate from their window mean by more than
    alpha * sigma on either axis.

    The window of `window_size` samples is centred on the tested sample and
    shrinks symmetrically near the ends of the log, so a straight
    constant-velocity track keeps every sample.

    Args:
        log (PoseLog): Positions along the track
        params (OutlierFilterParams): Window, alpha, sigma floor

    Returns:
        np.ndarray: Boolean keep-mask
    """
    n = len(log)
    keep = np.ones(n, dtype=bool)
    w = params.window_size
    if n < w:
        return keep

    positions = log.positions
    half = w // 2
    for i in range(n):
        reach = min(half, i, n - 1 - i)
        window = positions[i - reach:i + reach + 1]
        mu = window.mean(axis=0)
        sigma = np.maximum(window.std(axis=0), params.sigma_floor)
        if (np.abs(mu - positions[i]) > params.alpha * sigma).any():
            keep[i] = False
    return keep


def filter_pose_outliers(log, params=OutlierFilterParams()):
    """
    Remove ground-truth pose outliers from a log.

    Args:
        log (PoseLog): Log to filter
        params (OutlierFilterParams): Filter parameters

    Returns:
        PoseLog: Log without outliers; logs shorter than the window are
            returned unfiltered with a warning
    """
    if len(log) < params.window_size:
        logger.warning("Pose log of %d samples is shorter than the window (%d); not filtered",
                       len(log), params.window_size)
        return log
    keep = outlier_mask(log, params)
    removed = int((~keep).sum())
    if removed:
        logger.info("Removed %d pose outliers of %d", removed, len(log))
    return log.select(keep)


def project_keypoint(pose, cam, pixel):
    """
    World position of a pixel seen from a pose.

    Args:
        pose (Pose2D): Camera pose
        cam (CameraModel): Camera
        pixel (tuple): (u, v)

    Returns:
        np.ndarray: (x, y) in meters
    """
    return cam.pixel_to_world(pose, [pixel])[0]


def cluster_keypoints(obs, params=ClusterParams()):
    """
    Seed-based clustering without transitive expansion.

    Observations are visited by (run, frame, v, u). Each unlabeled seed
    gathers unlabeled observations within position_radius from other images,
    keeps those whose cosine distance to the seed is below the threshold (one
    per image, the closest in descriptor), and becomes a cluster if the group
    including the seed reaches min_members.

    Args:
        obs (list): ObservedKeypoints
        params (ClusterParams): Radius, cosine threshold, minimum size

    Returns:
        list: Disjoint clusters, seed first in each member list
    """
    if not obs:
        return []

    order = sorted(range(len(obs)), key=lambda i: (obs[i].run_id, obs[i].frame_id,
                                                  obs[i].pixel[1], obs[i].pixel[0]))
    positions = np.array([o.world_pos for o in obs], dtype=np.float64)
    descriptors = np.array([o.descriptor for o in obs], dtype=np.float64)
    tree = cKDTree(positions)
    labeled = np.zeros(len(obs), dtype=bool)
    clusters = []

    for i in order:
        if labeled[i]:
            continue
        seed = obs[i]
        nearby = tree.query_ball_point(positions[i], params.position_radius)
        candidates = [j for j in nearby
                      if j != i and not labeled[j] and obs[j].image != seed.image]
        if len(candidates) + 1 < params.min_members:
            continue

        candidates = np.asarray(candidates)
        cosine = 1.0 - descriptors[candidates] @ descriptors[i]
        spatial = np.linalg.norm(positions[candidates] - positions[i], axis=1)
        coherent = cosine < params.cosine_threshold
        ranked = np.lexsort((candidates[coherent], spatial[coherent], cosine[coherent]))

        members = [i]
        seen_images = {seed.image}
        for j in candidates[coherent][ranked]:
            if obs[j].image in seen_images:
                continue
            seen_images.add(obs[j].image)
            members.append(int(j))

        if len(members) >= params.min_members:
            labeled[members] = True
            clusters.append(Cluster(len(clusters), [obs[j] for j in members],
                                    positions[i].copy(), descriptors[i].copy()))

    logger.info("Clustered %d observations into %d clusters", len(obs), len(clusters))
    return clusters


def merge_clusters(clusters):
    """
    One map entry per cluster: member centroid and renormalized mean descriptor.

    Args:
        clusters (list): Clusters

    Returns:
        list: MapEntries with ids in cluster order
    """
    entries = []
    for entry_id, cluster in enumerate(clusters):
        positions = np.array([m.world_pos for m in cluster.members], dtype=np.float64)
        descriptors = np.array([m.descriptor for m in cluster.members], dtype=np.float64)
        mean = descriptors.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm <= 1e-12:
            raise ValueError(f"Cluster {cluster.cluster_id} has a zero mean descriptor")
        entries.append(MapEntry(entry_id, tuple(positions.mean(axis=0)), mean / norm,
                                len(cluster.members)))
    return entries


def observe_frame(frame, pose, detector, descriptor, cam, run_id=0, keep_patches=False):
    """
    Detect, describe and project the keypoints of one mapping frame.

    Returns:
        list: ObservedKeypoints of the frame
    """
    detection = detector.detect(frame)
    if not detection.keypoints:
        return []
    vectors, patches = descriptor.compute(detection.mask, detection.keypoints, keep_patches)
    pixels = np.array([kp.center for kp in detection.keypoints])
    world = cam.pixel_to_world(pose, pixels)
    return [
        ObservedKeypoint(world[k], vectors[k], frame.frame_id, tuple(pixels[k]), run_id,
                         patches[k] if keep_patches else None)
        for k in range(len(detection.keypoints))
    ]


def collect_observations(runs, detector=None, descriptor=None, params=MappingParams(), cam=None):
    """
    Run the per-frame stages of map creation over all runs.

    Args:
        runs (list): (frames, poselog) pairs; frames is any iterable of Frame
        detector: Object with detect(frame)
        descriptor: Object with compute(mask, keypoints, keep_patches)
        params (MappingParams): Parameters
        cam (CameraModel): Camera

    Returns:
        tuple: (ObservedKeypoint list, per-stage diagnostics dict)
    """
    cam = cam or CameraModel()
    detector = detector or SegmentationDetector()
    descriptor = descriptor or HistogramDescriptor(cam)
    diagnostics = {'runs': len(runs), 'frames': 0, 'frames_after_filter': 0, 'observations': 0}
    observations = []

    for run_id, (frames, log) in enumerate(runs):
        diagnostics['frames'] += len(log)
        filtered = filter_pose_outliers(log, params.outlier)
        accepted = filtered.index_of
        diagnostics['frames_after_filter'] += len(filtered)

        def work(frame, run_id=run_id, filtered=filtered, accepted=accepted):
            pose = filtered.pose(accepted[frame.frame_id])
            return observe_frame(frame, pose, detector, descriptor, cam, run_id, params.keep_patches)

        for found in map_frames(work, frames, params.workers, accepted):
            observations.extend(found)
        logger.info("Run %d: %d/%d frames used, %d observations so far",
                    run_id, len(filtered), len(log), len(observations))

    diagnostics['observations'] = len(observations)
    return observations, diagnostics


def build_map(runs, detector=None, descriptor=None, params=MappingParams(), cam=None,
              metadata=None, return_clusters=False):
    """
    Full map creation: filter, detect, describe, project, cluster, merge, index.

    Args:
        runs (list): (frames, poselog) pairs
        detector: Object with detect(frame)
        descriptor: Object with compute(mask, keypoints, keep_patches)
        params (MappingParams): Parameters
        cam (CameraModel): Camera
        metadata (dict, optional): Extra metadata stored on the database
        return_clusters (bool): Also return the clusters (for export)

    Returns:
        MapDatabase, or (MapDatabase, clusters) when return_clusters is set
    """
    if not runs:
        raise ValueError("build_map needs at least one run")

    observations, diagnostics = collect_observations(runs, detector, descriptor, params, cam)
    clusters = cluster_keypoints(observations, params.cluster)
    diagnostics['clusters'] = len(clusters)
    if not clusters:
        raise MapEmptyError(diagnostics)

    entries = merge_clusters(clusters)
    meta = {
        'outlier_window': params.outlier.window_size,
        'outlier_alpha': params.outlier.alpha,
        'cluster_radius': params.cluster.position_radius,
        'cluster_cosine': params.cluster.cosine_threshold,
        'cluster_min_members': params.cluster.min_members,
        **diagnostics,
    }
    meta.update(metadata or {})
    db = build_index(entries, metadata=meta)
    logger.info("Map built: %d entries from %d observations", len(entries), len(observations))
    if return_clusters:
        return db, clusters
    return db
