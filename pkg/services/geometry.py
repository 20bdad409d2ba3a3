"""
Geometry Service
Planar rigid-body math: poses, rigid transforms, least-squares registration and RANSAC.
"""
import math
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


def wrap_angle(angle):
    """Wrap an angle in radians to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: position in meters, heading in radians (counterclockwise)."""
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'theta', wrap_angle(float(self.theta)))

    @property
    def position(self):
        return np.array([self.x, self.y])

    def to_transform(self):
        """Camera-frame to world-frame transform of a camera at this pose."""
        return RigidTransform2D(self.theta, (self.x, self.y))

    def transform_point(self, point):
        return transform_point(self.to_transform(), point)


@dataclass(frozen=True)
class RigidTransform2D:
    """Rotation (radians) followed by translation (meters); no scale, no reflection."""
    rotation: float = 0.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, 'rotation', wrap_angle(float(self.rotation)))
        tx, ty = self.translation
        object.__setattr__(self, 'translation', (float(tx), float(ty)))

    @property
    def matrix(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, points):
        """
        Transform an (N, 2) array of points.

        Args:
            points (array-like): Points in meters

        Returns:
            np.ndarray: Transformed points, shape (N, 2)
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.matrix.T + np.asarray(self.translation)

    def inverse(self):
        rot_inv = self.matrix.T
        t = -rot_inv @ np.asarray(self.translation)
        return RigidTransform2D(-self.rotation, (t[0], t[1]))

    def compose(self, other):
        """Return self ∘ other (apply other first)."""
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidTransform2D(self.rotation + other.rotation, (t[0], t[1]))

    def to_pose(self):
        return Pose2D(self.translation[0], self.translation[1], self.rotation)


def transform_point(t, p):
    """
    Apply a rigid transform to a single point.

    Args:
        t (RigidTransform2D): Transform
        p (tuple): Point (x, y) in meters

    Returns:
        tuple: R(theta)·p + translation
    """
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    x, y = float(p[0]), float(p[1])
    return (c * x - s * y + t.translation[0], s * x + c * y + t.translation[1])


def pose_delta(a, b):
    """
    Position and heading difference between two poses.

    Args:
        a (Pose2D): First pose
        b (Pose2D): Second pose

    Returns:
        tuple: (distance in meters, absolute wrapped angle in [0, pi])
    """
    distance = math.hypot(a.x - b.x, a.y - b.y)
    angle = abs(wrap_angle(a.theta - b.theta))
    return distance, angle


class EstimationError(ValueError):
    """Raised when a rigid transform cannot be estimated from the input."""


class RansacError(EstimationError):
    """RANSAC produced no usable hypothesis; `reason` says why."""

    TOO_FEW_MATCHES = 'too_few_matches'
    NO_CONSENSUS = 'no_consensus'

    def __init__(self, reason, message):
        super().__init__(message)
        self.reason = reason


def estimate_rigid_2d(src, dst):
    """
    Least-squares rigid alignment of two planar point sets (planar Kabsch).

    Args:
        src (array-like): Source points, shape (N, 2)
        dst (array-like): Destination points, shape (N, 2)

    Returns:
        RigidTransform2D: Transform minimizing sum ||t(src_i) - dst_i||^2
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise EstimationError(f"Point count mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 2:
        raise EstimationError(f"Need at least 2 correspondences, got {len(src)}")

    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    a = src - src_mean
    b = dst - dst_mean

    scale = max(1.0, float(np.abs(src).max()))
    if float(np.abs(a).max()) <= 1e-12 * scale:
        raise EstimationError("Source points are all coincident")

    # rotation from the aggregated dot and cross terms; always a proper rotation
    dot = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    cross = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    theta = math.atan2(cross, dot)

    c, s = math.cos(theta), math.sin(theta)
    tx = dst_mean[0] - (c * src_mean[0] - s * src_mean[1])
    ty = dst_mean[1] - (s * src_mean[0] + c * src_mean[1])
    return RigidTransform2D(theta, (tx, ty))


@dataclass(frozen=True)
class RansacParams:
    """Defaults: minimum sample of three, 2 mm residual, 100 trials."""
    min_samples: int = 3
    residual_threshold: float = 0.002
    max_trials: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.min_samples < 3:
            raise ValueError(f"min_samples must be >= 3, got {self.min_samples}")
        if not self.residual_threshold > 0:
            raise ValueError(f"residual_threshold must be > 0, got {self.residual_threshold}")
        if self.max_trials < 1:
            raise ValueError(f"max_trials must be >= 1, got {self.max_trials}")


@dataclass
class RansacResult:
    transform: RigidTransform2D
    inlier_mask: np.ndarray
    residuals: np.ndarray = field(repr=False)
    trials: int = 0

    @property
    def n_inliers(self):
        return int(self.inlier_mask.sum())


def _residuals(transform, src, dst):
    return np.linalg.norm(transform.apply(src) - dst, axis=1)


def ransac_rigid(src, dst, params):
    """
    Robust rigid alignment with RANSAC.

    Hypotheses are fitted on uniformly sampled minimal subsets; the one with
    the most inliers wins (ties go to the lower mean inlier residual) and is
    refitted on all its inliers.

    Args:
        src (array-like): Source points, shape (N, 2)
        dst (array-like): Destination points, shape (N, 2)
        params (RansacParams): Sample size, threshold, trials and seed

    Returns:
        RansacResult: Best transform with its inlier mask

    Raises:
        RansacError: Too few correspondences, or no hypothesis reached
            min_samples inliers
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise EstimationError(f"Point count mismatch: {len(src)} vs {len(dst)}")
    n = len(src)
    if n < params.min_samples:
        raise RansacError(
            RansacError.TOO_FEW_MATCHES,
            f"{n} correspondences, need at least {params.min_samples}"
        )

    rng = np.random.default_rng(params.rng_seed)
    threshold = params.residual_threshold

    best_transform = None
    best_mask = None
    best_count = 0
    best_mean = math.inf

    for _ in range(params.max_trials):
        sample = rng.choice(n, size=params.min_samples, replace=False)
        try:
            candidate = estimate_rigid_2d(src[sample], dst[sample])
        except EstimationError:
            continue
        residuals = _residuals(candidate, src, dst)
        mask = residuals < threshold
        count = int(mask.sum())
        if count == 0:
            continue
        mean = float(residuals[mask].mean())
        if count > best_count or (count == best_count and mean < best_mean):
            best_transform, best_mask = candidate, mask
            best_count, best_mean = count, mean

    if best_count < params.min_samples:
        raise RansacError(
            RansacError.NO_CONSENSUS,
            f"Best hypothesis has {best_count} inliers, need {params.min_samples}"
        )

    # refit on all inliers; keep the refit only if it does not lose support
    refit = estimate_rigid_2d(src[best_mask], dst[best_mask])
    refit_residuals = _residuals(refit, src, dst)
    refit_mask = refit_residuals < threshold
    if int(refit_mask.sum()) >= best_count:
        transform, mask, residuals = refit, refit_mask, refit_residuals
    else:
        transform, mask = best_transform, best_mask
        residuals = _residuals(best_transform, src, dst)

    logger.debug("RANSAC kept %d/%d inliers", int(mask.sum()), n)
    return RansacResult(transform, mask, residuals, params.max_trials)
