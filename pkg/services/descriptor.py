"""
Descriptor Service
Rotation-normalized label patches around keypoints and the 30-dim reference
histogram descriptor; export of clustered patches as training data.
"""
import os
import math
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numba import njit

from .floorsim import CameraModel, ColorClass, COLORED_CLASSES
from .netpbm import write_pgm

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 30
PATCH_RADIUS = 64
PATCH_SIZE = 2 * PATCH_RADIUS + 1
N_SECTORS = 6

_rows, _cols = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE]
# patch-frame offsets in cells, y pointing up
PATCH_DX = (_cols - PATCH_RADIUS).astype(np.float64)
PATCH_DY = (PATCH_RADIUS - _rows).astype(np.float64)
DISC = PATCH_DX ** 2 + PATCH_DY ** 2 <= PATCH_RADIUS ** 2
DISC_AREA = int(DISC.sum())
SECTORS = (np.floor(np.mod(np.arctan2(PATCH_DY, PATCH_DX), 2 * math.pi)
                    / (2 * math.pi / N_SECTORS)).astype(np.int64) % N_SECTORS)
for _array in (PATCH_DX, PATCH_DY, DISC, SECTORS):
    _array.setflags(write=False)

DEFAULT_CAMERA = CameraModel()


@dataclass(frozen=True)
class EllipseFit:
    angle: float
    eccentricity: float
    degenerate: bool = False


@dataclass(frozen=True)
class OrientationFrame:
    angle: float
    flip_resolved: bool


@dataclass(eq=False)
class Patch:
    """
    129x129 class labels around a keypoint on an isotropic grid of
    `pitch_mm` cells, zero outside the radius-64 disc. `blob` marks cells of
    the keypoint's own blob.
    """
    labels: np.ndarray
    blob: np.ndarray = field(repr=False)
    color: ColorClass
    orientation: OrientationFrame
    pitch_mm: float


def _moments(xs, ys):
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    return float(np.mean(dx * dx)), float(np.mean(dy * dy)), float(np.mean(dx * dy))


def _eccentricity(mu20, mu02, mu11):
    spread = math.hypot((mu20 - mu02) / 2.0, mu11)
    major = (mu20 + mu02) / 2.0 + spread
    minor = (mu20 + mu02) / 2.0 - spread
    if major <= 0:
        return 0.0
    return math.sqrt(max(0.0, 1.0 - max(minor, 0.0) / major))


def fit_ellipse_orientation(blob, cam=DEFAULT_CAMERA):
    """
    Major-axis orientation of a blob from its second central moments.

    Moments are taken in metric units (x right, y up) so the anisotropic
    pixel pitch does not skew the angle.

    Args:
        blob (Blob): Blob with pixel coordinates
        cam (CameraModel): Camera for the pixel pitch

    Returns:
        EllipseFit: Angle in (-pi/2, pi/2]; degenerate=True (angle 0) for
            circular blobs
    """
    if blob.pixel_count < 3:
        raise ValueError(f"Blob {blob.id} has {blob.pixel_count} pixels, need at least 3")
    xs = blob.pixels[:, 0].astype(np.float64) * cam.px_scale_x
    ys = -blob.pixels[:, 1].astype(np.float64) * cam.px_scale_y
    mu20, mu02, mu11 = _moments(xs, ys)
    if mu20 + mu02 <= 0:
        raise ValueError(f"Blob {blob.id} is degenerate")

    tol = 1e-9 * (mu20 + mu02)
    if abs(mu11) <= tol:
        mu11 = 0.0
    if mu11 == 0.0 and abs(mu20 - mu02) <= tol:
        return EllipseFit(0.0, 0.0, True)

    angle = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    return EllipseFit(angle, _eccentricity(mu20, mu02, mu11))


def normalize_patch(mask, kp, angle, cam=DEFAULT_CAMERA):
    """
    Extract the disc around a keypoint rotated by -angle, then by pi more if
    the lower half holds strictly more colored cells than the upper half.

    Args:
        mask (SegMask): Class mask
        kp (Keypoint): Keypoint (center and blob)
        angle (float): Major-axis angle from fit_ellipse_orientation
        cam (CameraModel): Camera for the pixel pitch

    Returns:
        Patch: Normalized patch
    """
    pitch = min(cam.px_scale_x, cam.px_scale_y)
    u0 = v0 = 0
    local = np.zeros((0, 0), dtype=np.bool_)
    if kp.blob is not None and len(kp.blob.pixels):
        px = kp.blob.pixels
        u0, v0 = (int(m) for m in px.min(axis=0))
        u1, v1 = (int(m) for m in px.max(axis=0))
        local = np.zeros((v1 - v0 + 1, u1 - u0 + 1), dtype=np.bool_)
        local[px[:, 1] - v0, px[:, 0] - u0] = True

    cu, cv = kp.center
    labels, blob_cells, upper, lower = _sample_patch(
        np.ascontiguousarray(mask.labels, dtype=np.uint8), DISC, PATCH_DX, PATCH_DY,
        math.cos(angle), math.sin(angle), pitch, cam.px_scale_x, cam.px_scale_y,
        float(cu), float(cv), local, u0, v0)

    flip = lower > upper
    if flip:
        labels = labels[::-1, ::-1].copy()
        blob_cells = blob_cells[::-1, ::-1].copy()
        angle = angle + math.pi
    angle = math.remainder(angle, 2.0 * math.pi)

    return Patch(labels, blob_cells, ColorClass(int(kp.color)), OrientationFrame(angle, flip), pitch)


def describe(patch):
    """
    30-dim reference descriptor of a normalized patch: one-hot blob color (4),
    blob area fraction of the disc (1), blob eccentricity (1), and per color
    the disc fraction falling in each of 6 angular sectors counted
    counterclockwise from +x (24); L2-normalized.

    Args:
        patch (Patch): Normalized patch

    Returns:
        np.ndarray: Unit vector, shape (30,)
    """
    counts, n_blob, mu20, mu02, mu11 = _sector_histogram(
        np.ascontiguousarray(patch.labels, dtype=np.uint8), np.ascontiguousarray(patch.blob, dtype=np.bool_),
        DISC, SECTORS, PATCH_DX, PATCH_DY, len(COLORED_CLASSES), N_SECTORS)
    if counts.sum() == 0:
        raise ValueError("Cannot describe a patch without colored pixels")

    vector = np.zeros(DESCRIPTOR_DIM)
    vector[int(patch.color) - 1] = 1.0
    vector[4] = n_blob / DISC_AREA
    if n_blob >= 3:
        vector[5] = _eccentricity(mu20, mu02, mu11)
    vector[6:] = counts.ravel() / DISC_AREA
    return vector / np.linalg.norm(vector)


@njit(cache=True, nogil=True)
def _sample_patch(image, disc, dx, dy, c, s, pitch, sx, sy, cu, cv, blob_local, u0, v0):
    """
    Nearest-pixel sampling of the rotated disc. Returns patch labels, blob
    cells and the colored cell counts of the upper and lower half.
    """
    h, w = image.shape
    bh, bw = blob_local.shape
    n_rows, n_cols = disc.shape
    labels = np.zeros((n_rows, n_cols), dtype=np.uint8)
    blob = np.zeros((n_rows, n_cols), dtype=np.bool_)
    upper = 0
    lower = 0
    for r in range(n_rows):
        for q in range(n_cols):
            if not disc[r, q]:
                continue
            src_x = (c * dx[r, q] - s * dy[r, q]) * pitch
            src_y = (s * dx[r, q] + c * dy[r, q]) * pitch
            u = int(math.floor(cu + src_x / sx + 0.5))
            v = int(math.floor(cv - src_y / sy + 0.5))
            if u < 0 or u >= w or v < 0 or v >= h:
                continue
            label = image[v, u]
            labels[r, q] = label
            if 0 <= u - u0 < bw and 0 <= v - v0 < bh:
                blob[r, q] = blob_local[v - v0, u - u0]
            if label != 0:
                if dy[r, q] > 0:
                    upper += 1
                elif dy[r, q] < 0:
                    lower += 1
    return labels, blob, upper, lower


@njit(cache=True, nogil=True)
def _sector_histogram(labels, blob, disc, sectors, dx, dy, n_colors, n_sectors):
    """Per-color sector counts over the disc, blob cell count and the blob's central moments."""
    counts = np.zeros((n_colors, n_sectors), dtype=np.int64)
    n_blob = 0
    sum_x = 0.0
    sum_y = 0.0
    n_rows, n_cols = disc.shape
    for r in range(n_rows):
        for q in range(n_cols):
            if not disc[r, q]:
                continue
            label = labels[r, q]
            if 0 < label <= n_colors:
                counts[label - 1, sectors[r, q]] += 1
            if blob[r, q]:
                n_blob += 1
                sum_x += dx[r, q]
                sum_y += dy[r, q]

    mu20 = 0.0
    mu02 = 0.0
    mu11 = 0.0
    if n_blob > 0:
        mx = sum_x / n_blob
        my = sum_y / n_blob
        for r in range(n_rows):
            for q in range(n_cols):
                if disc[r, q] and blob[r, q]:
                    ex = dx[r, q] - mx
                    ey = dy[r, q] - my
                    mu20 += ex * ex
                    mu02 += ey * ey
                    mu11 += ex * ey
        mu20 /= n_blob
        mu02 /= n_blob
        mu11 /= n_blob
    return counts, n_blob, mu20, mu02, mu11


def check_descriptor(vector, tol=1e-6):
    vector = np.asarray(vector)
    if vector.shape != (DESCRIPTOR_DIM,):
        raise ValueError(f"Descriptor must have shape ({DESCRIPTOR_DIM},), got {vector.shape}")
    norm = float(np.linalg.norm(vector))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"Descriptor norm {norm} is not 1")
    return vector


class HistogramDescriptor:
    """Reference descriptor: ellipse alignment, flip rule, sector histogram."""

    dim = DESCRIPTOR_DIM

    def __init__(self, cam=None):
        """Initialize the descriptor."""
        self.cam = cam or DEFAULT_CAMERA

    def compute(self, mask, keypoints, keep_patches=False):
        """
        Describe keypoints of one frame.

        Args:
            mask (SegMask): Class mask of the frame
            keypoints (list): Keypoints from the detector
            keep_patches (bool): Return the normalized patches too

        Returns:
            tuple: (descriptors array (N, 30), patches list or None)
        """
        descriptors = np.zeros((len(keypoints), DESCRIPTOR_DIM))
        patches = [] if keep_patches else None
        for i, kp in enumerate(keypoints):
            fit = fit_ellipse_orientation(kp.blob, self.cam)
            patch = normalize_patch(mask, kp, fit.angle, self.cam)
            descriptors[i] = describe(patch)
            if keep_patches:
                patches.append(patch)
        return descriptors, patches


MANIFEST_FILE = 'manifest.csv'


def export_training_clusters(clusters, directory, per_cluster=4, seed=0):
    """
    Export member patches of clusters as descriptor training data.

    Clusters with fewer than `per_cluster` members are skipped; the others
    contribute `per_cluster` members sampled uniformly without replacement.

    Args:
        clusters (list): Clusters whose members carry patches
        directory (str): Output directory
        per_cluster (int): Patches per cluster
        seed (int): Sampling seed

    Returns:
        pd.DataFrame: Manifest (cluster_id, member_idx, file, world_x, world_y)
    """
    rng = np.random.default_rng(seed)
    rows = []
    os.makedirs(directory, exist_ok=True)

    for position, cluster in enumerate(clusters):
        members = cluster.members
        if len(members) < per_cluster:
            continue
        cluster_id = getattr(cluster, 'cluster_id', position)
        chosen = np.sort(rng.choice(len(members), size=per_cluster, replace=False))
        cluster_dir = f"cluster_{cluster_id:06d}"
        os.makedirs(os.path.join(directory, cluster_dir), exist_ok=True)
        for member_idx in chosen:
            member = members[member_idx]
            if member.patch is None:
                raise ValueError(f"Cluster {cluster_id} member {member_idx} has no patch")
            rel = os.path.join(cluster_dir, f"member_{int(member_idx):03d}.pgm")
            write_pgm(os.path.join(directory, rel), member.patch.labels)
            rows.append({
                'cluster_id': int(cluster_id),
                'member_idx': int(member_idx),
                'file': rel,
                'world_x': float(member.world_pos[0]),
                'world_y': float(member.world_pos[1]),
            })

    manifest = pd.DataFrame(rows, columns=['cluster_id', 'member_idx', 'file', 'world_x', 'world_y'])
    path = os.path.join(directory, MANIFEST_FILE)
    try:
        manifest.to_csv(path, index=False, lineterminator='\n')
    except OSError as e:
        raise OSError(f"Cannot write manifest '{path}': {e}") from e
    logger.info("Exported %d patches from %d clusters", len(manifest), len(manifest) // max(per_cluster, 1))
    return manifest
