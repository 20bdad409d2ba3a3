"""
Floor Simulator Service
Seeded RGBW-granulate floors, a calibrated downward camera, mapping and
evaluation pose logs, and on-disk datasets.
"""
import os
import math
import json
import struct
import logging
from enum import IntEnum
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, lru_cache, partial

import numpy as np
import pandas as pd
from numba import njit

from config import IMAGE_WIDTH, IMAGE_HEIGHT, FOOTPRINT_MM, PALETTE
from .geometry import Pose2D
from .netpbm import read_ppm, write_ppm

logger = logging.getLogger(__name__)


class ColorClass(IntEnum):
    BG = 0
    R = 1
    G = 2
    B = 3
    W = 4


COLORED_CLASSES = (ColorClass.R, ColorClass.G, ColorClass.B, ColorClass.W)


@dataclass(frozen=True)
class FloorSpec:
    """Floor size in meters, blob density per cm², blob radius range in mm."""
    width: float
    height: float
    blob_density: float = 0.6
    blob_radius_range: tuple = (0.8, 2.5)
    color_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    rng_seed: int = 42

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"Floor must have positive area, got {self.width} x {self.height} m")
        if not self.blob_density > 0:
            raise ValueError(f"Blob density must be positive, got {self.blob_density}")
        rmin, rmax = self.blob_radius_range
        if not (0 < rmin <= rmax):
            raise ValueError(f"Invalid blob radius range {self.blob_radius_range}")
        weights = np.asarray(self.color_weights, dtype=np.float64)
        if weights.shape != (4,) or (weights < 0).any() or weights.sum() <= 0:
            raise ValueError(f"Invalid color weights {self.color_weights}")

    @property
    def area_cm2(self):
        return self.width * self.height * 1e4


@dataclass(frozen=True, eq=False)
class FloorTruth:
    """
    Ground-truth blob field. Blob i has center `centers[i]` (meters), semi-axes
    `axes_mm[i]` (major, minor), orientation of the major axis in radians and
    a color class. Ids are the dense row indices.
    """
    spec: FloorSpec
    centers: np.ndarray
    axes_mm: np.ndarray
    orientations: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return len(self.centers)

    @property
    def ids(self):
        return np.arange(len(self.centers))

    @cached_property
    def max_semi_axis_m(self):
        return float(self.axes_mm.max()) / 1000.0 if len(self) else 0.0

    @classmethod
    def empty(cls, spec):
        return cls(spec, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.uint8))


@dataclass(frozen=True)
class CameraModel:
    """
    Rectified downward camera. Pixel (u, v) maps to camera-frame offset
    ((u - cx) * sx, -(v - cy) * sy); +u is camera +x, +v is camera -y.
    Pixel pitch differs per axis.
    """
    image_width: int = IMAGE_WIDTH
    image_height: int = IMAGE_HEIGHT
    footprint_mm: tuple = FOOTPRINT_MM

    @property
    def px_scale_x(self):
        """mm per pixel along u."""
        return self.footprint_mm[0] / self.image_width

    @property
    def px_scale_y(self):
        """mm per pixel along v."""
        return self.footprint_mm[1] / self.image_height

    @property
    def scale_m(self):
        return np.array([self.px_scale_x, self.px_scale_y]) / 1000.0

    @property
    def principal_point(self):
        return (self.image_width / 2.0, self.image_height / 2.0)

    @property
    def footprint_m(self):
        return (self.footprint_mm[0] / 1000.0, self.footprint_mm[1] / 1000.0)

    @property
    def short_side_m(self):
        return min(self.footprint_m)

    @property
    def half_diagonal_m(self):
        return 0.5 * math.hypot(*self.footprint_m)

    def coverage_fraction(self, area_m2):
        fw, fh = self.footprint_m
        return fw * fh / area_m2

    def pixel_to_camera(self, pixels):
        """(N, 2) pixel coordinates (u, v) to camera-frame meters."""
        uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        cx, cy = self.principal_point
        sx, sy = self.scale_m
        return np.column_stack(((uv[:, 0] - cx) * sx, -(uv[:, 1] - cy) * sy))

    def camera_to_pixel(self, points):
        """(N, 2) camera-frame meters to pixel coordinates (u, v)."""
        xy = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        cx, cy = self.principal_point
        sx, sy = self.scale_m
        return np.column_stack((xy[:, 0] / sx + cx, -xy[:, 1] / sy + cy))

    def pixel_to_world(self, pose, pixels):
        return pose.to_transform().apply(self.pixel_to_camera(pixels))

    def world_to_pixel(self, pose, points):
        return self.camera_to_pixel(pose.to_transform().inverse().apply(points))


@dataclass(eq=False)
class Frame:
    image: np.ndarray
    truth_pose: Pose2D
    frame_id: int

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


@dataclass(eq=False)
class PoseLog:
    """Synchronized per-frame poses. Arrays are parallel; frame ids are unique."""
    frame_ids: np.ndarray
    timestamps: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    capture_rate: float = 60.0

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        n = len(self.frame_ids)
        if not all(len(a) == n for a in (self.timestamps, self.x, self.y, self.theta)):
            raise ValueError("PoseLog arrays must have equal length")
        if not self.capture_rate > 0:
            raise ValueError(f"Capture rate must be positive, got {self.capture_rate}")
        if n > 1 and not (np.diff(self.timestamps) > 0).all():
            raise ValueError("PoseLog timestamps must be strictly increasing")
        if len(np.unique(self.frame_ids)) != n:
            raise ValueError("PoseLog frame ids must be unique")

    def __len__(self):
        return len(self.frame_ids)

    def __iter__(self):
        for i in range(len(self)):
            yield int(self.frame_ids[i]), float(self.timestamps[i]), self.pose(i)

    def pose(self, i):
        return Pose2D(self.x[i], self.y[i], self.theta[i])

    def pose_of(self, frame_id):
        return self.pose(self.index_of[int(frame_id)])

    @cached_property
    def index_of(self):
        return {int(fid): i for i, fid in enumerate(self.frame_ids)}

    @property
    def positions(self):
        return np.column_stack((self.x, self.y))

    def select(self, mask):
        mask = np.asarray(mask)
        return PoseLog(self.frame_ids[mask], self.timestamps[mask], self.x[mask],
                       self.y[mask], self.theta[mask], self.capture_rate)

    def to_dataframe(self):
        return pd.DataFrame({
            'frame_id': self.frame_ids,
            't': self.timestamps,
            'x': self.x,
            'y': self.y,
            'theta': self.theta,
        })

    @classmethod
    def from_dataframe(cls, df, capture_rate=60.0):
        return cls(df['frame_id'].to_numpy(), df['t'].to_numpy(), df['x'].to_numpy(),
                   df['y'].to_numpy(), df['theta'].to_numpy(), capture_rate)

    @classmethod
    def concat(cls, logs):
        """
        Join logs into one with dense frame ids and strictly increasing time.

        Args:
            logs (list): PoseLogs in order

        Returns:
            PoseLog: Combined log
        """
        parts = []
        offset = 0.0
        for log in logs:
            if not len(log):
                continue
            t = log.timestamps - log.timestamps[0] + offset
            parts.append((t, log.x, log.y, log.theta))
            offset = t[-1] + 1.0 / log.capture_rate
        if not parts:
            rate = logs[0].capture_rate if logs else 60.0
            return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), rate)
        t, x, y, theta = (np.concatenate(p) for p in zip(*parts))
        return cls(np.arange(len(t)), t, x, y, theta, logs[0].capture_rate)


def generate_floor(spec):
    """
    Generate a seeded blob field.

    Blob count is round(density x area in cm²); centers are uniform over the
    floor; the major semi-axis is drawn from the radius range and the minor
    one is 50-80 % of it; colors follow the weights.

    Args:
        spec (FloorSpec): Floor parameters

    Returns:
        FloorTruth: Generated floor
    """
    if spec.area_cm2 <= 0:
        raise ValueError("Cannot generate a zero-area floor")

    rng = np.random.default_rng(spec.rng_seed)
    n = int(round(spec.blob_density * spec.area_cm2))
    centers = rng.uniform((0.0, 0.0), (spec.width, spec.height), size=(n, 2))
    rmin, rmax = spec.blob_radius_range
    major = rng.uniform(rmin, rmax, size=n)
    minor = major * rng.uniform(0.5, 0.8, size=n)
    orientations = rng.uniform(0.0, math.pi, size=n)
    weights = np.asarray(spec.color_weights, dtype=np.float64)
    colors = (rng.choice(4, size=n, p=weights / weights.sum()) + 1).astype(np.uint8)

    logger.info("Generated floor %.2fx%.2f m with %d blobs", spec.width, spec.height, n)
    return FloorTruth(spec, centers, np.column_stack((major, minor)), orientations, colors)


def render_labels(floor, cam, pose):
    """
    Rasterize the blob classes visible from a pose (the renderer's oracle).

    Args:
        floor (FloorTruth): Floor
        cam (CameraModel): Camera
        pose (Pose2D): Camera pose

    Returns:
        np.ndarray: uint8 class map, shape (H, W); later blob ids paint over earlier ones
    """
    labels = np.zeros((cam.image_height, cam.image_width), dtype=np.uint8)
    if not len(floor):
        return labels

    reach = cam.half_diagonal_m + floor.max_semi_axis_m
    near = np.nonzero(np.hypot(*(floor.centers - pose.position).T) <= reach)[0]
    if not len(near):
        return labels

    local = pose.to_transform().inverse().apply(floor.centers[near])
    cx, cy = cam.principal_point
    sx, sy = cam.scale_m
    _paint_blobs(labels, local, floor.axes_mm[near] / 1000.0, floor.orientations[near] - pose.theta,
                 np.ascontiguousarray(floor.colors[near], dtype=np.uint8), cx, cy, sx, sy)
    return labels


@njit(cache=True, nogil=True)
def _paint_blobs(labels, local, axes, psi, colors, cx, cy, sx, sy):
    """Paint ellipses given in camera-frame meters, in order, over `labels`."""
    h, w = labels.shape
    for k in range(local.shape[0]):
        lx = local[k, 0]
        ly = local[k, 1]
        a = axes[k, 0]
        b = axes[k, 1]
        cu = lx / sx + cx
        cv = -ly / sy + cy
        u0 = max(0, int(math.floor(cu - a / sx)))
        u1 = min(w, int(math.ceil(cu + a / sx)) + 1)
        v0 = max(0, int(math.floor(cv - a / sy)))
        v1 = min(h, int(math.ceil(cv + a / sy)) + 1)
        c = math.cos(psi[k])
        s = math.sin(psi[k])
        for v in range(v0, v1):
            dy = -(v - cy) * sy - ly
            for u in range(u0, u1):
                dx = (u - cx) * sx - lx
                along = dx * c + dy * s
                across = -dx * s + dy * c
                if (along / a) ** 2 + (across / b) ** 2 <= 1.0:
                    labels[v, u] = colors[k]


NOISE_FIELD_STREAM = 0x4E4F4953


@lru_cache(maxsize=4)
def noise_field(seed, sigma, height, width):
    """
    Rounded Gaussian noise, int16, shape (2H, 2W, 3), read-only. Frames read
    (H, W) windows of it at per-frame offsets.
    """
    rng = np.random.default_rng([int(seed), NOISE_FIELD_STREAM])
    values = np.rint(rng.normal(0.0, sigma, size=(2 * height, 2 * width, 3))).astype(np.int16)
    values.setflags(write=False)
    return values


def noise_window(seed, frame_id, sigma, height, width):
    """The (H, W, 3) noise window of one frame."""
    rng = np.random.default_rng([int(seed), int(frame_id)])
    oy = int(rng.integers(0, height + 1))
    ox = int(rng.integers(0, width + 1))
    return noise_field(int(seed), float(sigma), height, width)[oy:oy + height, ox:ox + width]


@njit(cache=True, nogil=True)
def _compose(labels, palette, noise):
    h, w = labels.shape
    out = np.empty((h, w, 3), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            k = labels[y, x]
            for c in range(3):
                value = palette[k, c] + noise[y, x, c]
                if value < 0:
                    value = 0
                elif value > 255:
                    value = 255
                out[y, x, c] = value
    return out


def render_view(floor, cam, pose, noise_sigma=3.0, seed=0, frame_id=0, palette=PALETTE):
    """
    Render the camera image at a pose.

    Args:
        floor (FloorTruth): Floor
        cam (CameraModel): Camera
        pose (Pose2D): Camera pose
        noise_sigma (float): Std of additive Gaussian noise, 8-bit counts
        seed (int): Noise seed; combined with frame_id
        frame_id (int): Frame id stored on the result
        palette (sequence): Nominal RGB per class

    Returns:
        Frame: Rendered frame
    """
    labels = render_labels(floor, cam, pose)
    if noise_sigma > 0:
        noise = noise_window(seed, frame_id, noise_sigma, cam.image_height, cam.image_width)
        image = _compose(labels, np.asarray(palette, dtype=np.int64), noise)
    else:
        image = np.asarray(palette, dtype=np.uint8)[labels]
    return Frame(image, pose, int(frame_id))


def generate_mapping_run(floor, cam, tile, spacing=0.010, speed=0.2, rate=60.0, origin=(0.0, 0.0)):
    """
    Boustrophedon capture over a square tile.

    Lanes run along x at y = origin_y + i * spacing for i = 0..floor(tile / spacing);
    a last lane at the tile edge is added when the remaining strip is wider
    than half the footprint. Odd lanes run backwards with heading pi.

    Args:
        floor (FloorTruth): Floor (bounds check only)
        cam (CameraModel): Camera
        tile (float): Tile side in meters
        spacing (float): Lane spacing in meters
        speed (float): Robot speed in m/s
        rate (float): Capture rate in Hz
        origin (tuple): Lower-left corner of the tile

    Returns:
        PoseLog: Mapping run
    """
    if spacing >= cam.short_side_m:
        raise ValueError(
            f"Lane spacing {spacing} m leaves coverage gaps (footprint short side {cam.short_side_m} m)"
        )
    if not (tile > 0 and speed > 0 and rate > 0 and spacing > 0):
        raise ValueError("tile, spacing, speed and rate must be positive")
    ox, oy = origin
    if ox < 0 or oy < 0 or ox + tile > floor.spec.width + 1e-9 or oy + tile > floor.spec.height + 1e-9:
        raise ValueError(f"Tile at {origin} of side {tile} m exceeds the floor")

    lane_offsets = [i * spacing for i in range(int(math.floor(round(tile / spacing, 9))) + 1)]
    if tile - lane_offsets[-1] > cam.short_side_m / 2.0:
        lane_offsets.append(tile)

    step = speed / rate
    along = [k * step for k in range(int(math.floor(round(tile / step, 9))) + 1)]
    if tile - along[-1] > 1e-9:
        along.append(tile)
    along = np.asarray(along)

    xs, ys, thetas = [], [], []
    for lane, offset in enumerate(lane_offsets):
        forward = lane % 2 == 0
        lane_x = along if forward else along[::-1]
        xs.append(ox + lane_x)
        ys.append(np.full(len(along), oy + offset))
        thetas.append(np.full(len(along), 0.0 if forward else math.pi))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    theta = np.concatenate(thetas)

    travelled = np.concatenate(([0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))))
    timestamps = travelled / speed

    logger.info("Mapping run: %d lanes, %d frames", len(lane_offsets), len(x))
    return PoseLog(np.arange(len(x)), timestamps, x, y, theta, rate)


def perturb_log(log, sigma, seed):
    """
    Add Gaussian position noise (motion-capture imprecision) to a log.

    Args:
        log (PoseLog): Clean log
        sigma (float): Position noise std in meters
        seed (int or sequence): Noise seed

    Returns:
        PoseLog: Log with perturbed x, y
    """
    if sigma <= 0:
        return log
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=(len(log), 2))
    return PoseLog(log.frame_ids, log.timestamps, log.x + noise[:, 0], log.y + noise[:, 1],
                   log.theta, log.capture_rate)


def generate_eval_run(floor, cam, area, path_seed, n_frames=600, speed=0.3, rate=60.0,
                      pose_noise_sigma=0.0):
    """
    Smooth seeded random walk inside an area.

    Heading follows a damped random turn rate; on reaching the boundary the
    robot turns towards the area center. The walk keeps half a footprint
    diagonal away from the area edges when the area allows it.

    Args:
        floor (FloorTruth): Floor
        cam (CameraModel): Camera
        area (tuple): Bounds (x0, y0, x1, y1) in meters, inside the floor
        path_seed (int): Seed of the walk
        n_frames (int): Number of frames
        speed (float): Robot speed in m/s
        rate (float): Capture rate in Hz
        pose_noise_sigma (float): Gaussian position noise added to the log

    Returns:
        PoseLog: Evaluation run; noise uses its own stream so the path
            matches the noiseless log for the same seed
    """
    x0, y0, x1, y1 = area
    if not (0 <= x0 < x1 <= floor.spec.width + 1e-9 and 0 <= y0 < y1 <= floor.spec.height + 1e-9):
        raise ValueError(f"Area {area} is not inside the floor")

    margin = min(cam.half_diagonal_m, 0.25 * min(x1 - x0, y1 - y0))
    lo = np.array([x0 + margin, y0 + margin])
    hi = np.array([x1 - margin, y1 - margin])
    center = (lo + hi) / 2.0

    rng = np.random.default_rng(path_seed)
    step = speed / rate
    position = rng.uniform(lo, hi)
    heading = rng.uniform(-math.pi, math.pi)
    turn_rate = 0.0

    positions = np.empty((n_frames, 2))
    headings = np.empty(n_frames)
    for k in range(n_frames):
        positions[k] = position
        headings[k] = heading

        turn_rate = 0.9 * turn_rate + rng.normal(0.0, 0.02)
        heading += turn_rate
        nxt = position + step * np.array([math.cos(heading), math.sin(heading)])
        if (nxt < lo).any() or (nxt > hi).any():
            to_center = center - position
            heading = math.atan2(to_center[1], to_center[0]) + rng.uniform(-0.5, 0.5)
            turn_rate = 0.0
            nxt = position + step * np.array([math.cos(heading), math.sin(heading)])
        position = np.clip(nxt, lo, hi)
        heading = math.remainder(heading, 2.0 * math.pi)

    log = PoseLog(np.arange(n_frames), np.arange(n_frames) / rate, positions[:, 0],
                  positions[:, 1], headings, rate)
    return perturb_log(log, pose_noise_sigma, [int(path_seed), 1])


class RenderedRun:
    """Lazy frame source rendering a pose log on demand."""

    def __init__(self, floor, cam, log, noise_sigma=3.0, seed=0, palette=PALETTE):
        """Initialize the rendered run."""
        self.floor = floor
        self.cam = cam
        self.log = log
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.palette = palette

    def __len__(self):
        return len(self.log)

    def __getitem__(self, i):
        return render_view(self.floor, self.cam, self.log.pose(i), self.noise_sigma,
                           self.seed, int(self.log.frame_ids[i]), self.palette)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


FRAMES_DIR = 'frames'
POSES_FILE = 'poses.csv'
RUN_META_FILE = 'run.json'


def _frame_path(directory, frame_id):
    return os.path.join(directory, FRAMES_DIR, f"frame_{int(frame_id):06d}.ppm")


class DiskRun:
    """Lazy frame source over a persisted dataset directory."""

    def __init__(self, directory, log):
        """Initialize the disk run."""
        self.directory = directory
        self.log = log

    def __len__(self):
        return len(self.log)

    def __getitem__(self, i):
        frame_id = int(self.log.frame_ids[i])
        return Frame(read_ppm(_frame_path(self.directory, frame_id)), self.log.pose(i), frame_id)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _loaded(frame):
    return frame


def frame_loaders(frames, frame_ids=None):
    """
    Zero-argument callables producing the frames of a source in order.
    Rendered and disk runs defer rendering or reading to whoever calls the
    loader; other iterables yield frames that are already loaded.

    Args:
        frames (iterable): Frame source
        frame_ids (container): Keep only these frame ids (None keeps all)
    """
    if isinstance(frames, (RenderedRun, DiskRun)):
        for i, frame_id in enumerate(frames.log.frame_ids):
            if frame_ids is None or int(frame_id) in frame_ids:
                yield partial(frames.__getitem__, i)
        return
    for frame in frames:
        if frame_ids is None or frame.frame_id in frame_ids:
            yield partial(_loaded, frame)


def map_frames(fn, frames, workers=1, frame_ids=None):
    """
    Apply `fn` to every frame of a source, yielding results in source order.
    With several workers, frames are loaded inside the worker threads and at
    most 2 * workers frames are in flight.
    """
    loaders = frame_loaders(frames, frame_ids)
    if workers <= 1:
        for load in loaders:
            yield fn(load())
        return

    with ThreadPoolExecutor(max_workers=workers) as executor:
        pending = deque()
        for load in loaders:
            pending.append(executor.submit(lambda load=load: fn(load())))
            if len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def persist_run(frames, poselog, directory):
    """
    Write a run to disk: PPM frames plus a pose CSV.

    Args:
        frames (iterable): Frames whose ids match the log, in log order
        poselog (PoseLog): Poses
        directory (str): Output directory

    Returns:
        str: The directory
    """
    os.makedirs(os.path.join(directory, FRAMES_DIR), exist_ok=True)

    written = 0
    for frame in frames:
        if written >= len(poselog) or frame.frame_id != int(poselog.frame_ids[written]):
            raise ValueError(f"Frame {frame.frame_id} does not match pose log entry {written}")
        write_ppm(_frame_path(directory, frame.frame_id), frame.image)
        written += 1
    if written != len(poselog):
        raise ValueError(f"Wrote {written} frames for {len(poselog)} poses")

    poses_path = os.path.join(directory, POSES_FILE)
    try:
        poselog.to_dataframe().to_csv(poses_path, index=False, float_format='%.6f',
                                      lineterminator='\n', encoding='utf-8')
        with open(os.path.join(directory, RUN_META_FILE), 'w', encoding='utf-8') as f:
            json.dump({'capture_rate': poselog.capture_rate, 'n_frames': written}, f)
    except OSError as e:
        raise OSError(f"Cannot write run metadata in '{directory}': {e}") from e

    logger.info("Persisted %d frames to %s", written, directory)
    return directory


def load_poselog(directory):
    """Read the pose CSV (and capture rate) of a persisted run."""
    poses_path = os.path.join(directory, POSES_FILE)
    meta_path = os.path.join(directory, RUN_META_FILE)
    try:
        df = pd.read_csv(poses_path)
        rate = 60.0
        if os.path.exists(meta_path):
            with open(meta_path, encoding='utf-8') as f:
                rate = float(json.load(f)['capture_rate'])
    except (OSError, ValueError, KeyError) as e:
        raise OSError(f"Cannot read run in '{directory}': {e}") from e
    return PoseLog.from_dataframe(df, rate)


def load_run(directory):
    """
    Open a persisted run.

    Args:
        directory (str): Directory written by persist_run

    Returns:
        tuple: (DiskRun, PoseLog)
    """
    log = load_poselog(directory)
    return DiskRun(directory, log), log


FLOOR_MAGIC = b'KFLT'
FLOOR_VERSION = 1
_FLOOR_HEADER = struct.Struct('<4sIddQ')
_FLOOR_BLOB = np.dtype([
    ('id', '<u8'), ('cx', '<f8'), ('cy', '<f8'), ('a', '<f8'), ('b', '<f8'),
    ('phi', '<f8'), ('color', 'u1'),
])


class FloorFormatError(ValueError):
    """Raised when a KFLT floor file is malformed."""


def save_floor(floor, path):
    """
    Write a floor in the KFLT binary format.

    Args:
        floor (FloorTruth): Floor
        path (str): Destination file
    """
    records = np.zeros(len(floor), dtype=_FLOOR_BLOB)
    records['id'] = floor.ids
    records['cx'] = floor.centers[:, 0]
    records['cy'] = floor.centers[:, 1]
    records['a'] = floor.axes_mm[:, 0]
    records['b'] = floor.axes_mm[:, 1]
    records['phi'] = floor.orientations
    records['color'] = floor.colors
    header = _FLOOR_HEADER.pack(FLOOR_MAGIC, FLOOR_VERSION, floor.spec.width,
                                floor.spec.height, len(floor))
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(records.tobytes())
    except OSError as e:
        raise OSError(f"Cannot write floor '{path}': {e}") from e


def load_floor(path):
    """
    Read a KFLT floor file.

    Args:
        path (str): Source file

    Returns:
        FloorTruth: Floor; spec fields not stored in the file are informational
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise OSError(f"Cannot read floor '{path}': {e}") from e

    if len(data) < _FLOOR_HEADER.size:
        raise FloorFormatError(f"Truncated floor header in '{path}'")
    magic, version, width, height, count = _FLOOR_HEADER.unpack_from(data)
    if magic != FLOOR_MAGIC:
        raise FloorFormatError(f"Bad magic {magic!r} in '{path}'")
    if version != FLOOR_VERSION:
        raise FloorFormatError(f"Unsupported floor version {version} in '{path}'")
    expected = _FLOOR_HEADER.size + count * _FLOOR_BLOB.itemsize
    if len(data) < expected:
        raise FloorFormatError(f"Truncated floor '{path}': {len(data)} of {expected} bytes")

    records = np.frombuffer(data, dtype=_FLOOR_BLOB, count=count, offset=_FLOOR_HEADER.size)
    axes = np.column_stack((records['a'], records['b']))
    density = count / (width * height * 1e4) if count else FloorSpec.blob_density
    radius_range = (float(axes[:, 0].min()), float(axes[:, 0].max())) if count else (0.8, 2.5)
    spec = FloorSpec(width, height, density, radius_range)
    order = np.argsort(records['id'], kind='stable')
    return FloorTruth(
        spec,
        np.column_stack((records['cx'], records['cy']))[order],
        axes[order],
        records['phi'][order].copy(),
        records['color'][order].copy(),
    )
