"""
Detector Service
Segments a frame into RGBW classes, labels connected color blobs and keeps the
blob centers that qualify as keypoints.
"""
import os
import math
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol

import numpy as np
from numba import njit

from config import PALETTE
from .floorsim import ColorClass
from .netpbm import read_pgm, write_pgm

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class SegMask:
    """Per-pixel class labels (ColorClass values), shape (H, W)."""
    labels: np.ndarray

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


@dataclass(eq=False)
class Blob:
    """4-connected same-class region; centroid is (u, v) in pixels."""
    id: int
    color: ColorClass
    pixel_count: int
    centroid: tuple
    pixels: np.ndarray = field(repr=False)


@dataclass(eq=False)
class Keypoint:
    center: tuple
    blob_id: int
    color: ColorClass
    blob: Blob = field(repr=False, default=None)


@dataclass(frozen=True)
class DetectorParams:
    border_margin: int = 64
    min_blob_area: int = 150
    support_radius: int = 64
    min_support_pixels: int = 500

    def __post_init__(self):
        for name in ('border_margin', 'min_blob_area', 'support_radius', 'min_support_pixels'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@njit(cache=True, nogil=True)
def _nearest_palette(image, refs, max_d2):
    """Class of the nearest reference per pixel; ties keep the lower class."""
    h, w = image.shape[0], image.shape[1]
    n = refs.shape[0]
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            r = np.int64(image[y, x, 0])
            g = np.int64(image[y, x, 1])
            b = np.int64(image[y, x, 2])
            best = 0
            best_d = (r - refs[0, 0]) ** 2 + (g - refs[0, 1]) ** 2 + (b - refs[0, 2]) ** 2
            for k in range(1, n):
                d = (r - refs[k, 0]) ** 2 + (g - refs[k, 1]) ** 2 + (b - refs[k, 2]) ** 2
                if d < best_d:
                    best = k
                    best_d = d
            if best != 0 and best_d > max_d2:
                best = 0
            out[y, x] = best
    return out


def segment(frame, palette=PALETTE, max_distance=90.0):
    """
    Reference segmenter: nearest palette color by Euclidean RGB distance.

    Args:
        frame (Frame): Source frame
        palette (sequence): 5 reference RGB colors, indexed by class
        max_distance (float): Pixels farther than this from every colored
            reference become background

    Returns:
        SegMask: Class mask
    """
    image = np.ascontiguousarray(frame.image, dtype=np.uint8)
    refs = np.asarray(palette, dtype=np.int64)
    return SegMask(_nearest_palette(image, refs, float(max_distance) ** 2))


def colorize(mask, palette=PALETTE):
    """Paint a mask with its nominal palette colors, uint8 (H, W, 3)."""
    return np.asarray(palette, dtype=np.uint8)[mask.labels]


class Segmenter(Protocol):
    def segment(self, frame) -> SegMask:
        ...


class PaletteSegmenter:
    """Deterministic nearest-palette segmenter."""

    def __init__(self, palette=PALETTE, max_distance=90.0):
        """Initialize the palette segmenter."""
        self.palette = palette
        self.max_distance = max_distance

    def segment(self, frame):
        return segment(frame, self.palette, self.max_distance)


class MaskFileSegmenter:
    """Loads externally produced label maps (`frame_<id>.pgm`, values 0-4)."""

    def __init__(self, directory):
        """Initialize the mask-file segmenter."""
        self.directory = directory

    def path_for(self, frame_id):
        return os.path.join(self.directory, f"frame_{int(frame_id):06d}.pgm")

    def segment(self, frame):
        labels = read_pgm(self.path_for(frame.frame_id))
        if labels.shape != frame.image.shape[:2]:
            raise ValueError(
                f"Mask {self.path_for(frame.frame_id)} has shape {labels.shape}, "
                f"frame has {frame.image.shape[:2]}"
            )
        if labels.max(initial=0) > ColorClass.W:
            raise ValueError(f"Mask {self.path_for(frame.frame_id)} has labels above {int(ColorClass.W)}")
        return SegMask(labels)

    def save(self, frame_id, mask):
        os.makedirs(self.directory, exist_ok=True)
        write_pgm(self.path_for(frame_id), mask.labels)


@njit(cache=True, nogil=True)
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit(cache=True, nogil=True)
def _label_two_pass(classes):
    """
    Two-pass 4-connected labeling with union-find. Returns the component map
    (0 for background, 1..n in raster order of first pixel) and n.
    """
    h, w = classes.shape
    out = np.zeros((h, w), dtype=np.int32)
    parent = np.zeros(h * w + 1, dtype=np.int32)
    next_label = 1

    for y in range(h):
        for x in range(w):
            c = classes[y, x]
            if c == 0:
                continue
            up = 0
            left = 0
            if y > 0 and classes[y - 1, x] == c:
                up = out[y - 1, x]
            if x > 0 and classes[y, x - 1] == c:
                left = out[y, x - 1]

            if up == 0 and left == 0:
                parent[next_label] = next_label
                out[y, x] = next_label
                next_label += 1
            elif up != 0 and left != 0:
                ru = _find(parent, up)
                rl = _find(parent, left)
                root = min(ru, rl)
                parent[ru] = root
                parent[rl] = root
                out[y, x] = root
            elif up != 0:
                out[y, x] = up
            else:
                out[y, x] = left

    # roots are the smallest label of their set, so one ascending sweep compacts
    remap = np.zeros(next_label, dtype=np.int32)
    n = 0
    for label in range(1, next_label):
        root = _find(parent, label)
        if root == label:
            n += 1
            remap[label] = n
        else:
            remap[label] = remap[root]

    for y in range(h):
        for x in range(w):
            out[y, x] = remap[out[y, x]]
    return out, n


def label_components(mask):
    """
    Component map of a mask.

    Args:
        mask (SegMask): Class mask

    Returns:
        tuple: (int32 component map, component count)
    """
    return _label_two_pass(np.ascontiguousarray(mask.labels, dtype=np.uint8))


def connected_components(mask):
    """
    Extract 4-connected same-class blobs.

    Args:
        mask (SegMask): Class mask

    Returns:
        list: Blobs with ids 0..n-1 in raster order of their first pixel
    """
    components, n = label_components(mask)
    if n == 0:
        return []

    pixels, starts = _component_pixels(components, n)
    blobs = []
    for label in range(1, n + 1):
        own = pixels[starts[label]:starts[label + 1]]
        u0, v0 = own[0]
        blobs.append(Blob(
            id=label - 1,
            color=ColorClass(int(mask.labels[v0, u0])),
            pixel_count=len(own),
            centroid=(float(own[:, 0].mean()), float(own[:, 1].mean())),
            pixels=own,
        ))
    return blobs


@njit(cache=True, nogil=True)
def _component_pixels(components, n):
    """
    Counting sort of pixel coordinates by component. Returns (u, v) rows in
    raster order within each component and the row offsets per label.
    """
    h, w = components.shape
    counts = np.zeros(n + 1, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            counts[components[y, x]] += 1

    starts = np.zeros(n + 2, dtype=np.int64)
    for label in range(1, n + 1):
        starts[label + 1] = starts[label] + counts[label]

    cursor = starts.copy()
    pixels = np.empty((starts[n + 1], 2), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            label = components[y, x]
            if label == 0:
                continue
            i = cursor[label]
            pixels[i, 0] = x
            pixels[i, 1] = y
            cursor[label] = i + 1
    return pixels, starts


@lru_cache(maxsize=8)
def disc_offsets(radius):
    """Integer (du, dv) offsets with du² + dv² <= radius², boundary included."""
    r = int(math.ceil(radius))
    dv, du = np.mgrid[-r:r + 1, -r:r + 1]
    inside = du ** 2 + dv ** 2 <= radius ** 2
    offsets = np.column_stack((du[inside], dv[inside]))
    offsets.setflags(write=False)
    return offsets


def support_center(centroid):
    """Pixel that anchors the support disc: the centroid rounded half up."""
    return (int(math.floor(centroid[0] + 0.5)), int(math.floor(centroid[1] + 0.5)))


def support_count(mask, centroid, radius):
    """
    Colored pixels (any class) within `radius` of the rounded centroid.

    Args:
        mask (SegMask): Class mask
        centroid (tuple): (u, v)
        radius (int): Disc radius in pixels

    Returns:
        int: Count
    """
    cu, cv = support_center(centroid)
    return int(_count_colored(mask.labels, disc_offsets(radius), cu, cv))


@njit(cache=True, nogil=True)
def _count_colored(labels, offsets, cu, cv):
    h, w = labels.shape
    total = 0
    for k in range(offsets.shape[0]):
        u = cu + offsets[k, 0]
        v = cv + offsets[k, 1]
        if 0 <= u < w and 0 <= v < h and labels[v, u] != 0:
            total += 1
    return total


def border_distance(mask, centroid):
    cu, cv = centroid
    return min(cu, cv, mask.width - 1 - cu, mask.height - 1 - cv)


def detect_keypoints(mask, blobs, params=DetectorParams()):
    """
    Keep blob centers that are far enough from the border, belong to a blob
    of more than `min_blob_area` pixels and have at least
    `min_support_pixels` colored pixels around them.

    Args:
        mask (SegMask): Class mask
        blobs (list): Blobs of the mask
        params (DetectorParams): Criteria

    Returns:
        list: Keypoints, in blob order
    """
    keypoints = []
    for blob in blobs:
        if blob.pixel_count <= params.min_blob_area:
            continue
        if border_distance(mask, blob.centroid) < params.border_margin:
            continue
        if support_count(mask, blob.centroid, params.support_radius) < params.min_support_pixels:
            continue
        keypoints.append(Keypoint(blob.centroid, blob.id, blob.color, blob))
    return keypoints


@dataclass(eq=False)
class Detection:
    mask: SegMask
    blobs: list
    keypoints: list


class SegmentationDetector:
    """Segmenter + connected components + keypoint criteria."""

    def __init__(self, segmenter=None, params=None):
        """Initialize the detector."""
        self.segmenter = segmenter or PaletteSegmenter()
        self.params = params or DetectorParams()

    def detect(self, frame):
        """
        Detect keypoints in a frame.

        Args:
            frame (Frame): Input frame

        Returns:
            Detection: Mask, blobs and keypoints
        """
        mask = self.segmenter.segment(frame)
        if mask.labels.shape != frame.image.shape[:2]:
            raise ValueError("Segmentation mask does not match frame dimensions")
        blobs = connected_components(mask)
        keypoints = detect_keypoints(mask, blobs, self.params)
        logger.debug("Frame %d: %d blobs, %d keypoints", frame.frame_id, len(blobs), len(keypoints))
        return Detection(mask, blobs, keypoints)
