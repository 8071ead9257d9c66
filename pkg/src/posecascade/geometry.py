"""Poses, boxes, and the box normalization algebra everything else builds on.

Coordinates are pixels, x to the right and y down. Pixel (row i, col j) of an
image array sits at continuous position (x=j, y=i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBoxError,
    InvalidArgumentError,
    MissingTorsoError,
    ShapeError,
)

CROP_FILL = 0.5  # mid-gray for crop regions outside the source image


def _as_point(p) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.shape != (2,):
        raise ShapeError(f"expected a planar point, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"non-finite point {a}")
    return a


@dataclass
class PoseVector:
    """Locations of all k joints plus a per-joint labeled/present mask."""

    joints: np.ndarray  # (k, 2) float64
    mask: np.ndarray  # (k,) bool

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.joints.ndim != 2 or self.joints.shape[1] != 2:
            raise ShapeError(f"joints must be (k, 2), got {self.joints.shape}")
        if self.mask.shape != (self.joints.shape[0],):
            raise ShapeError(
                f"mask length {self.mask.shape} does not match {self.joints.shape[0]} joints"
            )
        if self.k < 2:
            raise InvalidArgumentError("a pose needs at least 2 joints")
        if not np.all(np.isfinite(self.joints)):
            raise InvalidArgumentError("joint coordinates must be finite")

    @property
    def k(self) -> int:
        return self.joints.shape[0]

    def flat(self) -> np.ndarray:
        """Joints as a single (2k,) vector (x1, y1, ..., xk, yk)."""
        return self.joints.reshape(-1).copy()


@dataclass
class BoundingBox:
    """Axis-aligned box given by center, width, and height."""

    center: np.ndarray  # (2,) float64
    width: float
    height: float

    def __post_init__(self):
        self.center = _as_point(self.center)
        self.width = float(self.width)
        self.height = float(self.height)
        if not (np.isfinite(self.width) and np.isfinite(self.height)):
            raise InvalidArgumentError("box size must be finite")
        if self.width <= 0 or self.height <= 0:
            raise DegenerateBoxError(
                f"box size must be positive, got {self.width} x {self.height}"
            )

    def shifted(self, t) -> "BoundingBox":
        """Same box translated by t."""
        return BoundingBox(self.center + _as_point(t), self.width, self.height)


def full_image_box(width: int, height: int) -> BoundingBox:
    """The default box covering a width x height image."""
    return BoundingBox(np.array([width / 2.0, height / 2.0]), float(width), float(height))


@dataclass
class PoseTree:
    """Kinematic structure: limbs, opposing torso pairs, and mirror swaps.

    Limbs must form a forest; swap pairs must not share joints.
    """

    k: int
    limbs: list[tuple[int, int]]
    torso_pairs: list[tuple[int, int]]
    left_right_swap: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.limbs = [(int(a), int(b)) for a, b in self.limbs]
        self.torso_pairs = [(int(a), int(b)) for a, b in self.torso_pairs]
        self.left_right_swap = [(int(a), int(b)) for a, b in self.left_right_swap]
        for a, b in self.limbs + self.torso_pairs + self.left_right_swap:
            if not (0 <= a < self.k and 0 <= b < self.k):
                raise InvalidArgumentError(f"joint index ({a}, {b}) out of range for k={self.k}")
        # forest check via union-find
        parent = list(range(self.k))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.limbs:
            ra, rb = find(a), find(b)
            if ra == rb:
                raise InvalidArgumentError(f"limb ({a}, {b}) closes a cycle")
            parent[ra] = rb
        seen = set()
        for a, b in self.left_right_swap:
            if a == b or a in seen or b in seen:
                raise InvalidArgumentError(f"swap pair ({a}, {b}) overlaps another pair")
            seen.update((a, b))


def normalize_point(y_i, b: BoundingBox) -> np.ndarray:
    """Map a pixel point into b's unit frame: diag(1/w, 1/h) @ (y_i - center)."""
    p = _as_point(y_i)
    return (p - b.center) / np.array([b.width, b.height])


def denormalize_point(v, b: BoundingBox) -> np.ndarray:
    """Inverse of normalize_point: diag(w, h) @ v + center."""
    p = _as_point(v)
    return p * np.array([b.width, b.height]) + b.center


def normalize_pose(pose: PoseVector, b: BoundingBox) -> PoseVector:
    """Apply normalize_point to every present joint; absent joints are zeroed."""
    out = np.zeros_like(pose.joints)
    scale = np.array([b.width, b.height])
    out[pose.mask] = (pose.joints[pose.mask] - b.center) / scale
    return PoseVector(out, pose.mask.copy())


def denormalize_pose(pose: PoseVector, b: BoundingBox) -> PoseVector:
    """Apply denormalize_point to every present joint; absent joints are zeroed."""
    out = np.zeros_like(pose.joints)
    scale = np.array([b.width, b.height])
    out[pose.mask] = pose.joints[pose.mask] * scale + b.center
    return PoseVector(out, pose.mask.copy())


def pose_diameter(pose: PoseVector, tree: PoseTree) -> float:
    """Mean distance over the fully labeled opposing shoulder/hip pairs.

    Raises MissingTorsoError when no torso pair has both joints present.
    A return of 0.0 (coincident pairs) is the caller's degenerate case.
    """
    dists = []
    for a, b in tree.torso_pairs:
        if pose.mask[a] and pose.mask[b]:
            dists.append(float(np.linalg.norm(pose.joints[a] - pose.joints[b])))
    if not dists:
        raise MissingTorsoError("no torso pair fully labeled")
    return float(np.mean(dists))


def joint_box(pose: PoseVector, i: int, sigma: float, tree: PoseTree) -> BoundingBox:
    """Square box centered on joint i with side sigma * pose_diameter."""
    if not (0 <= i < pose.k):
        raise InvalidArgumentError(f"joint index {i} out of range")
    if not pose.mask[i]:
        raise InvalidArgumentError(f"joint {i} is not present")
    if sigma <= 0:
        raise DegenerateBoxError(f"sigma must be positive, got {sigma}")
    side = sigma * pose_diameter(pose, tree)
    if side <= 0:
        raise DegenerateBoxError("pose diameter is zero, joint box would be degenerate")
    return BoundingBox(pose.joints[i].copy(), side, side)


def crop_resample(img: np.ndarray, b: BoundingBox, out_size: tuple[int, int]) -> np.ndarray:
    """Crop img by box b and bilinearly resample to out_size (width, height).

    Sample positions are the centers of the output pixel grid mapped into the
    box span [center - size/2, center + size/2]. Taps outside the source image
    contribute CROP_FILL, so a box with empty image overlap yields a uniform
    fill image rather than an error.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"image must be (H, W) or (H, W, C), got {img.shape}")
    out_w, out_h = int(out_size[0]), int(out_size[1])
    if out_w <= 0 or out_h <= 0:
        raise InvalidArgumentError(f"out_size must be positive, got {out_size}")
    h, w = img.shape[:2]

    # output pixel centers in source pixel coordinates
    sx = (b.center[0] - b.width / 2.0) + (np.arange(out_w) + 0.5) * (b.width / out_w) - 0.5
    sy = (b.center[1] - b.height / 2.0) + (np.arange(out_h) + 0.5) * (b.height / out_h) - 0.5

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def gather(yi, xi):
        # value of pixel (yi, xi) with out-of-range taps replaced by the fill
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        vals = img[yc[:, None], xc[None, :], :]
        ok = ((yi >= 0) & (yi < h))[:, None, None] & ((xi >= 0) & (xi < w))[None, :, None]
        return np.where(ok, vals, CROP_FILL)

    wx0 = (1.0 - fx)[None, :, None]
    wx1 = fx[None, :, None]
    wy0 = (1.0 - fy)[:, None, None]
    wy1 = fy[:, None, None]
    out = (
        gather(y0, x0) * wy0 * wx0
        + gather(y0, x0 + 1) * wy0 * wx1
        + gather(y0 + 1, x0) * wy1 * wx0
        + gather(y0 + 1, x0 + 1) * wy1 * wx1
    )
    return out
