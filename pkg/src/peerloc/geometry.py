"""Coordinate-frame math: horizontal -> camera -> pixel, and grid labels.

Frame conventions used throughout the package:

* horizontal frame: fixed to the observing robot, x forward, y left,
  z up.  Peer positions arrive in this frame (from the range EKF or
  from the scene sampler).
* camera frame: same axis convention, rotated by the observer's roll
  and pitch.  x is the optical axis, so x doubles as metric depth.
* pixel frame: top-left origin, x right, y down, 320x224 image.

The projection applies a fixed axis permutation (forward/left/up ->
right/down/forward) followed by the pinhole intrinsics, so the whole
camera-to-pixel map is one 3x3 matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

IMAGE_WIDTH = 320
IMAGE_HEIGHT = 224

# Permutation taking (x fwd, y left, z up) camera axes to the
# (x right, y down, z fwd) axes the intrinsic matrix expects.
CAMERA_AXIS_PERMUTATION = np.array(
    [
        [0.0, -1.0, 0.0],
        [0.0, 0.0, -1.0],
        [1.0, 0.0, 0.0],
    ]
)


class GridCellCollisionError(ValueError):
    """Two labels fell into the same grid cell; the frame is unusable."""


@dataclass(frozen=True)
class HorizontalCoord:
    """Peer position in the observer's horizontal frame, meters."""

    xh: float
    yh: float
    zh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.xh, self.yh, self.zh], dtype=float)


@dataclass(frozen=True)
class CameraCoord:
    """Peer position in the camera frame; xc is depth along the optical axis."""

    xc: float
    yc: float
    zc: float

    def as_array(self) -> np.ndarray:
        return np.array([self.xc, self.yc, self.zc], dtype=float)


@dataclass(frozen=True)
class PixelPoint:
    """Image coordinates, top-left origin, in pixels."""

    xp: float
    yp: float

    def in_image(self) -> bool:
        return 0.0 <= self.xp < IMAGE_WIDTH and 0.0 <= self.yp < IMAGE_HEIGHT


@dataclass(frozen=True)
class Attitude:
    """Observer roll and pitch, radians.  Yaw never enters the transform."""

    roll: float = 0.0
    pitch: float = 0.0


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters of the onboard camera (pixels).

    Defaults are the calibrated constants of the target camera.
    """

    fx: float = 183.73
    fy: float = 184.12
    cx: float = 166.90
    cy: float = 77.51

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def projection_matrix(self) -> np.ndarray:
        """Composite map camera frame -> homogeneous pixels (intrinsics
        after the axis permutation)."""
        return self.matrix() @ CAMERA_AXIS_PERMUTATION


DEFAULT_INTRINSICS = CameraIntrinsics()


@dataclass(frozen=True)
class RelativeLabel:
    """Training target for one peer robot: pixel center plus depth."""

    xp: float
    yp: float
    depth: float

    def pixel(self) -> PixelPoint:
        return PixelPoint(self.xp, self.yp)


@dataclass(frozen=True)
class GridShape:
    """Output lattice: one cell per stride x stride pixel block."""

    rows: int = 28
    cols: int = 40
    stride: int = 8

    def __post_init__(self) -> None:
        if self.rows * self.stride != IMAGE_HEIGHT or self.cols * self.stride != IMAGE_WIDTH:
            raise ValueError(
                f"grid {self.rows}x{self.cols} with stride {self.stride} "
                f"does not tile a {IMAGE_WIDTH}x{IMAGE_HEIGHT} image"
            )

    def cell_of(self, xp: float, yp: float) -> tuple[int, int]:
        """Map an in-image pixel to (row, col).

        Plain floor; the right/bottom edge cannot occur because in-image
        pixels are strictly below width/height.
        """
        return int(yp // self.stride), int(xp // self.stride)


DEFAULT_GRID = GridShape()


@dataclass
class GridMap:
    """Confidence + depth lattice, either a label or a prediction.

    Label-form maps have confidence in {0, 1} and depth 0 wherever the
    confidence is 0.  `class_prob`, when present, is (rows, cols, K).
    """

    confidence: np.ndarray
    depth: np.ndarray
    class_prob: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence.shape  # type: ignore[return-value]

    @classmethod
    def zeros(cls, shape: GridShape = DEFAULT_GRID, num_classes: int = 0) -> "GridMap":
        probs = None
        if num_classes > 0:
            probs = np.zeros((shape.rows, shape.cols, num_classes))
        return cls(
            confidence=np.zeros((shape.rows, shape.cols)),
            depth=np.zeros((shape.rows, shape.cols)),
            class_prob=probs,
        )


def rotation_from_attitude(att: Attitude) -> np.ndarray:
    """3x3 rotation taking horizontal-frame vectors into the camera frame.

    Roll-then-pitch ("xy sequence") composition; yaw is deliberately
    absent because the horizontal frame already shares the observer's
    heading.
    """
    cr, sr = math.cos(att.roll), math.sin(att.roll)
    cp, sp = math.cos(att.pitch), math.sin(att.pitch)
    return np.array(
        [
            [cp, 0.0, sp],
            [sr * sp, cr, -cp * sr],
            [-cr * sp, sr, cp * cr],
        ]
    )


def horizontal_to_camera(p: HorizontalCoord, att: Attitude) -> CameraCoord:
    """Rotate a horizontal-frame position into the camera frame."""
    vec = rotation_from_attitude(att) @ p.as_array()
    return CameraCoord(float(vec[0]), float(vec[1]), float(vec[2]))


def camera_to_pixel(
    p: CameraCoord, k: CameraIntrinsics = DEFAULT_INTRINSICS
) -> Optional[tuple[PixelPoint, float]]:
    """Project a camera-frame point; None when it falls outside the view.

    Returns the pixel position and the depth (camera-frame x).  A point
    is out of view when it sits at or behind the focal plane or its
    pixel leaves [0, 320) x [0, 224).
    """
    homog = k.projection_matrix() @ p.as_array()
    depth = float(homog[2])
    if depth <= 0.0:
        return None
    pixel = PixelPoint(float(homog[0] / depth), float(homog[1] / depth))
    if not pixel.in_image():
        return None
    return pixel, depth


def label_from_horizontal(
    p: HorizontalCoord,
    att: Attitude,
    k: CameraIntrinsics = DEFAULT_INTRINSICS,
) -> Optional[RelativeLabel]:
    """Full label derivation: horizontal position -> (pixel, depth)."""
    projected = camera_to_pixel(horizontal_to_camera(p, att), k)
    if projected is None:
        return None
    pixel, depth = projected
    return RelativeLabel(pixel.xp, pixel.yp, depth)


def grid_labels(
    labels: Sequence[RelativeLabel],
    shape: GridShape = DEFAULT_GRID,
    num_classes: int = 0,
    classes: Optional[Sequence[int]] = None,
) -> GridMap:
    """Build a label-form GridMap: each label's cell gets confidence 1
    and the label's depth.

    Raises GridCellCollisionError when two labels share a cell; there is
    no merge rule, callers drop such frames.
    """
    grid = GridMap.zeros(shape, num_classes)
    for idx, label in enumerate(labels):
        if not label.pixel().in_image():
            raise ValueError(f"label {label} is outside the image")
        if label.depth <= 0:
            raise ValueError(f"label {label} has non-positive depth")
        row, col = shape.cell_of(label.xp, label.yp)
        if grid.confidence[row, col] != 0.0:
            raise GridCellCollisionError(f"two labels fall into cell ({row}, {col})")
        grid.confidence[row, col] = 1.0
        grid.depth[row, col] = label.depth
        if num_classes > 0:
            cls = 0 if classes is None else classes[idx]
            grid.class_prob[row, col, cls] = 1.0  # type: ignore[index]
    return grid
