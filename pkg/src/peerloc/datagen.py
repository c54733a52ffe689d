"""Procedural synthetic-scene compositor and dataset writer.

Scenes are 2D billboards: a drone sprite is warped (depth-scaled,
in-plane rotated, subpixel translated) onto a background image at its
projected pixel position.  Scale is continuous, so apparent size stays
a faithful depth cue, and placement is subpixel so pixel labels are not
snapped to the integer grid.

Dataset layout (also the ingestion format for real-world data):
    images/%06d.png   320x224 RGB, 8-bit
    labels.jsonl      one JSON object per line:
                      {"image": "images/000000.png", "roll": ..,
                       "pitch": .., "robots": [{"xh":..,"yh":..,"zh":..}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from . import geometry
from .geometry import (
    DEFAULT_GRID,
    DEFAULT_INTRINSICS,
    Attitude,
    CameraIntrinsics,
    GridShape,
    HorizontalCoord,
    RelativeLabel,
)

IMAGE_SIZE = (geometry.IMAGE_WIDTH, geometry.IMAGE_HEIGHT)  # (W, H)

_BACKGROUND_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class SamplingExhaustedError(RuntimeError):
    """Rejection sampling failed to place a robot; ranges are infeasible."""


class DatasetFormatError(ValueError):
    """A labels file line could not be parsed."""


@dataclass
class DroneSprite:
    """RGBA billboard of a drone seen from a canonical direction.

    `rgba` is (S, S, 4) float32 in [0, 1]; alpha defines the silhouette.
    `physical_width` is the real-world extent the raster width maps to.
    """

    rgba: np.ndarray
    physical_width: float = 0.125

    def __post_init__(self) -> None:
        if self.physical_width <= 0:
            raise ValueError("physical_width must be positive")

    @property
    def size(self) -> int:
        return self.rgba.shape[0]


_SPRITE_CACHE: dict[int, np.ndarray] = {}


def default_drone_sprite(size: int = 96) -> DroneSprite:
    """Draw a quadrotor-style sprite: a circular prop-guard ring (so the
    silhouette footprint does not change with in-plane rotation and
    apparent size stays a clean depth cue), crossed arms, four opaque
    rotor disks, and a red-accented body.

    Drawn 4x supersampled and box-downsampled, giving anti-aliased edges
    whose coverage profile matches the geometric outline.
    """
    if size in _SPRITE_CACHE:
        return DroneSprite(rgba=_SPRITE_CACHE[size])
    s = size * 4
    img = Image.new("RGBA", (s, s), (0, 0, 0, 0))
    draw = ImageDraw.Draw(img)
    ring_w = max(2, int(s * 0.09))
    draw.ellipse(
        [0, 0, s - 1, s - 1], outline=(22, 22, 26, 255), width=ring_w
    )
    arm_w = max(2, int(s * 0.08))
    arm_r = s * 0.30 / math.sqrt(2.0)  # radial distance 0.30*s along diagonals
    centers = [
        (s / 2 + dx * arm_r, s / 2 + dy * arm_r)
        for dx, dy in ((-1, -1), (1, -1), (-1, 1), (1, 1))
    ]
    for cx, cy in centers:
        draw.line([(s / 2, s / 2), (cx, cy)], fill=(30, 30, 35, 255), width=arm_w)
    rotor = s * 0.155
    for cx, cy in centers:
        box = [cx - rotor, cy - rotor, cx + rotor, cy + rotor]
        draw.ellipse(box, fill=(85, 85, 92, 255))
        draw.ellipse(box, outline=(20, 20, 24, 255), width=max(2, int(s * 0.03)))
    body = s * 0.15
    draw.ellipse(
        [s / 2 - body, s / 2 - body, s / 2 + body, s / 2 + body],
        fill=(200, 55, 35, 255),
    )
    core = s * 0.07
    draw.ellipse(
        [s / 2 - core, s / 2 - core, s / 2 + core, s / 2 + core],
        fill=(25, 25, 28, 255),
    )
    rgba = np.asarray(img, dtype=np.float32) / 255.0
    premult = np.concatenate(
        [rgba[..., :3] * rgba[..., 3:4], rgba[..., 3:4]], axis=-1
    )
    premult = _halve_premultiplied(_halve_premultiplied(premult))
    alpha = premult[..., 3:4]
    rgb = premult[..., :3] / np.maximum(alpha, 1e-6)
    rgba = np.concatenate([np.clip(rgb, 0.0, 1.0), alpha], axis=-1).astype(np.float32)
    rgba.setflags(write=False)
    _SPRITE_CACHE[size] = rgba
    return DroneSprite(rgba=rgba)


@dataclass
class RobotPlacement:
    position: HorizontalCoord
    rotation: float = 0.0  # in-plane sprite rotation, radians
    brightness: float = 1.0  # multiplicative jitter on sprite RGB


@dataclass
class SceneSpec:
    """Everything needed to render one frame deterministically."""

    background_id: int
    robots: list[RobotPlacement]
    attitude: Attitude
    seed: int = 0


@dataclass
class DatasetRecord:
    """One labels.jsonl line: image path, observer attitude, peer positions."""

    image: str
    roll: float
    pitch: float
    robots: list[HorizontalCoord]

    def to_json(self) -> dict:
        return {
            "image": self.image,
            "roll": self.roll,
            "pitch": self.pitch,
            "robots": [{"xh": r.xh, "yh": r.yh, "zh": r.zh} for r in self.robots],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        return cls(
            image=d["image"],
            roll=float(d["roll"]),
            pitch=float(d["pitch"]),
            robots=[
                HorizontalCoord(float(r["xh"]), float(r["yh"]), float(r["zh"]))
                for r in d["robots"]
            ],
        )


@dataclass
class DatagenConfig:
    backgrounds_dir: Optional[str] = None
    count: int = 100
    seed: Optional[int] = None
    max_robots: int = 3
    depth_range: tuple[float, float] = (0.5, 3.5)
    # lateral/vertical offsets are sampled as fractions of the forward
    # distance (roughly tangents of the bearing angles)
    lateral_frac: tuple[float, float] = (-0.85, 0.85)
    vertical_frac: tuple[float, float] = (-0.55, 0.40)
    attitude_range: float = 0.35  # |roll|, |pitch| bound, radians
    brightness_jitter: float = 0.25
    sprite_size: int = 96
    sprite_width_m: float = 0.125

    def __post_init__(self) -> None:
        lo, hi = self.depth_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"invalid depth range {self.depth_range}")
        for name in ("lateral_frac", "vertical_frac"):
            a, b = getattr(self, name)
            if a > b:
                raise ValueError(f"invalid {name} range ({a}, {b})")
        if self.max_robots < 1:
            raise ValueError("max_robots must be >= 1")
        if not (0.0 <= self.brightness_jitter < 1.0):
            raise ValueError("brightness_jitter must be in [0, 1)")
        if not (0.0 <= self.attitude_range < math.pi / 2):
            raise ValueError("attitude_range must be in [0, pi/2)")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass(frozen=True)
class SpritePlacement:
    """Where and how large a sprite lands in the image."""

    center_x: float
    center_y: float
    width_px: float  # drawn width of the physical billboard
    extent_x: float  # rotated footprint
    extent_y: float

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) of the rotated footprint."""
        return (
            self.center_x - self.extent_x / 2,
            self.center_y - self.extent_y / 2,
            self.center_x + self.extent_x / 2,
            self.center_y + self.extent_y / 2,
        )


def sprite_placement(
    label: RelativeLabel,
    rotation: float,
    physical_width: float = 0.125,
    k: CameraIntrinsics = DEFAULT_INTRINSICS,
) -> SpritePlacement:
    """Image-plane placement of a billboard at the given label."""
    width_px = k.fx * physical_width / label.depth
    c, s = abs(math.cos(rotation)), abs(math.sin(rotation))
    extent = width_px * (c + s)
    return SpritePlacement(label.xp, label.yp, width_px, extent, extent)


# --- sampling ---------------------------------------------------------


def sample_scene(
    config: DatagenConfig,
    rng: np.random.Generator,
    num_backgrounds: int = 1,
    sprite: Optional[DroneSprite] = None,
    k: CameraIntrinsics = DEFAULT_INTRINSICS,
    grid: GridShape = DEFAULT_GRID,
) -> SceneSpec:
    """Sample a renderable scene: every robot's full sprite footprint is
    inside the image and no two robots share a grid cell.

    Raises SamplingExhaustedError after 1000 rejected placements for a
    single robot.
    """
    if sprite is None:
        sprite = default_drone_sprite(config.sprite_size)
    att = Attitude(
        roll=rng.uniform(-config.attitude_range, config.attitude_range),
        pitch=rng.uniform(-config.attitude_range, config.attitude_range),
    )
    background_id = int(rng.integers(num_backgrounds))
    n_robots = int(rng.integers(1, config.max_robots + 1))
    lo, hi = config.depth_range

    robots: list[RobotPlacement] = []
    taken_cells: set[tuple[int, int]] = set()
    for _ in range(n_robots):
        for attempt in range(1000):
            xh = rng.uniform(lo, hi)
            yh = rng.uniform(*config.lateral_frac) * xh
            zh = rng.uniform(*config.vertical_frac) * xh
            rotation = rng.uniform(0.0, 2.0 * math.pi)
            brightness = 1.0 + rng.uniform(
                -config.brightness_jitter, config.brightness_jitter
            )
            pos = HorizontalCoord(xh, yh, zh)
            label = geometry.label_from_horizontal(pos, att, k)
            if label is None:
                continue
            place = sprite_placement(label, rotation, config.sprite_width_m, k)
            x0, y0, x1, y1 = place.bbox
            if x0 < 0 or y0 < 0 or x1 >= geometry.IMAGE_WIDTH or y1 >= geometry.IMAGE_HEIGHT:
                continue
            cell = grid.cell_of(label.xp, label.yp)
            if cell in taken_cells:
                continue
            taken_cells.add(cell)
            robots.append(RobotPlacement(pos, rotation, brightness))
            break
        else:
            raise SamplingExhaustedError(
                "1000 rejections while placing a robot; check config ranges"
            )
    return SceneSpec(
        background_id=background_id,
        robots=robots,
        attitude=att,
        seed=int(rng.integers(2**63)),
    )


# --- rendering --------------------------------------------------------


def _halve_premultiplied(premult: np.ndarray) -> np.ndarray:
    """2x2 box average; input and output are premultiplied RGBA."""
    h, w = premult.shape[:2]
    return premult.reshape(h // 2, 2, w // 2, 2, 4).mean(axis=(1, 3))


def _warp_sprite(
    sprite: DroneSprite, scale: float, rotation: float, center_x: float, center_y: float
) -> tuple[np.ndarray, int, int]:
    """Scaled/rotated premultiplied RGBA canvas placed at a subpixel center.

    Returns (canvas, top, left) such that pasting the canvas at integer
    image position (top, left) puts the sprite center exactly at
    (center_x, center_y).  Downscaling below 0.5 goes through repeated
    2x2 box halving so small sprites stay alias-free; the residual scale
    and the rotation are one bilinear resample.
    """
    rgba = sprite.rgba
    premult = np.concatenate(
        [rgba[..., :3] * rgba[..., 3:4], rgba[..., 3:4]], axis=-1
    )
    resid = scale
    while resid < 0.5 and premult.shape[0] % 2 == 0 and premult.shape[0] > 4:
        premult = _halve_premultiplied(premult)
        resid *= 2.0

    src = premult.shape[0]
    extent = src * resid * (abs(math.cos(rotation)) + abs(math.sin(rotation)))
    out = int(math.ceil(extent)) + 2
    top = int(math.floor(center_y)) - out // 2
    left = int(math.floor(center_x)) - out // 2
    c_in = (src - 1) / 2.0
    c_out_y = center_y - top
    c_out_x = center_x - left

    cos_t, sin_t = math.cos(rotation), math.sin(rotation)
    # output (y, x) -> input (y, x): inverse rotation then inverse scale
    matrix = np.array([[cos_t, -sin_t], [sin_t, cos_t]]) / resid
    offset = np.array([c_in, c_in]) - matrix @ np.array([c_out_y, c_out_x])

    canvas = np.zeros((out, out, 4), dtype=np.float32)
    for ch in range(4):
        canvas[..., ch] = ndimage.affine_transform(
            premult[..., ch],
            matrix,
            offset=offset,
            output_shape=(out, out),
            order=1,
            mode="constant",
            cval=0.0,
        )
    return np.clip(canvas, 0.0, 1.0), top, left


def _blend(image: np.ndarray, canvas: np.ndarray, top: int, left: int, brightness: float) -> None:
    """Alpha-blend a premultiplied RGBA canvas into the image in place,
    clipping at the borders."""
    h, w = canvas.shape[:2]
    ih, iw = image.shape[:2]
    y0, y1 = max(0, top), min(ih, top + h)
    x0, x1 = max(0, left), min(iw, left + w)
    if y0 >= y1 or x0 >= x1:
        return
    patch = canvas[y0 - top : y1 - top, x0 - left : x1 - left]
    alpha = patch[..., 3:4]
    rgb = np.clip(patch[..., :3] * brightness, 0.0, 1.0)
    region = image[y0:y1, x0:x1].astype(np.float32) / 255.0
    blended = region * (1.0 - alpha) + rgb
    image[y0:y1, x0:x1] = np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)


def composite(
    background: np.ndarray,
    sprite: DroneSprite,
    scene: SceneSpec,
    k: CameraIntrinsics = DEFAULT_INTRINSICS,
) -> tuple[np.ndarray, list[RelativeLabel]]:
    """Render a scene onto a background; returns the image and the exact
    projected labels (one per robot, scene order).

    Robots are drawn farthest first so nearer sprites occlude farther
    ones.  The scene must be pre-validated: every robot projects in
    view.
    """
    if background.shape != (geometry.IMAGE_HEIGHT, geometry.IMAGE_WIDTH, 3):
        raise ValueError(f"background must be 320x224 RGB, got {background.shape}")
    image = background.copy()
    labels: list[RelativeLabel] = []
    order = []
    for idx, robot in enumerate(scene.robots):
        label = geometry.label_from_horizontal(robot.position, scene.attitude, k)
        if label is None:
            raise ValueError(f"robot {idx} projects out of view; scene not validated")
        labels.append(label)
        order.append((label.depth, idx))
    for _, idx in sorted(order, reverse=True):
        robot = scene.robots[idx]
        label = labels[idx]
        scale = (k.fx * sprite.physical_width / label.depth) / sprite.size
        canvas, top, left = _warp_sprite(
            sprite, scale, robot.rotation, label.xp, label.yp
        )
        _blend(image, canvas, top, left, robot.brightness)
    return image, labels


# --- backgrounds ------------------------------------------------------


def load_background(path: str | Path) -> np.ndarray:
    """Center-crop to 10:7 and resize to 320x224 RGB."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        target_ratio = IMAGE_SIZE[0] / IMAGE_SIZE[1]
        if w / h > target_ratio:
            crop_w = int(round(h * target_ratio))
            left = (w - crop_w) // 2
            img = img.crop((left, 0, left + crop_w, h))
        else:
            crop_h = int(round(w / target_ratio))
            top = (h - crop_h) // 2
            img = img.crop((0, top, w, top + crop_h))
        img = img.resize(IMAGE_SIZE, Image.LANCZOS)
        return np.asarray(img, dtype=np.uint8)


def list_backgrounds(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"backgrounds directory not found: {directory}")
    paths = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in _BACKGROUND_SUFFIXES
    )
    if not paths:
        raise FileNotFoundError(f"no background images in {directory}")
    return paths


def make_noise_backgrounds(out_dir: str | Path, count: int, seed: int) -> list[Path]:
    """Write procedurally textured backgrounds (smooth color fields plus
    random shapes).  Demo/test scaffolding so the pipeline runs without
    an external image collection."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    w, h = IMAGE_SIZE
    paths = []
    for i in range(count):
        base_res = int(rng.integers(3, 9))
        low = rng.uniform(60, 255, size=(base_res, int(base_res * 1.4), 3))
        img = Image.fromarray(low.astype(np.uint8)).resize((w, h), Image.BILINEAR)
        draw = ImageDraw.Draw(img, "RGBA")
        for _ in range(int(rng.integers(3, 9))):
            color = tuple(int(v) for v in rng.integers(0, 256, size=3)) + (
                int(rng.integers(60, 200)),
            )
            x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
            dx, dy = rng.uniform(15, 140), rng.uniform(15, 140)
            box = [x0, y0, x0 + dx, y0 + dy]
            if rng.random() < 0.5:
                draw.rectangle(box, fill=color)
            else:
                draw.ellipse(box, fill=color)
        arr = np.asarray(img, dtype=np.float32)
        arr += rng.normal(0.0, 6.0, size=arr.shape)
        path = out_dir / f"bg_{i:04d}.png"
        Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths


# --- dataset I/O ------------------------------------------------------


def write_records(path: str | Path, records: Sequence[DatasetRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True))
            fh.write("\n")


def read_records(path: str | Path) -> list[DatasetRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(DatasetRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(
                    f"{path}: bad record on line {lineno}: {exc}"
                ) from exc
    return records


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def generate_dataset(
    config: DatagenConfig,
    out_dir: str | Path,
    pose_records: Optional[Sequence[DatasetRecord]] = None,
    label_records: Optional[Sequence[DatasetRecord]] = None,
    k: CameraIntrinsics = DEFAULT_INTRINSICS,
) -> dict:
    """Render a dataset into `out_dir` and write labels.jsonl.

    Default mode samples scenes procedurally and writes exact labels.
    With `pose_records`, frames are rendered at the given positions
    instead (rotation/brightness/background still sampled); pass
    `label_records` to write different labels than the rendered truth,
    which is how estimator-labeled training sets are built.  Frames that
    cannot be rendered (a robot behind or outside the view) or whose
    written labels collide in one grid cell are skipped.
    """
    if config.seed is None:
        raise ValueError("dataset generation requires a seed")
    if config.backgrounds_dir is None:
        raise ValueError("config.backgrounds_dir is required")
    if label_records is not None:
        if pose_records is None:
            raise ValueError("label_records requires pose_records")
        if len(label_records) != len(pose_records):
            raise ValueError("pose/label record counts differ")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    backgrounds = [load_background(p) for p in list_backgrounds(config.backgrounds_dir)]
    sprite = default_drone_sprite(config.sprite_size)
    sprite.physical_width = config.sprite_width_m

    count = len(pose_records) if pose_records is not None else config.count
    children = np.random.SeedSequence(config.seed).spawn(count) if count else []

    emitted: list[DatasetRecord] = []
    skipped = 0
    for i in range(count):
        rng = np.random.Generator(np.random.PCG64(children[i]))
        if pose_records is None:
            scene = sample_scene(config, rng, len(backgrounds), sprite, k)
            written = None
        else:
            src = pose_records[i]
            att = Attitude(src.roll, src.pitch)
            scene = SceneSpec(
                background_id=int(rng.integers(len(backgrounds))),
                robots=[
                    RobotPlacement(
                        pos,
                        rotation=rng.uniform(0.0, 2.0 * math.pi),
                        brightness=1.0
                        + rng.uniform(-config.brightness_jitter, config.brightness_jitter),
                    )
                    for pos in src.robots
                ],
                attitude=att,
            )
            if any(
                geometry.label_from_horizontal(r.position, att, k) is None
                for r in scene.robots
            ):
                skipped += 1
                continue
            written = label_records[i] if label_records is not None else src
            if _labels_collide(written, k):
                skipped += 1
                continue

        image, _ = composite(backgrounds[scene.background_id], sprite, scene, k)
        name = f"images/{len(emitted):06d}.png"
        Image.fromarray(image).save(out_dir / name)
        if written is None:
            written = DatasetRecord(
                image=name,
                roll=scene.attitude.roll,
                pitch=scene.attitude.pitch,
                robots=[r.position for r in scene.robots],
            )
        else:
            written = DatasetRecord(
                image=name, roll=written.roll, pitch=written.pitch, robots=written.robots
            )
        emitted.append(written)

    write_records(out_dir / "labels.jsonl", emitted)
    return {
        "out_dir": str(out_dir),
        "count": len(emitted),
        "skipped": skipped,
        "seed": config.seed,
        "labels": str(out_dir / "labels.jsonl"),
    }


def _labels_collide(record: DatasetRecord, k: CameraIntrinsics) -> bool:
    att = Attitude(record.roll, record.pitch)
    cells = set()
    for pos in record.robots:
        label = geometry.label_from_horizontal(pos, att, k)
        if label is None:
            continue
        cell = DEFAULT_GRID.cell_of(label.xp, label.yp)
        if cell in cells:
            return True
        cells.add(cell)
    return False
