"""Decode grid predictions into detections and score them against truth.

Decoding keeps the cell-corner convention (pixel = stride * index), so
detections carry a quantization bias of up to one stride; the matching
gate and error statistics account for that downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import DEFAULT_GRID, GridMap, GridShape, RelativeLabel


@dataclass(frozen=True)
class Detection:
    xp: float
    yp: float
    depth: float
    confidence: float


@dataclass
class DetectionConfig:
    threshold: float = 0.33  # 0.23 suits real-world captures
    suppression: bool = True  # keep only strict 3x3 local maxima
    match_gate: float = 40.0  # pixels

    def __post_init__(self) -> None:
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.match_gate <= 0:
            raise ValueError("match_gate must be positive")


def _local_maxima(conf: np.ndarray) -> np.ndarray:
    """Cells that beat all eight neighbours; equal values break ties
    row-major (the earlier cell wins)."""
    rows, cols = conf.shape
    big = rows * cols
    padded = np.full((rows + 2, cols + 2), -np.inf)
    padded[1:-1, 1:-1] = conf
    idx = np.arange(big).reshape(rows, cols)
    padded_idx = np.full((rows + 2, cols + 2), big)
    padded_idx[1:-1, 1:-1] = idx
    keep = np.ones(conf.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nconf = padded[1 + di : 1 + di + rows, 1 + dj : 1 + dj + cols]
            nidx = padded_idx[1 + di : 1 + di + rows, 1 + dj : 1 + dj + cols]
            keep &= (conf > nconf) | ((conf == nconf) & (idx < nidx))
    return keep


def extract_detections(
    pred: GridMap,
    cfg: Optional[DetectionConfig] = None,
    grid: GridShape = DEFAULT_GRID,
) -> list[Detection]:
    """Cells above the confidence threshold become detections at the
    cell-corner pixel, sorted by descending confidence."""
    if cfg is None:
        cfg = DetectionConfig()
    conf = pred.confidence
    mask = conf > cfg.threshold
    if cfg.suppression:
        mask &= _local_maxima(conf)
    cells = np.argwhere(mask)
    detections = [
        Detection(
            xp=float(grid.stride * c),
            yp=float(grid.stride * r),
            depth=float(pred.depth[r, c]),
            confidence=float(conf[r, c]),
        )
        for r, c in cells
    ]
    detections.sort(key=lambda d: (-d.confidence, d.yp, d.xp))
    return detections


@dataclass
class EvalMetrics:
    """Aggregate detection quality over a dataset.

    Pixel errors are Euclidean distances of matched pairs; depth errors
    are signed (prediction minus truth).
    """

    pixel_p50: float
    pixel_p80: float
    pixel_p95: float
    depth_mean: float
    depth_median: float
    depth_std: float
    tp_rate: float
    fp_per_image: float
    pixel_errs: list[float] = field(default_factory=list)
    depth_errs: list[float] = field(default_factory=list)
    n_images: int = 0
    n_truths: int = 0
    n_detections: int = 0
    n_matched: int = 0

    def to_json(self) -> dict:
        return {
            "pixel_err": {"p50": self.pixel_p50, "p80": self.pixel_p80, "p95": self.pixel_p95},
            "depth_err": {
                "mean": self.depth_mean,
                "median": self.depth_median,
                "std": self.depth_std,
            },
            "tp_rate": self.tp_rate,
            "fp_per_image": self.fp_per_image,
            "counts": {
                "images": self.n_images,
                "truths": self.n_truths,
                "detections": self.n_detections,
                "matched": self.n_matched,
            },
            "raw": {"pixel_errs": self.pixel_errs, "depth_errs": self.depth_errs},
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalMetrics":
        return cls(
            pixel_p50=d["pixel_err"]["p50"],
            pixel_p80=d["pixel_err"]["p80"],
            pixel_p95=d["pixel_err"]["p95"],
            depth_mean=d["depth_err"]["mean"],
            depth_median=d["depth_err"]["median"],
            depth_std=d["depth_err"]["std"],
            tp_rate=d["tp_rate"],
            fp_per_image=d["fp_per_image"],
            pixel_errs=list(d["raw"]["pixel_errs"]),
            depth_errs=list(d["raw"]["depth_errs"]),
            n_images=d["counts"]["images"],
            n_truths=d["counts"]["truths"],
            n_detections=d["counts"]["detections"],
            n_matched=d["counts"]["matched"],
        )


def _greedy_match(
    detections: Sequence[Detection],
    truths: Sequence[RelativeLabel],
    gate: float,
) -> list[tuple[int, int, float]]:
    """Nearest-pixel greedy matching inside the gate; returns
    (det_index, truth_index, distance) triples."""
    pairs = []
    for di, det in enumerate(detections):
        for ti, truth in enumerate(truths):
            dist = math.hypot(det.xp - truth.xp, det.yp - truth.yp)
            if dist <= gate:
                pairs.append((dist, di, ti))
    pairs.sort()
    used_d: set[int] = set()
    used_t: set[int] = set()
    matches = []
    for dist, di, ti in pairs:
        if di in used_d or ti in used_t:
            continue
        used_d.add(di)
        used_t.add(ti)
        matches.append((di, ti, dist))
    return matches


def match_and_score(
    detections_per_image: Sequence[Sequence[Detection]],
    truths_per_image: Sequence[Sequence[RelativeLabel]],
    cfg: Optional[DetectionConfig] = None,
) -> EvalMetrics:
    """Greedy nearest-pixel matching with a pixel gate; unmatched truths
    are misses, unmatched detections are false positives."""
    if cfg is None:
        cfg = DetectionConfig()
    if len(detections_per_image) != len(truths_per_image):
        raise ValueError("detections/truths image counts differ")
    pixel_errs: list[float] = []
    depth_errs: list[float] = []
    n_truths = n_dets = n_matched = fp = 0
    for dets, truths in zip(detections_per_image, truths_per_image):
        matches = _greedy_match(dets, truths, cfg.match_gate)
        n_truths += len(truths)
        n_dets += len(dets)
        n_matched += len(matches)
        fp += len(dets) - len(matches)
        for di, ti, dist in matches:
            pixel_errs.append(dist)
            depth_errs.append(dets[di].depth - truths[ti].depth)

    n_images = len(truths_per_image)
    px = np.asarray(pixel_errs)
    dp = np.asarray(depth_errs)
    p50, p80, p95 = (
        np.percentile(px, [50, 80, 95]) if len(px) else (0.0, 0.0, 0.0)
    )
    return EvalMetrics(
        pixel_p50=float(p50),
        pixel_p80=float(p80),
        pixel_p95=float(p95),
        depth_mean=float(dp.mean()) if len(dp) else 0.0,
        depth_median=float(np.median(dp)) if len(dp) else 0.0,
        depth_std=float(dp.std()) if len(dp) else 0.0,
        tp_rate=(n_matched / n_truths) if n_truths else 0.0,
        fp_per_image=(fp / n_images) if n_images else 0.0,
        pixel_errs=[float(e) for e in pixel_errs],
        depth_errs=[float(e) for e in depth_errs],
        n_images=n_images,
        n_truths=n_truths,
        n_detections=n_dets,
        n_matched=n_matched,
    )


def evaluate_grids(
    grids: Sequence[GridMap],
    truths_per_image: Sequence[Sequence[RelativeLabel]],
    cfg: Optional[DetectionConfig] = None,
    grid_shape: GridShape = DEFAULT_GRID,
) -> EvalMetrics:
    """Extract detections from predicted grids and score them."""
    if cfg is None:
        cfg = DetectionConfig()
    detections = [extract_detections(g, cfg, grid_shape) for g in grids]
    return match_and_score(detections, truths_per_image, cfg)


def error_report(metrics: EvalMetrics, path: str | Path) -> None:
    """Write the metrics (including raw per-match error arrays) as JSON."""
    with open(path, "w") as fh:
        json.dump(metrics.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
