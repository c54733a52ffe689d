"""Grid decoding, suppression, matching, and metrics."""

import json
import math

import numpy as np
import pytest

from peerloc import detect
from peerloc.detect import Detection, DetectionConfig
from peerloc.geometry import GridMap, GridShape, RelativeLabel


def grid_of(conf, depth=None):
    conf = np.asarray(conf, dtype=float)
    if depth is None:
        depth = np.zeros_like(conf)
    return GridMap(confidence=conf, depth=np.asarray(depth, dtype=float))


def brute_force_threshold(grid, threshold, stride=8):
    """Independent full-grid scan, no suppression."""
    out = []
    rows, cols = grid.confidence.shape
    for r in range(rows):
        for c in range(cols):
            if grid.confidence[r, c] > threshold:
                out.append(
                    Detection(
                        xp=float(stride * c),
                        yp=float(stride * r),
                        depth=float(grid.depth[r, c]),
                        confidence=float(grid.confidence[r, c]),
                    )
                )
    out.sort(key=lambda d: (-d.confidence, d.yp, d.xp))
    return out


def brute_force_maxima(grid, threshold, stride=8):
    """Independent scan keeping only strict 3x3 maxima; equal neighbours
    lose to the earlier cell in row-major order."""
    conf = grid.confidence
    rows, cols = conf.shape
    out = []
    for r in range(rows):
        for c in range(cols):
            if conf[r, c] <= threshold:
                continue
            keep = True
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    nr, nc = r + dr, c + dc
                    if not (0 <= nr < rows and 0 <= nc < cols):
                        continue
                    if conf[nr, nc] > conf[r, c]:
                        keep = False
                    elif conf[nr, nc] == conf[r, c] and (nr * cols + nc) < (r * cols + c):
                        keep = False
            if keep:
                out.append(
                    Detection(
                        xp=float(stride * c),
                        yp=float(stride * r),
                        depth=float(grid.depth[r, c]),
                        confidence=float(conf[r, c]),
                    )
                )
    out.sort(key=lambda d: (-d.confidence, d.yp, d.xp))
    return out


def random_grid(rng, rows, cols, ties=False):
    if ties:
        conf = rng.choice([0.0, 0.2, 0.4, 0.6, 0.8], size=(rows, cols))
    else:
        conf = rng.random((rows, cols))
    depth = rng.uniform(0.5, 3.5, size=(rows, cols))
    return grid_of(conf, depth)


class TestExtract:
    def test_all_below_threshold(self):
        grid = grid_of(np.full((28, 40), 0.2))
        assert detect.extract_detections(grid, DetectionConfig(threshold=0.33)) == []

    def test_single_cell(self):
        conf = np.zeros((28, 40))
        depth = np.zeros((28, 40))
        conf[14, 20] = 0.9
        depth[14, 20] = 1.5
        dets = detect.extract_detections(grid_of(conf, depth), DetectionConfig(threshold=0.33))
        assert dets == [Detection(xp=160.0, yp=112.0, depth=1.5, confidence=0.9)]

    def test_adjacent_cells_suppressed(self):
        conf = np.zeros((28, 40))
        conf[10, 10] = 0.9
        conf[10, 11] = 0.8
        dets = detect.extract_detections(grid_of(conf), DetectionConfig(threshold=0.33))
        assert len(dets) == 1
        assert (dets[0].xp, dets[0].yp) == (80.0, 80.0)

    def test_suppression_off_keeps_both(self):
        conf = np.zeros((28, 40))
        conf[10, 10] = 0.9
        conf[10, 11] = 0.8
        cfg = DetectionConfig(threshold=0.33, suppression=False)
        assert len(detect.extract_detections(grid_of(conf), cfg)) == 2

    def test_sorted_by_confidence(self):
        conf = np.zeros((28, 40))
        conf[5, 5] = 0.5
        conf[20, 30] = 0.9
        dets = detect.extract_detections(grid_of(conf), DetectionConfig(threshold=0.33))
        assert [d.confidence for d in dets] == [0.9, 0.5]

    @pytest.mark.parametrize("suppression", [False, True])
    def test_matches_brute_force(self, suppression):
        rng = np.random.default_rng(31)
        cfg = DetectionConfig(threshold=0.33, suppression=suppression)
        oracle = brute_force_maxima if suppression else brute_force_threshold
        for i in range(300):
            rows, cols = (28, 40) if i % 10 == 0 else (6, 8)
            grid = random_grid(rng, rows, cols, ties=(i % 3 == 0))
            got = detect.extract_detections(grid, cfg)
            want = oracle(grid, cfg.threshold)
            assert got == want

    def test_label_form_grids_recover_cells(self):
        """Any threshold below 1 recovers every labelled cell with its depth."""
        rng = np.random.default_rng(32)
        for _ in range(100):
            conf = np.zeros((28, 40))
            depth = np.zeros((28, 40))
            for _ in range(rng.integers(0, 4)):
                r, c = rng.integers(0, 28), rng.integers(0, 40)
                conf[r, c] = 1.0
                depth[r, c] = rng.uniform(0.5, 3.5)
            cfg = DetectionConfig(threshold=float(rng.uniform(0.05, 0.95)))
            dets = detect.extract_detections(grid_of(conf, depth), cfg)
            got = {(d.yp // 8, d.xp // 8, d.depth) for d in dets}
            want = {(float(r), float(c), depth[r, c]) for r, c in np.argwhere(conf == 1)}
            assert got == want

    def test_depth_rescaling_changes_only_depths(self):
        rng = np.random.default_rng(33)
        grid = random_grid(rng, 28, 40)
        cfg = DetectionConfig(threshold=0.6)
        base = detect.extract_detections(grid, cfg)
        scaled = detect.extract_detections(
            GridMap(confidence=grid.confidence, depth=2.5 * grid.depth), cfg
        )
        assert [(d.xp, d.yp, d.confidence) for d in base] == [
            (d.xp, d.yp, d.confidence) for d in scaled
        ]
        for a, b in zip(base, scaled):
            assert b.depth == pytest.approx(2.5 * a.depth)

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            DetectionConfig(threshold=1.1)
        with pytest.raises(ValueError):
            DetectionConfig(threshold=0.0)


class TestMatchAndScore:
    def test_exact_match(self):
        dets = [[Detection(100, 50, 2.0, 0.9)]]
        truths = [[RelativeLabel(100, 50, 2.0)]]
        m = detect.match_and_score(dets, truths)
        assert m.tp_rate == 1.0
        assert m.fp_per_image == 0.0
        assert m.pixel_p95 == 0.0
        assert m.depth_mean == 0.0

    def test_miss(self):
        m = detect.match_and_score([[]], [[RelativeLabel(100, 50, 2.0)]])
        assert m.tp_rate == 0.0
        assert m.n_matched == 0

    def test_gate_rejects_distant_detection(self):
        dets = [[Detection(110, 50, 2.0, 0.9), Detection(300, 50, 1.0, 0.8)]]
        truths = [[RelativeLabel(100, 50, 2.2)]]
        m = detect.match_and_score(dets, truths)
        assert m.n_matched == 1
        assert m.fp_per_image == 1.0
        assert m.pixel_errs == [10.0]
        assert m.depth_errs == [pytest.approx(-0.2)]

    def test_greedy_takes_nearest(self):
        dets = [[Detection(100, 50, 2.0, 0.9), Detection(104, 50, 2.0, 0.95)]]
        truths = [[RelativeLabel(103, 50, 2.0), RelativeLabel(90, 50, 2.0)]]
        m = detect.match_and_score(dets, truths)
        assert m.n_matched == 2
        assert sorted(m.pixel_errs) == [1.0, 10.0]

    def test_percentiles_monotone(self):
        rng = np.random.default_rng(34)
        dets, truths = [], []
        for _ in range(50):
            xp, yp = rng.uniform(0, 300), rng.uniform(0, 200)
            err = rng.uniform(0, 30)
            dets.append([Detection(xp + err, yp, 2.0, 0.9)])
            truths.append([RelativeLabel(xp, yp, 2.0)])
        m = detect.match_and_score(dets, truths)
        assert 0 <= m.pixel_p50 <= m.pixel_p80 <= m.pixel_p95
        assert 0 <= m.tp_rate <= 1

    def test_image_count_mismatch(self):
        with pytest.raises(ValueError):
            detect.match_and_score([[]], [[], []])


class TestErrorReport:
    def test_empty_dataset(self, tmp_path):
        m = detect.match_and_score([], [])
        path = tmp_path / "m.json"
        detect.error_report(m, path)
        data = json.loads(path.read_text())
        assert data["counts"]["images"] == 0
        assert data["tp_rate"] == 0.0

    def test_roundtrip(self, tmp_path):
        dets = [[Detection(100, 50, 2.0, 0.9)], []]
        truths = [[RelativeLabel(104, 53, 2.2)], [RelativeLabel(10, 10, 1.0)]]
        m = detect.match_and_score(dets, truths)
        path = tmp_path / "m.json"
        detect.error_report(m, path)
        back = detect.EvalMetrics.from_json(json.loads(path.read_text()))
        assert back == m

    def test_percentiles_recomputable_from_raw(self, tmp_path):
        rng = np.random.default_rng(35)
        dets, truths = [], []
        for _ in range(40):
            xp, yp = rng.uniform(0, 300), rng.uniform(0, 200)
            dets.append([Detection(xp + rng.uniform(0, 20), yp, 2.0, 0.9)])
            truths.append([RelativeLabel(xp, yp, 2.0)])
        m = detect.match_and_score(dets, truths)
        path = tmp_path / "m.json"
        detect.error_report(m, path)
        data = json.loads(path.read_text())
        raw = np.array(data["raw"]["pixel_errs"])
        assert np.percentile(raw, 50) == pytest.approx(data["pixel_err"]["p50"])
        assert np.percentile(raw, 95) == pytest.approx(data["pixel_err"]["p95"])
