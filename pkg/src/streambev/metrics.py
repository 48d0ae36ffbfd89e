"""Semantic IoU and video panoptic quality (VPQ / PQ / SQ / RQ).

Per-frame instance matching uses the IoU > 0.5 rule, which makes the
matching unique: two segments cannot both overlap the same target in more
than half of it.  Temporal consistency follows the future-instance-
segmentation convention: the first match links a ground-truth track to a
predicted id, and a later overlap only counts as a true positive if the
predicted id is the linked one; id switches turn the overlap into a false
positive plus a false negative.

``vpq_bruteforce`` recomputes the metric with exhaustive per-cell loops and
an enumeration over all injective matchings; it exists purely to
cross-validate the fast path and shares no code with it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

__all__ = [
    "iou",
    "vpq",
    "vpq_bruteforce",
    "PanopticTally",
    "MATCH_IOU_THRESHOLD",
    "METRICS_COLUMNS",
    "write_metrics_csv",
]

MATCH_IOU_THRESHOLD = 0.5
METRICS_COLUMNS = ["scenario", "horizon_s", "iou", "vpq", "pq", "sq", "rq"]


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Defined as 1 when both masks are empty and 0 when exactly one is.
    """
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    pred = pred_mask.astype(bool)
    gt = gt_mask.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class FrameTally:
    """Matching outcome for one frame."""

    tp: list[tuple[int, int, float]]  # (gt id, pred id, IoU)
    fp: int
    fn: int

    @property
    def iou_sum(self) -> float:
        return sum(i for _, _, i in self.tp)

    @property
    def quotient(self) -> float:
        denom = len(self.tp) + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 1.0  # nothing to detect and nothing detected
        return self.iou_sum / denom


@dataclass
class PanopticTally:
    """Per-frame matches plus the pooled quality numbers over the window."""

    frames: list[FrameTally] = field(default_factory=list)

    @property
    def vpq(self) -> float:
        if not self.frames:
            raise ValueError("empty tally")
        return float(np.mean([f.quotient for f in self.frames]))

    @property
    def sq(self) -> float:
        n_tp = sum(len(f.tp) for f in self.frames)
        if n_tp == 0:
            total = sum(len(f.tp) + f.fp + f.fn for f in self.frames)
            return 1.0 if total == 0 else 0.0
        return sum(f.iou_sum for f in self.frames) / n_tp

    @property
    def rq(self) -> float:
        n_tp = sum(len(f.tp) for f in self.frames)
        denom = n_tp + 0.5 * sum(f.fp for f in self.frames) + 0.5 * sum(
            f.fn for f in self.frames
        )
        if denom == 0:
            return 1.0
        return n_tp / denom

    @property
    def pq(self) -> float:
        return self.sq * self.rq

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.vpq, self.pq, self.sq, self.rq)


def _check_alignment(pred_frames, gt_frames) -> None:
    if len(pred_frames) != len(gt_frames):
        raise ValueError(
            f"sequences misaligned: {len(pred_frames)} predicted vs {len(gt_frames)} "
            "ground-truth frames"
        )
    for p, g in zip(pred_frames, gt_frames):
        if p.timestamp_us != g.timestamp_us:
            raise ValueError(
                f"sequences misaligned at {p.timestamp_us} us vs {g.timestamp_us} us"
            )
        if p.ids.shape != g.ids.shape:
            raise ValueError(f"grid shapes differ: {p.ids.shape} vs {g.ids.shape}")


def _frame_candidates(pred: np.ndarray, gt: np.ndarray) -> list[tuple[int, int, float]]:
    """All (gt id, pred id, IoU) pairs above the matching threshold."""
    gt_ids, gt_counts = np.unique(gt[gt > 0], return_counts=True)
    pred_ids, pred_counts = np.unique(pred[pred > 0], return_counts=True)
    gt_area = dict(zip(gt_ids.tolist(), gt_counts.tolist()))
    pred_area = dict(zip(pred_ids.tolist(), pred_counts.tolist()))
    both = (gt > 0) & (pred > 0)
    offset = int(pred.max()) + 1
    combined = gt[both].astype(np.int64) * offset + pred[both].astype(np.int64)
    pair_ids, inter = np.unique(combined, return_counts=True)
    candidates = []
    for pair, n in zip(pair_ids.tolist(), inter.tolist()):
        g, p = divmod(pair, offset)
        value = n / (gt_area[g] + pred_area[p] - n)
        if value > MATCH_IOU_THRESHOLD:
            candidates.append((int(g), int(p), float(value)))
    return candidates


def _fold_sequence(
    per_frame: list[tuple[list[tuple[int, int, float]], int, int]]
) -> PanopticTally:
    """Apply the track-linking rule to per-frame (candidates, n_gt, n_pred)."""
    links: dict[int, int] = {}
    tally = PanopticTally()
    for candidates, n_gt, n_pred in per_frame:
        matched_g = {g for g, _, _ in candidates}
        matched_p = {p for _, p, _ in candidates}
        if len(matched_g) != len(candidates) or len(matched_p) != len(candidates):
            raise AssertionError(
                "IoU > 0.5 matching produced a double match; threshold uniqueness violated"
            )
        tp = []
        for g, p, value in candidates:
            if g in links and links[g] != p:
                continue  # id switch: this overlap becomes FP + FN
            links.setdefault(g, p)
            tp.append((g, p, value))
        tally.frames.append(FrameTally(tp=tp, fp=n_pred - len(tp), fn=n_gt - len(tp)))
    return tally


def vpq(pred_frames, gt_frames) -> PanopticTally:
    """Video panoptic quality over aligned instance-frame sequences.

    Frames are objects with ``timestamp_us`` and an integer ``ids`` grid
    (0 = background).  VPQ is the horizon average of the per-frame panoptic
    quotients; PQ/SQ/RQ are pooled over the whole window.
    """
    _check_alignment(pred_frames, gt_frames)
    per_frame = []
    for p, g in zip(pred_frames, gt_frames):
        candidates = _frame_candidates(p.ids, g.ids)
        n_gt = len(np.unique(g.ids[g.ids > 0]))
        n_pred = len(np.unique(p.ids[p.ids > 0]))
        per_frame.append((candidates, n_gt, n_pred))
    return _fold_sequence(per_frame)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def _cells_of(grid: np.ndarray) -> dict[int, set[tuple[int, int]]]:
    cells: dict[int, set[tuple[int, int]]] = {}
    for r in range(grid.shape[0]):
        for c in range(grid.shape[1]):
            v = int(grid[r, c])
            if v > 0:
                cells.setdefault(v, set()).add((r, c))
    return cells


def _best_matching(gt_cells, pred_cells) -> list[tuple[int, int, float]]:
    """Exhaustive search over injective matchings, keeping pairs above 0.5 IoU."""
    gt_ids = sorted(gt_cells)
    pred_ids = sorted(pred_cells)
    pair_iou = {}
    for g in gt_ids:
        for p in pred_ids:
            inter = len(gt_cells[g] & pred_cells[p])
            union = len(gt_cells[g] | pred_cells[p])
            pair_iou[(g, p)] = inter / union if union else 1.0
    best: list[tuple[int, int, float]] = []
    best_score = (-1, -1.0)
    k = min(len(gt_ids), len(pred_ids))
    for size in range(k + 1):
        for gs in permutations(gt_ids, size):
            for ps in permutations(pred_ids, size):
                pairs = [
                    (g, p, pair_iou[(g, p)])
                    for g, p in zip(gs, ps)
                    if pair_iou[(g, p)] > MATCH_IOU_THRESHOLD
                ]
                if len(pairs) != size:
                    continue
                score = (size, sum(v for _, _, v in pairs))
                if score > best_score:
                    best_score = score
                    best = sorted(pairs)
    return best


def vpq_bruteforce(pred_frames, gt_frames) -> PanopticTally:
    """Reference implementation by exhaustive enumeration; for cross-checks."""
    _check_alignment(pred_frames, gt_frames)
    per_frame = []
    for p, g in zip(pred_frames, gt_frames):
        gt_cells = _cells_of(g.ids)
        pred_cells = _cells_of(p.ids)
        candidates = _best_matching(gt_cells, pred_cells)
        per_frame.append((candidates, len(gt_cells), len(pred_cells)))
    return _fold_sequence(per_frame)


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Rows keyed by the canonical metric columns; floats written at full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            formatted = {}
            for col in METRICS_COLUMNS:
                value = row.get(col, "")
                if isinstance(value, float):
                    value = repr(value)
                formatted[col] = value
            writer.writerow(formatted)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
