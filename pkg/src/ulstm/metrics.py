"""Connected-component labeling and the SEG segmentation measure.

SEG is the mean Jaccard index over ground-truth cells: each GT cell is
matched to the predicted component covering the strict majority of its
pixels (|A n B| > |A|/2); matched cells score |A n B| / |A u B|, unmatched
cells score 0, and the aggregate is the arithmetic mean over every GT
cell of every frame.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import UsageError


def _find(parent: list, x: int) -> int:
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:  # path compression
        parent[x], x = root, parent[x]
    return root


def connected_components(binary, connectivity: int = 4) -> np.ndarray:
    """Label foreground components of a binary map, two-pass union-find.

    Labels are assigned in raster-scan discovery order starting at 1.
    ``connectivity`` is 4 (edge neighbors) or 8 (edge + diagonal).
    """
    if connectivity not in (4, 8):
        raise UsageError(f"connectivity must be 4 or 8, got {connectivity}")
    b = np.asarray(binary) != 0
    if b.ndim != 2:
        raise UsageError(f"connected_components expects a 2-d map, got shape {b.shape}")
    h, w = b.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = [0]  # parent[0] unused; provisional labels start at 1
    for y in range(h):
        row = b[y]
        lab_row = labels[y]
        lab_up = labels[y - 1] if y > 0 else None
        for x in range(w):
            if not row[x]:
                continue
            neigh = []
            if x > 0 and lab_row[x - 1]:
                neigh.append(lab_row[x - 1])
            if lab_up is not None:
                if lab_up[x]:
                    neigh.append(lab_up[x])
                if connectivity == 8:
                    if x > 0 and lab_up[x - 1]:
                        neigh.append(lab_up[x - 1])
                    if x + 1 < w and lab_up[x + 1]:
                        neigh.append(lab_up[x + 1])
            if not neigh:
                parent.append(len(parent))
                lab_row[x] = len(parent) - 1
            else:
                roots = [_find(parent, int(v)) for v in neigh]
                r0 = min(roots)
                lab_row[x] = r0
                for r in roots:
                    if r != r0:
                        parent[r] = r0
    # Second pass: map each provisional root to a final label numbered by
    # first (raster-order) appearance.
    remap = np.zeros(len(parent), dtype=np.int32)
    next_label = 1
    flat = labels.ravel()
    for i in range(flat.size):
        v = flat[i]
        if v == 0:
            continue
        r = _find(parent, int(v))
        if remap[r] == 0:
            remap[r] = next_label
            next_label += 1
        flat[i] = remap[r]
    return labels


@dataclass
class SegReport:
    """Per-GT-cell Jaccard scores plus the aggregate mean."""

    rows: list = field(default_factory=list)  # (frame, gt_label, matched_pred, jaccard)

    def add(self, frame: int, gt_label: int, matched_pred: int, jaccard: float) -> None:
        self.rows.append((frame, gt_label, matched_pred, jaccard))

    @property
    def aggregate(self) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([r[3] for r in self.rows]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("frame,gt_label,matched_pred,jaccard\n")
        for frame, gt, pred, j in self.rows:
            buf.write(f"{frame},{gt},{pred},{j:.9f}\n")
        return buf.getvalue()

    def __str__(self) -> str:
        return f"SEG = {self.aggregate:.6f} over {len(self.rows)} ground-truth cells"


def _score_frame(gt: np.ndarray, pred: np.ndarray, report: SegReport, frame: int) -> None:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise UsageError(f"seg_score: shape mismatch {gt.shape} vs {pred.shape}")
    gt_ids = np.unique(gt)
    gt_ids = gt_ids[gt_ids > 0]
    if gt_ids.size == 0:
        return
    pred_max = int(pred.max())
    gt64 = gt.astype(np.int64).ravel()
    pr64 = pred.astype(np.int64).ravel()
    # Joint histogram of (gt label, pred label) pair counts.
    pairs = gt64 * (pred_max + 1) + pr64
    counts = np.bincount(pairs, minlength=(int(gt.max()) + 1) * (pred_max + 1))
    counts = counts.reshape(int(gt.max()) + 1, pred_max + 1)
    pred_areas = np.bincount(pr64, minlength=pred_max + 1)
    for a in gt_ids:
        inter_row = counts[a].copy()
        inter_row[0] = 0  # background never matches
        area_a = int(counts[a].sum())
        if area_a == 0:
            continue
        # Strict majority guarantees uniqueness; assert rather than assume.
        over_half = np.nonzero(inter_row * 2 > area_a)[0]
        assert over_half.size <= 1, "majority rule produced multiple matches"
        best = int(inter_row.argmax())
        inter = int(inter_row[best])
        if inter * 2 > area_a:
            union = area_a + int(pred_areas[best]) - inter
            report.add(frame, int(a), best, inter / union)
        else:
            report.add(frame, int(a), 0, 0.0)


def seg_score(gt, pred) -> SegReport:
    """Score predicted instance maps against ground truth.

    ``gt`` and ``pred`` are either single 2-d instance maps or sequences
    of per-frame maps (lists or a stacked 3-d array).
    """
    gt_frames = [gt] if isinstance(gt, np.ndarray) and gt.ndim == 2 else list(gt)
    pred_frames = [pred] if isinstance(pred, np.ndarray) and pred.ndim == 2 else list(pred)
    if len(gt_frames) != len(pred_frames):
        raise UsageError(
            f"seg_score: {len(gt_frames)} GT frames vs {len(pred_frames)} predictions")
    report = SegReport()
    for t, (g, p) in enumerate(zip(gt_frames, pred_frames)):
        _score_frame(g, p, report, t)
    return report
