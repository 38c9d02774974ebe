"""Evaluation suite: reconstruction accuracy/completion, trajectory RMSE
after alignment, and semantic mIoU/mAcc with frequency-weighted variants.

Distance metrics report centimeters. Classes absent from the ground truth
are excluded from the means (their IoU would be 0/0); the per-class table
still lists them with a null score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .geometry import Pose, Sim3, nn_distances, umeyama_align

M_TO_CM = 100.0


@dataclass
class Trajectory:
    """Ordered (frame id, camera-to-world pose) pairs."""

    frame_ids: list
    poses: list  # of Pose

    def __post_init__(self):
        ids = list(self.frame_ids)
        if len(ids) != len(self.poses):
            raise ShapeError("frame id and pose counts differ")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ContractError("trajectory frame ids must be strictly increasing")
        self.frame_ids = ids

    def __len__(self):
        return len(self.frame_ids)

    def positions(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def as_rows(self):
        return np.array([p.as_row() for p in self.poses]).reshape(-1, 12)

    @classmethod
    def from_rows(cls, frame_ids, rows):
        poses = [Pose.from_row(r) for r in np.asarray(rows).reshape(-1, 12)]
        return cls(list(frame_ids), poses)


@dataclass
class LabeledCloud:
    """Points with one class id each."""

    points: np.ndarray  # N x 3
    labels: np.ndarray  # N int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.points.shape[0] != self.labels.shape[0]:
            raise ShapeError("points and labels disagree in length")
        if self.class_names and self.labels.size and self.labels.max() >= len(self.class_names):
            raise ContractError("label id exceeds the class table")


def accuracy_completion(pred, gt, cap_m=None, workers=1):
    """Mean nearest-neighbor distances, in centimeters.

    accuracy: prediction -> ground truth; completion: ground truth ->
    prediction. ``cap_m`` optionally clamps each per-point distance (meters)
    before averaging; None applies no cap.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.size == 0 or gt.size == 0:
        raise ContractError("accuracy/completion need non-empty point sets")
    d_pred = nn_distances(pred, gt, workers=workers)
    d_gt = nn_distances(gt, pred, workers=workers)
    if cap_m is not None:
        d_pred = np.minimum(d_pred, cap_m)
        d_gt = np.minimum(d_gt, cap_m)
    return float(d_pred.mean() * M_TO_CM), float(d_gt.mean() * M_TO_CM)


def align_corresponding_clouds(pred, gt, mode="sim3"):
    """Align a predicted cloud onto ground truth using point-by-point
    correspondence (equal lengths, same order). Returns (aligned points,
    Sim3). Reconstructions are gauge- and scale-free, so evaluation aligns
    first; 'none' skips it.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if mode == "none":
        return pred, Sim3.identity()
    if mode not in ("sim3", "se3"):
        raise ContractError(f"unknown alignment mode {mode!r}")
    if pred.shape != gt.shape:
        raise ContractError(
            "correspondence alignment needs equal-size clouds; "
            f"got {pred.shape} vs {gt.shape}"
        )
    sim = umeyama_align(pred, gt, with_scale=(mode == "sim3"))
    return sim.apply(pred), sim


def ate_rmse(pred: Trajectory, gt: Trajectory, align="sim3"):
    """RMSE of translation residuals (cm) after aligning the predicted
    trajectory onto the ground truth: 'sim3' (with scale), 'se3' (rigid),
    or 'none'."""
    if align not in ("sim3", "se3", "none"):
        raise ContractError(f"unknown alignment mode {align!r}")
    if list(pred.frame_ids) != list(gt.frame_ids):
        raise ContractError("trajectories cover different frame ids")
    p = pred.positions()
    g = gt.positions()
    if align != "none":
        if len(pred) < 3:
            raise ContractError("alignment needs at least 3 pose pairs")
        sim = umeyama_align(p, g, with_scale=(align == "sim3"))
        p = sim.apply(p)
    residual = np.linalg.norm(p - g, axis=1)
    return float(np.sqrt(np.mean(residual**2)) * M_TO_CM)


@dataclass
class ClassScore:
    class_id: int
    name: str
    iou: float | None
    acc: float | None
    gt_count: int
    pred_count: int


@dataclass
class SegmentationScores:
    per_class: list
    miou: float
    macc: float

    def present(self):
        return [c for c in self.per_class if c.iou is not None]

    def gt_frequencies(self):
        present = self.present()
        total = sum(c.gt_count for c in present)
        return np.array([c.gt_count / total for c in present])


def miou_macc(pred: LabeledCloud, gt: LabeledCloud, class_subset=None):
    """Per-class IoU and per-class recall over identical point sets, plus
    their means over classes present in the ground truth."""
    if pred.points.shape != gt.points.shape or not np.allclose(
        pred.points, gt.points, atol=1e-12
    ):
        raise ContractError("labeled clouds must cover the identical point set")
    names = gt.class_names or pred.class_names
    all_ids = np.union1d(np.unique(gt.labels), np.unique(pred.labels))
    if class_subset is not None:
        subset = np.asarray(sorted(set(int(c) for c in class_subset)), dtype=np.int64)
        if subset.size == 0:
            raise ContractError("class subset must be non-empty")
        all_ids = subset
    per_class = []
    ious, accs = [], []
    for cid in all_ids.tolist():
        in_pred = pred.labels == cid
        in_gt = gt.labels == cid
        gt_count = int(in_gt.sum())
        pred_count = int(in_pred.sum())
        if gt_count == 0:
            per_class.append(ClassScore(cid, _name(names, cid), None, None, 0, pred_count))
            continue
        inter = int((in_pred & in_gt).sum())
        union = int((in_pred | in_gt).sum())
        iou = inter / union
        acc = inter / gt_count
        per_class.append(ClassScore(cid, _name(names, cid), iou, acc, gt_count, pred_count))
        ious.append(iou)
        accs.append(acc)
    if not ious:
        raise ContractError("no ground-truth class present in the selected subset")
    return SegmentationScores(per_class, float(np.mean(ious)), float(np.mean(accs)))


def _name(names, cid):
    return names[cid] if names and 0 <= cid < len(names) else str(cid)


def f_weighted(per_class_scores, gt_frequencies):
    """Frequency-weighted means of per-class (iou, acc) pairs.

    ``per_class_scores`` is a sequence of (iou, acc); frequencies must sum
    to 1 over the same classes.
    """
    scores = list(per_class_scores)
    freq = np.asarray(gt_frequencies, dtype=np.float64)
    if len(scores) != freq.shape[0]:
        raise ContractError("frequency vector does not match class count")
    if abs(freq.sum() - 1.0) > 1e-9:
        raise ContractError("frequencies must sum to 1 over present classes")
    ious = np.array([s[0] for s in scores])
    accs = np.array([s[1] for s in scores])
    return float(freq @ ious), float(freq @ accs)


def f_weighted_from_scores(scores: SegmentationScores):
    present = scores.present()
    pairs = [(c.iou, c.acc) for c in present]
    return f_weighted(pairs, scores.gt_frequencies())


# -- report rendering --------------------------------------------------------------


def render_report(data, indent=0):
    """Nested key-value text rendering (stable key order as given)."""
    lines = []
    pad = "  " * indent
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.append(render_report(value, indent + 1))
        elif isinstance(value, (list, tuple)) and value and isinstance(value[0], dict):
            lines.append(f"{pad}{key}:")
            for row in value:
                inner = ", ".join(f"{k}={_fmt(v)}" for k, v in row.items())
                lines.append(f"{pad}  - {inner}")
        else:
            lines.append(f"{pad}{key}: {_fmt(value)}")
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return "n/a"
    return str(v)


def per_class_rows(scores: SegmentationScores):
    return [
        {
            "class_id": c.class_id,
            "name": c.name,
            "iou": c.iou,
            "acc": c.acc,
            "gt_count": c.gt_count,
            "pred_count": c.pred_count,
        }
        for c in scores.per_class
    ]


def write_class_csv(path, scores: SegmentationScores):
    rows = per_class_rows(scores)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
