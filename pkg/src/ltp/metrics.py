"""Lane-topology evaluation metrics.

Four base scores and an aggregate: lane-detection AP over a set of
Fréchet-distance thresholds, traffic-element AP averaged over attribute
classes with IoU matching, and two topology APs over matched lane-lane
and lane-element relations. The aggregate averages the detection scores
with the square roots of the topology scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .frechet import discrete_frechet

LANE_THRESHOLDS_M = (1.0, 1.5, 2.0, 3.0)
TOP_LANE_THRESHOLD_M = 2.0
TE_IOU_THRESHOLD = 0.75


@dataclass(frozen=True)
class LaneCenterline:
    """3D lane centerline in the ego frame; ground truth has confidence 1."""

    points: np.ndarray  # (n, 3) meters
    confidence: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 3:
            raise ValueError("lane centerline needs >= 2 3D points")
        if not np.isfinite(pts).all():
            raise ValueError("lane centerline has non-finite coordinates")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class TrafficElement:
    """Image-frame detection with an attribute class (e.g. turn-left)."""

    bbox: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max pixels
    attribute: str | int
    confidence: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class TopologySet:
    """Lanes, traffic elements, and their relations for one frame."""

    lanes: list[LaneCenterline] = field(default_factory=list)
    elements: list[TrafficElement] = field(default_factory=list)
    lane_adjacency: list[tuple[int, int, float]] = field(default_factory=list)
    lane_te_assoc: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        self._check_pairs(self.lane_adjacency, len(self.lanes), len(self.lanes), "lane adjacency")
        self._check_pairs(self.lane_te_assoc, len(self.lanes), len(self.elements), "lane-TE association")

    @staticmethod
    def _check_pairs(pairs, n_left, n_right, label):
        seen = set()
        for i, j, conf in pairs:
            if not (0 <= i < n_left and 0 <= j < n_right):
                raise ValueError(f"{label} pair ({i}, {j}) out of range")
            if (i, j) in seen:
                raise ValueError(f"duplicate {label} pair ({i}, {j})")
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"{label} confidence {conf} outside [0, 1]")
            seen.add((i, j))


def iou(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    """Intersection over union of two axis-aligned boxes."""
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    if ix0 >= ix1 or iy0 >= iy1:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def average_precision(decisions: list[bool], n_gt: int) -> float:
    """AP of confidence-ranked true/false-positive decisions.

    ``decisions`` must already be in descending confidence order. Uses
    all-point interpolation: precision at each recall level is the
    maximum precision at any recall >= that level. With no ground truth,
    an empty prediction list is perfect (1.0) and any prediction is a
    false positive (0.0).
    """
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return 1.0 if not decisions else 0.0
    if not decisions:
        return 0.0
    tp = np.cumsum(np.asarray(decisions, dtype=np.float64))
    ranks = np.arange(1, len(decisions) + 1, dtype=np.float64)
    recall = tp / n_gt
    precision = tp / ranks

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class LaneMatching:
    """Greedy one-to-one matching of predicted to ground-truth lanes."""

    pairs: dict[int, int]  # pred idx -> gt idx
    decisions: list[bool]  # TP flags in descending-confidence order
    order: list[int]  # pred idxs in that order
    n_gt: int


def _confidence_order(confidences: list[float]) -> list[int]:
    # ties in confidence break by ascending instance index
    return sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))


def frechet_matrix(preds: list[LaneCenterline], gts: list[LaneCenterline]) -> np.ndarray:
    mat = np.empty((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            mat[i, j] = discrete_frechet(p.points, g.points)
    return mat


def match_lanes(
    preds: list[LaneCenterline],
    gts: list[LaneCenterline],
    threshold: float,
    distances: np.ndarray | None = None,
) -> LaneMatching:
    """Match predictions to ground truth within a Fréchet threshold.

    Predictions are visited in descending confidence; each takes the
    nearest still-unmatched ground-truth lane within ``threshold``
    (distance ties break by ascending ground-truth index). A precomputed
    distance matrix may be passed to share work across thresholds.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if distances is None:
        distances = frechet_matrix(preds, gts)
    order = _confidence_order([p.confidence for p in preds])
    taken = set()
    pairs: dict[int, int] = {}
    decisions: list[bool] = []
    for i in order:
        best_j = -1
        best_d = math.inf
        for j in range(len(gts)):
            if j in taken:
                continue
            d = distances[i, j]
            if d <= threshold and d < best_d:
                best_d = d
                best_j = j
        if best_j >= 0:
            taken.add(best_j)
            pairs[i] = best_j
            decisions.append(True)
        else:
            decisions.append(False)
    return LaneMatching(pairs=pairs, decisions=decisions, order=order, n_gt=len(gts))


@dataclass
class ElementMatching:
    """Greedy class-aware IoU matching of predicted traffic elements."""

    pairs: dict[int, int]  # pred idx -> gt idx
    per_class: dict[str, tuple[list[bool], int]]  # class -> (decisions, n_gt)


def _class_key(attribute) -> str:
    return str(attribute)


def match_elements(
    preds: list[TrafficElement],
    gts: list[TrafficElement],
    iou_threshold: float = TE_IOU_THRESHOLD,
) -> ElementMatching:
    """Match elements within attribute classes at an IoU threshold."""
    classes = sorted(
        {_class_key(e.attribute) for e in preds} | {_class_key(e.attribute) for e in gts}
    )
    pairs: dict[int, int] = {}
    per_class: dict[str, tuple[list[bool], int]] = {}
    for cls in classes:
        p_idx = [i for i, e in enumerate(preds) if _class_key(e.attribute) == cls]
        g_idx = [j for j, e in enumerate(gts) if _class_key(e.attribute) == cls]
        order = _confidence_order([preds[i].confidence for i in p_idx])
        taken = set()
        decisions: list[bool] = []
        for oi in order:
            i = p_idx[oi]
            best_j = -1
            best_iou = -1.0
            for j in g_idx:  # ascending index, so IoU ties keep the first
                if j in taken:
                    continue
                value = iou(preds[i].bbox, gts[j].bbox)
                if value >= iou_threshold and value > best_iou:
                    best_iou = value
                    best_j = j
            if best_j >= 0:
                taken.add(best_j)
                pairs[i] = best_j
                decisions.append(True)
            else:
                decisions.append(False)
        per_class[cls] = (decisions, len(g_idx))
    return ElementMatching(pairs=pairs, per_class=per_class)


def det_l(
    pred: TopologySet,
    gt: TopologySet,
    thresholds: tuple[float, ...] = LANE_THRESHOLDS_M,
    distances: np.ndarray | None = None,
) -> tuple[float, dict[float, float]]:
    """Lane-detection AP averaged over Fréchet thresholds."""
    if not thresholds:
        raise ValueError("need at least one matching threshold")
    if distances is None:
        distances = frechet_matrix(pred.lanes, gt.lanes)
    per_threshold = {}
    for thr in thresholds:
        matching = match_lanes(pred.lanes, gt.lanes, thr, distances=distances)
        per_threshold[thr] = average_precision(matching.decisions, matching.n_gt)
    return sum(per_threshold.values()) / len(per_threshold), per_threshold


def det_t(
    pred: TopologySet,
    gt: TopologySet,
    iou_threshold: float = TE_IOU_THRESHOLD,
) -> tuple[float, dict[str, float]]:
    """Traffic-element AP averaged over attribute classes.

    Classes are the union of attributes seen in either set; a frame with
    no elements on either side scores 1.0 vacuously.
    """
    matching = match_elements(pred.elements, gt.elements, iou_threshold)
    if not matching.per_class:
        return 1.0, {}
    per_class = {
        cls: average_precision(decisions, n_gt)
        for cls, (decisions, n_gt) in matching.per_class.items()
    }
    return sum(per_class.values()) / len(per_class), per_class


def _relation_ap(
    pred_relations: list[tuple[int, int, float]],
    gt_relations: list[tuple[int, int, float]],
    left_map: dict[int, int],
    right_map: dict[int, int],
) -> float:
    """AP over predicted relation edges under instance matchings.

    A predicted edge is a true positive iff both endpoints are matched
    and the mapped edge exists in the ground truth; every ground-truth
    edge counts toward the denominator, so edges with unmatched
    endpoints are unreachable false negatives.
    """
    gt_edges = {(i, j) for i, j, _ in gt_relations}
    order = sorted(
        range(len(pred_relations)),
        key=lambda k: (-pred_relations[k][2], pred_relations[k][0], pred_relations[k][1]),
    )
    decisions = []
    for k in order:
        i, j, _ = pred_relations[k]
        mapped = (left_map.get(i), right_map.get(j))
        decisions.append(
            mapped[0] is not None and mapped[1] is not None and mapped in gt_edges
        )
    return average_precision(decisions, len(gt_edges))


def top_ll(pred: TopologySet, gt: TopologySet, lane_matching: LaneMatching) -> float:
    """AP of predicted lane-lane connectivity over matched lanes."""
    return _relation_ap(
        pred.lane_adjacency, gt.lane_adjacency, lane_matching.pairs, lane_matching.pairs
    )


def top_lt(
    pred: TopologySet,
    gt: TopologySet,
    lane_matching: LaneMatching,
    te_matching: ElementMatching,
) -> float:
    """AP of predicted lane to traffic-element associations."""
    return _relation_ap(
        pred.lane_te_assoc, gt.lane_te_assoc, lane_matching.pairs, te_matching.pairs
    )


def ols(det_l: float, det_t: float, top_ll: float, top_lt: float) -> float:
    """Aggregate score: (DET_l + DET_t + sqrt(TOP_ll) + sqrt(TOP_lt)) / 4.

    Equal weights with square roots on the topology terms; the square
    root lifts the typically small topology scores onto a comparable
    scale. Inputs must lie in [0, 1].
    """
    values = (det_l, det_t, top_ll, top_lt)
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"metric value {v} outside [0, 1]")
    return (det_l + det_t + math.sqrt(top_ll) + math.sqrt(top_lt)) / 4.0


@dataclass
class FrameMetrics:
    det_l: float
    det_t: float
    top_ll: float
    top_lt: float
    ols: float
    det_l_per_threshold: dict[float, float]
    det_t_per_class: dict[str, float]
    lane_pairs: dict[int, int]
    te_pairs: dict[int, int]


def evaluate_frame(
    pred: TopologySet,
    gt: TopologySet,
    lane_thresholds: tuple[float, ...] = LANE_THRESHOLDS_M,
    te_iou_threshold: float = TE_IOU_THRESHOLD,
    top_lane_threshold: float = TOP_LANE_THRESHOLD_M,
) -> FrameMetrics:
    """All five metrics for one frame, sharing matching work."""
    distances = frechet_matrix(pred.lanes, gt.lanes)
    detl, per_thr = det_l(pred, gt, lane_thresholds, distances=distances)
    dett, per_cls = det_t(pred, gt, te_iou_threshold)
    lane_matching = match_lanes(pred.lanes, gt.lanes, top_lane_threshold, distances=distances)
    te_matching = match_elements(pred.elements, gt.elements, te_iou_threshold)
    topll = top_ll(pred, gt, lane_matching)
    toplt = top_lt(pred, gt, lane_matching, te_matching)
    return FrameMetrics(
        det_l=detl,
        det_t=dett,
        top_ll=topll,
        top_lt=toplt,
        ols=ols(detl, dett, topll, toplt),
        det_l_per_threshold=per_thr,
        det_t_per_class=per_cls,
        lane_pairs=lane_matching.pairs,
        te_pairs=te_matching.pairs,
    )
