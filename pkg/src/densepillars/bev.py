"""Rotated-box geometry, greedy NMS, and average precision at 40 recall points."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import Box3D

_AREA_EPS = 1e-9


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(
        default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
    )
    nms_iou: float = 0.01
    mode: str = "BEV"  # BEV | 3D


@dataclass
class EvalResult:
    per_class_ap: dict
    mean_ap: float


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x = np.array([p[0] for p in poly])
    y = np.array([p[1] for p in poly])
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman: clip a polygon by a convex CCW polygon."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def inside(q):
            return ex * (q[1] - a[1]) - ey * (q[0] - a[0]) >= 0.0

        input_pts = output
        output = []
        for j, cur in enumerate(input_pts):
            prev = input_pts[j - 1]
            cur_in, prev_in = inside(cur), inside(prev)
            if cur_in != prev_in:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if abs(denom) > 1e-15:
                    t = (ex * (a[1] - prev[1]) - ey * (a[0] - prev[0])) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
    return output


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    area_a = a.w * a.l
    area_b = b.w * b.l
    if area_a < _AREA_EPS or area_b < _AREA_EPS:
        return 0.0
    half_diags = (math.hypot(a.w, a.l) + math.hypot(b.w, b.l)) / 2.0
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > half_diags:
        return 0.0
    inter = _polygon_area(
        _clip_polygon([tuple(p) for p in a.bev_corners()], [tuple(p) for p in b.bev_corners()])
    )
    union = area_a + area_b - inter
    if union < _AREA_EPS:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    area_a = a.w * a.l
    area_b = b.w * b.l
    if area_a < _AREA_EPS or area_b < _AREA_EPS:
        return 0.0
    z_lo = max(a.cz - a.h / 2, b.cz - b.h / 2)
    z_hi = min(a.cz + a.h / 2, b.cz + b.h / 2)
    dz = max(0.0, z_hi - z_lo)
    if dz == 0.0:
        return 0.0
    inter_bev = _polygon_area(
        _clip_polygon([tuple(p) for p in a.bev_corners()], [tuple(p) for p in b.bev_corners()])
    )
    inter = inter_bev * dz
    union = area_a * a.h + area_b * b.h - inter
    if union < _AREA_EPS:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms_bev(dets, iou_thr: float):
    """Greedy by descending score (ties by original index); class-wise suppression."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        d = dets[i]
        if all(
            k.label != d.label or rotated_iou_bev(d.box, k.box) <= iou_thr for k in kept
        ):
            kept.append(d)
    return kept


def _iou_fn(mode):
    return rotated_iou_bev if mode == "BEV" else iou_3d


def _match_frame(dets, gts, cls, iou_thr, mode):
    """Greedy per-frame matching; returns (score, is_tp) pairs for this class."""
    iou = _iou_fn(mode)
    cls_dets = [d for d in dets if d.label == cls]
    cls_gts = [b for b, c in gts if c == cls]
    order = sorted(range(len(cls_dets)), key=lambda i: (-cls_dets[i].score, i))
    taken = [False] * len(cls_gts)
    results = []
    for i in order:
        d = cls_dets[i]
        best, best_iou = -1, iou_thr
        for j, g in enumerate(cls_gts):
            if taken[j]:
                continue
            v = iou(d.box, g)
            if v > best_iou or (v == best_iou and v >= iou_thr and best == -1):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            results.append((d.score, True))
        else:
            results.append((d.score, False))
    return results, len(cls_gts)


def ap_r40(frames, cls: str, iou_thr: float, mode: str = "BEV") -> float | None:
    """AP over 40 recall positions; frames are (detections, labeled boxes) pairs.

    Returns None when the class has no ground truth.
    """
    scored = []
    n_gt = 0
    for dets, gts in frames:
        res, n = _match_frame(dets, gts, cls, iou_thr, mode)
        scored.extend(res)
        n_gt += n
    if n_gt == 0:
        return None
    scored.sort(key=lambda sc: -sc[0])
    tp = 0
    fp = 0
    precisions = []
    recalls = []
    for _, is_tp in scored:
        if is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    total = 0.0
    for i in range(1, 41):
        r = i / 40.0
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        total += best
    return total / 40.0


def evaluate_set(frames, cfg: EvalConfig) -> EvalResult:
    per_class = {}
    for cls, thr in cfg.iou_thresholds.items():
        ap = ap_r40(frames, cls, thr, mode=cfg.mode)
        if ap is None:
            warnings.warn(f"class {cls} has no ground truth; excluded from mAP")
        else:
            per_class[cls] = ap
    mean_ap = sum(per_class.values()) / len(per_class) if per_class else 0.0
    return EvalResult(per_class, mean_ap)
