"""Evaluation: panoptic quality for segmentation, identity transfer and
F1 confusion scores for temporal re-identification."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .cloud import SceneAnnotation, TemporalAssociation
from .errors import ConfigError, ValidationError


# ---------------------------------------------------------------------------
# instance matching / panoptic quality


@dataclass
class InstanceMatching:
    tp: list[tuple[int, int, float]]  # (pred index, gt index, IoU)
    fp: list[int]
    fn: list[int]


def _pair_ious(pred_ids: np.ndarray, gt_ids: np.ndarray):
    """IoU for every overlapping (pred, gt) instance pair, from one
    contingency pass over the joint label array."""
    pred_sizes = np.bincount(pred_ids[pred_ids >= 0]) if (pred_ids >= 0).any() else np.zeros(0, int)
    gt_sizes = np.bincount(gt_ids[gt_ids >= 0]) if (gt_ids >= 0).any() else np.zeros(0, int)
    both = (pred_ids >= 0) & (gt_ids >= 0)
    n_gt = len(gt_sizes)
    joint = pred_ids[both].astype(np.int64) * max(n_gt, 1) + gt_ids[both]
    pairs, inter = np.unique(joint, return_counts=True)
    out = []
    for key, count in zip(pairs, inter):
        p, g = int(key) // max(n_gt, 1), int(key) % max(n_gt, 1)
        union = pred_sizes[p] + gt_sizes[g] - count
        out.append((p, g, float(count) / float(union)))
    return out, len(pred_sizes), n_gt


def match_instances(
    pred: SceneAnnotation,
    gt: SceneAnnotation,
    n_points: int,
    *,
    iou_threshold: float = 0.5,
) -> InstanceMatching:
    """Pair predicted and ground-truth instances by point-set IoU.

    Above 0.5 a pairing of IoU > threshold is necessarily one-to-one; at or
    below 0.5 pairs are accepted greedily by descending IoU.
    """
    if not (0.0 <= iou_threshold < 1.0):
        raise ConfigError("iou_threshold must be in [0, 1)")
    pred_ids = pred.instance_ids(n_points)
    gt_ids = gt.instance_ids(n_points)
    overlaps, n_pred, n_gt = _pair_ious(pred_ids, gt_ids)
    n_pred = max(n_pred, len(pred.instances))
    n_gt = max(n_gt, len(gt.instances))
    tp: list[tuple[int, int, float]] = []
    used_p, used_g = set(), set()
    if iou_threshold > 0.5:
        for p, g, iou in overlaps:
            if iou > iou_threshold:
                tp.append((p, g, iou))
                used_p.add(p)
                used_g.add(g)
    else:
        for p, g, iou in sorted(overlaps, key=lambda t: (-t[2], t[0], t[1])):
            if iou > iou_threshold and p not in used_p and g not in used_g:
                tp.append((p, g, iou))
                used_p.add(p)
                used_g.add(g)
    fp = [p for p in range(n_pred) if p not in used_p]
    fn = [g for g in range(n_gt) if g not in used_g]
    return InstanceMatching(tp, fp, fn)


@dataclass
class ClassPanoptic:
    iou: float
    sq: float
    rq: float
    pq: float
    tp: int
    fp: int
    fn: int
    semantic_iou: float
    degenerate: bool = False


@dataclass
class PanopticReport:
    fruit: ClassPanoptic
    background: ClassPanoptic
    average: ClassPanoptic


def _semantic_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    union = int(np.count_nonzero(pred_mask | gt_mask))
    if union == 0:
        return 0.0
    return float(np.count_nonzero(pred_mask & gt_mask)) / union


def panoptic_quality(
    pred: SceneAnnotation,
    gt: SceneAnnotation,
    *,
    iou_threshold: float = 0.5,
) -> PanopticReport:
    """Segment-level quality for the fruit (things) and background (stuff)
    classes.  Background forms a single segment per annotation; the average
    row is the unweighted mean over the two classes."""
    n_points = len(pred.per_point_semantic)
    if len(gt.per_point_semantic) != n_points:
        raise ValidationError("annotations cover different point counts")

    matching = match_instances(pred, gt, n_points, iou_threshold=iou_threshold)
    tp_count, fp_count, fn_count = len(matching.tp), len(matching.fp), len(matching.fn)
    sq = float(np.mean([iou for _, _, iou in matching.tp])) if matching.tp else 0.0
    denom = tp_count + 0.5 * fp_count + 0.5 * fn_count
    degenerate = denom == 0
    rq = tp_count / denom if denom else 0.0
    pred_ids = pred.instance_ids(n_points)
    gt_ids = gt.instance_ids(n_points)
    fruit = ClassPanoptic(
        iou=sq, sq=sq, rq=rq, pq=sq * rq, tp=tp_count, fp=fp_count, fn=fn_count,
        semantic_iou=_semantic_iou(pred_ids >= 0, gt_ids >= 0), degenerate=degenerate,
    )

    pred_bg = pred_ids < 0
    gt_bg = gt_ids < 0
    bg_iou = _semantic_iou(pred_bg, gt_bg)
    has_pred = bool(pred_bg.any())
    has_gt = bool(gt_bg.any())
    if has_pred and has_gt:
        bg_tp, bg_fp, bg_fn = (1, 0, 0) if bg_iou > iou_threshold else (0, 1, 1)
    else:
        bg_tp = 0
        bg_fp = int(has_pred)
        bg_fn = int(has_gt)
    bg_denom = bg_tp + 0.5 * bg_fp + 0.5 * bg_fn
    bg_sq = bg_iou if bg_tp else 0.0
    bg_rq = bg_tp / bg_denom if bg_denom else 0.0
    background = ClassPanoptic(
        iou=bg_sq, sq=bg_sq, rq=bg_rq, pq=bg_sq * bg_rq, tp=bg_tp, fp=bg_fp, fn=bg_fn,
        semantic_iou=bg_iou, degenerate=bg_denom == 0,
    )

    average = ClassPanoptic(
        iou=(fruit.iou + background.iou) / 2,
        sq=(fruit.sq + background.sq) / 2,
        rq=(fruit.rq + background.rq) / 2,
        pq=(fruit.pq + background.pq) / 2,
        tp=fruit.tp + background.tp,
        fp=fruit.fp + background.fp,
        fn=fruit.fn + background.fn,
        semantic_iou=(fruit.semantic_iou + background.semantic_iou) / 2,
        degenerate=fruit.degenerate or background.degenerate,
    )
    return PanopticReport(fruit, background, average)


# ---------------------------------------------------------------------------
# identity transfer and matching confusion


def instance_adoption(
    pred: SceneAnnotation,
    gt: SceneAnnotation,
    *,
    iou_threshold: float = 0.5,
) -> dict[int, int]:
    """Map each predicted instance to the ground-truth instance it stands
    for, if any.

    Every ground-truth instance picks its highest-IoU predicted instance
    above the threshold; a predicted instance claimed twice goes to the
    claimant with the higher IoU and the loser ends up unrepresented.
    """
    n_points = len(pred.per_point_semantic)
    pred_ids = pred.instance_ids(n_points)
    gt_ids = gt.instance_ids(len(gt.per_point_semantic))
    if gt_ids.shape != pred_ids.shape:
        raise ValidationError("annotations cover different point counts")
    overlaps, _, _ = _pair_ious(pred_ids, gt_ids)

    best_for_gt: dict[int, tuple[float, int]] = {}
    for p, g, iou in overlaps:
        if iou > iou_threshold:
            cur = best_for_gt.get(g)
            if cur is None or (iou, -p) > (cur[0], -cur[1]):
                best_for_gt[g] = (iou, p)
    claim: dict[int, tuple[float, int]] = {}
    for g, (iou, p) in sorted(best_for_gt.items()):
        cur = claim.get(p)
        if cur is None or (iou, -g) > (cur[0], -cur[1]):
            claim[p] = (iou, g)
    return {p: g for p, (_, g) in sorted(claim.items())}


def transfer_ids(
    pred: SceneAnnotation,
    gt: SceneAnnotation,
    gt_assoc: TemporalAssociation,
    *,
    iou_threshold: float = 0.5,
) -> TemporalAssociation:
    """Adopt ground-truth associations onto predicted instances.

    Predicted instances inherit the association of the ground-truth
    instance they stand for (see :func:`instance_adoption`); every
    predicted instance receives an entry and unrepresented ones map to
    no-match.
    """
    adoption = instance_adoption(pred, gt, iou_threshold=iou_threshold)
    pairs: dict[int, int | None] = {p: None for p in range(len(pred.instances))}
    for p, g in adoption.items():
        if g not in gt_assoc.pairs:
            raise ValidationError(f"ground-truth association lacks instance {g}")
        pairs[p] = gt_assoc.pairs[g]
    return TemporalAssociation(pairs)


@dataclass
class MatchConfusion:
    cm: int = 0  # correct match
    mm: int = 0  # wrong previous identity
    fm: int = 0  # matched but should be new
    tn: int = 0  # correctly new
    fn: int = 0  # should have matched, predicted new

    def __add__(self, other: "MatchConfusion") -> "MatchConfusion":
        return MatchConfusion(self.cm + other.cm, self.mm + other.mm,
                              self.fm + other.fm, self.tn + other.tn, self.fn + other.fn)


def matching_confusion(pred, gt) -> MatchConfusion:
    """Confusion counts between two associations over the same instance set.
    Accepts ``TemporalAssociation`` or plain ``{instance: target}`` dicts
    (targets compared by equality; ``None`` means new fruit)."""
    pred_pairs = getattr(pred, "pairs", pred)
    gt_pairs = getattr(gt, "pairs", gt)
    if set(pred_pairs) != set(gt_pairs):
        raise ValidationError("associations cover different instance sets")
    conf = MatchConfusion()
    for key, want in gt_pairs.items():
        got = pred_pairs[key]
        if want is None:
            if got is None:
                conf.tn += 1
            else:
                conf.fm += 1
        elif got is None:
            conf.fn += 1
        elif got == want:
            conf.cm += 1
        else:
            conf.mm += 1
    return conf


@dataclass
class F1Report:
    f1_positive: float
    f1_negative: float
    mf1: float
    degenerate_positive: bool = False
    degenerate_negative: bool = False


def f1_scores(conf: MatchConfusion) -> F1Report:
    """F1 of the matched class, F1 of the new-fruit class, and their mean.
    A zero denominator scores 0 and raises the corresponding flag."""
    pos_denom = 2 * conf.cm + conf.mm + conf.fm + conf.fn
    neg_denom = 2 * conf.tn + conf.fm + conf.fn
    f1p = 2 * conf.cm / pos_denom if pos_denom else 0.0
    f1n = 2 * conf.tn / neg_denom if neg_denom else 0.0
    return F1Report(f1p, f1n, (f1p + f1n) / 2.0, pos_denom == 0, neg_denom == 0)


def reid_grid_report(
    pred_seg: SceneAnnotation,
    gt_seg: SceneAnnotation,
    gt_assoc: TemporalAssociation,
    pred_assoc: TemporalAssociation,
    thresholds: list[float],
) -> list[dict]:
    """Re-identification scores of one scene over a grid of IoU thresholds
    used for identity transfer."""
    rows = []
    for thr in thresholds:
        gt_on_pred = transfer_ids(pred_seg, gt_seg, gt_assoc, iou_threshold=thr)
        conf = matching_confusion(pred_assoc, gt_on_pred)
        f1 = f1_scores(conf)
        rows.append({
            "iou_threshold": float(thr),
            "f1_positive": f1.f1_positive,
            "f1_negative": f1.f1_negative,
            "mf1": f1.mf1,
            "cm": conf.cm, "mm": conf.mm, "fm": conf.fm, "tn": conf.tn, "fn": conf.fn,
        })
    return rows


def reid_grid_aggregate(
    scenes: list[tuple[SceneAnnotation, SceneAnnotation, TemporalAssociation, TemporalAssociation]],
    thresholds: list[float],
) -> list[dict]:
    """Like :func:`reid_grid_report` but confusion counts are summed over
    scenes before scoring.  Each item is (pred seg, gt seg, gt association,
    predicted association)."""
    rows = []
    for thr in thresholds:
        total = MatchConfusion()
        for pred_seg, gt_seg, gt_assoc, pred_assoc in scenes:
            gt_on_pred = transfer_ids(pred_seg, gt_seg, gt_assoc, iou_threshold=thr)
            total = total + matching_confusion(pred_assoc, gt_on_pred)
        f1 = f1_scores(total)
        rows.append({
            "iou_threshold": float(thr),
            "f1_positive": f1.f1_positive,
            "f1_negative": f1.f1_negative,
            "mf1": f1.mf1,
            "cm": total.cm, "mm": total.mm, "fm": total.fm, "tn": total.tn, "fn": total.fn,
        })
    return rows


# ---------------------------------------------------------------------------
# report serialization

_SEG_FIELDS = ("iou", "sq", "rq", "pq", "tp", "fp", "fn", "semantic_iou", "degenerate")


def seg_report_dict(report: PanopticReport) -> dict:
    def row(c: ClassPanoptic) -> dict:
        return {k: getattr(c, k) for k in _SEG_FIELDS}

    return {"fruit": row(report.fruit), "background": row(report.background),
            "average": row(report.average)}


def write_seg_csv(path, report: PanopticReport) -> None:
    data = seg_report_dict(report)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("class",) + _SEG_FIELDS)
        for name in ("fruit", "background", "average"):
            row = data[name]
            writer.writerow([name] + [row[k] for k in _SEG_FIELDS])


_MATCH_FIELDS = ("iou_threshold", "f1_positive", "f1_negative", "mf1",
                 "cm", "mm", "fm", "tn", "fn")


def match_report_dict(rows: list[dict]) -> dict:
    out = {"thresholds": rows}
    if rows:
        out["average"] = {
            "f1_positive": float(np.mean([r["f1_positive"] for r in rows])),
            "f1_negative": float(np.mean([r["f1_negative"] for r in rows])),
            "mf1": float(np.mean([r["mf1"] for r in rows])),
        }
    return out


def write_match_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MATCH_FIELDS)
        for row in rows:
            writer.writerow([row[k] for k in _MATCH_FIELDS])
        if rows:
            avg = match_report_dict(rows)["average"]
            writer.writerow(["average", avg["f1_positive"], avg["f1_negative"],
                             avg["mf1"], "", "", "", "", ""])


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
