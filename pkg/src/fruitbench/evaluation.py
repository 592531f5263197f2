"""Detection metrics: greedy IoU matching, precision-recall construction,
and per-category mAP / AP50 / mAR.

Protocol (the standard benchmark conventions, spelled out because every
number downstream depends on them):

* detections are processed in descending score order, ties broken by input
  order (stable sort); per image and category only the ``max_dets``
  highest-scoring detections are kept;
* a detection matches the not-yet-matched ground-truth box with the highest
  IoU if that IoU reaches the threshold (ties on IoU go to the earliest
  ground-truth instance); crowd regions may be matched repeatedly and count
  as neither true positives nor false negatives, and detections whose only
  qualifying overlap is a crowd region are dropped from the sweep;
* AP at a threshold is the mean of the right-envelope interpolated
  precision sampled at the 101 recall levels 0.00, 0.01, ..., 1.00 over the
  global score-sorted sweep (images in ascending-id order feed the sort);
* AR at a threshold is the recall achieved under the detection cap;
* mAP / mAR average the 10 thresholds 0.50:0.05:0.95, AP50 is AP at 0.50;
  aggregate values are unweighted means over categories that have ground
  truth in the evaluated split.

A category with no ground truth in the split reports absent metrics when
it also has no detections and zeros otherwise; either way it is excluded
from the aggregate means.
"""

from __future__ import annotations

from bisect import bisect_left
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

from .datamodel import Detection, DetectionDataset, GroundTruthInstance
from .errors import IntegrityError, ValidationError
from .geometry import iou
from .splits import SplitResult

__all__ = [
    "RECALL_LEVELS",
    "DEFAULT_IOU_THRESHOLDS",
    "EvalConfig",
    "DetMatch",
    "PRCurve",
    "CategoryReport",
    "EvaluationReport",
    "match_detections",
    "average_precision",
    "evaluate",
    "evaluate_rec",
    "attribute_predicate",
    "report_to_dict",
]

RECALL_LEVELS: tuple[float, ...] = tuple(i / 100 for i in range(101))
DEFAULT_IOU_THRESHOLDS: tuple[float, ...] = tuple((50 + 5 * i) / 100 for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    max_dets: int = 100
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(self.iou_thresholds))
        if not self.iou_thresholds:
            raise ValidationError("at least one IoU threshold is required")
        for t in self.iou_thresholds:
            if not (0.0 < t <= 1.0):
                raise ValidationError(f"IoU thresholds must lie in (0, 1], got {t!r}")
        if list(self.iou_thresholds) != sorted(self.iou_thresholds):
            raise ValidationError("IoU thresholds must be ascending")
        if self.max_dets < 1:
            raise ValidationError(f"max_dets must be >= 1, got {self.max_dets!r}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers!r}")


@dataclass(frozen=True)
class DetMatch:
    """One detection's outcome at a threshold. ``ignored`` marks crowd
    matches, which never enter the precision-recall sweep."""

    detection: Detection
    gt_instance_id: int | None
    is_tp: bool
    ignored: bool


@dataclass(frozen=True)
class PRCurve:
    """Raw sweep points plus the 101-level interpolated precision, which is
    monotone non-increasing by construction."""

    points: tuple[tuple[float, float], ...]  # (recall, precision)
    interpolated: tuple[float, ...]


@dataclass(frozen=True)
class CategoryReport:
    category_id: int
    name: str
    num_gt: int
    num_detections: int
    per_threshold_ap: tuple[float | None, ...]
    per_threshold_ar: tuple[float | None, ...]
    map: float | None
    ap50: float | None
    mar: float | None
    pr_curve_50: PRCurve | None = field(default=None, compare=False)


@dataclass(frozen=True)
class EvaluationReport:
    per_category: tuple[CategoryReport, ...]
    mean_ap: float | None
    mean_ap50: float | None
    mean_ar: float | None
    iou_thresholds: tuple[float, ...]
    max_dets: int
    num_detections_used: int
    num_detections_ignored: int
    num_gt: int
    split_digest: str | None = None
    prompt: str | None = None


def _sorted_by_score(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)  # stable: input order breaks ties


def _match_with_matrix(dets, gts, ious, threshold) -> list[DetMatch]:
    taken = [False] * len(gts)
    out = []
    for di, det in enumerate(dets):
        best = -1
        best_iou = -1.0
        for gi, gt in enumerate(gts):
            if gt.iscrowd or taken[gi]:
                continue
            if ious[di][gi] > best_iou:
                best_iou = ious[di][gi]
                best = gi
        if best >= 0 and best_iou >= threshold:
            taken[best] = True
            out.append(DetMatch(det, gts[best].id, is_tp=True, ignored=False))
            continue
        crowd_hit = None
        for gi, gt in enumerate(gts):
            if gt.iscrowd and ious[di][gi] >= threshold:
                crowd_hit = gt.id
                break
        if crowd_hit is not None:
            out.append(DetMatch(det, crowd_hit, is_tp=False, ignored=True))
        else:
            out.append(DetMatch(det, None, is_tp=False, ignored=False))
    return out


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruthInstance], threshold: float
) -> list[DetMatch]:
    """Greedy matching of one image/category cell at one threshold."""
    if not (0.0 < threshold <= 1.0):
        raise ValidationError(f"IoU threshold must lie in (0, 1], got {threshold!r}")
    ordered = _sorted_by_score(dets)
    ious = [[iou(d.box, g.box) for g in gts] for d in ordered]
    return _match_with_matrix(ordered, list(gts), ious, threshold)


def average_precision(
    matches: Sequence[DetMatch], total_gt: int
) -> tuple[float | None, PRCurve | None]:
    """AP of one category at one threshold from its pooled match rows.

    ``matches`` must be the concatenation over images in ascending image-id
    order; the global sweep re-sorts stably by descending score. With no
    ground truth the metric is absent unless detections exist, in which
    case it is 0.
    """
    if total_gt < 0:
        raise ValidationError("total_gt must be non-negative")
    swept = _sorted_by_score_matches(matches)
    if total_gt == 0:
        # Absent only with no detections at all; crowd-ignored detections
        # still count as "having detections" and pin the metric to 0.
        if not matches:
            return None, None
        return 0.0, PRCurve(points=(), interpolated=(0.0,) * len(RECALL_LEVELS))
    tp = 0
    fp = 0
    precisions: list[float] = []
    recalls: list[float] = []
    for m in swept:
        if m.is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / total_gt)
    envelope = list(precisions)
    for k in range(len(envelope) - 2, -1, -1):
        if envelope[k + 1] > envelope[k]:
            envelope[k] = envelope[k + 1]
    interpolated = []
    for level in RECALL_LEVELS:
        k = bisect_left(recalls, level)
        interpolated.append(envelope[k] if k < len(envelope) else 0.0)
    ap = sum(interpolated) / len(RECALL_LEVELS)
    curve = PRCurve(points=tuple(zip(recalls, precisions)), interpolated=tuple(interpolated))
    return ap, curve


def _sorted_by_score_matches(matches: Sequence[DetMatch]) -> list[DetMatch]:
    return [m for m in sorted(matches, key=lambda m: -m.detection.score) if not m.ignored]


def _category_cells(ds, test_ids, dets, max_dets):
    """Per-category prepared cells: capped score-sorted detections, ground
    truth and the IoU matrix, reusable across thresholds."""
    gts_cell: dict[tuple[int, int], list[GroundTruthInstance]] = {}
    for image_id in test_ids:
        for inst in ds.instances_for_image(image_id):
            gts_cell.setdefault((inst.category_id, image_id), []).append(inst)
    dets_cell: dict[tuple[int, int], list[Detection]] = {}
    for det in dets:
        dets_cell.setdefault((det.category_id, det.image_id), []).append(det)

    cells: dict[int, list[tuple]] = {cat.id: [] for cat in ds.categories}
    keys = set(gts_cell) | set(dets_cell)
    for cat_id, image_id in sorted(keys):
        if cat_id not in cells:
            raise IntegrityError(f"detection references unknown category {cat_id}")
        gts = gts_cell.get((cat_id, image_id), [])
        capped = _sorted_by_score(dets_cell.get((cat_id, image_id), []))[:max_dets]
        ious = [[iou(d.box, g.box) for g in gts] for d in capped]
        cells[cat_id].append((image_id, capped, gts, ious))
    return cells


def _category_threshold(cells, threshold, total_gt):
    """(ap, curve, recall) of one category at one threshold."""
    pooled: list[DetMatch] = []
    tp_count = 0
    for _, capped, gts, ious in cells:
        rows = _match_with_matrix(capped, gts, ious, threshold)
        tp_count += sum(1 for r in rows if r.is_tp)
        pooled.extend(rows)
    ap, curve = average_precision(pooled, total_gt)
    if total_gt == 0:
        recall = None if ap is None else 0.0
    else:
        recall = tp_count / total_gt
    return ap, curve, recall


def evaluate(
    ds: DetectionDataset,
    split: SplitResult,
    dets: Sequence[Detection],
    config: EvalConfig = EvalConfig(),
) -> EvaluationReport:
    """Score detections against the test portion of a split.

    Detections referencing images outside the test split are ignored and
    counted. Raises on an empty test split.
    """
    test_ids = sorted(split.test_image_ids)
    if not test_ids:
        raise ValidationError("empty test split")
    for image_id in test_ids:
        ds.image(image_id)
    test_set = set(test_ids)
    used = [d for d in dets if d.image_id in test_set]
    ignored = len(dets) - len(used)
    cells = _category_cells(ds, test_ids, used, config.max_dets)

    totals = {}
    det_counts = {}
    for cat in ds.categories:
        totals[cat.id] = sum(
            sum(1 for g in gts if not g.iscrowd) for _, _, gts, _ in cells[cat.id]
        )
        det_counts[cat.id] = sum(len(capped) for _, capped, _, _ in cells[cat.id])

    tasks = [(cat.id, t) for cat in ds.categories for t in config.iou_thresholds]

    def run(task):
        cat_id, threshold = task
        return _category_threshold(cells[cat_id], threshold, totals[cat_id])

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = dict(zip(tasks, pool.map(run, tasks)))
    else:
        outcomes = {task: run(task) for task in tasks}

    rows = []
    for cat in ds.categories:
        aps = []
        ars = []
        curve_50 = None
        for t in config.iou_thresholds:
            ap, curve, recall = outcomes[(cat.id, t)]
            aps.append(ap)
            ars.append(recall)
            if t == 0.5:
                curve_50 = curve
        if totals[cat.id] == 0 and det_counts[cat.id] == 0:
            map_value = ap50 = mar = None
        else:
            map_value = sum(aps) / len(aps)
            ap50 = aps[config.iou_thresholds.index(0.5)] if 0.5 in config.iou_thresholds else None
            mar = sum(ars) / len(ars)
        rows.append(
            CategoryReport(
                category_id=cat.id,
                name=cat.name,
                num_gt=totals[cat.id],
                num_detections=det_counts[cat.id],
                per_threshold_ap=tuple(aps),
                per_threshold_ar=tuple(ars),
                map=map_value,
                ap50=ap50,
                mar=mar,
                pr_curve_50=curve_50,
            )
        )

    scored = [r for r in rows if r.num_gt > 0]
    mean_ap = sum(r.map for r in scored) / len(scored) if scored else None
    mean_ap50 = (
        sum(r.ap50 for r in scored) / len(scored)
        if scored and all(r.ap50 is not None for r in scored)
        else None
    )
    mean_ar = sum(r.mar for r in scored) / len(scored) if scored else None
    return EvaluationReport(
        per_category=tuple(rows),
        mean_ap=mean_ap,
        mean_ap50=mean_ap50,
        mean_ar=mean_ar,
        iou_thresholds=config.iou_thresholds,
        max_dets=config.max_dets,
        num_detections_used=len(used),
        num_detections_ignored=ignored,
        num_gt=sum(totals.values()),
        split_digest=split.manifest_digest,
    )


def attribute_predicate(spec: Mapping) -> Callable[[GroundTruthInstance], bool]:
    """Build a ground-truth filter from a small JSON-friendly description.

    Forms: ``{"any": true}``, or ``{"attribute": name, <op>: value}`` with
    one of the ops ``equals | not_equals | in | not_in``. A missing
    attribute compares as the empty string.
    """
    if spec.get("any"):
        return lambda inst: True
    attribute = spec.get("attribute")
    if not attribute:
        raise ValidationError(f"predicate needs an 'attribute' (or 'any': true): {spec!r}")
    ops = [op for op in ("equals", "not_equals", "in", "not_in") if op in spec]
    if len(ops) != 1:
        raise ValidationError(f"predicate needs exactly one operator: {spec!r}")
    op = ops[0]
    operand = spec[op]

    def value_of(inst: GroundTruthInstance) -> str:
        return inst.attributes.get(attribute, "")

    if op == "equals":
        return lambda inst: value_of(inst) == operand
    if op == "not_equals":
        return lambda inst: value_of(inst) != operand
    if op == "in":
        allowed = set(operand)
        return lambda inst: value_of(inst) in allowed
    excluded = set(operand)
    return lambda inst: value_of(inst) not in excluded


def evaluate_rec(
    ds: DetectionDataset,
    split: SplitResult,
    dets: Sequence[Detection],
    prompt_filters: Mapping[str, Callable[[GroundTruthInstance], bool]],
    config: EvalConfig = EvalConfig(),
) -> list[EvaluationReport]:
    """Prompt-conditioned evaluation.

    For each prompt, the ground truth is restricted to instances satisfying
    the prompt's predicate and only detections carrying that prompt are
    scored; the result is one report per prompt (sorted by prompt). Every
    prompt appearing on a detection must have a filter.
    """
    for det in dets:
        if det.prompt is None:
            raise ValidationError("REC evaluation requires a prompt on every detection")
        if det.prompt not in prompt_filters:
            raise ValidationError(f"unknown prompt {det.prompt!r}: no filter provided")
    reports = []
    for prompt in sorted(prompt_filters):
        predicate = prompt_filters[prompt]
        filtered = DetectionDataset(
            categories=list(ds.categories),
            images=list(ds.images),
            instances=[a for a in ds.instances if predicate(a)],
        )
        prompt_dets = [d for d in dets if d.prompt == prompt]
        report = evaluate(filtered, split, prompt_dets, config)
        reports.append(replace(report, prompt=prompt))
    return reports


def report_to_dict(report: EvaluationReport) -> dict:
    """JSON-friendly view of a report (the on-disk report schema)."""
    payload = {
        "per_category": {
            row.name: {
                "mAP": row.map,
                "AP50": row.ap50,
                "mAR": row.mar,
                "per_threshold_AP": list(row.per_threshold_ap),
                "per_threshold_AR": list(row.per_threshold_ar),
                "num_gt": row.num_gt,
                "num_detections": row.num_detections,
            }
            for row in report.per_category
        },
        "aggregate": {
            "mAP": report.mean_ap,
            "AP50": report.mean_ap50,
            "mAR": report.mean_ar,
        },
        "counts": {
            "detections_used": report.num_detections_used,
            "detections_ignored": report.num_detections_ignored,
            "ground_truth": report.num_gt,
        },
        "iou_thresholds": list(report.iou_thresholds),
        "max_dets": report.max_dets,
        "split_digest": report.split_digest,
    }
    if report.prompt is not None:
        payload["prompt"] = report.prompt
    return payload
