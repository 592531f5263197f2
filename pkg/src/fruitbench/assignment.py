"""Optimal set matching between predictions and ground truth, plus the
composite matching loss evaluated on the matched sets.

The loss on a matched pair is the unweighted sum of three terms (weights
default to 1 each but stay configurable): an L1 distance over normalized
center-size box coordinates, a generalized-IoU regression term
``1 - giou``, and a contrastive classification term realized as per-token
sigmoid binary cross-entropy between a prediction's token-alignment logits
and the ground truth's positive-token mask. Losses are normalized by the
number of ground-truth instances; unmatched predictions contribute only
their contrastive penalty against the all-negative mask (on by default).

The solver is a hand-rolled Jonker-Volgenant style shortest-augmenting-path
algorithm rather than a library call: the assignment must be bit-identical
across platforms and library versions, including a pinned lexicographic
tie-break among equal-cost optima, which off-the-shelf solvers do not
promise. Optimality is cross-checked against brute-force enumeration in the
test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import GroundTruthInstance
from .errors import ValidationError
from .geometry import BoundingBox, giou, l1_box_distance

__all__ = [
    "CostMatrix",
    "Assignment",
    "TokenLogits",
    "LossWeights",
    "LossBreakdown",
    "hungarian",
    "token_alignment_cost",
    "build_match_cost",
    "set_loss",
]


@dataclass(frozen=True)
class CostMatrix:
    """Rectangular matching costs: rows index predictions, columns index
    ground-truth instances. All entries must be finite."""

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"cost matrix must be 2-dimensional, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValidationError("cost matrix entries must be finite")
        object.__setattr__(self, "entries", arr)

    @property
    def n_predictions(self) -> int:
        return self.entries.shape[0]

    @property
    def n_ground_truth(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class Assignment:
    """A maximal one-to-one matching: ``len(pairs) == min(rows, cols)``."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_predictions: tuple[int, ...]
    unmatched_ground_truth: tuple[int, ...]
    total_cost: float


@dataclass(frozen=True)
class TokenLogits:
    """Alignment scores of one prediction over the text tokens."""

    scores: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if not all(math.isfinite(s) for s in self.scores):
            raise ValidationError("token logits must be finite")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    giou: float = 1.0
    contrastive: float = 1.0

    def __post_init__(self):
        for name in ("l1", "giou", "contrastive"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values are unweighted; ``total`` applies the weights, so
    ``total == w_l1*l1 + w_giou*giou_loss + w_cons*contrastive`` exactly.
    ``no_matches`` flags degenerate inputs with an empty matching."""

    l1: float
    giou_loss: float
    contrastive: float
    total: float
    weights: LossWeights
    no_matches: bool = False


def _solve_padded(cost: np.ndarray):
    """Shortest-augmenting-path assignment on a square matrix.

    Returns (row_to_col, u, v) where the dual potentials u, v satisfy
    ``u[i] + v[j] <= cost[i, j]`` for every cell with equality on matched
    cells; by complementary slackness the zero-reduced-cost graph contains
    exactly the optimal perfect matchings.
    """
    n = cost.shape[0]
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j, 1-based
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [math.inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = math.inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = [-1] * n
    for j in range(1, n + 1):
        if match[j]:
            row_to_col[match[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _has_perfect_completion(tight, n, fixed_rows, used_cols):
    """Kuhn's algorithm: can every row outside ``fixed_rows`` be matched
    into columns outside ``used_cols`` along tight edges?"""
    col_owner = {}
    for start in range(n):
        if start in fixed_rows:
            continue
        # Iterative augmenting search from `start`.
        visited = set()
        stack = [(start, iter(tight[start]))]
        parent = {start: None}
        found = None
        while stack:
            row, it = stack[-1]
            advanced = False
            for col in it:
                if col in used_cols or col in visited:
                    continue
                visited.add(col)
                owner = col_owner.get(col)
                if owner is None:
                    found = col
                    break
                parent[owner] = (row, col)
                stack.append((owner, iter(tight[owner])))
                advanced = True
                break
            if found is not None:
                # Unwind the augmenting path.
                col = found
                while row is not None:
                    col_owner[col] = row
                    prev = parent[row]
                    if prev is None:
                        row = None
                    else:
                        row, col = prev
                break
            if not advanced:
                stack.pop()
        if found is None:
            return False
    return True


def _lexicographic_matching(cost: np.ndarray, row_to_col, u, v, n_rows, n_cols):
    """Canonicalize to the lexicographically smallest optimal matching.

    Candidate columns per row are the tight (zero reduced cost) edges;
    real columns are preferred ascending, padding columns last. A fix is
    kept only if the remaining rows still admit a perfect tight matching.
    """
    n = cost.shape[0]
    scale = max(1.0, float(np.max(np.abs(cost)))) if cost.size else 1.0
    tol = 1e-9 * scale
    tight = []
    for i in range(n):
        cols = [j for j in range(n) if cost[i, j] - u[i] - v[j] <= tol]
        # Real columns first, ascending; padding columns are interchangeable.
        tight.append(sorted(cols, key=lambda j: (j >= n_cols, j)))
    result = [-1] * n
    fixed_rows: set[int] = set()
    used_cols: set[int] = set()
    # As long as every fix agrees with the solver's matching, that matching
    # itself certifies that a perfect completion exists; after the first
    # divergence each non-forced fix needs an explicit feasibility check.
    diverged = False
    for i in range(min(n_rows, n)):
        candidates = [j for j in tight[i] if j not in used_cols]
        chosen = None
        for j in candidates:
            if len(candidates) == 1:
                chosen = j  # forced: every completion uses the only tight column
            elif not diverged and j == row_to_col[i]:
                chosen = j
            else:
                fixed_rows.add(i)
                used_cols.add(j)
                ok = _has_perfect_completion(tight, n, fixed_rows, used_cols)
                fixed_rows.discard(i)
                used_cols.discard(j)
                if ok:
                    chosen = j
            if chosen is not None:
                break
        if chosen is None:
            return None  # tolerance artifact; caller falls back to the raw solve
        if chosen != row_to_col[i]:
            diverged = True
        result[i] = chosen
        fixed_rows.add(i)
        used_cols.add(chosen)
    return result


def hungarian(costs: CostMatrix) -> Assignment:
    """Minimum-cost maximal matching with deterministic tie-breaking.

    Among all minimum-cost matchings the lexicographically smallest pair
    list is returned. An empty matrix yields an empty assignment.
    """
    n_rows, n_cols = costs.n_predictions, costs.n_ground_truth
    if n_rows == 0 or n_cols == 0:
        return Assignment(
            pairs=(),
            unmatched_predictions=tuple(range(n_rows)),
            unmatched_ground_truth=tuple(range(n_cols)),
            total_cost=0.0,
        )
    n = max(n_rows, n_cols)
    padded = np.zeros((n, n), dtype=np.float64)
    padded[:n_rows, :n_cols] = costs.entries
    row_to_col, u, v = _solve_padded(padded)
    refined = _lexicographic_matching(padded, row_to_col, u, v, n_rows, n_cols)
    if refined is not None:
        raw_cost = _matching_cost(costs.entries, row_to_col, n_rows, n_cols)
        new_cost = _matching_cost(costs.entries, refined, n_rows, n_cols)
        scale = max(1.0, float(np.max(np.abs(costs.entries))))
        if abs(new_cost - raw_cost) <= 1e-9 * scale * n:
            row_to_col = refined
    pairs = tuple(
        (i, row_to_col[i]) for i in range(n_rows) if 0 <= row_to_col[i] < n_cols
    )
    matched_cols = {j for _, j in pairs}
    total = 0.0
    for i, j in pairs:
        total += float(costs.entries[i, j])
    return Assignment(
        pairs=pairs,
        unmatched_predictions=tuple(i for i in range(n_rows) if row_to_col[i] >= n_cols),
        unmatched_ground_truth=tuple(j for j in range(n_cols) if j not in matched_cols),
        total_cost=total,
    )


def _matching_cost(entries: np.ndarray, row_to_col, n_rows, n_cols) -> float:
    total = 0.0
    for i in range(n_rows):
        j = row_to_col[i]
        if 0 <= j < n_cols:
            total += float(entries[i, j])
    return total


def _bce_with_logit(logit: float, target: float) -> float:
    # Numerically stable sigmoid cross-entropy.
    return max(logit, 0.0) - logit * target + math.log1p(math.exp(-abs(logit)))


def token_alignment_cost(logits: TokenLogits, positive_mask: Sequence[bool]) -> float:
    """Mean per-token sigmoid binary cross-entropy of the logits against a
    boolean positive-token mask."""
    if len(logits) != len(positive_mask):
        raise ValidationError(
            f"token dimension mismatch: {len(logits)} logits vs {len(positive_mask)} mask bits"
        )
    if len(logits) == 0:
        raise ValidationError("token vectors must be non-empty")
    total = 0.0
    for score, positive in zip(logits.scores, positive_mask):
        total += _bce_with_logit(score, 1.0 if positive else 0.0)
    return total / len(logits)


def build_match_cost(
    predictions: Sequence[tuple[BoundingBox, TokenLogits]],
    ground_truth: Sequence[GroundTruthInstance],
    gt_token_masks: Sequence[Sequence[bool]],
    img_w: float,
    img_h: float,
    weights: LossWeights = LossWeights(),
) -> CostMatrix:
    """Pairwise matching costs.

    ``entry(i, j) = w_l1 * l1_box_distance + w_giou * (1 - giou)
    + w_cons * token_alignment_cost``. Every logit vector and mask must
    share one token dimension.
    """
    if len(ground_truth) != len(gt_token_masks):
        raise ValidationError(
            f"{len(ground_truth)} ground-truth instances but {len(gt_token_masks)} token masks"
        )
    entries = np.zeros((len(predictions), len(ground_truth)), dtype=np.float64)
    for i, (box, logits) in enumerate(predictions):
        for j, gt in enumerate(ground_truth):
            entries[i, j] = (
                weights.l1 * l1_box_distance(box, gt.box, img_w, img_h)
                + weights.giou * (1.0 - giou(box, gt.box))
                + weights.contrastive * token_alignment_cost(logits, gt_token_masks[j])
            )
    return CostMatrix(entries)


def set_loss(
    predictions: Sequence[tuple[BoundingBox, TokenLogits]],
    ground_truth: Sequence[GroundTruthInstance],
    gt_token_masks: Sequence[Sequence[bool]],
    img_w: float,
    img_h: float,
    weights: LossWeights = LossWeights(),
    count_unmatched_contrastive: bool = True,
) -> LossBreakdown:
    """Composite loss of a prediction set against a ground-truth set.

    The optimal assignment is computed over ``build_match_cost``; each term
    is summed over matched pairs and normalized by the number of
    ground-truth instances. Unmatched predictions add their contrastive
    penalty against the all-negative mask when
    ``count_unmatched_contrastive`` is on.
    """
    costs = build_match_cost(
        predictions, ground_truth, gt_token_masks, img_w, img_h, weights
    )
    assignment = hungarian(costs)
    l1_sum = 0.0
    giou_sum = 0.0
    cons_sum = 0.0
    for i, j in assignment.pairs:
        box, logits = predictions[i]
        gt = ground_truth[j]
        l1_sum += l1_box_distance(box, gt.box, img_w, img_h)
        giou_sum += 1.0 - giou(box, gt.box)
        cons_sum += token_alignment_cost(logits, gt_token_masks[j])
    if count_unmatched_contrastive:
        for i in assignment.unmatched_predictions:
            _, logits = predictions[i]
            cons_sum += token_alignment_cost(logits, [False] * len(logits))
    denom = max(len(ground_truth), 1)
    l1_term = l1_sum / denom
    giou_term = giou_sum / denom
    cons_term = cons_sum / denom
    return LossBreakdown(
        l1=l1_term,
        giou_loss=giou_term,
        contrastive=cons_term,
        total=weights.l1 * l1_term + weights.giou * giou_term + weights.contrastive * cons_term,
        weights=weights,
        no_matches=not assignment.pairs,
    )
