"""Deterministic experiment partitions: train/test, k-shot, cross-class.

Reproducibility is pinned down to the algorithm, not just the seed:

* randomness comes from the Philox-4x64-10 counter-based generator with
  key words ``(seed, category_id)`` and counter word 3 set to an operation
  domain (1 = train/test shuffle, 2 = shot sampling), so every category
  gets an independent, platform-stable stream per operation;
* shuffles are textbook Fisher-Yates over the raw 64-bit word stream with
  rejection sampling for unbiased bounded draws;
* images that contain several categories are assigned to the category with
  the most instances in that image, ties going to the lowest category id;
  images with no instances belong to no category and stay out of every
  split;
* train counts are exact floors of ``fraction * n`` with the fraction read
  at its shortest decimal representation (0.6 means 3/5, not the nearest
  binary double).

Note that k-shot samples are *not* nested: the 5-shot draw for a seed need
not contain the 1-shot draw for the same seed.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datamodel import Category, DetectionDataset
from .errors import ManifestDigestError, ParseError, ValidationError

__all__ = [
    "SplitSpec",
    "SplitResult",
    "majority_category",
    "split_train_test",
    "split_zero_shot",
    "sample_k_shot",
    "split_cross_class",
    "write_manifest",
    "load_manifest",
]

KIND_TRAIN_TEST = "train-test"
KIND_K_SHOT = "k-shot"
KIND_CROSS_CLASS = "cross-class"
KIND_ZERO_SHOT = "zero-shot"

_SHUFFLE_DOMAIN = 1
_SHOT_DOMAIN = 2

_MAX_SEED = 2**64


@dataclass(frozen=True)
class SplitSpec:
    """Declarative description of one experiment partition.

    Exactly the fields required by ``kind`` may be set:

    ==============  ========================================
    train-test      train_fraction
    zero-shot       train_fraction (test portion only)
    k-shot          train_fraction, k
    cross-class     train_fraction, held_out_category
    ==============  ========================================
    """

    kind: str
    seed: int
    train_fraction: float | None = None
    k: int | None = None
    held_out_category: int | None = None

    def __post_init__(self):
        if not isinstance(self.seed, int) or not (0 <= self.seed < _MAX_SEED):
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        required = {
            KIND_TRAIN_TEST: ("train_fraction",),
            KIND_ZERO_SHOT: ("train_fraction",),
            KIND_K_SHOT: ("train_fraction", "k"),
            KIND_CROSS_CLASS: ("train_fraction", "held_out_category"),
        }.get(self.kind)
        if required is None:
            raise ValidationError(f"unknown split kind {self.kind!r}")
        for name in ("train_fraction", "k", "held_out_category"):
            value = getattr(self, name)
            if name in required:
                if value is None:
                    raise ValidationError(f"{self.kind} split requires {name}")
            elif value is not None:
                raise ValidationError(f"{self.kind} split does not take {name}")
        if self.train_fraction is not None and not (0.0 < self.train_fraction < 1.0):
            raise ValidationError(
                f"train fraction must lie strictly between 0 and 1, got {self.train_fraction!r}"
            )
        if self.k is not None and (not isinstance(self.k, int) or self.k < 0):
            raise ValidationError(f"k must be a non-negative integer, got {self.k!r}")


@dataclass(frozen=True)
class SplitResult:
    """A materialized partition: disjoint, sorted image-id tuples plus the
    spec that produced them and a content digest over all three."""

    train_image_ids: tuple[int, ...]
    test_image_ids: tuple[int, ...]
    spec: SplitSpec
    manifest_digest: str

    def __post_init__(self):
        if set(self.train_image_ids) & set(self.test_image_ids):
            raise ValidationError("train and test image sets overlap")


def _spec_to_dict(spec: SplitSpec) -> dict:
    payload = {"kind": spec.kind, "seed": spec.seed}
    if spec.train_fraction is not None:
        payload["fraction"] = spec.train_fraction
    if spec.k is not None:
        payload["k"] = spec.k
    if spec.held_out_category is not None:
        payload["held_out"] = spec.held_out_category
    return payload


def _spec_from_dict(payload: dict) -> SplitSpec:
    return SplitSpec(
        kind=payload["kind"],
        seed=payload["seed"],
        train_fraction=payload.get("fraction"),
        k=payload.get("k"),
        held_out_category=payload.get("held_out"),
    )


def _digest(spec: SplitSpec, train: tuple[int, ...], test: tuple[int, ...]) -> str:
    body = json.dumps(
        {
            "spec": _spec_to_dict(spec),
            "train_image_ids": list(train),
            "test_image_ids": list(test),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _build_result(train, test, spec: SplitSpec) -> SplitResult:
    train = tuple(sorted(train))
    test = tuple(sorted(test))
    return SplitResult(train, test, spec, _digest(spec, train, test))


class _PinnedStream:
    """Unbiased bounded draws from one Philox-4x64 counter stream."""

    _BLOCK = 256

    def __init__(self, seed: int, category_id: int, domain: int):
        counter = np.array([0, 0, 0, domain], dtype=np.uint64)
        key = np.array([seed, category_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(counter=counter, key=key)
        self._words: list[int] = []
        self._pos = 0

    def _next_word(self) -> int:
        if self._pos >= len(self._words):
            self._words = [int(w) for w in self._bitgen.random_raw(self._BLOCK)]
            self._pos = 0
        word = self._words[self._pos]
        self._pos += 1
        return word

    def randbelow(self, bound: int) -> int:
        # Rejection sampling keeps the draw exactly uniform on [0, bound).
        span = _MAX_SEED - (_MAX_SEED % bound)
        while True:
            word = self._next_word()
            if word < span:
                return word % bound

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]


def _floor_fraction(fraction: float, n: int) -> int:
    return int(Fraction(str(fraction)) * n)


def majority_category(ds: DetectionDataset) -> dict[int, int]:
    """Assign each annotated image to one category for stratification:
    most instances wins, ties go to the lowest category id."""
    counts: dict[int, Counter] = {}
    for inst in ds.instances:
        counts.setdefault(inst.image_id, Counter())[inst.category_id] += 1
    assignment = {}
    for image_id, per_cat in counts.items():
        assignment[image_id] = min(per_cat, key=lambda cid: (-per_cat[cid], cid))
    return assignment


def _images_by_category(ds: DetectionDataset) -> dict[int, list[int]]:
    grouped: dict[int, list[int]] = {}
    for image_id, category_id in majority_category(ds).items():
        grouped.setdefault(category_id, []).append(image_id)
    return {cid: sorted(ids) for cid, ids in grouped.items()}


def _partition(ds: DetectionDataset, fraction: float, seed: int):
    """Per-category (train, test) image-id lists, shared by every split kind
    so that cross-class test sets coincide with the plain train/test split."""
    grouped = _images_by_category(ds)
    if not grouped:
        raise ValidationError("empty dataset: no annotated images to split")
    parts = {}
    for category_id in sorted(grouped):
        order = list(grouped[category_id])
        _PinnedStream(seed, category_id, _SHUFFLE_DOMAIN).shuffle(order)
        n_train = _floor_fraction(fraction, len(order))
        parts[category_id] = (order[:n_train], order[n_train:])
    return parts


def split_train_test(ds: DetectionDataset, fraction: float, seed: int) -> SplitResult:
    """Per-category stratified shuffle; the first ``floor(fraction * n)``
    images of each category go to train, the rest to test."""
    spec = SplitSpec(kind=KIND_TRAIN_TEST, seed=seed, train_fraction=float(fraction))
    parts = _partition(ds, spec.train_fraction, seed)
    train = [i for tr, _ in parts.values() for i in tr]
    test = [i for _, te in parts.values() for i in te]
    return _build_result(train, test, spec)


def split_zero_shot(ds: DetectionDataset, fraction: float, seed: int) -> SplitResult:
    """Empty train set over the standard test portion, so zero-shot numbers
    are comparable with every other row on the same test images."""
    spec = SplitSpec(kind=KIND_ZERO_SHOT, seed=seed, train_fraction=float(fraction))
    parts = _partition(ds, spec.train_fraction, seed)
    test = [i for _, te in parts.values() for i in te]
    return _build_result((), test, spec)


def sample_k_shot(
    ds: DetectionDataset, train_pool: SplitResult, k: int, seed: int
) -> SplitResult:
    """Draw exactly ``k`` train images per category, uniformly without
    replacement from the pool's train set; the test set is unchanged.

    ``k = 0`` yields the zero-shot split. Raises if some category's pool is
    smaller than ``k``, naming the category and its pool size.
    """
    if not isinstance(k, int) or k < 0:
        raise ValidationError(f"k must be a non-negative integer, got {k!r}")
    fraction = train_pool.spec.train_fraction
    if k == 0:
        spec = SplitSpec(kind=KIND_ZERO_SHOT, seed=seed, train_fraction=fraction)
        return _build_result((), train_pool.test_image_ids, spec)
    spec = SplitSpec(kind=KIND_K_SHOT, seed=seed, train_fraction=fraction, k=k)
    pool_ids = set(train_pool.train_image_ids)
    assignment = majority_category(ds)
    pools: dict[int, list[int]] = {}
    for image_id in sorted(pool_ids):
        pools.setdefault(assignment[image_id], []).append(image_id)
    train: list[int] = []
    for category_id in sorted(pools):
        pool = pools[category_id]
        if len(pool) < k:
            name = ds.category(category_id).name
            raise ValidationError(
                f"category {name!r} has only {len(pool)} train images, cannot draw k={k}"
            )
        order = list(pool)
        _PinnedStream(seed, category_id, _SHOT_DOMAIN).shuffle(order)
        train.extend(order[:k])
    return _build_result(train, train_pool.test_image_ids, spec)


def split_cross_class(
    ds: DetectionDataset, held_out: Category | int, fraction: float, seed: int
) -> SplitResult:
    """Train on every category except ``held_out``; test on the held-out
    category's *standard* test portion, so the numbers stay comparable with
    same-seed fine-tuning splits."""
    held_out_id = held_out.id if isinstance(held_out, Category) else held_out
    ds.category(held_out_id)
    if len(ds.categories) < 2:
        raise ValidationError("cross-class split needs at least 2 categories")
    spec = SplitSpec(
        kind=KIND_CROSS_CLASS, seed=seed, train_fraction=float(fraction),
        held_out_category=held_out_id,
    )
    parts = _partition(ds, spec.train_fraction, seed)
    train = [i for cid, (tr, _) in parts.items() if cid != held_out_id for i in tr]
    test = list(parts.get(held_out_id, ((), ()))[1])
    return _build_result(train, test, spec)


def write_manifest(result: SplitResult, path) -> None:
    payload = {
        "spec": _spec_to_dict(result.spec),
        "train_image_ids": list(result.train_image_ids),
        "test_image_ids": list(result.test_image_ids),
        "digest": result.manifest_digest,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> SplitResult:
    """Read a manifest back, recomputing and verifying its digest."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", offset=exc.pos) from exc
    try:
        spec = _spec_from_dict(payload["spec"])
        train = tuple(payload["train_image_ids"])
        test = tuple(payload["test_image_ids"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: not a split manifest ({exc!r})") from None
    recomputed = _digest(spec, train, test)
    if recomputed != payload.get("digest"):
        raise ManifestDigestError(
            f"{path}: digest mismatch (recorded {payload.get('digest')!r}, "
            f"recomputed {recomputed!r}); the manifest was edited or corrupted"
        )
    return SplitResult(train, test, spec, recomputed)
