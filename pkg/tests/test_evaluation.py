import random

import pytest

from fruitbench.datamodel import (
    Category,
    Detection,
    DetectionDataset,
    GroundTruthInstance,
    ImageRecord,
)
from fruitbench.errors import ValidationError
from fruitbench.evaluation import (
    DEFAULT_IOU_THRESHOLDS,
    EvalConfig,
    average_precision,
    attribute_predicate,
    evaluate,
    evaluate_rec,
    match_detections,
    report_to_dict,
)
from fruitbench.geometry import BoundingBox
from fruitbench.splits import split_train_test

from .generators import random_eval_instance
from .oracles import naive_evaluate


def det(image_id, category_id, box, score, prompt=None):
    return Detection(image_id, category_id, box, score, prompt)


def gt(instance_id, image_id, category_id, box, iscrowd=False, attributes=None):
    return GroundTruthInstance(
        instance_id, image_id, category_id, box, attributes or {}, iscrowd
    )


B = BoundingBox


def single_image_dataset(gts, n_cats=1, size=100):
    categories = [Category(c + 1, f"cat{c + 1}") for c in range(n_cats)]
    images = [ImageRecord(1, "a.jpg", size, size)]
    return DetectionDataset(categories, images, list(gts))


class TestMatchDetections:
    def test_perfect_iou_is_tp(self):
        g = [gt(1, 1, 1, B(0, 0, 10, 10))]
        d = [det(1, 1, B(0, 0, 10, 10), 0.9)]
        rows = match_detections(d, g, 0.5)
        assert rows[0].is_tp and rows[0].gt_instance_id == 1

    def test_greedy_by_score_takes_best_gt(self):
        g = [gt(1, 1, 1, B(0, 0, 20, 20))]
        d = [
            det(1, 1, B(0, 0, 19, 20), 0.8),   # IoU 0.95
            det(1, 1, B(0, 0, 18, 20), 0.9),   # IoU 0.9
        ]
        rows = match_detections(d, g, 0.5)
        # score 0.9 goes first and takes the only gt; 0.8 becomes FP
        assert [r.detection.score for r in rows] == [0.9, 0.8]
        assert rows[0].is_tp and not rows[1].is_tp

    def test_threshold_boundary_is_inclusive(self):
        g = [gt(1, 1, 1, B(0, 0, 20, 20))]
        d = [det(1, 1, B(0, 0, 20, 9), 0.9)]  # IoU 0.45
        assert not match_detections(d, g, 0.5)[0].is_tp
        assert match_detections(d, g, 0.4)[0].is_tp
        assert match_detections(d, g, 0.45)[0].is_tp

    def test_gt_matched_at_most_once(self):
        g = [gt(1, 1, 1, B(0, 0, 10, 10))]
        d = [det(1, 1, B(0, 0, 10, 10), 0.9), det(1, 1, B(0, 0, 10, 10), 0.8)]
        rows = match_detections(d, g, 0.5)
        assert [r.is_tp for r in rows] == [True, False]

    def test_crowd_matches_are_ignored_rows(self):
        g = [gt(1, 1, 1, B(0, 0, 30, 30), iscrowd=True)]
        d = [det(1, 1, B(0, 0, 30, 30), 0.9), det(1, 1, B(0, 0, 28, 30), 0.8)]
        rows = match_detections(d, g, 0.5)
        assert all(r.ignored and not r.is_tp for r in rows)

    def test_non_crowd_preferred_over_crowd(self):
        g = [
            gt(1, 1, 1, B(0, 0, 30, 30), iscrowd=True),
            gt(2, 1, 1, B(2, 2, 28, 28)),
        ]
        d = [det(1, 1, B(2, 2, 28, 28), 0.9)]
        rows = match_detections(d, g, 0.5)
        assert rows[0].is_tp and rows[0].gt_instance_id == 2


class TestAveragePrecision:
    def test_single_tp(self):
        g = [gt(1, 1, 1, B(0, 0, 10, 10))]
        rows = match_detections([det(1, 1, B(0, 0, 10, 10), 0.9)], g, 0.5)
        ap, curve = average_precision(rows, total_gt=1)
        assert ap == pytest.approx(1.0, abs=1e-12)
        assert curve.interpolated == (1.0,) * 101

    def test_two_gt_one_tp_one_fp(self):
        g = [gt(1, 1, 1, B(0, 0, 10, 10)), gt(2, 1, 1, B(40, 40, 60, 60))]
        rows = match_detections(
            [
                det(1, 1, B(0, 0, 10, 10), 0.9),
                det(1, 1, B(80, 80, 90, 90), 0.8),
            ],
            g,
            0.5,
        )
        ap, _ = average_precision(rows, total_gt=2)
        assert ap == pytest.approx(51 / 101, abs=1e-12)

    def test_fp_before_tp(self):
        g = [gt(1, 1, 1, B(0, 0, 10, 10))]
        rows = match_detections(
            [
                det(1, 1, B(80, 80, 90, 90), 0.9),
                det(1, 1, B(0, 0, 10, 10), 0.8),
            ],
            g,
            0.5,
        )
        ap, _ = average_precision(rows, total_gt=1)
        assert ap == pytest.approx(0.5, abs=1e-12)

    def test_no_gt_no_dets_absent(self):
        assert average_precision([], total_gt=0) == (None, None)

    def test_no_gt_with_dets_zero(self):
        rows = match_detections([det(1, 1, B(0, 0, 5, 5), 0.5)], [], 0.5)
        ap, _ = average_precision(rows, total_gt=0)
        assert ap == 0.0

    def test_envelope_monotone(self):
        rng = random.Random(3)
        for _ in range(30):
            g = [gt(k + 1, 1, 1, B(4 * k, 0, 4 * k + 3, 3)) for k in range(rng.randint(1, 5))]
            dets = []
            for _ in range(rng.randint(1, 6)):
                x0 = 4 * rng.randint(0, 4)
                dets.append(det(1, 1, B(x0, 0, x0 + 3, 3), rng.randint(1, 9) / 10))
            rows = match_detections(dets, g, 0.5)
            _, curve = average_precision(rows, total_gt=len(g))
            if curve is not None:
                assert all(
                    curve.interpolated[k] >= curve.interpolated[k + 1]
                    for k in range(len(curve.interpolated) - 1)
                )


def perfect_detections(ds, image_ids=None):
    ids = set(image_ids) if image_ids is not None else {m.id for m in ds.images}
    return [
        det(a.image_id, a.category_id, a.box, 1.0)
        for a in ds.instances
        if a.image_id in ids and not a.iscrowd
    ]


class TestEvaluate:
    def make_corpus(self, n_per_cat=4):
        categories = [Category(1, "apple"), Category(2, "orange")]
        images = []
        instances = []
        next_inst = 1
        for i in range(2 * n_per_cat):
            images.append(ImageRecord(i + 1, f"img{i}.jpg", 100, 100))
            cat = 1 if i < n_per_cat else 2
            for k in range(2):
                instances.append(
                    gt(next_inst, i + 1, cat, B(10 * k, 10 * k, 10 * k + 8, 10 * k + 8))
                )
                next_inst += 1
        return DetectionDataset(categories, images, instances)

    def test_perfect_detector(self):
        ds = self.make_corpus()
        split = split_train_test(ds, 0.5, seed=1)
        report = evaluate(ds, split, perfect_detections(ds))
        assert report.mean_ap == pytest.approx(1.0, abs=1e-12)
        assert report.mean_ap50 == pytest.approx(1.0, abs=1e-12)
        assert report.mean_ar == pytest.approx(1.0, abs=1e-12)

    def test_no_detections(self):
        ds = self.make_corpus()
        split = split_train_test(ds, 0.5, seed=1)
        report = evaluate(ds, split, [])
        for row in report.per_category:
            assert row.map == 0.0 and row.ap50 == 0.0 and row.mar == 0.0

    def test_empty_test_split_rejected(self):
        ds = self.make_corpus()
        split = split_train_test(ds, 0.5, seed=1)
        broken = type(split)(
            train_image_ids=split.train_image_ids,
            test_image_ids=(),
            spec=split.spec,
            manifest_digest="x",
        )
        with pytest.raises(ValidationError, match="empty test split"):
            evaluate(ds, broken, [])

    def test_out_of_split_detections_counted(self):
        ds = self.make_corpus()
        split = split_train_test(ds, 0.5, seed=1)
        dets = perfect_detections(ds)  # includes train images
        report = evaluate(ds, split, dets)
        assert report.num_detections_ignored == len(dets) - report.num_detections_used
        assert report.num_detections_ignored > 0

    def test_matches_oracle_on_random_instances(self):
        rng = random.Random(20250811)
        for _ in range(60):
            ds, dets = random_eval_instance(rng)
            split = split_train_test(ds, 0.5, seed=7)
            config = EvalConfig(workers=1)
            report = evaluate(ds, split, dets, config)
            oracle = naive_evaluate(
                ds, split, dets, DEFAULT_IOU_THRESHOLDS, config.max_dets
            )
            for row in report.per_category:
                expected = oracle["per_category"][row.category_id]
                assert list(row.per_threshold_ap) == expected["per_threshold_ap"]
                assert list(row.per_threshold_ar) == expected["per_threshold_ar"]
                assert row.map == expected["mAP"]
                assert row.ap50 == expected["AP50"]
                assert row.mar == expected["mAR"]
            assert report.mean_ap == oracle["aggregate"]["mAP"]
            assert report.mean_ap50 == oracle["aggregate"]["AP50"]
            assert report.mean_ar == oracle["aggregate"]["mAR"]

    def test_parallel_equals_serial(self):
        rng = random.Random(99)
        ds, dets = random_eval_instance(rng, max_images=5, max_gts=8, max_dets=8)
        split = split_train_test(ds, 0.5, seed=3)
        serial = evaluate(ds, split, dets, EvalConfig(workers=1))
        parallel = evaluate(ds, split, dets, EvalConfig(workers=4))
        assert serial.per_category == parallel.per_category
        assert serial.mean_ap == parallel.mean_ap

    def test_max_dets_cap_matches_oracle(self):
        rng = random.Random(4)
        for _ in range(20):
            ds, dets = random_eval_instance(rng)
            split = split_train_test(ds, 0.5, seed=2)
            config = EvalConfig(max_dets=1)
            report = evaluate(ds, split, dets, config)
            oracle = naive_evaluate(ds, split, dets, DEFAULT_IOU_THRESHOLDS, 1)
            for row in report.per_category:
                expected = oracle["per_category"][row.category_id]
                assert list(row.per_threshold_ap) == expected["per_threshold_ap"]
                assert row.mar == expected["mAR"]

    def test_threshold_monotonicity(self):
        rng = random.Random(17)
        for _ in range(40):
            ds, dets = random_eval_instance(rng, max_images=3, max_gts=6, max_dets=6)
            split = split_train_test(ds, 0.5, seed=5)
            report = evaluate(ds, split, dets)
            for row in report.per_category:
                aps = [v for v in row.per_threshold_ap if v is not None]
                for k in range(len(aps) - 1):
                    assert aps[k] >= aps[k + 1] - 1e-12

    def test_score_scale_invariance(self):
        rng = random.Random(23)
        ds, dets = random_eval_instance(rng, max_dets=8)
        split = split_train_test(ds, 0.5, seed=5)
        base = evaluate(ds, split, dets)
        squashed = [
            Detection(d.image_id, d.category_id, d.box, d.score**3, d.prompt) for d in dets
        ]
        transformed = evaluate(ds, split, squashed)
        for a, b in zip(base.per_category, transformed.per_category):
            assert a.per_threshold_ap == b.per_threshold_ap
            assert a.per_threshold_ar == b.per_threshold_ar

    def test_lowest_scored_far_fp_never_raises_ap(self):
        rng = random.Random(31)
        for _ in range(20):
            ds, dets = random_eval_instance(rng, max_dets=6)
            split = split_train_test(ds, 0.5, seed=5)
            test_ids = list(split.test_image_ids)
            base = evaluate(ds, split, dets)
            junk = Detection(test_ids[0], 1, B(0.25, 0.25, 0.75, 0.75), 0.05)
            spiked = evaluate(ds, split, dets + [junk])
            for a, b in zip(base.per_category, spiked.per_category):
                if a.map is not None and b.map is not None:
                    assert b.map <= a.map + 1e-12

    def test_ap50_bounds_map(self):
        rng = random.Random(37)
        for _ in range(20):
            ds, dets = random_eval_instance(rng)
            split = split_train_test(ds, 0.5, seed=5)
            report = evaluate(ds, split, dets)
            for row in report.per_category:
                if row.map is not None and row.ap50 is not None:
                    assert row.ap50 >= row.map - 1e-12

    def test_report_dict_shape(self):
        ds = self.make_corpus()
        split = split_train_test(ds, 0.5, seed=1)
        payload = report_to_dict(evaluate(ds, split, perfect_detections(ds)))
        assert set(payload["aggregate"]) == {"mAP", "AP50", "mAR"}
        assert payload["split_digest"] == split.manifest_digest
        assert "apple" in payload["per_category"]
        assert len(payload["per_category"]["apple"]["per_threshold_AP"]) == 10


class TestEvaluateRec:
    def make_rec_corpus(self):
        categories = [Category(1, "apple")]
        images = [ImageRecord(1, "a.jpg", 100, 100), ImageRecord(2, "b.jpg", 100, 100)]
        instances = [
            gt(1, 1, 1, B(0, 0, 10, 10), attributes={"occlusion": "none"}),
            gt(2, 1, 1, B(20, 20, 30, 30), attributes={"occlusion": "branch"}),
            gt(3, 2, 1, B(0, 0, 10, 10), attributes={"occlusion": "leaf"}),
            gt(4, 2, 1, B(40, 40, 50, 50), attributes={"occlusion": "none"}),
        ]
        return DetectionDataset(categories, images, instances)

    def split_all_test(self, ds):
        return type(split_train_test(ds, 0.5, seed=1))(
            train_image_ids=(),
            test_image_ids=tuple(m.id for m in ds.images),
            spec=split_train_test(ds, 0.5, seed=1).spec,
            manifest_digest="test-all",
        )

    def test_identity_filter_matches_plain_evaluate(self):
        ds = self.make_rec_corpus()
        split = self.split_all_test(ds)
        dets = [
            det(a.image_id, a.category_id, a.box, 1.0, prompt="apple") for a in ds.instances
        ]
        reports = evaluate_rec(ds, split, dets, {"apple": lambda inst: True})
        plain = evaluate(ds, split, [
            det(a.image_id, a.category_id, a.box, 1.0) for a in ds.instances
        ])
        assert reports[0].prompt == "apple"
        assert reports[0].per_category == plain.per_category

    def test_branch_occluded_detection_becomes_fp(self):
        ds = self.make_rec_corpus()
        split = self.split_all_test(ds)
        prompt = "apple without occlusion by branch"
        predicate = attribute_predicate({"attribute": "occlusion", "not_in": ["branch"]})
        dets = [
            det(a.image_id, a.category_id, a.box, 0.9, prompt=prompt) for a in ds.instances
        ]  # includes a box on the branch-occluded instance
        (report,) = evaluate_rec(ds, split, dets, {prompt: predicate})
        row = report.per_category[0]
        assert row.num_gt == 3  # branch instance filtered out
        assert row.ap50 < 1.0  # the branch-box detection scores as FP

    def test_unknown_prompt_rejected(self):
        ds = self.make_rec_corpus()
        split = self.split_all_test(ds)
        dets = [det(1, 1, B(0, 0, 10, 10), 0.9, prompt="mystery")]
        with pytest.raises(ValidationError, match="mystery"):
            evaluate_rec(ds, split, dets, {"apple": lambda inst: True})

    def test_empty_filtered_gt_absent_metrics(self):
        ds = self.make_rec_corpus()
        split = self.split_all_test(ds)
        predicate = attribute_predicate({"attribute": "occlusion", "equals": "wire"})
        (report,) = evaluate_rec(ds, split, [], {"apple on a wire": predicate})
        assert report.per_category[0].map is None
        assert report.mean_ap is None


class TestAttributePredicate:
    def test_forms(self):
        inst = gt(1, 1, 1, B(0, 0, 5, 5), attributes={"occlusion": "leaf"})
        bare = gt(2, 1, 1, B(0, 0, 5, 5))
        assert attribute_predicate({"any": True})(inst)
        assert attribute_predicate({"attribute": "occlusion", "equals": "leaf"})(inst)
        assert not attribute_predicate({"attribute": "occlusion", "equals": "leaf"})(bare)
        assert attribute_predicate({"attribute": "occlusion", "not_equals": "branch"})(inst)
        assert attribute_predicate({"attribute": "occlusion", "in": ["leaf", "none"]})(inst)
        assert attribute_predicate({"attribute": "occlusion", "not_in": ["branch"]})(inst)
        assert attribute_predicate({"attribute": "occlusion", "not_in": ["branch"]})(bare)

    def test_bad_specs(self):
        with pytest.raises(ValidationError):
            attribute_predicate({})
        with pytest.raises(ValidationError):
            attribute_predicate({"attribute": "x"})
        with pytest.raises(ValidationError):
            attribute_predicate({"attribute": "x", "equals": "a", "in": ["b"]})
