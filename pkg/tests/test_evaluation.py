import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctdiag.data import CxrRecord, DatasetIndex, TbBox
from ctdiag.evaluation import (CURVES, PredictionMismatch, PredictionSchemaError, ProtocolViolation, auc,
                               build_report, build_scenes, classification_metrics, confusion, detection_ap,
                               error_curves, interpolate, iou, metrics_from_confusion, parse_predictions,
                               pr_points, scenes_ap, write_report)
from ctdiag.evaluation.detection import ImageScene
from ctdiag.network.boxes import ImagePrediction, PredictedBox
from oracles import brute_force_ap, concordance_auc


def random_scenes(rng, n_images=None):
    scenes, oracle = [], []
    for _ in range(n_images or int(rng.integers(1, 5))):
        gts = [(float(rng.integers(0, 20)), float(rng.integers(0, 20)), float(rng.integers(2, 10)),
                float(rng.integers(2, 10))) for _ in range(int(rng.integers(0, 4)))]
        dets = []
        for _ in range(int(rng.integers(0, 6))):
            if gts and rng.random() < 0.6:
                g = gts[int(rng.integers(len(gts)))]
                box = (g[0] + float(rng.integers(-2, 3)), g[1] + float(rng.integers(-2, 3)), g[2], g[3])
            else:
                box = (float(rng.integers(0, 25)), float(rng.integers(0, 25)), float(rng.integers(2, 10)),
                       float(rng.integers(2, 10)))
            # coarse scores so that ties across and within images occur
            dets.append((box, float(rng.integers(1, 6)) / 5))
        scenes.append(ImageScene.build([d for d, _ in dets], [s for _, s in dets], gts))
        oracle.append((dets, gts))
    return scenes, oracle


def test_iou_examples():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [20, 20, 5, 5]) == 0.0
    assert iou([0, 0, 10, 10], [10, 0, 10, 10]) == 0.0
    assert abs(iou([0, 0, 2, 1], [1, 0, 2, 1]) - 1 / 3) < 1e-15
    with pytest.raises(ValueError):
        iou([0, 0, 0, 1], [0, 0, 1, 1])


def test_ap_matches_brute_force():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(100):
        scenes, oracle = random_scenes(rng)
        ap, ap50 = scenes_ap(scenes)
        o_ap, o_ap50 = brute_force_ap(oracle)
        if math.isnan(o_ap):
            assert math.isnan(ap)
            continue
        assert ap == o_ap and ap50 == o_ap50
        assert ap50 >= ap
        checked += 1
    assert checked > 80


def test_perfect_detection():
    gts = [(0.0, 0.0, 10.0, 10.0), (20.0, 20.0, 5.0, 5.0)]
    s = ImageScene.build(gts, [0.9, 0.8], gts)
    assert scenes_ap([s]) == (1.0, 1.0)
    assert scenes_ap([ImageScene.build([], [], gts)]) == (0.0, 0.0)
    assert all(math.isnan(v) for v in scenes_ap([ImageScene.build(gts, [0.9, 0.8], [])]))


def test_ties_are_order_free():
    gts_a = [(0.0, 0.0, 10.0, 10.0)]
    a = ImageScene.build([(0.0, 0.0, 10.0, 10.0)], [0.5], gts_a)
    b = ImageScene.build([(50.0, 50.0, 4.0, 4.0)], [0.5], [(30.0, 30.0, 4.0, 4.0)])
    assert scenes_ap([a, b]) == scenes_ap([b, a])


def test_envelope_monotone():
    rng = np.random.default_rng(5)
    for _ in range(50):
        scores = rng.integers(0, 4, 12).astype(float)
        tp = rng.random(12) < 0.5
        c = interpolate(*pr_points(scores, tp, 8))
        assert np.all(np.diff(c) <= 0)


def test_error_curve_ordering():
    rng = np.random.default_rng(9)
    for _ in range(100):
        scenes, _ = random_scenes(rng)
        if not sum(len(s.gts) for s in scenes):
            continue
        c = error_curves(scenes)
        assert set(c) == set(CURVES)
        assert np.all(c["Loc"] >= c["C50"]) and np.all(c["C50"] >= c["C75"])
        assert np.all(c["BG"] >= c["Loc"]) and np.all(c["FN"] >= c["BG"])
        assert c["FN"][-1] == 1.0 and np.all(c["FN"] == 1.0)


def test_background_example():
    gts = [(0.0, 0.0, 10.0, 10.0)]
    s = ImageScene.build([(50.0, 50.0, 5.0, 5.0), (0.0, 0.0, 10.0, 10.0)], [0.9, 0.5], gts)
    c = error_curves([s])
    assert np.all(c["Loc"] == 0.5)
    assert np.all(c["BG"] == 1.0)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30),
       st.lists(st.booleans(), min_size=1, max_size=30))
def test_auc_matches_concordance(scores, labels):
    n = min(len(scores), len(labels))
    scores = [round(s, 1) for s in scores[:n]]
    labels = labels[:n]
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    got = auc(scores, labels)
    if not pos or not neg:
        assert math.isnan(got)
    else:
        assert got == concordance_auc(pos, neg)


def test_auc_example():
    assert auc([0.2, 0.8, 0.8, 0.2], [True, True, False, False]) * 100 == 50.0
    assert auc([0.9, 0.1], [True, False]) == 1.0


def test_confusion_example():
    m = confusion([0, 0, 1, 2], [0, 1, 1, 2])
    assert m.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]
    r = metrics_from_confusion(m)
    assert r["accuracy"] == 75.0
    assert r["sensitivity"] == 100.0
    assert abs(r["specificity"] - 100.0) < 1e-12
    assert abs(r["ap"] - 100 * (1 + 0.5 + 1) / 3) < 1e-12
    assert abs(r["ar"] - 100 * (0.5 + 1 + 1) / 3) < 1e-12


def tiny_index():
    recs = [CxrRecord("h0", "h0.png", 32, 32, "healthy"),
            CxrRecord("s0", "s0.png", 32, 32, "sick_non_tb"),
            CxrRecord("t0", "t0.png", 32, 32, "tb_active", boxes=[TbBox(2, 2, 8, 8, "active_tb")]),
            CxrRecord("t1", "t1.png", 32, 32, "tb_latent", boxes=[TbBox(20, 20, 6, 6, "latent_tb")]),
            CxrRecord("u0", "u0.png", 32, 32, "tb_uncertain", boxes=[TbBox(4, 4, 6, 6)])]
    return DatasetIndex("test", recs)


def perfect_predictions(index):
    out = []
    for r in index.records:
        probs = {"healthy": (1, 0, 0), "sick_non_tb": (0, 1, 0)}.get(r.image_class, (0, 0, 1))
        boxes = [PredictedBox(tuple(b.as_list()), b.tb_class or "active_tb", 0.9) for b in r.boxes]
        out.append(ImagePrediction(r.image_id, probs, boxes))
    return out


def test_perfect_predictions_score_100():
    index = tiny_index()
    rep = build_report(perfect_predictions(index), index)
    assert all(v == 100.0 for v in rep.classification.values())
    for mode in ("all", "only_tb"):
        assert rep.detection[mode]["category_agnostic"] == (100.0, 100.0)
        assert rep.detection[mode]["active_tb"] == (100.0, 100.0)
        assert rep.detection[mode]["latent_tb"] == (100.0, 100.0)


def test_only_tb_ignores_non_tb_images():
    index = tiny_index()
    preds = perfect_predictions(index)
    base = detection_ap(preds, index, "category_agnostic", "only_tb")
    extra = DatasetIndex("test", index.records + [CxrRecord("h9", "h9.png", 32, 32, "healthy")])
    noisy = preds + [ImagePrediction("h9", (0, 0, 1), [PredictedBox((1, 1, 5, 5), "active_tb", 0.99)])]
    assert detection_ap(noisy, extra, "category_agnostic", "only_tb") == base
    assert detection_ap(noisy, extra, "category_agnostic", "all")[1] < base[1]


def test_uncertain_excluded_from_typed_views():
    index = tiny_index()
    scenes = build_scenes(perfect_predictions(index), index, "active_tb", "all")
    assert len(scenes) == 4
    assert len(build_scenes(perfect_predictions(index), index, "category_agnostic", "all")) == 5


def test_unknown_view_and_mode():
    index = tiny_index()
    with pytest.raises(ValueError):
        detection_ap(perfect_predictions(index), index, "nodule")
    with pytest.raises(ValueError):
        detection_ap(perfect_predictions(index), index, "category_agnostic", "some")


def test_protocol_violation():
    index = tiny_index()
    preds = perfect_predictions(index)
    preds[0] = ImagePrediction("h0", (1, 0, 0), [PredictedBox((1, 1, 4, 4), "active_tb", 0.3)])
    with pytest.raises(ProtocolViolation):
        build_report(preds, index, "all")
    build_report(preds, index, "only_tb")


def test_prediction_mismatch():
    index = tiny_index()
    preds = perfect_predictions(index)
    with pytest.raises(PredictionMismatch):
        classification_metrics(preds[:-1], index)
    with pytest.raises(PredictionMismatch):
        classification_metrics(preds + [preds[0]], index)
    with pytest.raises(PredictionMismatch):
        classification_metrics(preds + [ImagePrediction("zz", (1, 0, 0), [])], index)


@pytest.mark.parametrize("doc", [
    [],
    {"predictions": [{"image_id": "a", "class_probs": [1, 0]}]},
    {"predictions": [{"image_id": "a", "class_probs": [1, 0, 0], "boxes": [{"bbox": [0, 0, 0, 1],
                                                                            "tb_class": "active_tb", "score": 1}]}]},
    {"predictions": [{"image_id": "a", "class_probs": [1, 0, 0], "boxes": [{"bbox": [0, 0, 1, 1],
                                                                            "tb_class": "x", "score": 1}]}]},
    {"predictions": [{"image_id": "a", "class_probs": [1, 0, 0]}, {"image_id": "a", "class_probs": [1, 0, 0]}]},
    {"predictions": [{"image_id": "a", "class_probs": [1, "0", 0]}]},
])
def test_schema_errors(doc):
    with pytest.raises(PredictionSchemaError):
        parse_predictions(doc)


def test_report_bytes_stable(tmp_path):
    index = tiny_index()
    preds = perfect_predictions(index)
    preds[2] = ImagePrediction("t0", (0.1, 0.2, 0.7), [PredictedBox((3, 2, 8, 8), "active_tb", 0.6),
                                                       PredictedBox((15, 1, 5, 5), "latent_tb", 0.4)])
    outs = []
    for name in ("a", "b"):
        paths = write_report(build_report(preds, index), tmp_path / name)
        outs.append({k: p.read_bytes() for k, p in paths.items()})
    assert outs[0] == outs[1]
    doc = json.loads(outs[0]["report"])
    for mode, cells in doc["detection"].items():
        for cell in cells.values():
            assert 0 <= cell["ap"] <= cell["ap50"] <= 100
    assert all(0 <= v <= 100 for v in doc["classification"].values())
