import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctdiag.data import (IMAGE_CLASSES, AnnotationParseError, CxrRecord, DatasetIndex, DatasetValidationError,
                         TbBox, box_area_histogram, dumps, load_dataset, save_dataset, split_stats)

# image counts per split, copied from the dataset's published split table
SPLIT_COUNTS = {
    "train": {"healthy": 3000, "sick_non_tb": 3000, "tb_active": 473, "tb_latent": 104,
              "tb_active_latent": 23, "tb_uncertain": 0},
    "val": {"healthy": 800, "sick_non_tb": 800, "tb_active": 157, "tb_latent": 36,
            "tb_active_latent": 7, "tb_uncertain": 0},
    "test": {"healthy": 1200, "sick_non_tb": 1200, "tb_active": 294, "tb_latent": 72,
             "tb_active_latent": 24, "tb_uncertain": 10},
}
BOX_FOR = {"tb_active": ["active_tb"], "tb_latent": ["latent_tb"], "tb_active_latent": ["active_tb", "latent_tb"],
           "tb_uncertain": [None]}


def tbx_document(split):
    images, anns = [], []
    for cls, n in SPLIT_COUNTS[split].items():
        for i in range(n):
            iid = f"{split}-{cls}-{i}"
            images.append({"id": iid, "file_name": f"imgs/{iid}.png", "width": 512, "height": 512,
                           "gender": "unknown", "age": -1, "image_class": cls})
            for k, t in enumerate(BOX_FOR.get(cls, [])):
                anns.append({"image_id": iid, "bbox": [10 + 100 * k, 20, 60, 80], "tb_class": t})
    return {"images": images, "annotations": anns, "split": split}


def write(tmp_path, doc, name="a.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_tbx11k_shaped_train_file(tmp_path):
    index = load_dataset(write(tmp_path, tbx_document("train")), split="train")
    assert len(index) == 6600
    stats = split_stats(index)
    assert stats == {**SPLIT_COUNTS["train"], "total": 6600}


def test_tbx11k_shaped_test_file(tmp_path):
    stats = split_stats(load_dataset(write(tmp_path, tbx_document("test"))))
    assert stats["total"] == 2800 and stats["tb_uncertain"] == 10


def test_empty_records(tmp_path):
    index = load_dataset(write(tmp_path, {"images": [], "annotations": [], "split": "val"}))
    assert index.class_counts == {c: 0 for c in IMAGE_CLASSES}
    assert split_stats(index)["total"] == 0


def test_healthy_with_box_is_rejected(tmp_path):
    doc = {"images": [{"id": "a", "file_name": "a.png", "width": 64, "height": 64, "gender": "male",
                       "age": 30, "image_class": "healthy"}],
           "annotations": [{"image_id": "a", "bbox": [1, 1, 5, 5], "tb_class": "active_tb"}], "split": "train"}
    with pytest.raises(DatasetValidationError) as e:
        load_dataset(write(tmp_path, doc))
    assert any("must not carry boxes" in p for p in e.value.problems)


def test_every_violation_listed(tmp_path):
    doc = tbx_document("val")
    doc["images"] = doc["images"][790:820]
    keep = {im["id"] for im in doc["images"]}
    doc["annotations"] = [a for a in doc["annotations"] if a["image_id"] in keep]
    doc["annotations"].append({"image_id": doc["images"][0]["id"], "bbox": [0, 0, 4, 4], "tb_class": None})
    doc["images"][-1]["image_class"] = "tb_latent"  # typed TB without boxes
    doc["images"].append(dict(doc["images"][1]))     # duplicate id
    with pytest.raises(DatasetValidationError) as e:
        load_dataset(write(tmp_path, doc))
    assert len(e.value.problems) == 3


@pytest.mark.parametrize("text", ["{not json", json.dumps({"images": []}), json.dumps([1, 2])])
def test_parse_errors(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(AnnotationParseError):
        load_dataset(p)


def test_split_mismatch(tmp_path):
    with pytest.raises(DatasetValidationError):
        load_dataset(write(tmp_path, {"images": [], "annotations": [], "split": "val"}), split="train")


@pytest.mark.parametrize("cls,kinds,ok", [
    ("tb_active", ["active_tb"], True), ("tb_active", ["latent_tb"], False),
    ("tb_latent", ["latent_tb", "latent_tb"], True), ("tb_active_latent", ["active_tb"], False),
    ("tb_active_latent", ["active_tb", "latent_tb"], True), ("tb_uncertain", [None], True),
    ("tb_uncertain", ["active_tb"], True), ("tb_active", [None], False), ("sick_non_tb", [], True),
])
def test_record_invariants(cls, kinds, ok):
    boxes = [TbBox(1 + 10 * i, 1, 5, 5, k) for i, k in enumerate(kinds)]
    assert (CxrRecord("i", "i.png", 64, 64, cls, boxes=boxes).problems() == []) == ok


def test_box_outside_image():
    rec = CxrRecord("i", "i.png", 64, 64, "tb_active", boxes=[TbBox(60, 0, 10, 10, "active_tb")])
    assert any("outside" in p for p in rec.problems())


def test_round_trip_bit_identical(tmp_path):
    src = write(tmp_path, tbx_document("test"), "src.json")
    index = load_dataset(src)
    first = save_dataset(index, tmp_path / "one.json").read_bytes()
    second = save_dataset(load_dataset(tmp_path / "one.json"), tmp_path / "two.json").read_bytes()
    assert first == second == dumps(index).encode()


def test_area_histogram_examples():
    rec = CxrRecord("i", "i.png", 512, 512, "tb_active", boxes=[TbBox(0, 0, 10, 10, "active_tb")])
    idx = DatasetIndex("train", [rec])
    assert box_area_histogram(idx, [0, 192 ** 2, 384 ** 2]).tolist() == [1, 0]
    assert box_area_histogram(DatasetIndex("train", []), [0, 1, 2]).tolist() == [0, 0]
    with pytest.raises(ValueError):
        box_area_histogram(idx, [0, 5, 5])


box_st = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 20), st.integers(1, 20))


@given(st.lists(st.tuples(st.sampled_from(IMAGE_CLASSES), st.lists(box_st, min_size=1, max_size=3)), max_size=25))
def test_split_stats_total(entries):
    recs = []
    for i, (cls, boxes) in enumerate(entries):
        bx = [TbBox(*b, "active_tb") for b in boxes] if cls in ("tb_active", "tb_uncertain") else []
        recs.append(CxrRecord(f"r{i}", "x.png", 64, 64, cls, boxes=bx))
    stats = split_stats(DatasetIndex("train", recs))
    assert stats["total"] == len(recs) == sum(v for k, v in stats.items() if k != "total")


@given(st.lists(st.floats(1, 4000), max_size=30))
def test_histogram_counts_in_range(areas):
    recs = [CxrRecord(f"r{i}", "x.png", 100, 100, "tb_active", boxes=[TbBox(0, 0, a / 50, 50, "active_tb")])
            for i, a in enumerate(areas)]
    edges = [0, 100, 500, 2000]
    counts = box_area_histogram(DatasetIndex("train", recs), edges)
    inside = sum(1 for r in recs if 0 <= r.boxes[0].area <= 2000)
    assert counts.sum() == inside
    assert np.all(counts >= 0)
