import json

import cv2
import numpy as np
import pytest

from dynamap.masks import (InstanceMask, SegmentationParseError,
                           SegmentationResult, dilate, erode, flatten_dynamic,
                           load_segmentation, save_segmentation, tight_bbox)


def brute_force_dilate(mask, radius):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - radius), min(h, y + radius + 1)
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            out[y, x] = mask[y0:y1, x0:x1].any()
    return out


def write_fixture(tmp_path, img, instances, frame_id=0, size=None):
    """Hand-rolled writer independent of save_segmentation."""
    h, w = img.shape
    png = tmp_path / f"{frame_id:06d}.png"
    cv2.imwrite(str(png), img.astype(np.uint16))
    meta = {"frame_id": frame_id,
            "width": size[0] if size else w,
            "height": size[1] if size else h,
            "instances": instances}
    (tmp_path / f"{frame_id:06d}.json").write_text(json.dumps(meta))
    return png


def inst_meta(iid, class_id, name, conf, bbox):
    return {"id": iid, "class_id": class_id, "class_name": name,
            "confidence": conf, "bbox": list(bbox)}


# ---------------------------------------------------------------------------
# load_segmentation
# ---------------------------------------------------------------------------

def test_load_empty_frame(tmp_path):
    png = write_fixture(tmp_path, np.zeros((8, 10), np.uint16), [])
    seg = load_segmentation(png)
    assert seg.instances == [] and (seg.width, seg.height) == (10, 8)


def test_load_single_square(tmp_path):
    img = np.zeros((8, 10), np.uint16)
    img[2:4, 3:5] = 1
    png = write_fixture(tmp_path, img, [inst_meta(1, 1, "person", 0.9, (3, 2, 2, 2))])
    seg = load_segmentation(png)
    assert len(seg.instances) == 1
    inst = seg.instances[0]
    assert inst.class_name == "person" and inst.bbox == (3, 2, 2, 2)
    assert inst.pixel_count == 4


def test_load_three_instance_fixture(tmp_path):
    img = np.zeros((16, 20), np.uint16)
    img[1:5, 1:4] = 1
    img[8:12, 5:11] = 2
    img[13:15, 15:19] = 3
    metas = [inst_meta(1, 1, "person", 0.97, (1, 1, 3, 4)),
             inst_meta(2, 2, "agv", 0.81, (5, 8, 6, 4)),
             inst_meta(3, 1, "person", 0.55, (15, 13, 4, 2))]
    seg = load_segmentation(write_fixture(tmp_path, img, metas))
    assert [i.instance_id for i in seg.instances] == [1, 2, 3]
    assert [i.class_id for i in seg.instances] == [1, 2, 1]
    assert [i.bbox for i in seg.instances] == [(1, 1, 3, 4), (5, 8, 6, 4), (15, 13, 4, 2)]
    assert [i.confidence for i in seg.instances] == [0.97, 0.81, 0.55]
    assert seg.instances[1].pixel_count == 24


def test_load_dimension_mismatch(tmp_path):
    img = np.zeros((8, 10), np.uint16)
    png = write_fixture(tmp_path, img, [], size=(99, 8))
    with pytest.raises(SegmentationParseError, match="8"):
        load_segmentation(png)


def test_load_orphan_pixels(tmp_path):
    img = np.zeros((8, 10), np.uint16)
    img[0, 0] = 7
    png = write_fixture(tmp_path, img, [])
    with pytest.raises(SegmentationParseError, match="7"):
        load_segmentation(png)


def test_load_untight_bbox(tmp_path):
    img = np.zeros((8, 10), np.uint16)
    img[2:4, 3:5] = 1
    png = write_fixture(tmp_path, img, [inst_meta(1, 1, "person", 0.9, (0, 0, 10, 8))])
    with pytest.raises(SegmentationParseError, match="instance 1"):
        load_segmentation(png)


def test_load_bad_class_and_confidence(tmp_path):
    img = np.zeros((8, 10), np.uint16)
    img[0, 0] = 1
    png = write_fixture(tmp_path, img, [inst_meta(1, -5, "x", 0.5, (0, 0, 1, 1))])
    with pytest.raises(SegmentationParseError, match="unknown class id"):
        load_segmentation(png)
    png = write_fixture(tmp_path, img, [inst_meta(1, 1, "x", 1.5, (0, 0, 1, 1))])
    with pytest.raises(SegmentationParseError, match="confidence"):
        load_segmentation(png)


def test_save_load_round_trip(tmp_path):
    img = np.zeros((12, 12), np.uint16)
    img[3:6, 3:9] = 2
    seg = SegmentationResult(5, 12, 12, [
        InstanceMask(2, 4, "cart", 0.75, img == 2, tight_bbox(img == 2))])
    save_segmentation(seg, tmp_path / "000005.png")
    back = load_segmentation(tmp_path / "000005.png")
    assert back.frame_id == 5
    assert np.array_equal(back.instances[0].bitmap, seg.instances[0].bitmap)
    assert back.instances[0].class_id == 4


# ---------------------------------------------------------------------------
# flatten_dynamic
# ---------------------------------------------------------------------------

def make_seg(bitmaps, class_ids, confidences=None):
    h, w = bitmaps[0].shape
    confidences = confidences or [1.0] * len(bitmaps)
    instances = [InstanceMask(i + 1, c, f"class{c}", conf, b, tight_bbox(b))
                 for i, (b, c, conf) in enumerate(zip(bitmaps, class_ids, confidences))]
    return SegmentationResult(0, w, h, instances)


def test_flatten_no_dynamic_classes():
    b = np.zeros((6, 6), bool)
    b[1:3, 1:3] = True
    seg = make_seg([b], [1])
    assert not flatten_dynamic(seg, set()).any()


def test_flatten_disjoint_sum():
    b1 = np.zeros((6, 6), bool)
    b1[0:2, 0:2] = True
    b2 = np.zeros((6, 6), bool)
    b2[4:6, 4:6] = True
    out = flatten_dynamic(make_seg([b1, b2], [1, 1]), {1})
    assert out.sum() == b1.sum() + b2.sum()


def test_flatten_overlap_matches_brute_force_union():
    rng = np.random.default_rng(3)
    for _ in range(10):
        b1 = rng.random((16, 16)) < 0.3
        b2 = rng.random((16, 16)) < 0.3
        out = flatten_dynamic(make_seg([b1, b2], [1, 1]), {1})
        # brute-force union by pixel scan
        expect = np.zeros((16, 16), bool)
        for y in range(16):
            for x in range(16):
                expect[y, x] = b1[y, x] or b2[y, x]
        assert np.array_equal(out, expect)
        assert out.sum() == b1.sum() + b2.sum() - (b1 & b2).sum()


def test_flatten_permutation_invariant():
    rng = np.random.default_rng(4)
    bitmaps = [rng.random((10, 10)) < 0.2 for _ in range(4)]
    classes = [1, 2, 1, 3]
    a = flatten_dynamic(make_seg(bitmaps, classes), {1, 3})
    b = flatten_dynamic(make_seg(bitmaps[::-1], classes[::-1]), {1, 3})
    assert np.array_equal(a, b)


def test_flatten_respects_class_set_and_confidence():
    b1 = np.zeros((6, 6), bool)
    b1[0, 0] = True
    b2 = np.zeros((6, 6), bool)
    b2[5, 5] = True
    seg = make_seg([b1, b2], [1, 2], [0.9, 0.9])
    out = flatten_dynamic(seg, {1})
    assert out[0, 0] and not out[5, 5]
    seg = make_seg([b1], [1], [0.3])
    assert not flatten_dynamic(seg, {1}, min_confidence=0.5).any()


# ---------------------------------------------------------------------------
# dilate / erode
# ---------------------------------------------------------------------------

def test_dilate_single_pixel():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    out = dilate(m, 1)
    expect = np.zeros((7, 7), bool)
    expect[2:5, 2:5] = True
    assert np.array_equal(out, expect)


def test_dilate_clips_at_border():
    m = np.zeros((5, 5), bool)
    m[0, 0] = True
    out = dilate(m, 2)
    assert out.sum() == 9  # 3x3 corner block survives clipping
    assert out[:3, :3].all()


def test_dilate_radius_zero_identity():
    rng = np.random.default_rng(0)
    m = rng.random((9, 9)) < 0.4
    assert np.array_equal(dilate(m, 0), m)


@pytest.mark.parametrize("radius", [1, 2, 3])
def test_dilate_matches_brute_force(radius):
    rng = np.random.default_rng(radius)
    m = rng.random((64, 64)) < 0.05
    assert np.array_equal(dilate(m, radius), brute_force_dilate(m, radius))


def test_dilate_extensive_and_monotone():
    rng = np.random.default_rng(5)
    for _ in range(5):
        m2 = rng.random((32, 32)) < 0.2
        m1 = m2 & (rng.random((32, 32)) < 0.5)  # m1 subset of m2
        for r in range(4):
            d1, d2 = dilate(m1, r), dilate(m2, r)
            assert np.all(d2 | ~m2)            # extensivity: m2 subset of d2
            assert np.all(d2 | ~d1)            # monotonicity: d1 subset of d2


def test_dilate_composition():
    rng = np.random.default_rng(6)
    m = rng.random((40, 40)) < 0.1
    for a, b in [(1, 1), (1, 2), (2, 2)]:
        assert np.array_equal(dilate(dilate(m, a), b), dilate(m, a + b))


def test_dilate_negative_radius():
    with pytest.raises(ValueError):
        dilate(np.zeros((3, 3), bool), -1)


def test_erode_is_anti_extensive():
    rng = np.random.default_rng(7)
    m = rng.random((32, 32)) < 0.6
    for r in range(4):
        e = erode(m, r)
        assert np.all(m | ~e)  # e subset of m
