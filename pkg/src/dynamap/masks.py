"""Per-frame instance segmentation results: loading the PNG+JSON mask dataset
format, flattening instances into a single binary dynamic-state image, and the
morphological dilation used to absorb blurred object boundaries.

Dataset format per frame: a 16-bit grayscale PNG where pixel value 0 is
background and value k marks instance k, plus a JSON sidecar
``{frame_id, width, height, instances: [{id, class_name, class_id, confidence,
bbox: [x, y, w, h]}]}``.
"""

import json
import os
from dataclasses import dataclass

import cv2
import numpy as np


class SegmentationParseError(ValueError):
    """Raised for malformed mask files; message names the frame and instance."""


@dataclass
class InstanceMask:
    instance_id: int
    class_id: int
    class_name: str
    confidence: float
    bitmap: np.ndarray  # (H, W) bool
    bbox: tuple  # (x, y, w, h), tight around the bitmap

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.bitmap))


@dataclass
class SegmentationResult:
    frame_id: int
    width: int
    height: int
    instances: list


def tight_bbox(bitmap: np.ndarray):
    """(x, y, w, h) of the set pixels; (0, 0, 0, 0) for an empty bitmap."""
    ys, xs = np.nonzero(bitmap)
    if len(xs) == 0:
        return (0, 0, 0, 0)
    return (int(xs.min()), int(ys.min()),
            int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def load_segmentation(png_path, json_path=None) -> SegmentationResult:
    if json_path is None:
        json_path = os.path.splitext(png_path)[0] + ".json"
    try:
        with open(json_path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SegmentationParseError(f"{json_path}: unreadable sidecar ({e})")
    for key in ("frame_id", "width", "height", "instances"):
        if key not in meta:
            raise SegmentationParseError(f"{json_path}: missing key {key!r}")
    frame_id = meta["frame_id"]

    img = cv2.imread(str(png_path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise SegmentationParseError(f"frame {frame_id}: cannot read {png_path}")
    if img.ndim != 2:
        raise SegmentationParseError(f"frame {frame_id}: mask PNG must be single-channel")
    h, w = img.shape
    if (w, h) != (meta["width"], meta["height"]):
        raise SegmentationParseError(
            f"frame {frame_id}: mask is {w}x{h} but sidecar says "
            f"{meta['width']}x{meta['height']}")

    by_id = {}
    for inst in meta["instances"]:
        try:
            iid = int(inst["id"])
            class_id = int(inst["class_id"])
            name = str(inst["class_name"])
            conf = float(inst["confidence"])
            bbox = tuple(int(v) for v in inst["bbox"])
        except (KeyError, TypeError, ValueError) as e:
            raise SegmentationParseError(
                f"frame {frame_id}: malformed instance entry {inst!r} ({e})")
        if iid <= 0:
            raise SegmentationParseError(
                f"frame {frame_id}, instance {iid}: ids must be positive")
        if class_id < 0:
            raise SegmentationParseError(
                f"frame {frame_id}, instance {iid}: unknown class id {class_id}")
        if not 0.0 <= conf <= 1.0:
            raise SegmentationParseError(
                f"frame {frame_id}, instance {iid}: confidence {conf} outside [0, 1]")
        if len(bbox) != 4:
            raise SegmentationParseError(
                f"frame {frame_id}, instance {iid}: bbox must have 4 entries")
        by_id[iid] = (class_id, name, conf, bbox)

    present = set(int(v) for v in np.unique(img) if v != 0)
    missing = present - set(by_id)
    if missing:
        raise SegmentationParseError(
            f"frame {frame_id}: pixels reference instances {sorted(missing)} "
            f"absent from the sidecar")

    instances = []
    for iid in sorted(by_id):
        class_id, name, conf, bbox = by_id[iid]
        bitmap = img == iid
        if tight_bbox(bitmap) != bbox:
            raise SegmentationParseError(
                f"frame {frame_id}, instance {iid}: bbox {bbox} is not the "
                f"tight bounding rectangle {tight_bbox(bitmap)}")
        instances.append(InstanceMask(iid, class_id, name, conf, bitmap, bbox))
    return SegmentationResult(frame_id, w, h, instances)


def save_segmentation(seg: SegmentationResult, png_path, json_path=None):
    """Writer counterpart of :func:`load_segmentation` (16-bit PNG + sidecar)."""
    if json_path is None:
        json_path = os.path.splitext(png_path)[0] + ".json"
    img = np.zeros((seg.height, seg.width), dtype=np.uint16)
    for inst in seg.instances:
        img[inst.bitmap] = inst.instance_id
    cv2.imwrite(str(png_path), img)
    meta = {
        "frame_id": seg.frame_id,
        "width": seg.width,
        "height": seg.height,
        "instances": [
            {"id": inst.instance_id, "class_name": inst.class_name,
             "class_id": inst.class_id, "confidence": round(inst.confidence, 6),
             "bbox": list(inst.bbox)}
            for inst in seg.instances
        ],
    }
    with open(json_path, "w") as f:
        json.dump(meta, f, indent=1)


def flatten_dynamic(seg: SegmentationResult, dynamic_classes,
                    min_confidence: float = 0.5) -> np.ndarray:
    """Union of all instance bitmaps whose class is dynamic: set pixel =
    dynamic state. Instances below the confidence gate are ignored."""
    out = np.zeros((seg.height, seg.width), dtype=bool)
    dynamic_classes = set(dynamic_classes)
    for inst in seg.instances:
        if inst.class_id in dynamic_classes and inst.confidence >= min_confidence:
            out |= inst.bitmap
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1)-square structuring element; r = 0 is identity."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    kernel = np.ones((2 * radius + 1, 2 * radius + 1), np.uint8)
    return cv2.dilate(mask.astype(np.uint8), kernel) > 0


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    kernel = np.ones((2 * radius + 1, 2 * radius + 1), np.uint8)
    return cv2.erode(mask.astype(np.uint8), kernel) > 0
