"""Bounding-box generation and filtering: tags -> detector -> NMS -> cap.

Detectors are pluggable; the bundled mock detector reads a scene descriptor's
ground-truth objects so the whole pipeline stays deterministic and offline,
and a file-ingestion detector covers externally produced boxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from . import rng
from .encoders import SceneDescriptor

COCO80_LABELS = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck",
    "boat", "traffic light", "fire hydrant", "stop sign", "parking meter", "bench",
    "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
    "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove",
    "skateboard", "surfboard", "tennis racket", "bottle", "wine glass", "cup",
    "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
)

HISTOGRAM_BINS = ((0, 0, "0"), (1, 10, "1-10"), (11, 20, "11-20"),
                  (21, 30, "21-30"), (31, 50, "31-50"), (51, None, ">50"))


class PipelineError(RuntimeError):
    """A box-pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: str):
        super().__init__(f"box pipeline failed at stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Detection:
    """A scored, labeled axis-aligned box in image pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float
    score: float
    label: str

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def clipped(self, width: float, height: float) -> Detection | None:
        """Clip to image bounds; None when nothing remains."""
        x0, y0 = max(self.x0, 0.0), max(self.y0, 0.0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, x0=x0, y0=y0, x1=x1, y1=y1)

    def to_dict(self) -> dict:
        return {"box": [self.x0, self.y0, self.x1, self.y1], "score": self.score, "label": self.label}

    @classmethod
    def from_dict(cls, obj: dict) -> Detection:
        b = obj["box"]
        return cls(float(b[0]), float(b[1]), float(b[2]), float(b[3]),
                   float(obj["score"]), str(obj["label"]))


@dataclass
class DetectionSet:
    image_id: str
    detections: list[Detection] = field(default_factory=list)
    provenance: str = "mock"  # mock | file | external

    def __len__(self) -> int:
        return len(self.detections)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "detections": [d.to_dict() for d in self.detections]}

    @classmethod
    def from_dict(cls, obj: dict, provenance: str = "file") -> DetectionSet:
        return cls(
            image_id=str(obj["image_id"]),
            detections=[Detection.from_dict(d) for d in obj["detections"]],
            provenance=provenance,
        )


def iou(a: Detection, b: Detection) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _nms_order(dets: list[Detection]) -> list[int]:
    # deterministic total order: score desc, then x0, y0, input index asc
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].x0, dets[i].y0, i))


def nms_indices(dets: list[Detection], iou_threshold: float, class_aware: bool = True) -> list[int]:
    """Indices surviving greedy suppression, in descending-score keep order.

    A candidate is suppressed when its IoU with an already-kept box strictly
    exceeds the threshold (and, when class_aware, only if labels match).
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou threshold must lie in (0, 1], got {iou_threshold}")
    n = len(dets)
    if n == 0:
        return []
    order = _nms_order(dets)
    x0 = np.array([dets[i].x0 for i in order])
    y0 = np.array([dets[i].y0 for i in order])
    x1 = np.array([dets[i].x1 for i in order])
    y1 = np.array([dets[i].y1 for i in order])
    areas = (x1 - x0) * (y1 - y0)
    labels = [dets[i].label for i in order]
    alive = np.ones(n, dtype=bool)
    keep: list[int] = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        rest = np.nonzero(alive[pos + 1:])[0] + pos + 1
        if rest.size == 0:
            continue
        ix = np.minimum(x1[pos], x1[rest]) - np.maximum(x0[pos], x0[rest])
        iy = np.minimum(y1[pos], y1[rest]) - np.maximum(y0[pos], y0[rest])
        inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
        overlap = inter / (areas[pos] + areas[rest] - inter)
        suppress = overlap > iou_threshold
        if class_aware:
            same = np.array([labels[r] == labels[pos] for r in rest])
            suppress &= same
        alive[rest[suppress]] = False
    return keep


def nms(dets: DetectionSet, iou_threshold: float, class_aware: bool = True) -> DetectionSet:
    keep = nms_indices(dets.detections, iou_threshold, class_aware)
    return DetectionSet(dets.image_id, [dets.detections[i] for i in keep], dets.provenance)


# -- tag sources ---------------------------------------------------------------


class TagSource(Protocol):
    def tags_for(self, scene: SceneDescriptor) -> list[str]: ...


class SyntheticTags:
    """Ground-truth labels straight from the scene descriptor."""

    def tags_for(self, scene: SceneDescriptor) -> list[str]:
        return _dedup(o.label for o in scene.objects)


class FixedTags:
    """A fixed label list (COCO-80 style), independent of the image."""

    def __init__(self, labels=COCO80_LABELS):
        self.labels = list(labels)

    def tags_for(self, scene: SceneDescriptor) -> list[str]:
        return _dedup(self.labels)


class FileTags:
    """Labels read from a JSON file: either a list or {"tags": [...]}."""

    def __init__(self, path: str):
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        self.labels = list(obj["tags"] if isinstance(obj, dict) else obj)

    def tags_for(self, scene: SceneDescriptor) -> list[str]:
        return _dedup(self.labels)


def _dedup(labels) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for lab in labels:
        lab = str(lab).strip()
        if lab and lab not in seen:
            seen.add(lab)
            out.append(lab)
    return out


def make_tag_source(spec: str) -> TagSource:
    """Parse a tag-source spec: synthetic | coco80 | file:PATH."""
    if spec == "synthetic":
        return SyntheticTags()
    if spec == "coco80":
        return FixedTags()
    if spec.startswith("file:"):
        return FileTags(spec[len("file:"):])
    raise ValueError(f"unknown tag source {spec!r}")


# -- detectors -----------------------------------------------------------------


class Detector(Protocol):
    def detect(self, scene: SceneDescriptor, labels: list[str]) -> list[Detection]: ...


class MockDetector:
    """Emits each ground-truth box whose label is in the tag list.

    The primary proposal gets sub-percent coordinate jitter and a high score;
    a seeded number of near-duplicates with stronger jitter and lower scores
    exercise NMS. Fully deterministic per (detector seed, scene seed).
    """

    def __init__(self, seed: int = 0, jitter_frac: float = 0.001,
                 duplicate_jitter: float = 0.05, max_duplicates: int = 2):
        self.seed = seed
        self.jitter_frac = jitter_frac
        self.duplicate_jitter = duplicate_jitter
        self.max_duplicates = max_duplicates

    def _jitter(self, obj, frac: float, gen: np.random.Generator) -> tuple[float, float, float, float]:
        w, h = obj.x1 - obj.x0, obj.y1 - obj.y0
        dx = gen.uniform(-frac, frac, size=4)
        return (obj.x0 + dx[0] * w, obj.y0 + dx[1] * h, obj.x1 + dx[2] * w, obj.y1 + dx[3] * h)

    def detect(self, scene: SceneDescriptor, labels: list[str]) -> list[Detection]:
        gen = rng.stream(self.seed, f"detector.mock.{scene.seed}")
        wanted = set(labels)
        out: list[Detection] = []
        for obj in scene.objects:
            if obj.label not in wanted:
                continue
            x0, y0, x1, y1 = self._jitter(obj, self.jitter_frac, gen)
            score = gen.uniform(0.7, 1.0)
            out.append(Detection(x0, y0, x1, y1, score, obj.label))
            for _ in range(int(gen.integers(0, self.max_duplicates + 1))):
                dx0, dy0, dx1, dy1 = self._jitter(obj, self.duplicate_jitter, gen)
                out.append(Detection(dx0, dy0, dx1, dy1, score * gen.uniform(0.4, 0.9), obj.label))
        return out


class FileDetector:
    """Serves detections ingested from box JSON files, filtered by tag list."""

    def __init__(self, path: str):
        self.sets = {s.image_id: s for s in load_box_file(path)}

    def detect(self, scene: SceneDescriptor, labels: list[str]) -> list[Detection]:
        entry = self.sets.get(scene.image_id)
        if entry is None:
            raise KeyError(f"no detections on file for image {scene.image_id!r}")
        wanted = set(labels)
        return [d for d in entry.detections if d.label in wanted]


# -- the pipeline ----------------------------------------------------------------


@dataclass(frozen=True)
class BoxPipelineConfig:
    nms_iou: float = 0.5
    score_floor: float = 0.05
    max_boxes: int = 100
    class_aware: bool = True


def generate_boxes(
    scene: SceneDescriptor,
    tags: TagSource,
    detector: Detector,
    cfg: BoxPipelineConfig = BoxPipelineConfig(),
) -> DetectionSet:
    """tag -> detect -> clip -> score filter -> NMS -> cap, score-descending."""
    try:
        labels = tags.tags_for(scene)
    except Exception as exc:  # noqa: BLE001 - stage name must reach the caller
        raise PipelineError("tag", str(exc)) from exc
    if not labels:
        return DetectionSet(scene.image_id, [], provenance="mock")
    try:
        proposals = detector.detect(scene, labels)
    except Exception as exc:  # noqa: BLE001
        raise PipelineError("detect", str(exc)) from exc
    clipped = [c for d in proposals if (c := d.clipped(scene.width, scene.height)) is not None]
    scored = [d for d in clipped if d.score >= cfg.score_floor]
    keep = nms_indices(scored, cfg.nms_iou, cfg.class_aware)
    survivors = [scored[i] for i in keep][: cfg.max_boxes]
    provenance = "file" if isinstance(detector, FileDetector) else "mock"
    return DetectionSet(scene.image_id, survivors, provenance=provenance)


def box_stats(corpus: list[DetectionSet]) -> dict[str, int]:
    """Histogram of per-image box counts over the fixed reporting bins."""
    counts = {name: 0 for _, _, name in HISTOGRAM_BINS}
    for dets in corpus:
        k = len(dets)
        for lo, hi, name in HISTOGRAM_BINS:
            if k >= lo and (hi is None or k <= hi):
                counts[name] += 1
                break
    return counts


# -- file I/O --------------------------------------------------------------------


def load_box_file(path: str) -> list[DetectionSet]:
    """Load one box JSON file: a single set or a list of sets."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    entries = obj if isinstance(obj, list) else [obj]
    return [DetectionSet.from_dict(e) for e in entries]


def save_box_file(sets: list[DetectionSet], path: str) -> None:
    payload = [s.to_dict() for s in sets]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload[0] if len(payload) == 1 else payload, fh, indent=2)
