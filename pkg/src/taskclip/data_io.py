"""File formats: scenes, task specs, checkpoints, predictions, reports.

Scenes and predictions are JSON Lines (one image/task pair per line). Task
specs, reports and threshold maps are single JSON documents. Checkpoints are
binary::

    b"TCKP" | u32 version | u32 manifest length | manifest JSON | float32 blobs

with all integers and floats little-endian. The manifest lists each tensor's
name, shape and byte offset into the blob section.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .recalibration import ModelConfig, Params
from .tensor import Tensor


class DataError(ValueError):
    """Base class for input file problems."""


class ParseError(DataError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class SchemaError(DataError):
    pass


class CheckpointError(DataError):
    code = "checkpoint"


class MagicMismatchError(CheckpointError):
    code = "bad_magic"


class UnsupportedVersionError(CheckpointError):
    code = "bad_version"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


# --- domain types ---------------------------------------------------------------

@dataclass
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = -1
    class_conf: float = 1.0

    def validate(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise SchemaError(f"degenerate box extents {self.coords()}")
        if not 0.0 <= self.class_conf <= 1.0:
            raise SchemaError(f"class_conf {self.class_conf} outside [0, 1]")

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max,
                "class_id": self.class_id, "class_conf": self.class_conf}


@dataclass
class Box:
    bbox: BBox
    embedding: np.ndarray
    gt_label: int | None = None


@dataclass
class SceneRecord:
    image_id: str
    task_id: int
    global_tokens: np.ndarray
    boxes: list[Box] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.global_tokens.shape[1])

    def box_embeddings(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, self.dim))
        return np.stack([b.embedding for b in self.boxes])

    def labels(self) -> np.ndarray:
        if any(b.gt_label is None for b in self.boxes):
            raise SchemaError(f"scene {self.image_id}/{self.task_id} has boxes without gt_label")
        return np.array([b.gt_label for b in self.boxes], dtype=int)

    def to_dict(self) -> dict:
        boxes = []
        for b in self.boxes:
            d = b.bbox.to_dict()
            if b.gt_label is not None:
                d["gt_label"] = int(b.gt_label)
            d["embedding"] = [float(x) for x in b.embedding]
            boxes.append(d)
        return {"image_id": self.image_id, "task_id": self.task_id,
                "global_tokens": [[float(x) for x in row] for row in self.global_tokens],
                "boxes": boxes}


@dataclass
class TaskSpec:
    task_id: int
    task_name: str
    attribute_words: list[str]
    word_embeddings: np.ndarray

    @property
    def n_word(self) -> int:
        return len(self.attribute_words)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "task_name": self.task_name,
                "attribute_words": list(self.attribute_words),
                "word_embeddings": [[float(x) for x in row] for row in self.word_embeddings]}


# --- scenes ---------------------------------------------------------------------

def _matrix(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise SchemaError(f"{what} must be a non-empty matrix")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{what} contains non-finite values")
    return arr


def scene_from_dict(obj: Mapping, require_labels: bool = False) -> SceneRecord:
    try:
        g = _matrix(obj["global_tokens"], "global_tokens")
        d = g.shape[1]
        boxes = []
        for i, b in enumerate(obj["boxes"]):
            bbox = BBox(float(b["x_min"]), float(b["y_min"]), float(b["x_max"]), float(b["y_max"]),
                        int(b.get("class_id", -1)), float(b.get("class_conf", 1.0)))
            bbox.validate()
            emb = np.asarray(b["embedding"], dtype=float)
            if emb.shape != (d,):
                raise SchemaError(f"box {i}: embedding length {emb.size} != {d}")
            if not np.all(np.isfinite(emb)):
                raise SchemaError(f"box {i}: embedding contains non-finite values")
            label = b.get("gt_label")
            if label is not None and label not in (0, 1):
                raise SchemaError(f"box {i}: gt_label must be 0 or 1, got {label!r}")
            if label is None and require_labels:
                raise SchemaError(f"box {i}: gt_label missing")
            boxes.append(Box(bbox, emb, None if label is None else int(label)))
        return SceneRecord(str(obj["image_id"]), int(obj["task_id"]), g, boxes)
    except KeyError as e:
        raise SchemaError(f"missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, SchemaError):
            raise
        raise SchemaError(str(e)) from None


def load_scenes(path, require_labels: bool = False,
                known_tasks: Iterable[int] | None = None) -> list[SceneRecord]:
    """Read and validate a scenes file. Box order in the file is preserved."""
    known = None if known_tasks is None else set(known_tasks)
    scenes: list[SceneRecord] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, lineno, f"invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            try:
                scene = scene_from_dict(obj, require_labels)
            except SchemaError as e:
                raise SchemaError(f"{path}:{lineno}: {e}") from None
            if dim is None:
                dim = scene.dim
            elif scene.dim != dim:
                raise SchemaError(f"{path}:{lineno}: embedding dimension {scene.dim} != {dim} from earlier lines")
            if known is not None and scene.task_id not in known:
                raise SchemaError(f"{path}:{lineno}: unknown task_id {scene.task_id}")
            scenes.append(scene)
    return scenes


def save_scenes(scenes: Iterable[SceneRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


# --- tasks ----------------------------------------------------------------------

def task_from_dict(obj: Mapping) -> TaskSpec:
    try:
        words = [str(w) for w in obj["attribute_words"]]
        emb = _matrix(obj["word_embeddings"], "word_embeddings")
        if emb.shape[0] != len(words):
            raise SchemaError(f"{len(words)} attribute words but {emb.shape[0]} embedding rows")
        return TaskSpec(int(obj["task_id"]), str(obj.get("task_name", "")), words, emb)
    except KeyError as e:
        raise SchemaError(f"task spec missing field {e.args[0]!r}") from None


def load_task(path) -> TaskSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(path, e.lineno, f"invalid JSON ({e.msg})") from None
    try:
        return task_from_dict(obj)
    except SchemaError as e:
        raise SchemaError(f"{path}: {e}") from None


def save_task(task: TaskSpec, path) -> None:
    Path(path).write_text(json.dumps(task.to_dict(), separators=(",", ":")) + "\n", encoding="utf-8")


def load_tasks(paths: Iterable) -> dict[int, TaskSpec]:
    tasks: dict[int, TaskSpec] = {}
    for p in paths:
        t = load_task(p)
        if t.task_id in tasks:
            raise SchemaError(f"{p}: duplicate task_id {t.task_id}")
        tasks[t.task_id] = t
    return tasks


def load_task_dir(directory) -> dict[int, TaskSpec]:
    """Every ``task*.json`` in a directory, keyed by task_id."""
    return load_tasks(sorted(Path(directory).glob("task*.json")))


# --- checkpoints ----------------------------------------------------------------

MAGIC = b"TCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


def checkpoint_bytes(params: Params, config: ModelConfig, meta: Mapping | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    if len({e["name"] for e in entries}) != len(entries):
        raise CheckpointError("duplicate parameter names")
    manifest = {"format_version": FORMAT_VERSION, "config": config.to_dict(),
                "meta": dict(meta or {}), "tensors": entries}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes + b"".join(blobs)


def save_checkpoint(params: Params, config: ModelConfig, path, meta: Mapping | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config, meta))


def parse_checkpoint(raw: bytes) -> tuple[Params, ModelConfig, dict]:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicMismatchError(f"not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpointError("header cut short")
    _, version, mlen = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} not supported (expected {FORMAT_VERSION})")
    body = _HEADER.size + mlen
    if len(raw) < body:
        raise TruncatedCheckpointError("manifest cut short")
    try:
        manifest = json.loads(raw[_HEADER.size:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("manifest is not valid JSON") from None
    config = ModelConfig.from_dict(manifest["config"])
    params: Params = {}
    for e in manifest["tensors"]:
        lo, hi = body + e["offset"], body + e["offset"] + e["nbytes"]
        if hi > len(raw):
            raise TruncatedCheckpointError(f"tensor {e['name']} runs past end of file")
        arr = np.frombuffer(raw[lo:hi], dtype="<f4").reshape(e["shape"]).astype(np.float32)
        params[e["name"]] = Tensor(arr, requires_grad=True)
    return params, config, manifest.get("meta", {})


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    """Returns (params, config, training metadata)."""
    return parse_checkpoint(Path(path).read_bytes())


# --- predictions, reports, thresholds -------------------------------------------

def save_predictions(records: Iterable[Mapping], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")


def load_predictions(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, lineno, f"invalid JSON ({e.msg})") from None
            for key in ("image_id", "task_id", "boxes"):
                if key not in rec:
                    raise SchemaError(f"{path}:{lineno}: prediction missing {key!r}")
            out.append(rec)
    return out


def save_report(report: Mapping, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_thresholds(thresholds: Mapping[int, float], path) -> None:
    Path(path).write_text(json.dumps({str(k): float(v) for k, v in sorted(thresholds.items())},
                                     indent=2) + "\n", encoding="utf-8")


def load_thresholds(path) -> dict[int, float]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for k, v in raw.items():
        v = float(v)
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise SchemaError(f"{path}: threshold for task {k} outside [0, 1]")
        out[int(k)] = v
    return out
