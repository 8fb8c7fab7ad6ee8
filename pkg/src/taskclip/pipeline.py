"""Scene-level forward pass and prediction records."""

from __future__ import annotations

import numpy as np

from .data_io import SceneRecord, TaskSpec
from .recalibration import ModelConfig, Params, recalibrate
from .scorer import GroupingConfig, decide, score_tensor, select_by_grouping
from .tensor import Tensor


def scene_scores_tensor(scene: SceneRecord, task: TaskSpec, params: Params, cfg: ModelConfig) -> Tensor:
    """Scores [1×N_bbox] for one scene under its task, still attached to the graph."""
    return score_tensor(recalibrate(scene, task, params, cfg), params, cfg.n_head)


def scene_scores(scene: SceneRecord, task: TaskSpec, params: Params, cfg: ModelConfig) -> np.ndarray:
    if not scene.boxes:
        return np.zeros(0)
    return scene_scores_tensor(scene, task, params, cfg).data.reshape(-1).astype(float)


def predict_scene(scene: SceneRecord, task: TaskSpec, params: Params, cfg: ModelConfig,
                  threshold: float, grouping: GroupingConfig | None = None) -> dict:
    """Score, threshold and (optionally) group one scene into a prediction record."""
    s = scene_scores(scene, task, params, cfg)
    p = decide(s, threshold)
    ds = select_by_grouping(p, [b.bbox.class_id for b in scene.boxes],
                            [b.bbox.class_conf for b in scene.boxes], s,
                            grouping or GroupingConfig(enabled=False), threshold)
    boxes = [
        {"index": i, "score": float(ds.scores[i]), "rank_score": float(ds.rank_scores[i]),
         "decision": int(ds.decisions[i]), "provenance": ds.provenance[i],
         "bbox": scene.boxes[i].bbox.to_dict()}
        for i in range(len(scene.boxes))
    ]
    return {"image_id": scene.image_id, "task_id": scene.task_id, "threshold": float(threshold),
            "grouping_conf": ds.beta_g, "boxes": boxes}
