"""Per-box suitability scores, thresholding and select-by-grouping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .recalibration import Params, apply_ln
from .tensor import (
    AttentionParams,
    DimensionError,
    Tensor,
    add,
    matmul,
    multi_head_attention,
    relu,
    sigmoid,
    transpose,
)

DIRECT = "direct"
GROUPED = "grouped"


@dataclass
class GroupingConfig:
    beta_g: float = 0.8
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta_g <= 1.0:
            raise ValueError(f"beta_g={self.beta_g} must lie in [0, 1]")


@dataclass
class DecisionSet:
    scores: np.ndarray          # raw S_p
    decisions: np.ndarray       # P, int 0/1
    provenance: list[str]
    threshold: float
    beta_g: float | None = None
    rank_scores: np.ndarray = field(default=None)  # what AP ranks by

    def __post_init__(self):
        if self.rank_scores is None:
            self.rank_scores = np.asarray(self.scores, dtype=float).copy()


def score_tensor(affinity: Tensor, params: Params, heads: int) -> Tensor:
    """Affinity [N×N_word] -> scores [1×N], differentiable."""
    n_word = params["score.enc.w"].shape[0]
    if affinity.shape[1] != n_word:
        raise DimensionError(f"score: affinity has {affinity.shape[1]} columns, encoder expects {n_word}")
    h = relu(add(matmul(affinity, params["score.enc.w"]), params["score.enc.b"]))
    normed = apply_ln(h, params, "score.ln")
    h = add(h, multi_head_attention(normed, normed, AttentionParams.from_mapping(params, "score.attn"), heads))
    h = relu(add(matmul(h, params["score.head.w1"]), params["score.head.b1"]))
    s = sigmoid(add(matmul(h, params["score.head.w2"]), params["score.head.b2"]))
    return transpose(s)


def score(affinity: Tensor, params: Params, heads: int) -> np.ndarray:
    if affinity.shape[0] == 0:
        return np.zeros(0)
    return score_tensor(affinity, params, heads).data.reshape(-1).astype(float)


def decide(scores, threshold: float) -> np.ndarray:
    """P[i] = 1 iff score[i] >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    return (np.asarray(scores) >= threshold).astype(int)


def select_by_grouping(decisions, class_ids: Sequence[int], confs: Sequence[float], scores,
                       cfg: GroupingConfig | None = None, threshold: float = float("nan")) -> DecisionSet:
    """Propagate a positive decision to every confident box of the same class.

    A selected box i with conf[i] > beta_g marks every j with class[j] ==
    class[i] and conf[j] > beta_g. Boxes switched on this way are tagged
    ``grouped`` and ranked by max(own score, best trigger score).
    """
    cfg = cfg or GroupingConfig()
    p = np.asarray(decisions, dtype=int).copy()
    s = np.asarray(scores, dtype=float)
    cls = np.asarray(class_ids)
    conf = np.asarray(confs, dtype=float)
    if not (len(p) == len(s) == len(cls) == len(conf)):
        raise DimensionError("select_by_grouping: inputs have different lengths")
    provenance = [DIRECT] * len(p)
    rank = s.copy()
    if cfg.enabled:
        confident = conf > cfg.beta_g
        triggers = np.flatnonzero((p == 1) & confident)
        for j in np.flatnonzero((p == 0) & confident):
            same = triggers[cls[triggers] == cls[j]]
            if same.size:
                p[j] = 1
                provenance[j] = GROUPED
                rank[j] = max(s[j], s[same].max())
    return DecisionSet(scores=s, decisions=p, provenance=provenance, threshold=threshold,
                       beta_g=cfg.beta_g if cfg.enabled else None, rank_scores=rank)
