"""Embedding recalibration: adapters, global attention, aligner stack, affinity.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``aligner.3.cross.wq`` etc.), which keeps checkpointing and the optimizer
trivial.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING

import numpy as np

from .tensor import (
    AttentionParams,
    ConfigError,
    DimensionError,
    Tensor,
    add,
    l2_normalize_rows,
    layer_norm,
    matmul,
    multi_head_attention,
    relu,
    scale,
)

if TYPE_CHECKING:
    from .data_io import SceneRecord, TaskSpec

Params = dict[str, Tensor]


@dataclass
class ModelConfig:
    d: int = 512
    d_hidden_adapter: int | None = None  # defaults to d // 4
    m: int = 8
    n_head: int = 4
    d_prime: int = 256
    alpha: float = 0.3
    beta_adapter: float = 0.3
    ffn_dim: int | None = None  # defaults to 4 * d
    n_word: int = 20

    def __post_init__(self):
        if self.d_hidden_adapter is None:
            self.d_hidden_adapter = max(1, self.d // 4)
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d
        self.validate()

    def validate(self) -> None:
        if self.d < 1 or self.n_head < 1 or self.d % self.n_head:
            raise ConfigError(f"d={self.d} must be a positive multiple of n_head={self.n_head}")
        if self.d_prime % self.n_head or self.d_prime < 2:
            raise ConfigError(f"d_prime={self.d_prime} must be a multiple of n_head={self.n_head}")
        if self.m < 1:
            raise ConfigError(f"m={self.m} must be at least 1")
        for name in ("alpha", "beta_adapter"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name}={getattr(self, name)} must lie in [0, 1]")
        if self.n_word < 1:
            raise ConfigError("n_word must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- initialization ------------------------------------------------------------

def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _attention_init(rng, prefix: str, d: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.{n}": _uniform(rng, d, (d, d)) for n in ("wq", "wk", "wv", "wo")}


def _ln_init(prefix: str, d: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.gain": np.ones((1, d)), f"{prefix}.bias": np.zeros((1, d))}


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Draw a fresh parameter set. Same seed and config give identical values."""
    rng = np.random.default_rng(seed)
    d, h = cfg.d, cfg.d_hidden_adapter
    raw: dict[str, np.ndarray] = {}
    for stream in ("v", "t"):
        raw[f"adapter.{stream}.w1"] = _uniform(rng, d, (d, h))
        raw[f"adapter.{stream}.w2"] = _uniform(rng, h, (h, d))
    raw.update(_ln_init("global.ln", d))
    raw.update(_attention_init(rng, "global.attn", d))
    for i in range(cfg.m):
        p = f"aligner.{i}"
        for block in ("vself", "tself", "cross"):
            raw.update(_attention_init(rng, f"{p}.{block}", d))
        for ln in ("ln_vself", "ln_tself", "ln_cross_q", "ln_cross_mem", "ln_ffn"):
            raw.update(_ln_init(f"{p}.{ln}", d))
        raw[f"{p}.ffn.w1"] = _uniform(rng, d, (d, cfg.ffn_dim))
        raw[f"{p}.ffn.b1"] = np.zeros((1, cfg.ffn_dim))
        raw[f"{p}.ffn.w2"] = _uniform(rng, cfg.ffn_dim, (cfg.ffn_dim, d))
        raw[f"{p}.ffn.b2"] = np.zeros((1, d))
    dp, half = cfg.d_prime, cfg.d_prime // 2
    raw["score.enc.w"] = _uniform(rng, cfg.n_word, (cfg.n_word, dp))
    raw["score.enc.b"] = np.zeros((1, dp))
    raw.update(_ln_init("score.ln", dp))
    raw.update(_attention_init(rng, "score.attn", dp))
    raw["score.head.w1"] = _uniform(rng, dp, (dp, half))
    raw["score.head.b1"] = np.zeros((1, half))
    raw["score.head.w2"] = _uniform(rng, half, (half, 1))
    raw["score.head.b2"] = np.zeros((1, 1))
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, seed=0).items()}


# --- stages --------------------------------------------------------------------

def adapter_forward(e: Tensor, w1: Tensor, w2: Tensor, blend: float) -> Tensor:
    """(1 - blend) * E + ReLU(E W1) W2."""
    if e.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != e.shape[1]:
        raise DimensionError(f"adapter: E {e.shape}, W1 {w1.shape}, W2 {w2.shape}")
    return add(scale(e, 1.0 - blend), matmul(relu(matmul(e, w1)), w2))


def apply_ln(x: Tensor, params: Params, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def global_attention(boxes: Tensor, global_tokens: Tensor, params: Params, heads: int,
                     weights_out: list | None = None) -> Tensor:
    """Boxes attend to the image tokens; pre-norm residual block."""
    if global_tokens.shape[0] < 1:
        raise DimensionError("global attention needs at least one image token")
    attn = AttentionParams.from_mapping(params, "global.attn")
    return add(boxes, multi_head_attention(apply_ln(boxes, params, "global.ln"), global_tokens,
                                           attn, heads, weights_out))


def _self_block(x: Tensor, params: Params, prefix: str, ln: str, heads: int) -> Tensor:
    normed = apply_ln(x, params, ln)
    return add(x, multi_head_attention(normed, normed, AttentionParams.from_mapping(params, prefix), heads))


def aligner_layer(v_in: Tensor, t_in: Tensor, params: Params, index: int,
                  heads: int) -> tuple[Tensor, Tensor]:
    """One aligner layer; returns (vision, text).

    Both streams get self-attention, then text queries vision through the
    cross-attention and finishes with the feed-forward block. The vision
    stream leaves the layer right after its self-attention.
    """
    if v_in.shape[1] != t_in.shape[1]:
        raise DimensionError(f"aligner: vision {v_in.shape} and text {t_in.shape} widths differ")
    p = f"aligner.{index}"
    v = _self_block(v_in, params, f"{p}.vself", f"{p}.ln_vself", heads)
    t = _self_block(t_in, params, f"{p}.tself", f"{p}.ln_tself", heads)
    cross = AttentionParams.from_mapping(params, f"{p}.cross")
    t = add(t, multi_head_attention(apply_ln(t, params, f"{p}.ln_cross_q"),
                                    apply_ln(v, params, f"{p}.ln_cross_mem"), cross, heads))
    h = relu(add(matmul(apply_ln(t, params, f"{p}.ln_ffn"), params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
    t = add(t, add(matmul(h, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"]))
    return v, t


def compute_affinity(e_v: Tensor, e_t: Tensor) -> Tensor:
    """Cosine affinity [N_bbox×N_word] between recalibrated boxes and words."""
    if e_v.shape[1] != e_t.shape[1]:
        raise DimensionError(f"affinity: vision {e_v.shape} and text {e_t.shape} widths differ")
    return matmul(l2_normalize_rows(e_v), l2_normalize_rows(e_t).T)


def recalibrate_tensors(box_emb: Tensor, word_emb: Tensor, global_tokens: Tensor,
                        params: Params, cfg: ModelConfig) -> Tensor:
    """Full stage on raw matrices: adapters, global attention, m aligner layers, affinity."""
    for name, t in (("box", box_emb), ("word", word_emb), ("global", global_tokens)):
        if t.shape[1] != cfg.d:
            raise DimensionError(f"{name} embeddings have width {t.shape[1]}, model expects {cfg.d}")
    v = adapter_forward(box_emb, params["adapter.v.w1"], params["adapter.v.w2"], cfg.alpha)
    t = adapter_forward(word_emb, params["adapter.t.w1"], params["adapter.t.w2"], cfg.beta_adapter)
    v = global_attention(v, global_tokens, params, cfg.n_head)
    for i in range(cfg.m):
        v, t = aligner_layer(v, t, params, i, cfg.n_head)
    return compute_affinity(v, t)


def recalibrate(scene: "SceneRecord", task: "TaskSpec", params: Params, cfg: ModelConfig) -> Tensor:
    return recalibrate_tensors(Tensor(scene.box_embeddings()), Tensor(task.word_embeddings),
                               Tensor(scene.global_tokens), params, cfg)
