"""Seeded generator of small datasets with planted, learnable structure.

Each task owns a few latent "attribute" directions. Its word embeddings are
noisy copies of those latents; a box is positive for the task when its
embedding is a linear image of one of the task's latents, and negatives are
images of other tasks' latents. Class ids follow the latent a box came from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data_io import BBox, Box, SceneRecord, TaskSpec, save_scenes, save_task

SPLITS = ("train", "val", "test")


@dataclass
class SynthConfig:
    n_tasks: int = 3
    scenes_per_task: int = 40
    boxes_per_scene: tuple[int, int] = (10, 20)
    d: int = 32
    n_word: int = 20
    latents_per_task: int = 3
    positive_rate: float = 1 / 15
    noise_std: float = 0.05
    mix_strength: float = 0.3
    embed_norm: float | None = None  # defaults to sqrt(d)
    n_global: int = 1
    image_size: float = 640.0
    split_scenes: dict = field(default_factory=lambda: {"val": 20, "test": 20})
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")
        lo, hi = self.boxes_per_scene
        if not 1 <= lo <= hi:
            raise ValueError("boxes_per_scene must be a (min, max) pair with 1 <= min <= max")
        if self.n_tasks < 2:
            raise ValueError("need at least two tasks so negatives have a source")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthData:
    tasks: dict[int, TaskSpec]
    splits: dict[str, list[SceneRecord]]
    latents: np.ndarray   # [n_tasks, latents_per_task, d]
    mixing: np.ndarray    # [d, d]


def _random_bbox(rng: np.random.Generator, size: float, class_id: int) -> BBox:
    w, h = rng.uniform(0.05, 0.4, size=2) * size
    x0 = rng.uniform(0, size - w)
    y0 = rng.uniform(0, size - h)
    conf = float(rng.uniform(0.5, 1.0))
    return BBox(float(round(x0, 2)), float(round(y0, 2)), float(round(x0 + w, 2)), float(round(y0 + h, 2)),
                class_id, round(conf, 4))


def _split(rng, cfg: SynthConfig, n_scenes: int, latents, mixing, prefix: str) -> list[SceneRecord]:
    n_t, n_l, d = latents.shape
    counts = {t: rng.integers(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1] + 1, size=n_scenes)
              for t in range(n_t)}
    total = sum(int(c.sum()) for c in counts.values())
    # fixed number of positives per split, scattered uniformly over all boxes
    n_pos = min(total, max(1, int(round(cfg.positive_rate * total)))) if total else 0
    flags = np.zeros(total, dtype=int)
    flags[rng.choice(total, size=n_pos, replace=False)] = 1
    cursor = 0
    scenes = []
    for t in range(n_t):
        others = [u for u in range(n_t) if u != t]
        for k in range(n_scenes):
            boxes = []
            for label in flags[cursor:cursor + counts[t][k]]:
                src_task = t if label else int(rng.choice(others))
                src_lat = int(rng.integers(n_l))
                z = latents[src_task, src_lat]
                emb = mixing @ z + cfg.noise_std * rng.standard_normal(d)
                class_id = src_task * n_l + src_lat
                boxes.append(Box(_random_bbox(rng, cfg.image_size, class_id), emb, int(label)))
            cursor += counts[t][k]
            embs = np.stack([b.embedding for b in boxes])
            g = embs.mean(axis=0, keepdims=True) + cfg.noise_std * rng.standard_normal((cfg.n_global, d))
            scenes.append(SceneRecord(f"{prefix}_t{t}_{k:04d}", t, g, boxes))
    return scenes


def generate_data(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    latents = rng.standard_normal((cfg.n_tasks, cfg.latents_per_task, d))
    scale = cfg.embed_norm if cfg.embed_norm is not None else np.sqrt(d)
    latents *= scale / np.linalg.norm(latents, axis=-1, keepdims=True)
    mixing = np.eye(d) + cfg.mix_strength * rng.standard_normal((d, d)) / np.sqrt(d)
    tasks = {}
    for t in range(cfg.n_tasks):
        which = np.arange(cfg.n_word) % cfg.latents_per_task
        words = latents[t, which] + cfg.noise_std * rng.standard_normal((cfg.n_word, d))
        tasks[t] = TaskSpec(t, f"task{t}", [f"attr{t}_{j}" for j in range(cfg.n_word)], words)
    sizes = {"train": cfg.scenes_per_task, **cfg.split_scenes}
    splits = {name: _split(rng, cfg, sizes.get(name, 0), latents, mixing, name) for name in SPLITS}
    return SynthData(tasks, splits, latents, mixing)


def generate(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write ``{split}.jsonl`` and ``task{id}.json`` files; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_data(cfg)
    paths = {}
    for name, scenes in data.splits.items():
        paths[name] = out / f"{name}.jsonl"
        save_scenes(scenes, paths[name])
    for t, spec in data.tasks.items():
        paths[f"task{t}"] = out / f"task{t}.json"
        save_task(spec, paths[f"task{t}"])
    return paths
