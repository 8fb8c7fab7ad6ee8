"""End-to-end training under MSE loss with AdamW."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data_io import DataError, SceneRecord, TaskSpec
from .pipeline import scene_scores_tensor
from .recalibration import ModelConfig, Params, init_params
from .tensor import Tensor, mse_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


# elevated-lr preset for the desk-scale synthetic data
SYNTH_PRESET = {"learning_rate": 2e-4, "weight_decay": 1e-4}


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
                   state: AdamWState, tcfg: TrainConfig) -> None:
    """In-place AdamW update (decoupled weight decay, bias-corrected moments)."""
    state.step += 1
    t = state.step
    lr = tcfg.learning_rate
    c1 = 1 - tcfg.beta1 ** t
    c2 = 1 - tcfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        p.data *= 1 - lr * tcfg.weight_decay
        m *= tcfg.beta1
        m += (1 - tcfg.beta1) * g
        v *= tcfg.beta2
        v += (1 - tcfg.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + tcfg.eps)


def scene_loss(scene: SceneRecord, task: TaskSpec, params: Params, cfg: ModelConfig,
               target: np.ndarray | None = None) -> Tensor:
    """MSE between predicted scores and the box labels (or an explicit target)."""
    pred = scene_scores_tensor(scene, task, params, cfg)
    if target is None:
        target = scene.labels()
    return mse_loss(pred, Tensor(np.asarray(target, dtype=float).reshape(1, -1)))


@dataclass
class TrainResult:
    params: Params
    config: ModelConfig
    history: list[float]
    meta: dict


def _check_inputs(scenes: Sequence[SceneRecord], tasks: Mapping[int, TaskSpec], cfg: ModelConfig) -> None:
    for s in scenes:
        if s.task_id not in tasks:
            raise DataError(f"scene {s.image_id} references unknown task {s.task_id}")
        s.labels()
        if s.dim != cfg.d:
            raise DataError(f"scene {s.image_id} has D={s.dim}, model expects {cfg.d}")
    for t in tasks.values():
        if t.n_word != cfg.n_word:
            raise DataError(f"task {t.task_id} has {t.n_word} attribute words, model expects {cfg.n_word}")


def train(scenes: Sequence[SceneRecord], tasks: Mapping[int, TaskSpec], cfg: ModelConfig,
          tcfg: TrainConfig, params: Params | None = None,
          on_epoch: Callable[[int, float, Params], bool | None] | None = None) -> TrainResult:
    """Train every block end to end, one scene per optimizer step.

    ``on_epoch(epoch, mean_loss, params)`` runs after each epoch; returning
    True stops training early.
    """
    _check_inputs(scenes, tasks, cfg)
    if params is None:
        params = init_params(cfg, seed=tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    state = AdamWState()
    usable = [s for s in scenes if s.boxes]
    history: list[float] = []
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(usable)) if tcfg.shuffle else np.arange(len(usable))
        total = 0.0
        for idx in order:
            scene = usable[idx]
            for p in params.values():
                p.zero_grad()
            loss = scene_loss(scene, tasks[scene.task_id], params, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, scene "
                                    f"{scene.image_id}/task{scene.task_id}")
            loss.backward()
            optimizer_step(params, {k: p.grad for k, p in params.items()}, state, tcfg)
            total += value
        mean = total / max(len(usable), 1)
        history.append(mean)
        log.info("epoch %d mean loss %.6f", epoch, mean)
        if on_epoch is not None and on_epoch(epoch, mean, params):
            break
    for p in params.values():
        p.zero_grad()
    meta = {"epochs": len(history), "seed": tcfg.seed,
            "final_loss": history[-1] if history else None, "train_config": tcfg.to_dict()}
    return TrainResult(params, cfg, history, meta)


def save_loss_history(history: Sequence[float], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(history, 1):
            fh.write(f"{i},{v!r}\n")
