import math

import numpy as np
import pytest

from taskclip import data_io
from taskclip.data_io import DataError
from taskclip.pipeline import scene_scores_tensor
from taskclip.recalibration import ModelConfig, init_params
from taskclip.tensor import Tensor, float64_mode
from taskclip.training import (
    AdamWState,
    TrainConfig,
    TrainingError,
    optimizer_step,
    save_loss_history,
    scene_loss,
    train,
)

CFG = dict(d=16, n_head=2, m=1, d_prime=16, n_word=5)


class TestAdamW:
    def test_zero_grad_no_decay_is_noop(self):
        p = {"w": Tensor(np.array([[0.3, -0.2]]))}
        before = p["w"].data.copy()
        optimizer_step(p, {"w": np.zeros((1, 2))}, AdamWState(), TrainConfig(learning_rate=0.1, weight_decay=0.0))
        assert np.array_equal(p["w"].data, before)

    def test_single_scalar_hand_update(self, f64):
        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        p = {"w": Tensor(np.array([[0.5]]))}
        cfg = TrainConfig(learning_rate=lr, weight_decay=wd)
        state = AdamWState()
        expected = 0.5
        m = v = 0.0
        for t, g in enumerate([0.2, -0.05, 0.3], 1):
            optimizer_step(p, {"w": np.array([[g]])}, state, cfg)
            expected = expected - lr * wd * expected
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert p["w"].data[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_decoupled_decay_closed_form(self, f64):
        lr, wd = 0.05, 0.2
        p = {"w": Tensor(np.array([[2.0, -1.0]]))}
        state = AdamWState()
        for _ in range(5):
            optimizer_step(p, {"w": np.zeros((1, 2))}, state, TrainConfig(learning_rate=lr, weight_decay=wd))
        np.testing.assert_allclose(p["w"].data, np.array([[2.0, -1.0]]) * (1 - lr * wd) ** 5, rtol=1e-14)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert (TrainConfig().epochs, TrainConfig().learning_rate) == (20, 1e-6)


def test_zero_loss_fixed_point(small_synth):
    cfg = ModelConfig(**CFG)
    scene = small_synth.splits["train"][0]
    task = small_synth.tasks[scene.task_id]
    with float64_mode():
        params = init_params(cfg, seed=0)
        s = scene_scores_tensor(scene, task, params, cfg).data.reshape(-1).copy()
        loss = scene_loss(scene, task, params, cfg, target=s)
        assert loss.item() == 0.0
        loss.backward()
        assert all(not np.any(p.grad) for p in params.values())
        before = {k: p.data.copy() for k, p in params.items()}
        optimizer_step(params, {k: p.grad for k, p in params.items()}, AdamWState(),
                       TrainConfig(learning_rate=1e-3, weight_decay=0.0))
        assert all(np.array_equal(before[k], p.data) for k, p in params.items())
        for p in params.values():
            p.zero_grad()
        assert scene_loss(scene, task, params, cfg, target=s).item() == 0.0


def test_small_step_does_not_increase_loss(small_synth):
    cfg = ModelConfig(**CFG)
    scene = next(s for s in small_synth.splits["train"] if s.labels().sum() > 0)
    task = small_synth.tasks[scene.task_id]
    with float64_mode():
        params = init_params(cfg, seed=1)
        loss = scene_loss(scene, task, params, cfg)
        before = loss.item()
        loss.backward()
        optimizer_step(params, {k: p.grad for k, p in params.items()}, AdamWState(),
                       TrainConfig(learning_rate=1e-8, weight_decay=1e-4))
        for p in params.values():
            p.zero_grad()
        assert scene_loss(scene, task, params, cfg).item() <= before


def test_training_does_not_touch_inputs(small_synth):
    scenes = small_synth.splits["train"]
    snapshot = [s.box_embeddings().copy() for s in scenes]
    words = {k: t.word_embeddings.copy() for k, t in small_synth.tasks.items()}
    train(scenes, small_synth.tasks, ModelConfig(**CFG), TrainConfig(epochs=1, learning_rate=1e-3))
    for s, snap in zip(scenes, snapshot):
        assert np.array_equal(s.box_embeddings(), snap)
    for k, t in small_synth.tasks.items():
        assert np.array_equal(t.word_embeddings, words[k])


def test_same_seed_same_checkpoint(tmp_path, small_synth):
    cfg = ModelConfig(**CFG)
    blobs = []
    for i in range(2):
        res = train(small_synth.splits["train"], small_synth.tasks, cfg, TrainConfig(epochs=2, learning_rate=1e-3, seed=5))
        data_io.save_checkpoint(res.params, cfg, tmp_path / f"{i}.ckpt", res.meta)
        blobs.append((tmp_path / f"{i}.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_history_and_early_stop(small_synth):
    seen = []
    res = train(small_synth.splits["train"], small_synth.tasks, ModelConfig(**CFG),
                TrainConfig(epochs=5, learning_rate=1e-3),
                on_epoch=lambda e, loss, p: seen.append(loss) or e == 2)
    assert len(res.history) == 2 == res.meta["epochs"]
    assert seen == res.history


def test_missing_labels_rejected(small_synth):
    s = small_synth.splits["train"][0]
    unlabeled = type(s)(s.image_id, s.task_id, s.global_tokens,
                        [type(b)(b.bbox, b.embedding, None) for b in s.boxes])
    with pytest.raises(DataError):
        train([unlabeled], small_synth.tasks, ModelConfig(**CFG), TrainConfig(epochs=1))


def test_nan_loss_aborts(small_synth):
    s = small_synth.splits["train"][0]
    params = init_params(ModelConfig(**CFG))
    params["score.head.b2"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train([s], small_synth.tasks, ModelConfig(**CFG), TrainConfig(epochs=1), params=params)


def test_loss_csv(tmp_path):
    save_loss_history([0.5, 0.25], tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines() == ["epoch,mean_loss", "1,0.5", "2,0.25"]
