import json

import numpy as np
import pytest

from taskclip import data_io
from taskclip.data_io import (
    MagicMismatchError,
    ParseError,
    SchemaError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from taskclip.evaluation import evaluate
from taskclip.recalibration import ModelConfig, init_params
from taskclip.synth import SynthConfig, generate


def _scene_line(**over):
    box = {"x_min": 0, "y_min": 0, "x_max": 10, "y_max": 10, "class_id": 1, "class_conf": 0.9,
           "gt_label": 1, "embedding": [0.1, 0.2]}
    box.update(over.pop("box", {}))
    obj = {"image_id": "img", "task_id": 1, "global_tokens": [[0.0, 1.0]], "boxes": [box]}
    obj.update(over)
    return json.dumps(obj)


def test_empty_file(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text("")
    assert data_io.load_scenes(p) == []


def test_synth_fixture_three_boxes(tmp_path):
    cfg = SynthConfig(scenes_per_task=1, boxes_per_scene=(3, 3), d=8, n_word=4,
                      split_scenes={"val": 0, "test": 0}, seed=11)
    paths = generate(cfg, tmp_path)
    scenes = data_io.load_scenes(paths["train"], require_labels=True)
    assert len(scenes) == 3
    s = scenes[0]
    assert len(s.boxes) == 3 and s.dim == 8 and s.box_embeddings().shape == (3, 8)


def test_order_preserved(tmp_path, small_synth):
    p = tmp_path / "s.jsonl"
    data_io.save_scenes(small_synth.splits["train"], p)
    loaded = data_io.load_scenes(p)
    for a, b in zip(small_synth.splits["train"], loaded):
        assert a.image_id == b.image_id
        np.testing.assert_array_equal(a.box_embeddings(), b.box_embeddings())
        assert [x.bbox for x in a.boxes] == [x.bbox for x in b.boxes]


@pytest.mark.parametrize("over,msg", [
    ({"box": {"gt_label": 2}}, "gt_label"),
    ({"box": {"x_max": -5}}, "degenerate"),
    ({"box": {"class_conf": 1.2}}, "class_conf"),
    ({"box": {"embedding": [0.1]}}, "embedding length"),
    ({"global_tokens": []}, "global_tokens"),
])
def test_schema_violations(tmp_path, over, msg):
    p = tmp_path / "s.jsonl"
    p.write_text(_scene_line(**over) + "\n")
    with pytest.raises(SchemaError, match=msg):
        data_io.load_scenes(p)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text(_scene_line() + "\n{not json\n")
    with pytest.raises(ParseError) as exc:
        data_io.load_scenes(p)
    assert exc.value.line == 2


def test_inconsistent_dimension(tmp_path):
    p = tmp_path / "s.jsonl"
    other = _scene_line(global_tokens=[[0.0, 1.0, 2.0]], box={"embedding": [1.0, 2.0, 3.0]})
    p.write_text(_scene_line() + "\n" + other + "\n")
    with pytest.raises(SchemaError, match="dimension"):
        data_io.load_scenes(p)


def test_unknown_task(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text(_scene_line(task_id=9) + "\n")
    with pytest.raises(SchemaError, match="unknown task_id"):
        data_io.load_scenes(p, known_tasks={1, 2})


def test_missing_label_when_required(tmp_path):
    p = tmp_path / "s.jsonl"
    line = json.loads(_scene_line())
    del line["boxes"][0]["gt_label"]
    p.write_text(json.dumps(line) + "\n")
    assert data_io.load_scenes(p)[0].boxes[0].gt_label is None
    with pytest.raises(SchemaError):
        data_io.load_scenes(p, require_labels=True)


def test_task_round_trip(tmp_path, small_synth):
    t = small_synth.tasks[0]
    data_io.save_task(t, tmp_path / "task0.json")
    back = data_io.load_task(tmp_path / "task0.json")
    assert back.attribute_words == t.attribute_words
    np.testing.assert_array_equal(back.word_embeddings, t.word_embeddings)


def test_task_row_mismatch(tmp_path):
    p = tmp_path / "task.json"
    p.write_text(json.dumps({"task_id": 1, "task_name": "x", "attribute_words": ["a", "b"],
                             "word_embeddings": [[1.0, 2.0]]}))
    with pytest.raises(SchemaError):
        data_io.load_task(p)


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        cfg = ModelConfig(d=16, n_head=2, m=2, d_prime=16, n_word=5)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        data_io.save_checkpoint(init_params(cfg, 3), cfg, p1, {"epochs": 2, "seed": 3, "final_loss": 0.125})
        params, cfg2, meta = data_io.load_checkpoint(p1)
        data_io.save_checkpoint(params, cfg2, p2, meta)
        assert p1.read_bytes() == p2.read_bytes()
        assert cfg2 == cfg and meta["final_loss"] == 0.125

    def test_tensor_values_preserved(self, tmp_path):
        cfg = ModelConfig(d=8, n_head=2, m=1, d_prime=8, n_word=3)
        original = init_params(cfg, 1)
        data_io.save_checkpoint(original, cfg, tmp_path / "m.ckpt")
        loaded, _, _ = data_io.load_checkpoint(tmp_path / "m.ckpt")
        assert list(loaded) == list(original)
        for k in original:
            assert np.array_equal(loaded[k].data, original[k].data.astype(np.float32))

    def test_default_architecture_reported(self, tmp_path):
        cfg = ModelConfig(d=8, m=8, n_head=4, d_prime=8, n_word=20)
        data_io.save_checkpoint(init_params(cfg), cfg, tmp_path / "m.ckpt")
        _, back, _ = data_io.load_checkpoint(tmp_path / "m.ckpt")
        assert (back.m, back.n_head) == (8, 4)

    def test_bad_magic(self, tmp_path):
        cfg = ModelConfig(d=8, n_head=2, m=1, d_prime=8, n_word=3)
        raw = bytearray(data_io.checkpoint_bytes(init_params(cfg), cfg))
        raw[:4] = b"XXXX"
        with pytest.raises(MagicMismatchError):
            data_io.parse_checkpoint(bytes(raw))

    def test_bad_version(self):
        cfg = ModelConfig(d=8, n_head=2, m=1, d_prime=8, n_word=3)
        raw = bytearray(data_io.checkpoint_bytes(init_params(cfg), cfg))
        raw[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(UnsupportedVersionError):
            data_io.parse_checkpoint(bytes(raw))

    def test_truncated(self):
        cfg = ModelConfig(d=8, n_head=2, m=1, d_prime=8, n_word=3)
        raw = data_io.checkpoint_bytes(init_params(cfg), cfg)
        with pytest.raises(TruncatedCheckpointError):
            data_io.parse_checkpoint(raw[:-10])
        with pytest.raises(TruncatedCheckpointError):
            data_io.parse_checkpoint(raw[:20])

    def test_error_codes_distinct(self):
        codes = {MagicMismatchError.code, UnsupportedVersionError.code, TruncatedCheckpointError.code}
        assert len(codes) == 3


class TestPredictions:
    def test_empty(self, tmp_path):
        data_io.save_predictions([], tmp_path / "p.jsonl")
        assert (tmp_path / "p.jsonl").read_text() == ""
        assert data_io.load_predictions(tmp_path / "p.jsonl") == []

    def test_score_precision(self, tmp_path):
        rec = {"image_id": "a", "task_id": 1, "threshold": 0.15,
               "boxes": [{"index": 0, "score": 0.123456789123, "decision": 0, "provenance": "direct",
                          "bbox": {"x_min": 0, "y_min": 0, "x_max": 1, "y_max": 1}}]}
        data_io.save_predictions([rec], tmp_path / "p.jsonl")
        back = data_io.load_predictions(tmp_path / "p.jsonl")
        assert round(back[0]["boxes"][0]["score"], 9) == round(0.123456789123, 9)
        assert back == [rec]

    def test_missing_field(self, tmp_path):
        (tmp_path / "p.jsonl").write_text('{"image_id": "a"}\n')
        with pytest.raises(SchemaError):
            data_io.load_predictions(tmp_path / "p.jsonl")


def test_report_for_fourteen_tasks(tmp_path):
    cfg = SynthConfig(n_tasks=14, scenes_per_task=2, boxes_per_scene=(5, 8), d=8, n_word=3,
                      positive_rate=0.3, split_scenes={"val": 0, "test": 0}, seed=2)
    from taskclip.synth import generate_data
    scenes = generate_data(cfg).splits["train"]
    preds = [{"image_id": s.image_id, "task_id": s.task_id,
              "boxes": [{"index": i, "score": 0.9, "decision": b.gt_label, "bbox": b.bbox.to_dict()}
                        for i, b in enumerate(s.boxes)]} for s in scenes]
    report = evaluate(preds, scenes)
    data_io.save_report(report, tmp_path / "report.json")
    back = data_io.load_report(tmp_path / "report.json")
    assert len(back["per_task"]) == 14
    assert "map" in back and back["map"] == pytest.approx(1.0)


def test_thresholds_round_trip(tmp_path):
    data_io.save_thresholds({2: 0.25, 0: 0.15}, tmp_path / "t.json")
    assert data_io.load_thresholds(tmp_path / "t.json") == {0: 0.15, 2: 0.25}
    (tmp_path / "bad.json").write_text('{"1": 3.0}')
    with pytest.raises(SchemaError):
        data_io.load_thresholds(tmp_path / "bad.json")
