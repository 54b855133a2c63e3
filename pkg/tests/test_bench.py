"""Data-model tests: clip files, sidecars, validation, alignment."""

import json

import numpy as np
import pytest

from raytraj import bench
from raytraj.bench import (
    ClipValidationError,
    GroundTruthTrajectory,
    PredictionRecord,
    ProtocolError,
    align_predictions,
    list_clip_files,
    load_clip,
    load_predictions,
    load_tokens,
    save_clip,
    save_predictions,
    save_tokens,
    validate_corpus,
)
from raytraj.synth import CorpusConfig, SceneConfig, gen_corpus


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = CorpusConfig(num_clips=3, num_turns=4,
                       scene=SceneConfig(seed=5, num_targets=2))
    for scene in gen_corpus(cfg):
        save_clip(scene.clip, out / f"{scene.clip.clip_id}.json")
        save_tokens(scene.tokens, scene.clip,
                    out / f"{scene.clip.clip_id}.tokens.json",
                    feature_layout=cfg.scene.feature_layout)
        bench.save_trace(scene.trace, out / f"{scene.clip.clip_id}.trace.json")
    return out


def first_clip_path(corpus_dir):
    return list_clip_files(corpus_dir)[0]


class TestClipRoundTrip:
    def test_load_save_byte_identical(self, corpus_dir, tmp_path):
        src = first_clip_path(corpus_dir)
        clip = load_clip(src)
        dst = tmp_path / "copy.json"
        save_clip(clip, dst)
        assert src.read_bytes() == dst.read_bytes()

    def test_semantic_round_trip(self, corpus_dir, tmp_path):
        src = first_clip_path(corpus_dir)
        clip = load_clip(src)
        dst = tmp_path / "again.json"
        save_clip(clip, dst)
        again = load_clip(dst)
        assert again.clip_id == clip.clip_id
        assert again.timestamps == clip.timestamps
        assert len(again.turns) == len(clip.turns)
        for a, b in zip(again.turns, clip.turns):
            assert a.question == b.question and a.answer == b.answer
            for ga, gb in zip(a.targets, b.targets):
                np.testing.assert_array_equal(ga.points, gb.points)
                np.testing.assert_array_equal(ga.valid, gb.valid)
        for va, vb in zip(again.views, clip.views):
            for ca, cb in zip(va.cameras, vb.cameras):
                np.testing.assert_allclose(ca.pose.rotation, cb.pose.rotation)
                np.testing.assert_allclose(ca.pose.translation, cb.pose.translation)

    def test_world_from_camera_convention_accepted(self, corpus_dir, tmp_path):
        data = json.loads(first_clip_path(corpus_dir).read_text())
        clip_cfw = load_clip(first_clip_path(corpus_dir))
        # rewrite extrinsics in the other convention
        for view in data["views"]:
            for entry in view["calib"]:
                r = np.array(entry["rotation"]).reshape(3, 3)
                t = np.array(entry["translation"])
                entry["rotation"] = [float(x) for x in r.T.reshape(-1)]
                entry["translation"] = [float(x) for x in (-r.T @ t)]
        data["extrinsic_convention"] = "world_from_camera"
        p = tmp_path / "wfc.json"
        p.write_text(json.dumps(data))
        clip_wfc = load_clip(p)
        cams_a = clip_cfw.all_cameras()
        cams_b = clip_wfc.all_cameras()
        for a, b in zip(cams_a, cams_b):
            np.testing.assert_allclose(a.pose.rotation, b.pose.rotation, atol=1e-12)
            np.testing.assert_allclose(a.pose.translation, b.pose.translation,
                                       atol=1e-9)


class TestClipValidation:
    def _mutate(self, corpus_dir, tmp_path, fn):
        data = json.loads(first_clip_path(corpus_dir).read_text())
        fn(data)
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(data))
        return p

    def test_scaled_rotation_names_location(self, corpus_dir, tmp_path):
        def scale_rotation(data):
            entry = data["views"][0]["calib"][2]
            entry["rotation"] = [1.001 * x for x in entry["rotation"]]
        p = self._mutate(corpus_dir, tmp_path, scale_rotation)
        with pytest.raises(ClipValidationError, match=r"views\[0\].calib\[2\]"):
            load_clip(p)

    def test_dangling_calibration_timestamp(self, corpus_dir, tmp_path):
        def dangle(data):
            data["views"][0]["calib"][0]["t"] = 123.456
        p = self._mutate(corpus_dir, tmp_path, dangle)
        with pytest.raises(ClipValidationError, match="dangling"):
            load_clip(p)

    def test_non_monotone_timestamps(self, corpus_dir, tmp_path):
        def swap(data):
            data["timestamps"][0], data["timestamps"][1] = \
                data["timestamps"][1], data["timestamps"][0]
        p = self._mutate(corpus_dir, tmp_path, swap)
        with pytest.raises(ClipValidationError, match="strictly increasing"):
            load_clip(p)

    def test_sparse_turn_indices(self, corpus_dir, tmp_path):
        def renumber(data):
            data["turns"][0]["turn_index"] = 7
        p = self._mutate(corpus_dir, tmp_path, renumber)
        with pytest.raises(ClipValidationError, match="dense"):
            load_clip(p)

    def test_scene_level_with_payload_rejected(self, corpus_dir, tmp_path):
        def add_payload(data):
            scene_turns = [t for t in data["turns"]
                           if t["question_type"] == "scene-level"]
            geom_turns = [t for t in data["turns"] if t["targets"]]
            scene_turns[0]["targets"] = geom_turns[0]["targets"]
        p = self._mutate(corpus_dir, tmp_path, add_payload)
        with pytest.raises(ClipValidationError, match="scene-level"):
            load_clip(p)

    def test_point_turn_with_multiple_valid_steps_rejected(self, corpus_dir,
                                                           tmp_path):
        def widen(data):
            for t in data["turns"]:
                if t["question_type"] == "identity":
                    t["targets"][0]["valid"] = [True, True, False, False]
                    return
        p = self._mutate(corpus_dir, tmp_path, widen)
        with pytest.raises(ClipValidationError, match="single-moment"):
            load_clip(p)

    def test_unknown_question_type(self, corpus_dir, tmp_path):
        def rename(data):
            data["turns"][0]["question_type"] = "riddle"
        p = self._mutate(corpus_dir, tmp_path, rename)
        with pytest.raises(ClipValidationError, match="riddle"):
            load_clip(p)

    def test_unparseable_file(self, tmp_path):
        p = tmp_path / "junk.json"
        p.write_text("{not json")
        with pytest.raises(ClipValidationError, match="cannot parse"):
            load_clip(p)


class TestTokensSidecar:
    def test_tokens_round_trip_rays(self, corpus_dir):
        clip_path = first_clip_path(corpus_dir)
        clip = load_clip(clip_path)
        tok_path = clip_path.parent / (clip_path.stem + ".tokens.json")
        tokens, layout = load_tokens(tok_path, clip)
        assert layout["identity_block"] == [0, 8]
        assert len(tokens) > 0
        for tok in tokens:
            assert abs(np.linalg.norm(tok.ray.direction) - 1) < 1e-9

    def test_dangling_token_reference(self, corpus_dir, tmp_path):
        clip_path = first_clip_path(corpus_dir)
        clip = load_clip(clip_path)
        tok_path = clip_path.parent / (clip_path.stem + ".tokens.json")
        data = json.loads(tok_path.read_text())
        data["tokens"][0]["t"] = 999.0
        bad = tmp_path / "bad.tokens.json"
        bad.write_text(json.dumps(data))
        with pytest.raises(ClipValidationError, match="dangling"):
            load_tokens(bad, clip)


class TestValidateCorpus:
    def test_empty_directory(self, tmp_path):
        summary, errors = validate_corpus(tmp_path)
        assert summary["clips"] == 0 and not errors

    def test_counts_match_generation_config(self, corpus_dir):
        summary, errors = validate_corpus(corpus_dir)
        assert not errors
        assert summary["clips"] == 3
        assert summary["turns"] == 12  # 3 clips x 4 turns
        # 4 views x 8 timestamps per clip
        assert summary["frames"] == 3 * 4 * 8
        assert sum(summary["turns_by_type"].values()) == 12

    def test_single_corrupted_file_reported(self, corpus_dir, tmp_path):
        import shutil
        work = tmp_path / "corpus"
        shutil.copytree(corpus_dir, work)
        victim = list_clip_files(work)[1]
        data = json.loads(victim.read_text())
        data["timestamps"] = list(reversed(data["timestamps"]))
        victim.write_text(json.dumps(data))
        summary, errors = validate_corpus(work)
        assert len(errors) == 1
        assert victim.name in errors[0]
        assert summary["clips"] == 2  # the two valid ones still counted


def tiny_clip(clip_id="c0", n_turns=2):
    """Minimal hand-built clip with one view and geometric turns."""
    from raytraj.geometry import CameraIntrinsics, CameraPose, CameraView
    intr = CameraIntrinsics(fx=100, fy=100, cx=0, cy=0)
    pose = CameraPose(rotation=np.eye(3), translation=np.zeros(3))
    views = [bench.ViewCalibration(
        view_id="cam0",
        cameras=[CameraView("cam0", 0.0, intr, pose),
                 CameraView("cam0", 1.0, intr, pose)])]
    turns = []
    for i in range(n_turns):
        turns.append(bench.DialogueTurn(
            turn_index=i + 1, question=f"q{i}", question_type="trajectory",
            answer=f"a{i}",
            targets=[GroundTruthTrajectory(
                target_id=f"t{i}", points=np.zeros((4, 3)),
                valid=np.ones(4, dtype=bool))]))
    return bench.ClipSample(clip_id=clip_id, regime="short",
                            timestamps=[0.0, 1.0], views=views, turns=turns)


def record(clip_id, turn_index, n_traj=1, answer="a"):
    return PredictionRecord(
        clip_id=clip_id, turn_index=turn_index, answer=answer,
        trajectories=[{"points": [[0.0, 0.0, 0.0]] * 4, "valid": [True] * 4}
                      for _ in range(n_traj)])


class TestAlignPredictions:
    def test_complete_predictions_pair_every_target(self):
        clip = tiny_clip(n_turns=2)
        aligned, stats = align_predictions(
            [clip], [record("c0", 1), record("c0", 2)])
        assert stats["pairs"] == 2
        assert stats["missing_turns"] == 0
        assert all(not t.missing for t in aligned)

    def test_missing_turn_scores_as_miss(self):
        clip = tiny_clip(n_turns=2)
        aligned, stats = align_predictions([clip], [record("c0", 1)])
        assert stats["missing_turns"] == 1
        missing = [t for t in aligned if t.missing]
        assert len(missing) == 1
        assert missing[0].items[0].pred_points is None

    def test_duplicate_prediction_rejected(self):
        clip = tiny_clip()
        with pytest.raises(ProtocolError, match="duplicate"):
            align_predictions([clip], [record("c0", 1), record("c0", 1)])

    def test_unknown_turn_rejected(self):
        clip = tiny_clip()
        with pytest.raises(ProtocolError, match="unknown"):
            align_predictions([clip], [record("c0", 9)])

    def test_surplus_targets_rejected(self):
        clip = tiny_clip()
        with pytest.raises(ProtocolError, match="query-order"):
            align_predictions([clip], [record("c0", 1, n_traj=2)])

    def test_reversed_target_order_pairs_positionally(self):
        # two targets with distinct gt; predictions deliberately reversed:
        # the protocol pairs positionally, producing the wrong-pairing errors
        clip = tiny_clip(n_turns=1)
        g0 = GroundTruthTrajectory(target_id="a", points=np.zeros((4, 3)),
                                   valid=np.ones(4, dtype=bool))
        pts1 = np.ones((4, 3))
        g1 = GroundTruthTrajectory(target_id="b", points=pts1,
                                   valid=np.ones(4, dtype=bool))
        clip.turns[0].targets = [g0, g1]
        rec = PredictionRecord(
            clip_id="c0", turn_index=1, answer="a",
            trajectories=[{"points": pts1.tolist(), "valid": [True] * 4},
                          {"points": np.zeros((4, 3)).tolist(), "valid": [True] * 4}])
        aligned, _ = align_predictions([clip], [record("c0", 2)] and [rec])
        items = aligned[0].items
        # each prediction lands on the positionally matched target: both wrong
        assert np.linalg.norm(items[0].pred_points[0] - items[0].gt.points[0]) \
            == pytest.approx(np.sqrt(3))
        assert np.linalg.norm(items[1].pred_points[0] - items[1].gt.points[0]) \
            == pytest.approx(np.sqrt(3))

    def test_pair_count_independent_of_record_order(self):
        clip = tiny_clip(n_turns=2)
        recs = [record("c0", 1), record("c0", 2)]
        a1, s1 = align_predictions([clip], recs)
        a2, s2 = align_predictions([clip], list(reversed(recs)))
        assert s1 == s2
        assert [t.turn_index for t in a1] == [t.turn_index for t in a2]

    def test_trajectories_on_language_turn_rejected(self):
        clip = tiny_clip(n_turns=1)
        clip.turns[0].question_type = "scene-level"
        clip.turns[0].targets = []
        with pytest.raises(ProtocolError, match="non-geometric"):
            align_predictions([clip], [record("c0", 1)])


class TestPredictionsIO:
    def test_round_trip(self, tmp_path):
        recs = [record("c0", 1), record("c1", 1, answer="text with spaces")]
        p = tmp_path / "preds.jsonl"
        save_predictions(recs, p)
        loaded = load_predictions(p)
        assert len(loaded) == 2
        assert loaded[1].answer == "text with spaces"

    def test_duplicate_lines_rejected_at_load(self, tmp_path):
        p = tmp_path / "preds.jsonl"
        save_predictions([record("c0", 1)], p)
        p.write_text(p.read_text() * 2)
        with pytest.raises(ProtocolError, match="duplicate"):
            load_predictions(p)

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "preds.jsonl"
        p.write_text('{"clip_id": "c0"\n')
        with pytest.raises(ProtocolError, match="line 1"):
            load_predictions(p)
