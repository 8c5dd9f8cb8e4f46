import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from updown_vqa import datapipe as dp
from updown_vqa.datapipe import DialogRecord, ImageFeatures, QARecord


def _record(question="what color is the left object", answers=("red",) * 10, qid=1, source="vqa"):
    return QARecord(qid, 7, question, tuple(answers), "train", source)


# -- text -------------------------------------------------------------------


def test_tokenize():
    assert dp.tokenize("What's the Left-most thing?") == ["what", "s", "the", "left", "most", "thing"]
    assert dp.tokenize("under_score") == ["under", "score"]


@pytest.mark.parametrize("text,expected", [
    ("what is on the left", "what is on the right"),
    ("Right side, left side", "left side, right side"),
    ("leftover righteous", "leftover righteous"),
    ("left-handed", "right-handed"),
    ("no sides here", "no sides here"),
])
def test_swap_left_right(text, expected):
    assert dp.swap_left_right(text) == expected


# -- targets and answer space -------------------------------------------------


def test_build_targets_soft_scores():
    space = dp.AnswerSpace(["red", "blue", "green"])
    t = dp.build_targets(["red"] * 5 + ["blue"] * 2 + ["green"] + ["pink"] * 2, space)
    assert t.tolist() == [1.0, 2 / 3, 1 / 3]
    with pytest.raises(ValueError, match="incomplete annotation"):
        dp.build_targets(["red"] * 9, space)


def test_answer_space_top_n_ties_alphabetical():
    recs = [_record(answers=["b"] * 5 + ["a"] * 5), _record(answers=["c"] * 10)]
    space = dp.AnswerSpace.from_records(recs, 2)
    assert space.answers == ("c", "a")
    assert space.fingerprint == dp.AnswerSpace(["c", "a"]).fingerprint
    assert space.fingerprint != dp.AnswerSpace(["a", "c"]).fingerprint


def test_vocabulary_reserves_pad_and_unk():
    v = dp.Vocabulary.from_records([_record("b a"), _record("c a")])
    assert v.tokens == ["<pad>", "<unk>", "a", "b", "c"]
    assert v.encode("a zzz c").tolist() == [2, 1, 4]


# -- augmentation -------------------------------------------------------------


def test_replicate_answer():
    r = dp.replicate_answer(_record(answers=("yes",)))
    assert r.answers == ("yes",) * 10
    assert dp.build_targets(r.answers, dp.AnswerSpace(["yes"])).tolist() == [1.0]
    with pytest.raises(ValueError):
        dp.replicate_answer(_record(answers=("yes", "no")))


def test_flatten_dialog_ten_turns():
    d = DialogRecord(3, tuple((f"q{i}", f"a{i}") for i in range(10)), dialog_id=5)
    flat = dp.flatten_dialog(d)
    assert len(flat) == 10
    assert [r.question for r in flat] == [f"q{i}" for i in range(10)]
    assert len({r.question_id for r in flat}) == 10
    assert all(r.source == "visdial" and r.image_id == 3 for r in flat)


def test_prepare_records_toggles():
    d = DialogRecord(3, (("q", "a"),), dialog_id=1)
    recs = [_record(answers=("x",)), d]
    assert len(dp.prepare_records(recs)) == 2
    assert all(len(r.answers) == 10 for r in dp.prepare_records(recs))
    assert len(dp.prepare_records(recs, dialog_flatten=False)) == 1
    assert dp.prepare_records(recs, replicate=False)[0].answers == ("x",)


def test_mirror_features_reflects_boxes_and_grid():
    f = ImageFeatures(np.ones((2, 3)), np.array([[0.0, 0.0, 0.25, 0.5], [0.5, 0.5, 1.0, 1.0]]), None,
                      np.arange(8.0).reshape(1, 2, 4))
    m = dp.mirror_features(f)
    assert m.boxes.tolist() == [[0.75, 0.0, 1.0, 0.5], [0.0, 0.5, 0.5, 1.0]]
    assert m.grid[0, 0].tolist() == f.grid[0, 1].tolist()
    assert m.regions is f.regions


def test_mirror_example_ids_and_text():
    r = _record("is the cup left of the plate", answers=("left",) * 10)
    m, _ = dp.mirror_example(r)
    assert m.question == "is the cup right of the plate"
    assert m.answers == ("right",) * 10
    assert m.question_id == dp.mirror_id(r.question_id) != r.question_id
    back, _ = dp.mirror_example(m)
    assert back == r


def test_augment_mirror_sources():
    recs = [_record(qid=1), _record(qid=2, source="visdial")]
    out, _ = dp.augment_mirror(recs)
    assert len(out) == 3
    out, _ = dp.augment_mirror(recs, sources=("vqa", "visdial"))
    assert len(out) == 4


# -- proposals and batching ---------------------------------------------------


def test_select_proposals_adaptive_pads_to_ten():
    rows, mask, index = dp.select_proposals(np.ones((4, 2)))
    assert rows.shape == (10, 2) and mask.sum() == 4 and index[4:].tolist() == [-1] * 6


def test_select_proposals_truncates_by_score():
    feats = np.arange(120.0)[:, None]
    scores = np.zeros(120)
    scores[[5, 119]] = 1.0
    rows, mask, index = dp.select_proposals(feats, "adaptive", scores)
    assert rows.shape == (100, 1) and mask.all()
    assert 5 in index and 119 in index
    # remaining slots: lowest indices among the score-0 ties, original order kept
    assert index.tolist() == sorted(index.tolist())


def test_select_proposals_fixed100():
    rows, mask, _ = dp.select_proposals(np.ones((30, 2)), "fixed100")
    assert rows.shape == (100, 2) and mask.sum() == 30
    with pytest.raises(ValueError, match="no proposals"):
        dp.select_proposals(np.ones((0, 2)))
    with pytest.raises(ValueError):
        dp.select_proposals(np.ones((3, 2)), "bogus")


def test_collate_pads_questions_and_regions():
    space = dp.AnswerSpace(["red"])
    vocab = dp.Vocabulary(["a", "b", "c"])
    f1 = ImageFeatures(np.ones((3, 2)), np.tile([0.0, 0.0, 0.5, 0.5], (3, 1)))
    f2 = ImageFeatures(np.ones((12, 2)), np.tile([0.0, 0.0, 0.5, 0.5], (12, 1)))
    e1 = dp.encode_example(_record("a b c", qid=1), f1, vocab, space)
    e2 = dp.encode_example(_record("a", qid=2), f2, vocab, space)
    b = dp.collate([e1, e2])
    assert b.tokens.tolist() == [[2, 3, 4], [2, 0, 0]]
    assert b.question_mask.sum(1).tolist() == [3, 1]
    assert b.regions.shape == (2, 12, 2) and b.region_mask.sum(1).tolist() == [3, 12]
    assert b.question_ids == [1, 2]


# -- files ----------------------------------------------------------------------


def test_embedding_table(tmp_path):
    p = tmp_path / "vec.txt"
    p.write_text("cat 1 2\ndog 3 4\ncat 9 9\n")
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        table = dp.load_embedding_table(p)
    assert table["cat"].tolist() == [1.0, 2.0] and len(w) == 1
    p.write_text("cat 1 2\ndog 3\n")
    with pytest.raises(ValueError, match="line 2"):
        dp.load_embedding_table(p)
    p.write_text("cat 1 x\n")
    with pytest.raises(ValueError, match="malformed embedding entry at line 1"):
        dp.load_embedding_table(p)


def test_pyf1_errors():
    blob = dp.pyf1_bytes(np.ones((2, 3)), np.tile([0, 0, 1, 1], (2, 1)), np.ones(2))
    with pytest.raises(dp.FeatureFileError, match="bad magic"):
        dp.parse_pyf1(b"XXXX" + blob[4:])
    with pytest.raises(dp.FeatureFileError, match="truncated, header says K=2 D=3"):
        dp.parse_pyf1(blob[:-4])
    with pytest.raises(dp.FeatureFileError, match="trailing"):
        dp.parse_pyf1(blob + b"\0")
    with pytest.raises(dp.FeatureFileError, match="no proposals"):
        dp.pyf1_bytes(np.ones((0, 3)))


def test_missing_feature_file_names_image(tmp_path):
    with pytest.raises(FileNotFoundError, match="image_id 42"):
        dp.load_image_features(tmp_path, 42)


def test_image_features_round_trip_with_grid(tmp_path):
    ds = dp.synth_task(1, dp.SynthSpec(n_train=2, n_val=0))
    f = ds.features[0]
    dp.save_image_features(tmp_path, 0, f)
    g = dp.load_image_features(tmp_path, 0, with_grid=True)
    np.testing.assert_array_equal(g.boxes, f.boxes)  # dyadic coordinates survive float32
    np.testing.assert_allclose(g.regions, f.regions, rtol=1e-6)
    assert g.grid.shape == f.grid.shape


def test_jsonl_round_trip(tmp_path):
    recs = [_record(qid=i) for i in range(3)]
    dp.write_jsonl(tmp_path / "r.jsonl", recs)
    assert dp.read_jsonl(tmp_path / "r.jsonl") == recs
    (tmp_path / "bad.jsonl").write_text(json.dumps({"question_id": 1}) + "\n")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        dp.read_jsonl(tmp_path / "bad.jsonl")


def test_jsonl_dialog_lines(tmp_path):
    line = {"image_id": 4, "dialog_id": 2, "dialog": [{"question": "q", "answer": "a"}]}
    (tmp_path / "d.jsonl").write_text(json.dumps(line) + "\n")
    (d,) = dp.read_jsonl(tmp_path / "d.jsonl")
    assert isinstance(d, DialogRecord) and d.turns == (("q", "a"),)


# -- synthetic task -------------------------------------------------------------


def test_synth_task_deterministic_and_consistent():
    a = dp.synth_task(3)
    b = dp.synth_task(3)
    assert a.train == b.train
    assert np.array_equal(a.features[5].regions, b.features[5].regions)
    noiseless = [r for r in a.train if len(set(r.answers)) == 1]
    assert noiseless and all(a.planted_answer(r) == r.answers[0] for r in noiseless)


def test_synth_variant_b_keeps_scenes():
    a = dp.synth_task(2, dp.SynthSpec(feature_variant="A"))
    b = dp.synth_task(2, dp.SynthSpec(feature_variant="B"))
    assert a.train == b.train and a.val == b.val
    assert np.array_equal(a.features[0].boxes, b.features[0].boxes)
    assert not np.allclose(a.features[0].regions, b.features[0].regions)


def test_synth_infeasible_spec():
    with pytest.raises(ValueError, match="infeasible synthetic spec"):
        dp.synth_task(0, dp.SynthSpec(num_answers=12, num_shapes=8, feat_dim=16))


# -- properties -------------------------------------------------------------------

words = st.text(alphabet=st.sampled_from(list("abLeftRigh -,.")), max_size=40)


@settings(max_examples=200, deadline=None)
@given(words)
def test_swap_is_involution_on_lowercase(text):
    text = text.lower()
    assert dp.swap_left_right(dp.swap_left_right(text)) == text


box_strategy = st.tuples(st.integers(0, 4094), st.integers(1, 4095)).filter(lambda t: t[0] < t[1])


@settings(max_examples=100, deadline=None)
@given(st.lists(box_strategy, min_size=1, max_size=6))
def test_mirror_features_involution(xs):
    q = dp.BOX_QUANTUM
    boxes = np.array([[a * q, 0.0, b * q, 1.0] for a, b in xs])
    f = ImageFeatures(np.ones((len(xs), 2)), boxes)
    twice = dp.mirror_features(dp.mirror_features(f))
    assert np.array_equal(twice.boxes, boxes)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.booleans())
def test_pyf1_byte_round_trip(regions, with_scores):
    K = regions.shape[0]
    scores = np.linspace(0, 1, K, dtype=np.float32) if with_scores else None
    blob = dp.pyf1_bytes(regions, np.tile(np.float32([0, 0, 1, 1]), (K, 1)), scores)
    assert dp.parse_pyf1(blob).to_bytes() == blob
