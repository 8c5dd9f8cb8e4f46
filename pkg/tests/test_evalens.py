from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from updown_vqa.datapipe import AnswerSpace
from updown_vqa.evalens import (
    IncompatiblePredictions,
    PredictionSet,
    average_predictions,
    dataset_accuracy,
    ensemble_curve,
    vqa_accuracy,
)

SPACE = AnswerSpace(["yes", "no", "2"])


@pytest.mark.parametrize("count", range(11))
def test_vqa_accuracy_formula(count):
    ann = ["yes"] * count + ["no"] * (10 - count)
    assert vqa_accuracy(0, ann, SPACE) == min(count / 3, 1.0)


def test_vqa_accuracy_errors():
    with pytest.raises(ValueError, match="incomplete annotation"):
        vqa_accuracy(0, ["yes"] * 9, SPACE)
    with pytest.raises(IndexError):
        vqa_accuracy(3, ["yes"] * 10, SPACE)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["yes", "no", "2", "maybe"]), min_size=10, max_size=10), st.randoms())
def test_vqa_accuracy_permutation_invariant(ann, rnd):
    shuffled = list(ann)
    rnd.shuffle(shuffled)
    for i in range(3):
        assert vqa_accuracy(i, ann, SPACE) == vqa_accuracy(i, shuffled, SPACE)


def _set(preds):
    return PredictionSet(SPACE.fingerprint, {q: np.asarray(v, dtype=float) for q, v in preds.items()})


def test_answers_break_ties_low():
    assert _set({1: [0.5, 0.5, 0.1]}).answers() == {1: 0}


def test_two_member_mean_matches_hand_arithmetic():
    a = _set({1: [0.25, 0.5, 1.0]})
    b = _set({1: [0.75, 0.0, 0.5]})
    assert average_predictions([a, b]).predictions[1].tolist() == [0.5, 0.25, 0.75]


def test_average_is_correctly_rounded():
    vals = [0.1, 0.2, 0.7]
    sets = [_set({1: [v, v, v]}) for v in vals]
    expected = float(sum(Fraction(v) for v in vals) / 3)
    assert average_predictions(sets).predictions[1][0] == expected


@pytest.mark.parametrize("k", [1, 2, 30])
def test_identical_members_reproduce_input_bytes(k):
    rng = np.random.default_rng(k)
    base = _set({q: rng.uniform(size=3) for q in range(20)})
    assert average_predictions([base] * k).to_json() == base.to_json()


def test_logit_mode():
    a = _set({1: [0.5, 0.9, 0.1]})
    out = average_predictions([a, a], mode="logit")
    np.testing.assert_allclose(out.predictions[1], [0.5, 0.9, 0.1], rtol=1e-12)
    with pytest.raises(ValueError):
        average_predictions([a], mode="median")


def test_incompatible_sets_rejected():
    a = _set({1: [0.1, 0.2, 0.3]})
    with pytest.raises(IncompatiblePredictions, match="incompatible answer spaces"):
        average_predictions([a, PredictionSet("other", a.predictions)])
    with pytest.raises(IncompatiblePredictions, match=r"\[2\]"):
        average_predictions([a, _set({1: [0.1, 0.2, 0.3], 2: [0.0, 0.0, 0.0]})])


def test_dataset_accuracy_examples():
    ann = {1: ["yes"] * 10, 2: ["no"] * 10}
    assert dataset_accuracy(_set({1: [1, 0, 0], 2: [0, 1, 0]}), ann, SPACE) == 100.0
    assert dataset_accuracy(_set({1: [0, 0, 1], 2: [0, 0, 1]}), ann, SPACE) == 0.0
    half = {1: ["yes"] + ["no"] * 9, 2: ["yes"] + ["no"] * 9}
    # one question at 1/3, one at 1 -> (1/3 + 1) / 2 * 100
    assert dataset_accuracy(_set({1: [1, 0, 0], 2: [0, 1, 0]}), half, SPACE) == (1 / 3 + 1.0) / 2 * 100
    with pytest.raises(IncompatiblePredictions, match="no prediction"):
        dataset_accuracy(_set({1: [1, 0, 0]}), ann, SPACE)


def test_prediction_json_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = _set({q: rng.uniform(size=3) for q in range(5)})
    s.save(tmp_path / "p.json")
    again = PredictionSet.load(tmp_path / "p.json")
    assert again.to_json() == s.to_json()
    assert all(np.array_equal(again.predictions[q], s.predictions[q]) for q in s.predictions)


def test_ensemble_curve_shape():
    ann = {1: ["yes"] * 10, 2: ["no"] * 10}
    members = [_set({1: [1, 0, 0], 2: [1, 0, 0]}), _set({1: [0.9, 0, 0], 2: [0, 1, 0]}),
               _set({1: [0.9, 0, 0], 2: [0, 1, 0]})]
    rep = ensemble_curve(members, ann, SPACE, "same-model", ["a", "b", "c"])
    assert rep.ks == [1, 2, 3]
    assert rep.accuracies == [50.0, 50.0, 100.0]
    assert rep.accuracy_at(3) == 100.0
    assert rep.table().splitlines()[0] == "1\t50.0"
    with pytest.raises(ValueError):
        ensemble_curve(members[:1], ann, SPACE)


@settings(max_examples=50, deadline=None)
@given(st.lists(arrays(np.float64, 3, elements=st.floats(0, 1)), min_size=2, max_size=6), st.randoms())
def test_average_order_independent(vectors, rnd):
    sets = [_set({1: v}) for v in vectors]
    shuffled = list(sets)
    rnd.shuffle(shuffled)
    a = average_predictions(sets).predictions[1]
    b = average_predictions(shuffled).predictions[1]
    assert a.tolist() == b.tolist()
    assert (a >= np.min(vectors, axis=0)).all() and (a <= np.max(vectors, axis=0)).all()
