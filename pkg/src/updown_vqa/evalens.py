"""Soft-accuracy evaluation, prediction averaging and ensemble-size curves."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datapipe import NUM_ANNOTATIONS, AnswerSpace


class IncompatiblePredictions(ValueError):
    pass


def vqa_accuracy(predicted_index: int, annotations: Sequence[str], space: AnswerSpace) -> float:
    if len(annotations) < NUM_ANNOTATIONS:
        raise ValueError("incomplete annotation")
    if not 0 <= predicted_index < len(space):
        raise IndexError(f"predicted index {predicted_index} outside answer space of {len(space)}")
    return min(Counter(annotations)[space.answers[predicted_index]] / 3, 1.0)


@dataclass
class PredictionSet:
    fingerprint: str
    predictions: dict[int, np.ndarray]

    def __post_init__(self):
        widths = {len(v) for v in self.predictions.values()}
        if len(widths) > 1:
            raise ValueError("prediction vectors differ in length")

    def answers(self) -> dict[int, int]:
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        return {q: int(np.argmax(v)) for q, v in self.predictions.items()}

    def to_json(self) -> str:
        body = {
            "answer_space_fingerprint": self.fingerprint,
            "predictions": {str(q): [float(x) for x in v] for q, v in self.predictions.items()},
        }
        return json.dumps(body)

    @classmethod
    def from_json(cls, text: str) -> "PredictionSet":
        body = json.loads(text)
        preds = {int(q): np.array(v, dtype=np.float64) for q, v in body["predictions"].items()}
        return cls(body["answer_space_fingerprint"], preds)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PredictionSet":
        return cls.from_json(Path(path).read_text())


def _exact_mean(column: Sequence[float]) -> float:
    # correctly rounded mean of the exact binary values
    return float(sum((Fraction(x) for x in column), Fraction(0)) / len(column))


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


def average_predictions(sets: Sequence[PredictionSet], mode: str = "probability") -> PredictionSet:
    """Element-wise mean of member probabilities, correctly rounded.

    Identical members therefore reproduce the input exactly, and the
    result does not depend on member order. ``mode="logit"`` averages
    log-odds instead and maps the mean back through the sigmoid.
    """
    if mode == "logit":
        as_logits = [PredictionSet(s.fingerprint, {q: _logit(v) for q, v in s.predictions.items()})
                     for s in sets]
        mean = average_predictions(as_logits)
        return PredictionSet(mean.fingerprint,
                             {q: 1.0 / (1.0 + np.exp(-v)) for q, v in mean.predictions.items()})
    if mode != "probability":
        raise ValueError(f"unknown averaging mode {mode!r}")
    if not sets:
        raise ValueError("need at least one prediction set")
    first = sets[0]
    for s in sets[1:]:
        if s.fingerprint != first.fingerprint:
            raise IncompatiblePredictions("incompatible answer spaces")
        if s.predictions.keys() != first.predictions.keys():
            missing = sorted(set(first.predictions) ^ set(s.predictions))
            raise IncompatiblePredictions(f"question ids differ between sets: {missing[:20]}")
    if len(sets) == 1:
        return PredictionSet(first.fingerprint, {q: v.copy() for q, v in first.predictions.items()})
    out = {}
    for q in first.predictions:
        stacked = np.stack([s.predictions[q] for s in sets])
        if (stacked == stacked[0]).all():
            out[q] = stacked[0].copy()
        else:
            out[q] = np.array([_exact_mean(col) for col in stacked.T.tolist()])
    return PredictionSet(first.fingerprint, out)


def dataset_accuracy(
    preds: PredictionSet, annotations: Mapping[int, Sequence[str]], space: AnswerSpace
) -> float:
    """Mean soft accuracy over annotated questions, times 100."""
    if preds.fingerprint != space.fingerprint:
        raise IncompatiblePredictions("incompatible answer spaces")
    missing = [q for q in annotations if q not in preds.predictions]
    if missing:
        raise IncompatiblePredictions(f"no prediction for question ids {missing[:20]}")
    if not annotations:
        raise ValueError("no annotated questions")
    chosen = preds.answers()
    total = sum(vqa_accuracy(chosen[q], ann, space) for q, ann in annotations.items())
    return total / len(annotations) * 100


@dataclass
class EnsembleReport:
    strategy: str
    ks: list[int]
    accuracies: list[float]
    members: list[str] = field(default_factory=list)

    def accuracy_at(self, k: int) -> float:
        return self.accuracies[self.ks.index(k)]

    def to_json(self) -> str:
        return json.dumps({
            "strategy": self.strategy,
            "accuracies": [{"k": k, "accuracy": a} for k, a in zip(self.ks, self.accuracies)],
            "members": self.members,
        }, indent=2)

    def table(self) -> str:
        return "".join(f"{k}\t{a!r}\n" for k, a in zip(self.ks, self.accuracies))


def ensemble_curve(
    members: Sequence[PredictionSet],
    annotations: Mapping[int, Sequence[str]],
    space: AnswerSpace,
    strategy: str = "same-model",
    descriptors: Sequence[str] | None = None,
    mode: str = "probability",
) -> EnsembleReport:
    """Accuracy of the average of the first ``k`` members for every ``k``."""
    if len(members) < 2:
        raise ValueError("an ensemble curve needs at least two members")
    ks = list(range(1, len(members) + 1))
    accs = [dataset_accuracy(average_predictions(members[:k], mode), annotations, space) for k in ks]
    return EnsembleReport(strategy, ks, accs, list(descriptors or []))
