"""Dataset records, vocabularies, soft targets, augmentation rules, feature
files, and the synthetic task used for desk-scale experiments."""
from __future__ import annotations

import hashlib
import json
import re
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import PAD_ID, UNK_ID, Batch

NUM_ANNOTATIONS = 10
MAX_PROPOSALS = 100
MIN_ADAPTIVE_PROPOSALS = 10
# ids of mirrored questions/images differ from the source in this bit
MIRROR_ID_BIT = 1 << 40
DIALOG_ID_BASE = 1 << 41

_TOKEN_RE = re.compile(r"[^\W_]+")
_SIDE_RE = re.compile(r"(?<![^\W_])(left|right)(?![^\W_])", re.IGNORECASE)


def tokenize(question: str) -> list[str]:
    return _TOKEN_RE.findall(question.lower())


@dataclass(frozen=True)
class QARecord:
    question_id: int
    image_id: int
    question: str
    answers: tuple[str, ...]
    split: str = "train"
    source: str = "vqa"

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "image_id": self.image_id,
            "question": self.question,
            "answers": list(self.answers),
            "split": self.split,
            "source": self.source,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "QARecord":
        return cls(
            int(d["question_id"]), int(d["image_id"]), str(d["question"]),
            tuple(str(a) for a in d["answers"]), str(d.get("split", "train")), str(d.get("source", "vqa")),
        )


@dataclass(frozen=True)
class DialogRecord:
    image_id: int
    turns: tuple[tuple[str, str], ...]
    dialog_id: int | None = None
    split: str = "train"

    def __post_init__(self):
        if len(self.turns) < 1:
            raise ValueError("dialog needs at least one turn")


@dataclass(frozen=True, eq=False)
class ImageFeatures:
    regions: np.ndarray  # [K, D]
    boxes: np.ndarray | None = None  # [K, 4] normalized x_min, y_min, x_max, y_max
    scores: np.ndarray | None = None  # [K]
    grid: np.ndarray | None = None  # [Gh, Gw, Dg]

    def __post_init__(self):
        if self.regions.ndim != 2 or self.regions.shape[0] < 1:
            raise ValueError("no proposals")
        K = self.regions.shape[0]
        if self.boxes is not None:
            if self.boxes.shape != (K, 4):
                raise ValueError(f"boxes shape {self.boxes.shape} != {(K, 4)}")
            b = self.boxes
            if (b < 0).any() or (b > 1).any() or (b[:, 0] >= b[:, 2]).any() or (b[:, 1] >= b[:, 3]).any():
                raise ValueError("boxes must be normalized with x_min < x_max and y_min < y_max")
        if self.scores is not None and self.scores.shape != (K,):
            raise ValueError("scores must have one entry per region")


@dataclass(frozen=True, eq=False)
class VqaExample:
    question_id: int
    image_id: int
    question_tokens: np.ndarray
    region_features: np.ndarray
    region_mask: np.ndarray
    target_scores: np.ndarray
    boxes: np.ndarray | None = None
    grid_features: np.ndarray | None = None  # [G, Dg]


class AnswerSpace:
    """Ordered answer vocabulary with a stable fingerprint."""

    def __init__(self, answers: Sequence[str]):
        self.answers = tuple(answers)
        self.index = {a: i for i, a in enumerate(self.answers)}
        if len(self.index) != len(self.answers):
            raise ValueError("duplicate answers in answer space")

    def __len__(self):
        return len(self.answers)

    def __eq__(self, other):
        return isinstance(other, AnswerSpace) and self.answers == other.answers

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.answers).encode("utf-8")).hexdigest()

    @classmethod
    def from_records(cls, records: Iterable[QARecord], top_n: int) -> "AnswerSpace":
        """Top-``top_n`` answers by frequency; ties broken alphabetically."""
        counts = Counter(a for r in records for a in r.answers)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([a for a, _ in ranked[:top_n]])


class Vocabulary:
    PAD = "<pad>"
    UNK = "<unk>"

    def __init__(self, tokens: Sequence[str]):
        self.tokens = [self.PAD, self.UNK] + [t for t in tokens if t not in (self.PAD, self.UNK)]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        assert self.index[self.PAD] == PAD_ID and self.index[self.UNK] == UNK_ID

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_records(cls, records: Iterable[QARecord]) -> "Vocabulary":
        seen: dict[str, None] = {}
        for r in records:
            for tok in tokenize(r.question):
                seen.setdefault(tok, None)
        return cls(sorted(seen))

    def encode(self, question: str) -> np.ndarray:
        return np.array([self.index.get(t, UNK_ID) for t in tokenize(question)], dtype=np.int64)


# --------------------------------------------------------------------------
# targets and augmentation


def build_targets(answers: Sequence[str], space: AnswerSpace) -> np.ndarray:
    """Soft score ``min(count / 3, 1)`` per answer; out-of-space answers are dropped."""
    if len(answers) < NUM_ANNOTATIONS:
        raise ValueError("incomplete annotation")
    t = np.zeros(len(space))
    for a, n in Counter(answers).items():
        i = space.index.get(a)
        if i is not None:
            t[i] = min(n / 3, 1.0)
    return t


def replicate_answer(record: QARecord) -> QARecord:
    if len(record.answers) != 1:
        raise ValueError(f"expected exactly one answer, got {len(record.answers)}")
    return replace(record, answers=record.answers * NUM_ANNOTATIONS)


def flatten_dialog(d: DialogRecord) -> list[QARecord]:
    """One independent single-answer record per turn, in turn order."""
    base = DIALOG_ID_BASE + (d.dialog_id if d.dialog_id is not None else d.image_id) * 100
    return [
        QARecord(base + i, d.image_id, q, (a,), d.split, "visdial")
        for i, (q, a) in enumerate(d.turns)
    ]


def swap_left_right(text: str) -> str:
    return _SIDE_RE.sub(lambda m: "right" if m.group(1).lower() == "left" else "left", text)


def mirror_features(f: ImageFeatures) -> ImageFeatures:
    boxes = None
    if f.boxes is not None:
        boxes = f.boxes.copy()
        boxes[:, 0] = 1.0 - f.boxes[:, 2]
        boxes[:, 2] = 1.0 - f.boxes[:, 0]
    grid = None if f.grid is None else f.grid[:, ::-1, :].copy()
    return ImageFeatures(f.regions, boxes, f.scores, grid)


def mirror_id(i: int) -> int:
    return i ^ MIRROR_ID_BIT


def mirror_example(
    record: QARecord, features: ImageFeatures | None = None
) -> tuple[QARecord, ImageFeatures | None]:
    """Horizontal flip: swap left/right tokens in text, reflect boxes and grid.

    Region feature vectors are kept; question and image ids move to the
    mirrored id range.
    """
    mirrored = replace(
        record,
        question_id=mirror_id(record.question_id),
        image_id=mirror_id(record.image_id),
        question=swap_left_right(record.question),
        answers=tuple(swap_left_right(a) for a in record.answers),
    )
    return mirrored, None if features is None else mirror_features(features)


def prepare_records(
    records: Sequence[QARecord | DialogRecord], replicate: bool = True, dialog_flatten: bool = True
) -> list[QARecord]:
    out: list[QARecord] = []
    for r in records:
        if isinstance(r, DialogRecord):
            if not dialog_flatten:
                continue
            flat = flatten_dialog(r)
        else:
            flat = [r]
        for q in flat:
            if len(q.answers) == 1 and replicate:
                q = replicate_answer(q)
            out.append(q)
    return out


def augment_mirror(
    records: Sequence[QARecord],
    features: Mapping[int, ImageFeatures] | None = None,
    sources: Sequence[str] = ("vqa",),
) -> tuple[list[QARecord], dict[int, ImageFeatures]]:
    """Originals plus mirrored copies of every record from ``sources``."""
    out = list(records)
    feats = dict(features or {})
    for r in records:
        if r.source not in sources:
            continue
        m, mf = mirror_example(r, (features or {}).get(r.image_id))
        out.append(m)
        if mf is not None:
            feats[m.image_id] = mf
    return out, feats


# --------------------------------------------------------------------------
# proposals and encoding


def select_proposals(
    features: np.ndarray, mode: str = "adaptive", scores: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(rows, mask, source_index)``; padded rows have index -1.

    ``fixed100`` always yields 100 rows. ``adaptive`` keeps the source count
    clipped to [10, 100]. Truncation keeps the highest-scoring proposals.
    """
    K, D = features.shape
    if K == 0:
        raise ValueError("no proposals")
    if mode == "fixed100":
        lo, hi = MAX_PROPOSALS, MAX_PROPOSALS
    elif mode == "adaptive":
        lo, hi = MIN_ADAPTIVE_PROPOSALS, MAX_PROPOSALS
    else:
        raise ValueError(f"unknown proposal mode {mode!r}")
    if K > hi:
        key = np.zeros(K) if scores is None else np.asarray(scores, dtype=np.float64)
        keep = np.sort(np.argsort(-key, kind="stable")[:hi])
    else:
        keep = np.arange(K)
    rows = max(len(keep), lo)
    index = np.full(rows, -1, dtype=np.int64)
    index[: len(keep)] = keep
    out = np.zeros((rows, D))
    out[: len(keep)] = features[keep]
    return out, index >= 0, index


def encode_example(
    record: QARecord,
    features: ImageFeatures,
    vocab: Vocabulary,
    space: AnswerSpace,
    proposal_mode: str = "adaptive",
) -> VqaExample:
    rows, mask, index = select_proposals(features.regions, proposal_mode, features.scores)
    boxes = None
    if features.boxes is not None:
        boxes = np.zeros((len(index), 4))
        boxes[mask] = features.boxes[index[mask]]
    grid = None
    if features.grid is not None:
        grid = features.grid.reshape(-1, features.grid.shape[-1]).astype(np.float64)
    return VqaExample(
        question_id=record.question_id,
        image_id=record.image_id,
        question_tokens=vocab.encode(record.question),
        region_features=rows,
        region_mask=mask,
        target_scores=build_targets(record.answers, space),
        boxes=boxes,
        grid_features=grid,
    )


def collate(examples: Sequence[VqaExample]) -> Batch:
    B = len(examples)
    T = max(len(e.question_tokens) for e in examples)
    K = max(e.region_features.shape[0] for e in examples)
    D = examples[0].region_features.shape[1]
    tokens = np.full((B, T), PAD_ID, dtype=np.int64)
    qmask = np.zeros((B, T), dtype=bool)
    regions = np.zeros((B, K, D))
    rmask = np.zeros((B, K), dtype=bool)
    has_boxes = all(e.boxes is not None for e in examples)
    boxes = np.zeros((B, K, 4)) if has_boxes else None
    has_grid = all(e.grid_features is not None for e in examples)
    grid = np.stack([e.grid_features for e in examples]) if has_grid else None
    for i, e in enumerate(examples):
        n, k = len(e.question_tokens), e.region_features.shape[0]
        tokens[i, :n] = e.question_tokens
        qmask[i, :n] = True
        regions[i, :k] = e.region_features
        rmask[i, :k] = e.region_mask
        if has_boxes:
            boxes[i, :k] = e.boxes
    targets = np.stack([e.target_scores for e in examples])
    return Batch(tokens, qmask, regions, rmask, boxes, grid, targets, [e.question_id for e in examples])


# --------------------------------------------------------------------------
# files


def load_embedding_table(path) -> dict[str, np.ndarray]:
    """Word-vector text file: ``token v1 ... vD`` per line."""
    table: dict[str, np.ndarray] = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            token, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise ValueError(f"malformed embedding entry at line {lineno}") from None
            if len(vec) == 0:
                raise ValueError(f"malformed embedding entry at line {lineno}")
            if width is None:
                width = len(vec)
            elif len(vec) != width:
                raise ValueError(f"inconsistent embedding width at line {lineno}")
            if token in table:
                warnings.warn(f"duplicate embedding token {token!r} at line {lineno}; keeping first")
                continue
            table[token] = vec
    return table


PYF1_MAGIC = b"PYF1"
_PYF1_HEADER = struct.Struct("<4sIIBB")


class FeatureFileError(ValueError):
    pass


def pyf1_bytes(regions: np.ndarray, boxes=None, scores=None) -> bytes:
    regions = np.asarray(regions)
    if regions.ndim != 2 or regions.shape[0] == 0:
        raise FeatureFileError("no proposals")
    K, D = regions.shape
    parts = [_PYF1_HEADER.pack(PYF1_MAGIC, K, D, boxes is not None, scores is not None)]
    if boxes is not None:
        parts.append(np.ascontiguousarray(boxes, dtype="<f4").reshape(K, 4).tobytes())
    if scores is not None:
        parts.append(np.ascontiguousarray(scores, dtype="<f4").reshape(K).tobytes())
    parts.append(np.ascontiguousarray(regions, dtype="<f4").tobytes())
    return b"".join(parts)


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    regions: np.ndarray  # float32 [K, D]
    boxes: np.ndarray | None = None
    scores: np.ndarray | None = None

    def to_bytes(self) -> bytes:
        return pyf1_bytes(self.regions, self.boxes, self.scores)


def parse_pyf1(data: bytes, source: str = "<bytes>") -> FeatureRecord:
    if len(data) < _PYF1_HEADER.size:
        raise FeatureFileError(f"{source}: truncated header")
    magic, K, D, has_boxes, has_scores = _PYF1_HEADER.unpack_from(data, 0)
    if magic != PYF1_MAGIC:
        raise FeatureFileError(f"{source}: bad magic {magic!r}")
    if K == 0:
        raise FeatureFileError(f"{source}: no proposals")
    need = _PYF1_HEADER.size + 4 * (K * 4 * has_boxes + K * has_scores + K * D)
    if len(data) < need:
        raise FeatureFileError(
            f"{source}: truncated, header says K={K} D={D} but only "
            f"{(len(data) - _PYF1_HEADER.size) // 4} values present"
        )
    if len(data) > need:
        raise FeatureFileError(f"{source}: {len(data) - need} trailing bytes")
    pos = _PYF1_HEADER.size

    def take(n, shape):
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        return arr

    boxes = take(K * 4, (K, 4)) if has_boxes else None
    scores = take(K, (K,)) if has_scores else None
    regions = take(K * D, (K, D))
    return FeatureRecord(regions, boxes, scores)


def write_features(path, regions, boxes=None, scores=None) -> None:
    Path(path).write_bytes(pyf1_bytes(regions, boxes, scores))


def load_features(path) -> FeatureRecord:
    return parse_pyf1(Path(path).read_bytes(), str(path))


def feature_path(features_dir, image_id: int, grid: bool = False) -> Path:
    return Path(features_dir) / f"{image_id}{'.grid' if grid else ''}.pyf1"


def save_image_features(features_dir, image_id: int, f: ImageFeatures) -> None:
    write_features(feature_path(features_dir, image_id), f.regions, f.boxes, f.scores)
    if f.grid is not None:
        Gh, Gw, Dg = f.grid.shape
        write_features(feature_path(features_dir, image_id, grid=True), f.grid.reshape(Gh * Gw, Dg),
                       _grid_boxes(Gh, Gw))


def _grid_boxes(Gh: int, Gw: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(Gh), np.arange(Gw), indexing="ij")
    r, c = rows.reshape(-1), cols.reshape(-1)
    return np.stack([c / Gw, r / Gh, (c + 1) / Gw, (r + 1) / Gh], axis=1)


def load_image_features(features_dir, image_id: int, with_grid: bool = False) -> ImageFeatures:
    path = feature_path(features_dir, image_id)
    if not path.exists():
        raise FileNotFoundError(f"missing feature file for image_id {image_id}: {path}")
    rec = load_features(path)
    grid = None
    if with_grid:
        gpath = feature_path(features_dir, image_id, grid=True)
        if not gpath.exists():
            raise FileNotFoundError(f"missing grid feature file for image_id {image_id}: {gpath}")
        g = load_features(gpath)
        if g.boxes is None:
            raise FeatureFileError(f"{gpath}: grid file needs cell boxes")
        Gw = len(np.unique(g.boxes[:, 0]))
        grid = g.regions.astype(np.float64).reshape(-1, Gw, g.regions.shape[1])
    return ImageFeatures(
        rec.regions.astype(np.float64),
        None if rec.boxes is None else rec.boxes.astype(np.float64),
        None if rec.scores is None else rec.scores.astype(np.float64),
        grid,
    )


def read_jsonl(path) -> list[QARecord | DialogRecord]:
    out: list[QARecord | DialogRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if "dialog" in d:
                    out.append(DialogRecord(
                        int(d["image_id"]),
                        tuple((t["question"], t["answer"]) for t in d["dialog"]),
                        d.get("dialog_id"),
                        d.get("split", "train"),
                    ))
                else:
                    out.append(QARecord.from_json(d))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


def write_jsonl(path, records: Iterable[QARecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# synthetic task

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black",
          "pink", "brown", "gray", "cyan")
SHAPES = ("circle", "square", "triangle", "star", "cube", "cone", "ring", "heart",
          "disk", "cross", "arrow", "oval")
SHAPE_TEMPLATES = ("what color is the {}", "what is the color of the {}")
SIDE_TEMPLATES = ("what color is the {} object", "what is the color of the object on the {}")
BOX_QUANTUM = 1.0 / 4096  # dyadic coordinates keep 1 - x exact


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 200
    n_val: int = 200
    num_regions: int = 5
    feat_dim: int = 16
    num_answers: int = 8
    num_shapes: int = 8
    spatial_fraction: float = 1 / 3
    noise: float = 0.1
    annotator_noise: float = 0.1
    grid_size: int = 2  # cells per side; 0 disables grid features
    feature_variant: str = "A"


@dataclass
class SynthDataset:
    spec: SynthSpec
    seed: int
    train: list[QARecord]
    val: list[QARecord]
    features: dict[int, ImageFeatures]
    colors: dict[int, np.ndarray]  # image_id -> color index per region
    shapes: dict[int, np.ndarray]  # image_id -> shape index per region
    answer_space: AnswerSpace = field(default=None)

    def planted_answer(self, record: QARecord, features: ImageFeatures | None = None) -> str:
        """Ground truth from the generating rule, read off the (possibly mirrored) boxes."""
        base = record.image_id & ~MIRROR_ID_BIT
        f = features if features is not None else self.features[record.image_id]
        colors, shapes = self.colors[base], self.shapes[base]
        tokens = tokenize(record.question)
        centers = f.boxes[:, 0] + f.boxes[:, 2]
        if "left" in tokens:
            k = int(np.argmin(centers))
        elif "right" in tokens:
            k = int(np.argmax(centers))
        else:
            name = next(t for t in tokens if t in SHAPES)
            k = int(np.flatnonzero(shapes == SHAPES.index(name))[0])
        return COLORS[colors[k]]


def _variant_transform(variant: str, dim: int) -> np.ndarray | None:
    if variant == "A":
        return None
    if variant == "B":
        q, _ = np.linalg.qr(np.random.default_rng(20180601).normal(size=(dim, dim)))
        return q
    raise ValueError(f"unknown feature variant {variant!r}")


def synth_task(seed: int, spec: SynthSpec = SynthSpec()) -> SynthDataset:
    """Deterministic synthetic VQA task with a planted answer rule.

    Each image has ``num_regions`` objects with a colour and a distinct
    shape, encoded one-hot in the region features, and boxes with distinct
    horizontal centres. Questions ask for the colour of a named shape or of
    the left/right-most object, so the spatial labels follow the boxes.
    """
    s = spec
    if not (2 <= s.num_answers <= len(COLORS) and s.num_shapes <= len(SHAPES)
            and s.num_answers + s.num_shapes <= s.feat_dim
            and 2 <= s.num_regions <= s.num_shapes):
        raise ValueError("infeasible synthetic spec: answers/shapes/regions do not fit the feature layout")
    transform = _variant_transform(s.feature_variant, s.feat_dim)
    rng = np.random.default_rng([seed, 7])
    # a second extractor sees the same scenes with its own measurement noise
    noise_rng = np.random.default_rng([seed, 7, 1]) if transform is not None else None
    K, D, A = s.num_regions, s.feat_dim, s.num_answers
    records: list[QARecord] = []
    features: dict[int, ImageFeatures] = {}
    colors_by_image, shapes_by_image = {}, {}

    for i in range(s.n_train + s.n_val):
        colors = rng.integers(0, A, size=K)
        shapes = rng.choice(s.num_shapes, size=K, replace=False)
        base = np.zeros((K, D))
        base[np.arange(K), colors] = 1.0
        base[np.arange(K), A + shapes] = 1.0
        noise = rng.normal(size=(K, D))
        if noise_rng is not None:
            noise = noise_rng.normal(size=(K, D))
        regions = base + s.noise * noise

        slots = rng.permutation(K)
        centers = (slots + rng.uniform(0.25, 0.75, size=K)) / K
        half = rng.uniform(0.02, 0.4 / K, size=K)
        boxes = np.empty((K, 4))
        boxes[:, 0] = centers - half
        boxes[:, 2] = centers + half
        y0 = rng.uniform(0.0, 0.6, size=K)
        boxes[:, 1] = y0
        boxes[:, 3] = y0 + rng.uniform(0.1, 0.4, size=K)
        boxes = np.clip(np.round(boxes / BOX_QUANTUM) * BOX_QUANTUM, 0.0, 1.0)
        scores = np.round(rng.uniform(size=K) / BOX_QUANTUM) * BOX_QUANTUM

        grid = None
        if s.grid_size:
            g = s.grid_size
            grid = rng.normal(size=(g, g, D))
            if noise_rng is not None:
                grid = noise_rng.normal(size=(g, g, D))
            grid = s.noise * grid
            cx = np.minimum(((boxes[:, 0] + boxes[:, 2]) / 2 * g).astype(int), g - 1)
            cy = np.minimum(((boxes[:, 1] + boxes[:, 3]) / 2 * g).astype(int), g - 1)
            for k in range(K):
                grid[cy[k], cx[k]] += base[k]

        if transform is not None:
            regions = regions @ transform
            if grid is not None:
                grid = grid @ transform

        if rng.uniform() < s.spatial_fraction:
            side = "left" if rng.uniform() < 0.5 else "right"
            question = SIDE_TEMPLATES[rng.integers(len(SIDE_TEMPLATES))].format(side)
            order = (boxes[:, 0] + boxes[:, 2])
            k = int(np.argmin(order) if side == "left" else np.argmax(order))
        else:
            k = int(rng.integers(K))
            question = SHAPE_TEMPLATES[rng.integers(len(SHAPE_TEMPLATES))].format(SHAPES[shapes[k]])
        truth = COLORS[colors[k]]
        answers = tuple(
            COLORS[rng.integers(A)] if rng.uniform() < s.annotator_noise else truth
            for _ in range(NUM_ANNOTATIONS)
        )
        split = "train" if i < s.n_train else "val"
        records.append(QARecord(i, i, question, answers, split, "vqa"))
        features[i] = ImageFeatures(regions, boxes, scores, grid)
        colors_by_image[i], shapes_by_image[i] = colors, shapes

    ds = SynthDataset(
        s, seed,
        [r for r in records if r.split == "train"],
        [r for r in records if r.split == "val"],
        features, colors_by_image, shapes_by_image,
    )
    ds.answer_space = AnswerSpace(COLORS[:A])
    return ds
