"""Up-down VQA model: GRU question encoder with self-attention, multiplicative
top-down region attention, Hadamard fusion, optional grid path, and a
weight-normalized sigmoid classifier.

All arrays are batched: questions ``[B, T]``, regions ``[B, K, D]``,
grid cells ``[B, G, Dg]``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numkernel import (
    KernelError,
    Tape,
    Tensor,
    bce_with_logits,
    concat,
    embedding,
    gru_cell,
    gru_sequence,
    linear,
    relu,
    softmax,
    weight_norm_linear,
)

PAD_ID = 0
UNK_ID = 1
CHECKPOINT_MAGIC = b"PYTHIA01"
GROUPS = ("default", "finetune")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_answers: int
    embed_dim: int = 300
    gru_hidden: int = 64
    fusion_hidden: int = 64
    region_feat_dim: int = 2048
    grid_feat_dim: int = 0
    num_attention_glimpses: int = 1
    use_feature_adapter: bool = False
    # append normalized box coordinates to each region feature
    use_boxes: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "num_answers", "embed_dim", "gru_hidden", "fusion_hidden",
                     "region_feat_dim", "num_attention_glimpses"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.grid_feat_dim < 0:
            raise ValueError("grid_feat_dim must be >= 0")

    @property
    def grid_enabled(self) -> bool:
        return self.grid_feat_dim > 0

    @property
    def question_dim(self) -> int:
        return self.gru_hidden * self.num_attention_glimpses

    @property
    def region_dim(self) -> int:
        return self.region_feat_dim + (4 if self.use_boxes else 0)

    @property
    def fused_dim(self) -> int:
        return self.fusion_hidden * (2 if self.grid_enabled else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    groups: dict[str, str]

    def group(self, name: str) -> list[str]:
        return [k for k, g in self.groups.items() if g == name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, dict(self.groups))

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        return {k: tape.leaf(v, requires_grad=trainable, name=k) for k, v in self.arrays.items()}


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _wn_layer(arrays, groups, rng, prefix, fan_out, fan_in, group="default"):
    v = _glorot(rng, fan_out, fan_in)
    arrays[f"{prefix}.g"] = np.sqrt((v * v).sum(axis=1))
    arrays[f"{prefix}.v"] = v
    arrays[f"{prefix}.b"] = np.zeros(fan_out)
    for s in "gvb":
        groups[f"{prefix}.{s}"] = group


def embed_and_init(
    vocab: Sequence[str],
    pretrained: Mapping[str, np.ndarray],
    embed_dim: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Copy pretrained rows where available, uniform in [-0.25, 0.25] otherwise."""
    for vec in pretrained.values():
        if len(vec) != embed_dim:
            raise ValueError("embedding dimension mismatch")
        break
    table = rng.uniform(-0.25, 0.25, size=(len(vocab), embed_dim))
    for i, tok in enumerate(vocab):
        vec = pretrained.get(tok)
        if vec is not None:
            table[i] = vec
    return table


def init_params(
    config: ModelConfig,
    rng: np.random.Generator,
    embedding_matrix: np.ndarray | None = None,
) -> ModelParams:
    c = config
    H, E, F = c.gru_hidden, c.embed_dim, c.fusion_hidden
    arrays: dict[str, np.ndarray] = {}
    groups: dict[str, str] = {}

    if embedding_matrix is None:
        embedding_matrix = rng.uniform(-0.25, 0.25, size=(c.vocab_size, E))
    if embedding_matrix.shape != (c.vocab_size, E):
        raise ValueError(f"embedding matrix shape {embedding_matrix.shape} != {(c.vocab_size, E)}")
    arrays["embedding"] = np.array(embedding_matrix, dtype=np.float64)

    # gate order along the 3H axis: update z, reset r, candidate
    arrays["gru.w_x"] = _glorot(rng, 3 * H, E)
    arrays["gru.u_zr"] = _glorot(rng, 2 * H, H)
    arrays["gru.u_h"] = _glorot(rng, H, H)
    arrays["gru.b"] = np.zeros(3 * H)
    arrays["qatt.w"] = _glorot(rng, c.num_attention_glimpses, H)
    arrays["qatt.b"] = np.zeros(c.num_attention_glimpses)

    if c.use_feature_adapter:
        _wn_layer(arrays, groups, rng, "adapter", c.region_feat_dim, c.region_feat_dim, "finetune")

    Q, R = c.question_dim, c.region_dim
    _wn_layer(arrays, groups, rng, "att.q", F, Q)
    _wn_layer(arrays, groups, rng, "att.v", F, R)
    _wn_layer(arrays, groups, rng, "att.out", 1, F)
    _wn_layer(arrays, groups, rng, "fuse.q", F, Q)
    _wn_layer(arrays, groups, rng, "fuse.v", F, R)
    if c.grid_enabled:
        _wn_layer(arrays, groups, rng, "fuse.gq", F, Q)
        _wn_layer(arrays, groups, rng, "fuse.grid", F, c.grid_feat_dim)
    _wn_layer(arrays, groups, rng, "cls.hidden", F, c.fused_dim)
    _wn_layer(arrays, groups, rng, "cls.out", c.num_answers, F)

    for k in arrays:
        groups.setdefault(k, "default")
    return ModelParams(arrays, groups)


# --------------------------------------------------------------------------
# building blocks


def _wn(x: Tensor, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    return weight_norm_linear(x, P[f"{prefix}.g"], P[f"{prefix}.v"], P[f"{prefix}.b"])


def _gru_cell(h: Tensor, xw: Tensor, P: Mapping[str, Tensor], H: int) -> Tensor:
    # xw already holds W x + b for all three gates
    return gru_cell(h, xw, P["gru.u_zr"], P["gru.u_h"])


def gru_step(h: Tensor, x: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    """One GRU update: ``h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h)``."""
    H = P["gru.u_h"].shape[0]
    if h.shape[-1] != H or x.shape[-1] != P["gru.w_x"].shape[1]:
        raise KernelError(f"gru_step shape mismatch h{h.shape} x{x.shape}")
    squeeze = h.ndim == 1
    if squeeze:
        h, x = h.reshape(1, H), x.reshape(1, x.shape[0])
    out = _gru_cell(h, linear(x, P["gru.w_x"], P["gru.b"]), P, H)
    return out.reshape(H) if squeeze else out


def encode_sequence(
    embedded: Tensor, mask: np.ndarray | None, P: Mapping[str, Tensor], h0: Tensor | None = None
) -> tuple[Tensor, Tensor | None]:
    """Run the GRU over ``embedded [B, T, E]``; padded steps keep the previous state.

    Returns the final state and all states ``[B, T, H]``. With ``T == 0``
    the initial state comes back unchanged and there are no states.
    """
    tape = embedded.tape
    B, T = embedded.shape[0], embedded.shape[1]
    H = P["gru.u_h"].shape[0]
    h = h0 if h0 is not None else tape.constant(np.zeros((B, H)))
    if T == 0:
        return h, None
    xw = linear(embedded, P["gru.w_x"], P["gru.b"])
    states = gru_sequence(h, xw, P["gru.u_zr"], P["gru.u_h"], mask)
    return states[:, T - 1, :], states


def question_attention(
    states: Tensor, P: Mapping[str, Tensor], mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Self-attention pooling of GRU states ``[B, T, H]`` -> ``[B, glimpses * H]``."""
    B, T, H = states.shape
    if T == 0:
        raise KernelError("empty question")
    logits = linear(states, P["qatt.w"], P["qatt.b"]).T  # [B, G, T]
    weights = softmax(logits, axis=-1, mask=None if mask is None else mask[:, None, :])
    pooled = weights @ states  # [B, G, H]
    return pooled.reshape(B, -1), weights


def top_down_attention(
    q: Tensor, regions: Tensor, P: Mapping[str, Tensor], mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Question-conditioned softmax over regions ``[B, K, D]``.

    Question and regions are projected (weight-norm + ReLU), combined by
    element-wise product and reduced to one logit per region. Masked-out
    regions get weight exactly 0.
    """
    B, K, D = regions.shape
    if K == 0 or (mask is not None and not np.asarray(mask).any(axis=-1).all()):
        raise KernelError("no valid regions")
    qa = relu(_wn(q, P, "att.q"))
    va = relu(_wn(regions, P, "att.v"))
    joint = va * qa.reshape(B, 1, qa.shape[-1])
    logits = _wn(joint, P, "att.out").reshape(B, K)
    weights = softmax(logits, axis=-1, mask=mask)
    attended = (weights.reshape(B, 1, K) @ regions).reshape(B, D)
    return attended, weights


def fuse(q_proj: Tensor, v_proj: Tensor) -> Tensor:
    if q_proj.shape != v_proj.shape:
        raise KernelError(f"fusion shape mismatch {q_proj.shape} vs {v_proj.shape}")
    return q_proj * v_proj


# --------------------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # int [B, T]
    question_mask: np.ndarray  # bool [B, T]
    regions: np.ndarray  # [B, K, D]
    region_mask: np.ndarray  # bool [B, K]
    boxes: np.ndarray | None = None  # [B, K, 4]
    grid: np.ndarray | None = None  # [B, G, Dg]
    targets: np.ndarray | None = None  # [B, A]
    question_ids: list[int] = field(default_factory=list)

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class ForwardOutput:
    logits: Tensor
    fused: Tensor
    question_weights: Tensor
    region_weights: Tensor

    @property
    def probs(self) -> np.ndarray:
        from .numkernel import _sigmoid

        return _sigmoid(self.logits.data)


def forward_batch(batch: Batch, P: Mapping[str, Tensor], config: ModelConfig, tape: Tape) -> ForwardOutput:
    c = config
    B, T = batch.tokens.shape
    if T == 0 or not batch.question_mask.any(axis=1).all():
        raise KernelError("empty question")
    if batch.regions.shape[-1] != c.region_feat_dim:
        raise KernelError(f"region width {batch.regions.shape[-1]} != {c.region_feat_dim}")
    if c.grid_enabled and batch.grid is None:
        raise KernelError("grid features required by config but missing")
    if c.use_boxes and batch.boxes is None:
        raise KernelError("box coordinates required by config but missing")

    emb = embedding(P["embedding"], batch.tokens)
    _, states = encode_sequence(emb, batch.question_mask, P)
    q, q_weights = question_attention(states, P, batch.question_mask)

    regions = tape.constant(batch.regions)
    if c.use_feature_adapter:
        regions = relu(_wn(regions, P, "adapter"))
    if c.use_boxes:
        regions = concat([regions, tape.constant(batch.boxes)], axis=-1)
    attended, r_weights = top_down_attention(q, regions, P, batch.region_mask)

    fused = fuse(relu(_wn(q, P, "fuse.q")), relu(_wn(attended, P, "fuse.v")))
    if c.grid_enabled:
        if batch.grid.shape[-1] != c.grid_feat_dim:
            raise KernelError(f"grid width {batch.grid.shape[-1]} != {c.grid_feat_dim}")
        pooled = tape.constant(batch.grid).mean(axis=1)
        grid_fused = fuse(relu(_wn(q, P, "fuse.gq")), relu(_wn(pooled, P, "fuse.grid")))
        fused = concat([fused, grid_fused], axis=-1)

    hidden = relu(_wn(fused, P, "cls.hidden"))
    logits = _wn(hidden, P, "cls.out")
    return ForwardOutput(logits, fused, q_weights, r_weights)


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against soft targets in [0, 1]."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise KernelError(f"target shape {t.shape} != logits {logits.shape}")
    if (t < 0).any() or (t > 1).any() or not np.isfinite(t).all():
        raise ValueError("targets must lie in [0, 1]")
    return bce_with_logits(logits, t).mean()


def batch_loss(batch: Batch, params: ModelParams, config: ModelConfig) -> tuple[Tape, dict[str, Tensor], Tensor]:
    tape = Tape()
    P = params.bind(tape)
    out = forward_batch(batch, P, config, tape)
    return tape, P, bce_loss(out.logits, batch.targets)


def predict_probs(batch: Batch, params: ModelParams, config: ModelConfig) -> np.ndarray:
    tape = Tape()
    return forward_batch(batch, params.bind(tape, trainable=False), config, tape).probs


# --------------------------------------------------------------------------
# checkpoint: magic, u32 len + JSON header, u32 count, then named float64 arrays


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: Mapping | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, config, extra))


def checkpoint_bytes(params: ModelParams, config: ModelConfig, extra: Mapping | None = None) -> bytes:
    header = {"model": config.to_dict(), **(dict(extra) if extra else {})}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params.arrays)))
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(data: bytes) -> tuple[ModelParams, ModelConfig, dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(bytes(take(hlen)).decode("utf-8"))
    config = ModelConfig.from_dict(header.pop("model"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint arrays")
    groups = {k: ("finetune" if k.startswith("adapter.") else "default") for k in arrays}
    return ModelParams(arrays, groups), config, header
