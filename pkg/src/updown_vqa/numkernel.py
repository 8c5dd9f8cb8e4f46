"""Dense float64 tensors with taped reverse-mode differentiation.

Every primitive is a (forward, backward) pair registered in ``PRIMITIVES``.
A :class:`Tape` records each application in order, so gradients are a
single reverse sweep over the record and the forward pass can be replayed
from the leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]


PRIMITIVES: dict[str, Primitive] = {}


def primitive(tag: str):
    def register(cls):
        PRIMITIVES[tag] = Primitive(cls.forward, cls.backward)
        return cls

    return register


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --------------------------------------------------------------------------
# primitives: forward(xs, **attrs) -> (out, saved); backward(g, xs, out, saved, **attrs)


@primitive("add")
class _Add:
    @staticmethod
    def forward(xs):
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, xs, out, saved):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


@primitive("sub")
class _Sub:
    @staticmethod
    def forward(xs):
        return xs[0] - xs[1], None

    @staticmethod
    def backward(g, xs, out, saved):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(xs):
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, xs, out, saved):
        a, b = xs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@primitive("div")
class _Div:
    @staticmethod
    def forward(xs):
        return xs[0] / xs[1], None

    @staticmethod
    def backward(g, xs, out, saved):
        a, b = xs
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


@primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(xs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2:
            raise KernelError("matmul operands must be at least rank 2")
        if a.shape[-1] != b.shape[-2]:
            raise KernelError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return np.matmul(a, b), None

    @staticmethod
    def backward(g, xs, out, saved):
        a, b = xs
        return (
            _unbroadcast(np.matmul(g, _swap(b)), a.shape),
            _unbroadcast(np.matmul(_swap(a), g), b.shape),
        )


@primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(xs):
        return _swap(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved):
        return (_swap(g),)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(xs, shape):
        return xs[0].reshape(shape), None

    @staticmethod
    def backward(g, xs, out, saved, shape):
        return (g.reshape(xs[0].shape),)


@primitive("getitem")
class _GetItem:
    @staticmethod
    def forward(xs, index):
        return np.array(xs[0][index], dtype=DTYPE), None

    @staticmethod
    def backward(g, xs, out, saved, index):
        full = np.zeros_like(xs[0])
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(xs, axis):
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def backward(g, xs, out, saved, axis):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@primitive("stack")
class _Stack:
    @staticmethod
    def forward(xs, axis):
        return np.stack(xs, axis=axis), None

    @staticmethod
    def backward(g, xs, out, saved, axis):
        return tuple(np.moveaxis(g, axis, 0))


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(xs):
        return np.maximum(xs[0], 0.0), None

    @staticmethod
    def backward(g, xs, out, saved):
        # subgradient at exactly 0 is 0
        return (g * (xs[0] > 0.0),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(xs):
        return _sigmoid(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved):
        return (g * out * (1.0 - out),)


@primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(xs):
        return np.tanh(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved):
        return (g * (1.0 - out * out),)


def softmax_array(x: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise KernelError("empty distribution")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise KernelError("empty distribution")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(xs, axis, mask):
        return softmax_array(xs[0], axis, mask), None

    @staticmethod
    def backward(g, xs, out, saved, axis, mask):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(xs, axis, keepdims):
        return np.asarray(xs[0].sum(axis=axis, keepdims=keepdims), dtype=DTYPE), None

    @staticmethod
    def backward(g, xs, out, saved, axis, keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xs[0].shape).copy(),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(xs, axis, keepdims):
        return np.asarray(xs[0].mean(axis=axis, keepdims=keepdims), dtype=DTYPE), None

    @staticmethod
    def backward(g, xs, out, saved, axis, keepdims):
        x = xs[0]
        count = x.size // max(out.size, 1) if axis is not None else x.size
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)


@primitive("l2norm")
class _L2Norm:
    @staticmethod
    def forward(xs, axis, keepdims):
        return np.sqrt((xs[0] * xs[0]).sum(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, xs, out, saved, axis, keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            out = np.expand_dims(out, axis)
        return (g * xs[0] / out,)


@primitive("embedding")
class _Embedding:
    @staticmethod
    def forward(xs, ids):
        table = xs[0]
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise KernelError("embedding id out of range")
        return table[ids], None

    @staticmethod
    def backward(g, xs, out, saved, ids):
        full = np.zeros_like(xs[0])
        np.add.at(full, ids.reshape(-1), g.reshape(-1, xs[0].shape[1]))
        return (full,)


@primitive("bce_logits")
class _BceLogits:
    """Elementwise binary cross-entropy of sigmoid(z) against constant targets."""

    @staticmethod
    def forward(xs, targets):
        z = xs[0]
        return np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z))), None

    @staticmethod
    def backward(g, xs, out, saved, targets):
        return (g * (_sigmoid(xs[0]) - targets),)


@primitive("linear")
class _Linear:
    """``x @ w.T + b`` over any number of leading axes of ``x``."""

    @staticmethod
    def forward(xs):
        x, w, b = xs
        if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
            raise KernelError(f"linear shape mismatch x{x.shape} w{w.shape} b{b.shape}")
        # 2-D matmul so the product goes through plain BLAS gemm
        out = x.reshape(-1, w.shape[1]) @ w.T + b
        return out.reshape(x.shape[:-1] + (w.shape[0],)), None

    @staticmethod
    def backward(g, xs, out, saved):
        x, w, b = xs
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w).reshape(x.shape)
        return gx, g2.T @ x.reshape(-1, w.shape[1]), g2.sum(axis=0)


@primitive("weight_norm")
class _WeightNorm:
    """Rows ``w_j = g_j * v_j / ||v_j||``."""

    @staticmethod
    def forward(xs):
        g, v = xs
        norm = np.sqrt((v * v).sum(axis=1))
        if (norm < 1e-12).any():
            raise KernelError("degenerate direction vector")
        return (g / norm)[:, None] * v, norm

    @staticmethod
    def backward(G, xs, out, norm):
        g, v = xs
        vhat = v / norm[:, None]
        dg = (G * vhat).sum(axis=1)
        dv = (g / norm)[:, None] * (G - dg[:, None] * vhat)
        return dg, dv


def _gru_forward(h, xw, u_zr, u_h):
    H = h.shape[-1]
    zr = _sigmoid(xw[:, : 2 * H] + h @ u_zr.T)
    z, r = zr[:, :H], zr[:, H:]
    rh = r * h
    c = np.tanh(xw[:, 2 * H:] + rh @ u_h.T)
    return h + z * (c - h), (z, r, c, rh)


def _gru_backward(g, h, u_zr, u_h, saved):
    """Returns (dh, dxw, du_zr, du_h) for one cell."""
    z, r, c, rh = saved
    dc = g * z * (1.0 - c * c)
    drh = dc @ u_h
    dzr = np.concatenate([g * (c - h) * z * (1.0 - z), drh * h * r * (1.0 - r)], axis=1)
    dh = g * (1.0 - z) + drh * r + dzr @ u_zr
    return dh, np.concatenate([dzr, dc], axis=1), dzr.T @ h, dc.T @ rh


@primitive("gru_cell")
class _GruCell:
    """GRU update from a precomputed input projection ``xw = [W_z x, W_r x, W_h x] + b``."""

    @staticmethod
    def forward(xs):
        return _gru_forward(*xs)

    @staticmethod
    def backward(g, xs, out, saved):
        h, xw, u_zr, u_h = xs
        return _gru_backward(g, h, u_zr, u_h, saved)


@primitive("gru_sequence")
class _GruSequence:
    """All GRU states ``[B, T, H]`` for projections ``xw [B, T, 3H]``.

    Where ``mask[:, t]`` is False the state is carried over unchanged.
    """

    @staticmethod
    def forward(xs, mask):
        h0, xw, u_zr, u_h = xs
        T = xw.shape[1]
        h = h0
        states, saved = [], []
        for t in range(T):
            new, cache = _gru_forward(h, xw[:, t], u_zr, u_h)
            if mask is not None:
                new = np.where(mask[:, t, None], new, h)
            saved.append((h, cache))
            states.append(new)
            h = new
        return np.stack(states, axis=1), saved

    @staticmethod
    def backward(g, xs, out, saved, mask):
        h0, xw, u_zr, u_h = xs
        dxw = np.zeros_like(xw)
        du_zr = np.zeros_like(u_zr)
        du_h = np.zeros_like(u_h)
        carry = np.zeros_like(h0)
        for t in range(xw.shape[1] - 1, -1, -1):
            gt = carry + g[:, t]
            h_prev, cache = saved[t]
            if mask is not None:
                keep = mask[:, t, None]
                passthrough = np.where(keep, 0.0, gt)
                gt = np.where(keep, gt, 0.0)
            dh, dx, dzr_w, dh_w = _gru_backward(gt, h_prev, u_zr, u_h, cache)
            dxw[:, t] = dx
            du_zr += dzr_w
            du_h += dh_w
            carry = dh + passthrough if mask is not None else dh
        return carry, dxw, du_zr, du_h


# --------------------------------------------------------------------------


class Tensor:
    """A float64 array living on a tape, with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "id", "name")

    def __init__(self, data, tape: "Tape", tid: int, requires_grad=False, name=None):
        self.data = data
        self.tape = tape
        self.id = tid
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor#{self.id}{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, self._lift(other))

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __getitem__(self, index):
        return self.tape.apply("getitem", self, index=index)

    @property
    def T(self):
        return self.tape.apply("transpose", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply("reshape", self, shape=tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)


@dataclass
class Record:
    tag: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict[str, Any] = field(default_factory=dict)
    saved: Any = None


class Tape:
    """Ordered record of primitive applications (the computation record).

    Tensor ids are assigned in creation order, so the record is
    topologically sorted by construction.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.tensors: list[Tensor] = []
        self._leaf_values: dict[int, np.ndarray] = {}

    def leaf(self, data, requires_grad: bool = False, name: str | None = None) -> Tensor:
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise KernelError("non-finite leaf value")
        t = Tensor(arr, self, len(self.tensors), requires_grad, name)
        self.tensors.append(t)
        self._leaf_values[t.id] = arr
        return t

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def param(self, data, name: str | None = None) -> Tensor:
        return self.leaf(data, requires_grad=True, name=name)

    def apply(self, tag: str, *inputs: Tensor, **attrs) -> Tensor:
        for x in inputs:
            if x.tape is not self:
                raise KernelError("tensor belongs to a different tape")
        prim = PRIMITIVES[tag]
        out, saved = prim.forward([x.data for x in inputs], **attrs)
        out = np.asarray(out, dtype=DTYPE)
        t = Tensor(out, self, len(self.tensors), any(x.requires_grad for x in inputs))
        self.tensors.append(t)
        self.records.append(Record(tag, tuple(x.id for x in inputs), t.id, attrs, saved))
        return t

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every recorded output from the stored leaf values."""
        values = dict(self._leaf_values)
        for rec in self.records:
            out, _ = PRIMITIVES[rec.tag].forward([values[i] for i in rec.inputs], **rec.attrs)
            values[rec.output] = np.asarray(out, dtype=DTYPE)
        return values


def reverse_gradients(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a gradient for every ``requires_grad`` leaf on the tape (zeros
    for leaves that do not reach the loss) and stores it on ``Tensor.grad``.
    """
    if loss.tape is not tape:
        raise KernelError("loss is not on this tape")
    if loss.data.size != 1:
        raise KernelError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        if rec.output > loss.id:
            continue
        if any(i >= rec.output for i in rec.inputs):
            raise KernelError("cycle in computation record")
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        xs = [tape.tensors[i] for i in rec.inputs]
        if not any(x.requires_grad for x in xs):
            continue
        in_grads = PRIMITIVES[rec.tag].backward(
            g, [x.data for x in xs], tape.tensors[rec.output].data, rec.saved, **rec.attrs
        )
        for x, gx in zip(xs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            if x.id in grads:
                grads[x.id] = grads[x.id] + gx
            else:
                grads[x.id] = gx
    result = {}
    for tid in tape._leaf_values:
        t = tape.tensors[tid]
        if t.requires_grad:
            t.grad = grads.get(tid, np.zeros_like(t.data))
            result[tid] = t.grad
    return result


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` per coordinate."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise KernelError("oracle evaluation failed")
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_tol: float = 1e-7) -> float:
    """Max relative error; entries within ``abs_tol`` absolute count as exact."""
    a = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    n = np.asarray(numeric, dtype=DTYPE).reshape(-1)
    if a.size == 0:
        return 0.0
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(diff <= abs_tol, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max())


# --------------------------------------------------------------------------
# functional wrappers


def relu(x: Tensor) -> Tensor:
    return x.tape.apply("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return x.tape.apply("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return x.tape.apply("tanh", x)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return xs[0].tape.apply("concat", *xs, axis=axis)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return xs[0].tape.apply("stack", *xs, axis=axis)


def l2norm(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return x.tape.apply("l2norm", x, axis=axis, keepdims=keepdims)


def embedding(table: Tensor, ids) -> Tensor:
    return table.tape.apply("embedding", table, ids=np.asarray(ids, dtype=np.int64))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return x.tape.apply("softmax", x, axis=axis, mask=mask)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    return logits.tape.apply("bce_logits", logits, targets=np.asarray(targets, dtype=DTYPE))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x.tape.apply("linear", x, w, b)


def weight_norm_linear(x: Tensor, g: Tensor, v: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with rows ``w_j = g_j * v_j / ||v_j||``. No activation."""
    if v.ndim != 2 or g.shape != (v.shape[0],) or b.shape != (v.shape[0],):
        raise KernelError(f"weight-norm shapes g{g.shape} v{v.shape} b{b.shape} disagree")
    if x.shape[-1] != v.shape[1]:
        raise KernelError(f"input width {x.shape[-1]} != {v.shape[1]}")
    return linear(x, x.tape.apply("weight_norm", g, v), b)


def gru_cell(h: Tensor, xw: Tensor, u_zr: Tensor, u_h: Tensor) -> Tensor:
    return h.tape.apply("gru_cell", h, xw, u_zr, u_h)


def gru_sequence(h0: Tensor, xw: Tensor, u_zr: Tensor, u_h: Tensor, mask=None) -> Tensor:
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return h0.tape.apply("gru_sequence", h0, xw, u_zr, u_h, mask=mask)


def evaluate(fn: Callable[[Tape], Tensor]) -> np.ndarray:
    """Run ``fn`` on a fresh tape and return the output array."""
    return fn(Tape()).data


def as_params(tape: Tape, arrays: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
    return {k: tape.leaf(v, requires_grad=trainable, name=k) for k, v in arrays.items()}
