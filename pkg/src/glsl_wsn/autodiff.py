"""Minimal dense reverse-mode autodiff on top of numpy.

Every op is shape-exact: there is no implicit broadcasting, and size-1 axes
must be widened explicitly with :func:`expand`. Operations executed while a
:class:`Tape` is active (on the current thread) and touching at least one
tensor that requires gradients are recorded; everything else runs eagerly
without bookkeeping, which is the inference path.
"""

from __future__ import annotations

import itertools
import json
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "AdamState",
    "AutodiffError",
    "ShapeError",
    "Tape",
    "TapeNode",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "clip",
    "concat",
    "exp",
    "expand",
    "grad_check",
    "leaky_relu",
    "load_checkpoint",
    "log",
    "matmul",
    "mean",
    "mul",
    "reshape",
    "save_checkpoint",
    "scale",
    "sigmoid",
    "slice_",
    "softmax",
    "sub",
    "sum",
    "tanh",
    "transpose",
]


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError, ValueError):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_uid = itertools.count()
_local = threading.local()


class Tensor:
    """64-bit dense array with an identity used by the tape."""

    __slots__ = ("data", "requires_grad", "uid", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.uid = next(_uid)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass(slots=True)
class TapeNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    inputs: tuple[Tensor, ...] = field(repr=False)
    adjoint: Callable[[np.ndarray], tuple] = field(repr=False)


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    Tapes are confined to the thread that entered them; nested tapes are
    allowed and only the innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], adjoint) -> Tensor:
    stack = getattr(_local, "stack", None)
    if stack:
        for t in inputs:
            if t.requires_grad:
                res = Tensor._wrap(out, True)
                stack[-1].nodes.append(
                    TapeNode(op, tuple(t.uid for t in inputs), res.uid, inputs, adjoint)
                )
                return res
    return Tensor._wrap(out, False)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every leaf on ``tape``.

    Returns a mapping from tensor uid to gradient array. Leaves that the loss
    does not depend on are absent from the mapping.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise AutodiffError("backward on an empty tape")
    produced = {n.output_id for n in tape.nodes}
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        in_grads = node.adjoint(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            target = grads if t.uid in produced else leaves
            prev = target.get(t.uid)
            target[t.uid] = gi if prev is None else prev + gi
    if loss.uid not in produced and loss.requires_grad:
        leaves[loss.uid] = np.ones_like(loss.data)
    return leaves


# --------------------------------------------------------------------------
# primitives


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over a matching leading axis."""
    ad, bd = a.data, b.data
    ok = (
        ad.ndim == bd.ndim
        and ad.ndim in (2, 3)
        and ad.shape[-1] == bd.shape[-2]
        and ad.shape[:-2] == bd.shape[:-2]
    )
    if not ok:
        raise ShapeError("matmul", a.shape, b.shape)
    out = ad @ bd
    if ad.ndim == 2:
        return _emit("matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return _emit(
        "matmul",
        out,
        (a, b),
        lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise AutodiffError("concat of nothing")
    ref = tensors[0].data
    ax = axis % ref.ndim
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != ref.ndim or any(s[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError("concat", ref.shape, s, detail=f"axis={axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.data.shape[ax] for t in tensors])

    def adjoint(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _emit("concat", out, tensors, adjoint)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; integer indices drop their axis."""
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (slice, int, type(Ellipsis))):
            raise AutodiffError(f"slice: unsupported index {i!r}")
    out = a.data[index]
    shape = a.data.shape

    def adjoint(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", np.array(out), (a,), adjoint)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"axes={axes}")
    inv = tuple(np.argsort(axes))
    return _emit(
        "transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.data.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat size-1 axes up to ``shape``. Rank must already match."""
    shape = tuple(shape)
    src = a.data.shape
    if len(src) != len(shape) or any(s != 1 and s != t for s, t in zip(src, shape)):
        raise ShapeError("expand", src, shape)
    axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s == 1 and t != 1)
    out = np.empty(shape)
    out[...] = a.data
    return _emit("expand", out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.data.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", out, (a,), adjoint)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise AutodiffError("log of non-positive value")
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is overflow-free for any input
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    factor = np.where(x >= 0, 1.0, slope)
    return _emit("leaky_relu", x * factor, (a,), lambda g: (g * factor,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax. ``mask`` (bool, broadcastable) restricts the support;
    masked entries get exactly zero probability and zero gradient."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise AutodiffError("softmax over an empty support")
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), adjoint)


# --------------------------------------------------------------------------
# gradient check


def grad_check(
    fn: Callable,
    point: np.ndarray | Mapping[str, Tensor],
    step: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is either an array (``fn`` receives one leaf tensor) or a
    mapping of named leaf tensors (``fn`` receives the mapping and every entry
    of every tensor is perturbed in place, then restored). The error per
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``. Non-finite
    differences propagate into the result as ``inf``/``nan``.
    """
    if isinstance(point, Mapping):
        leaves = list(point.values())
        call = lambda: fn(point)  # noqa: E731
    else:
        x = Tensor(point, requires_grad=True)
        leaves = [x]
        call = lambda: fn(x)  # noqa: E731

    with Tape() as tape:
        loss = call()
    grads = backward(tape, loss)
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf.uid, np.zeros_like(leaf.data))
        flat = leaf.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + step
                fp = float(call().data)
                flat[i] = orig - step
                fm = float(call().data)
            except AutodiffError:
                # a probe left the function's domain
                return float("nan")
            finally:
                flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            if not np.isfinite(err):
                return float("nan") if np.isnan(err) else float("inf")
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam moments kept in one flat buffer; ``m``/``v`` expose per-parameter views."""

    def __init__(self, shapes: Mapping[str, tuple[int, ...]], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = list(shapes)
        self.shapes = {k: tuple(shapes[k]) for k in self.names}
        sizes = [int(np.prod(self.shapes[k])) for k in self.names]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        total = int(self.offsets[-1])
        self.m_flat = np.zeros(total)
        self.v_flat = np.zeros(total)
        self.step = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        return cls({k: p.shape for k, p in params.items()}, **hyper)

    def _views(self, flat):
        return {
            k: flat[self.offsets[i] : self.offsets[i + 1]].reshape(self.shapes[k])
            for i, k in enumerate(self.names)
        }

    @property
    def m(self) -> dict[str, np.ndarray]:
        return self._views(self.m_flat)

    @property
    def v(self) -> dict[str, np.ndarray]:
        return self._views(self.v_flat)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    parts = []
    for name in state.names:
        p = params[name]
        shape = state.shapes[name]
        g = grads.get(name)
        if p.data.shape != shape or (g is not None and g.shape != shape):
            raise ShapeError(
                "adam_step", p.shape, shape, () if g is None else g.shape, detail=name
            )
        parts.append(np.zeros(p.data.size) if g is None else g.reshape(-1))
    g = np.concatenate(parts) if parts else np.zeros(0)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m_flat, state.v_flat
    m *= b1
    m += (1.0 - b1) * g
    g *= g
    v *= b2
    v += (1.0 - b2) * g
    # lr * m_hat / (sqrt(v_hat) + eps), computed in place in a scratch buffer
    update = np.sqrt(v)
    update *= 1.0 / np.sqrt(1.0 - b2**state.step)
    update += state.eps
    np.divide(m, update, out=update)
    update *= state.lr / (1.0 - b1**state.step)
    off = state.offsets
    for i, name in enumerate(state.names):
        p = params[name]
        p.data -= update[off[i] : off[i + 1]].reshape(p.data.shape)
    return params, state


# --------------------------------------------------------------------------
# checkpoint container
#
# Layout (little endian):
#   b"GLSLCKPT"  magic
#   u32          format version (1)
#   u32          metadata length L, then L bytes of UTF-8 JSON
#   u32          record count
#   per record:  u16 name length, name (UTF-8), u8 ndim, ndim x u32 extents,
#                prod(extents) x f64 values in row-major order

CKPT_MAGIC = b"GLSLCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta]
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        # np.array keeps 0-d shapes, ascontiguousarray would promote them to 1-d
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise AutodiffError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise AutodiffError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos : pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return params, meta
