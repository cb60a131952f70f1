"""A small reverse-mode autodiff engine with just the ops the MFG network needs.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward``
walks the graph in reverse topological order.  Intermediate gradients are
kept local to each ``backward`` call, while leaf tensors (parameters)
accumulate into ``.grad`` so two calls without zeroing give twice the
gradient.

All values are float64.  Shapes must match exactly; there is no generic
broadcasting beyond the bias terms of :func:`linear` and :func:`conv2d`.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Tensor"] = (),
                 backward_fn: Callable | None = None, requires_grad: bool = False,
                 name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def parameter(value, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise ------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.value)
    return Tensor(np.abs(a.value), (a,), lambda g: (g * s,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return Tensor(y, (a,), lambda g: (g * (1.0 - y * y),))


def generalized_logistic(a: Tensor, q: float = 25.0, steepness: float = 10.0) -> Tensor:
    """``1 / (1 + q exp(-steepness * h))``, a smooth stand-in for ``h > 0``."""
    y = logistic_value(a.value, q, steepness)
    return Tensor(y, (a,), lambda g: (g * steepness * y * (1.0 - y),))


def logistic_value(h, q: float = 25.0, steepness: float = 10.0):
    h = np.asarray(h, dtype=np.float64)
    e = np.exp(-steepness * np.abs(h))  # never overflows
    # for h < 0 rewrite 1/(1 + q/e) as e/(e + q)
    return np.where(h >= 0, 1.0 / (1.0 + q * e), e / (e + q))


# --- reductions and shape ---------------------------------------------------------

def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor(a.value.sum(), (a,), lambda g: (np.full(shape, float(g)),))


def max_(a: Tensor) -> Tensor:
    """Global max; the gradient goes to the first maximal entry."""
    idx = int(np.argmax(a.value))
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out.flat[idx] = float(g)
        return (out,)

    return Tensor(a.value.flat[idx], (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    return sum_(abs_(sub(a, b)))


# --- linear algebra ---------------------------------------------------------------

def matvec(W: Tensor, x: Tensor) -> Tensor:
    if W.value.ndim != 2 or x.value.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ValueError(f"matvec: shape mismatch {W.shape} @ {x.shape}")
    return Tensor(W.value @ x.value, (W, x),
                  lambda g: (np.outer(g, x.value), W.value.T @ g))


def linear(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """``W x + bias`` for a vector ``x``."""
    out = matvec(W, x)
    if bias is not None:
        out = add(out, bias)
    return out


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of a ``(C, H, W)`` input with ``(O, C, kh, kw)`` kernels."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.value.ndim != 3 or w.value.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch input {x.shape} kernel {w.shape}")
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = _conv_out(H, kh, sh, ph), _conv_out(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = np.pad(x.value, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]
    wv = w.value
    out = np.tensordot(wv, cols, axes=([1, 2, 3], [0, 1, 2]))
    if b is not None:
        if b.shape != (O,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({O},)")
        out = out + b.value[:, None, None]

    def back(g):
        gw = np.tensordot(g, cols, axes=([1, 2], [3, 4]))
        gcols = np.tensordot(wv, g, axes=([0], [0]))  # (C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += gcols[:, i, j]
        gx = gxp[:, ph:ph + H, pw:pw + W]
        gb = g.sum(axis=(1, 2)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor(out, parents, back)


def _pair(v):
    if np.isscalar(v):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# --- initialization and optimizer -------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    s: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.s = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, s in zip(params, grads, state.m, state.s):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(s / c2) + state.eps)


# --- checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MFG1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(stream: BinaryIO, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    """``MFG1`` | u32 count | per entry: u32 name len, name, u32 ndim, u32 dims, f64 LE data."""
    stream.write(CHECKPOINT_MAGIC)
    stream.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<I", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        stream.write(arr.astype("<f8").tobytes(order="C"))


def read_checkpoint(stream: BinaryIO) -> list[tuple[str, np.ndarray]]:
    def take(n):
        b = stream.read(n)
        if len(b) != n:
            raise CheckpointError("truncated checkpoint")
        return b

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("bad tensor name") from e
        (ndim,) = struct.unpack("<I", take(4))
        if ndim > 8:
            raise CheckpointError(f"tensor {name!r} has implausible rank {ndim}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        if size > 1 << 28:
            raise CheckpointError(f"tensor {name!r} too large")
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        out.append((name, data.reshape(shape)))
    if stream.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return out


def checkpoint_bytes(tensors) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, tensors)
    return buf.getvalue()


def save_checkpoint(path, tensors) -> None:
    with open(path, "wb") as f:
        write_checkpoint(f, tensors)


def load_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as f:
        return read_checkpoint(f)
