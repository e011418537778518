"""Dense double-precision tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad=True`` while a
:class:`Tape` is active appends one node (inputs, output, local gradient
rule) to that tape.  ``grad`` replays the tape in reverse creation order,
which is a valid topological order because nodes are appended strictly
after their inputs exist.

Higher-order derivatives come for free from one structural choice: the
local gradient rules are written in terms of tensor operations, not raw
numpy.  With ``create_graph=True`` the backward pass therefore records new
nodes onto the same tape, and the returned gradients can be differentiated
again.  With ``create_graph=False`` the rules run inside a ``no_grad``
scope and produce plain constants.

Tapes are thread-confined: each thread keeps its own stack of active
tapes, and independent tapes may run concurrently on different threads.
All arithmetic is float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tape",
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "zeros_like",
    "ones_like",
    "no_grad",
    "has_active_tape",
    "grad",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "power",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "reduce_sum",
    "reduce_mean",
    "exp",
    "log",
    "relu",
    "im2col",
    "col2im",
    "conv2d",
    "global_avg_pool2d",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "mse_loss",
    "one_hot",
]


class AutodiffError(RuntimeError):
    """Raised for tape misuse: no active tape, or a tensor not on it."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


def has_active_tape() -> bool:
    """True when the calling thread is inside a ``with Tape():`` block."""
    return _active_tape() is not None


@contextmanager
def no_grad():
    """Disable recording within the block; ops produce constants."""
    prev = _grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


class Tensor:
    """Immutable n-dimensional float64 value, optionally on a tape.

    ``data`` must not be mutated after construction; all operations return
    new tensors.  ``node`` is the recorded tape entry that produced this
    tensor, or None for leaves and constants.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Optional[TapeNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        """Fresh leaf sharing no storage with this tensor."""
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # reductions / shape manipulation as methods, mirroring numpy habits
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # arithmetic operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class TapeNode:
    """One recorded operation: inputs, output, and its local gradient rule."""

    __slots__ = ("name", "inputs", "output", "vjp", "index")

    def __init__(self, name, inputs, output, vjp, index):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.index = index


class Tape:
    """Append-only record of operations for one logical thread of work.

    Use as a context manager; tapes nest, and ops record onto the
    innermost active tape of the current thread.
    """

    def __init__(self, create_graph: bool = False):
        self.nodes: list[TapeNode] = []
        self.watched: set[int] = set()
        self.create_graph = create_graph

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape exited out of order"
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _record(name: str, inputs: tuple, out_data, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and _grad_enabled() and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        node = TapeNode(name, inputs, out, vjp, len(tape.nodes))
        out.node = node
        tape.nodes.append(node)
        for t in inputs:
            if t.requires_grad:
                tape.watched.add(id(t))
        tape.watched.add(id(out))
        return out
    return Tensor(out_data)


def grad(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: Optional[bool] = None,
) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Requires an active tape on which ``loss`` was recorded.  When
    ``create_graph`` is true the returned gradients are themselves recorded
    and can be differentiated again; when false they are constants.
    ``create_graph=None`` falls back to the active tape's default.

    Raises ``ValueError`` for a non-scalar loss or a ``wrt`` entry without
    ``requires_grad``, and :class:`AutodiffError` when a ``wrt`` tensor
    never participated in any operation on the active tape.  A ``wrt``
    tensor that is on the tape but does not influence the loss gets a zero
    gradient.
    """
    tape = _active_tape()
    if tape is None:
        raise AutodiffError("grad() requires an active Tape")
    if create_graph is None:
        create_graph = tape.create_graph
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss must be a scalar Tensor")
    for w in wrt:
        if not isinstance(w, Tensor) or not w.requires_grad:
            raise ValueError("every wrt tensor must have requires_grad=True")
        if id(w) not in tape.watched:
            raise AutodiffError("wrt tensor is not on the active tape")

    if loss.node is None:
        return [ones_like(w) if w is loss else zeros_like(w) for w in wrt]
    start = loss.node.index
    if start >= len(tape.nodes) or tape.nodes[start] is not loss.node:
        raise AutodiffError("loss is not recorded on the active tape")

    wrt_ids = {id(w) for w in wrt}
    grads: dict[int, Tensor] = {id(loss): ones_like(loss)}
    captured: dict[int, Tensor] = {}

    def _walk():
        for i in range(start, -1, -1):
            node = tape.nodes[i]
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            if id(node.output) in wrt_ids:
                captured[id(node.output)] = g_out
            in_grads = node.vjp(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else add(prev, g)

    if create_graph:
        _walk()
    else:
        with no_grad():
            _walk()

    out = []
    for w in wrt:
        g = captured.get(id(w))
        if g is None:
            g = grads.get(id(w))
        out.append(g if g is not None else zeros_like(w))
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _sum_to_shape(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to the operand's shape."""
    gshape = g.data.shape
    shape = tuple(shape)
    if gshape == shape:
        return g
    ndiff = len(gshape) - len(shape)
    axes = list(range(ndiff))
    for i, s in enumerate(shape):
        if s == 1 and gshape[ndiff + i] != 1:
            axes.append(ndiff + i)
    if axes:
        g = reduce_sum(g, axis=tuple(axes), keepdims=True)
    return reshape(g, shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(neg(g), b.data.shape)

    return _record("sub", (a, b), a.data - b.data, vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (neg(g),)

    return _record("neg", (a,), -a.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (
            _sum_to_shape(mul(g, b), a.data.shape),
            _sum_to_shape(mul(g, a), b.data.shape),
        )

    return _record("mul", (a, b), a.data * b.data, vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ga = _sum_to_shape(div(g, b), a.data.shape)
        gb = _sum_to_shape(neg(div(mul(g, a), mul(b, b))), b.data.shape)
        return ga, gb

    return _record("div", (a, b), a.data / b.data, vjp)


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a fixed scalar exponent."""
    a = _as_tensor(a)
    p = float(p)

    def vjp(g):
        if p == 0.0:
            return (zeros_like(a),)
        return (mul(g, mul(Tensor(p), power(a, p - 1.0))),)

    return _record("power", (a,), a.data**p, vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    holder = []

    def vjp(g):
        return (mul(g, holder[0]),)

    out = _record("exp", (a,), np.exp(a.data), vjp)
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (div(g, a),)

    return _record("log", (a,), np.log(a.data), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _record("relu", (a,), a.data * mask, vjp)


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    shape = tuple(shape)

    def vjp(g):
        return (reshape(g, old),)

    return _record("reshape", (a,), np.reshape(a.data, shape), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _record("transpose", (a,), np.transpose(a.data, axes), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    shape = tuple(shape)

    def vjp(g):
        return (_sum_to_shape(g, old),)

    return _record("broadcast", (a,), np.broadcast_to(a.data, shape), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    xshape = a.data.shape
    if axis is None:
        axes = tuple(range(len(xshape)))
    elif isinstance(axis, int):
        axes = (axis % max(len(xshape), 1),)
    else:
        axes = tuple(ax % len(xshape) for ax in axis)

    def vjp(g):
        if not keepdims and xshape:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(xshape))
            g = reshape(g, kshape)
        return (broadcast_to(g, xshape),)

    return _record("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(a, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Gather sliding ``kh x kw`` patches of a [N,C,H,W] tensor.

    Output is [N, C*kh*kw, H'*W'].  The adjoint (scatter-add) is
    :func:`col2im`; the pair makes convolution differentiable to any order.
    """
    a = _as_tensor(a)
    n, c, h, w = a.data.shape
    hp = _conv_out_size(h, kh, stride, padding)
    wp = _conv_out_size(w, kw, stride, padding)
    x = a.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N,C,hp,wp,kh,kw]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c * kh * kw, hp * wp
    )

    def vjp(g):
        return (col2im(g, (n, c, h, w), kh, kw, stride, padding),)

    return _record("im2col", (a,), cols, vjp)


def col2im(
    a, img_shape: tuple, kh: int, kw: int, stride: int = 1, padding: int = 0
) -> Tensor:
    """Scatter-add patch columns back into an image; adjoint of im2col."""
    a = _as_tensor(a)
    n, c, h, w = img_shape
    hp = _conv_out_size(h, kh, stride, padding)
    wp = _conv_out_size(w, kw, stride, padding)
    g6 = a.data.reshape(n, c, kh, kw, hp, wp)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * hp : stride, j : j + stride * wp : stride] += g6[
                :, :, i, j
            ]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]

    def vjp(g):
        return (im2col(g, kh, kw, stride, padding),)

    return _record("col2im", (a,), np.ascontiguousarray(out), vjp)


def conv2d(inputs, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C,H,W] or [N,C,H,W] inputs with [Co,Ci,kh,kw] kernels.

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.
    """
    x = _as_tensor(inputs)
    k = _as_tensor(kernels)
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError(
            f"conv2d expects [N,C,H,W] input and [Co,Ci,kh,kw] kernels, "
            f"got {inputs.shape if hasattr(inputs, 'shape') else '?'} and {k.data.shape}"
        )
    n, c, h, w = x.data.shape
    co, ci, kh, kw = k.data.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernels expect {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    hp = _conv_out_size(h, kh, stride, padding)
    wp = _conv_out_size(w, kw, stride, padding)

    cols = im2col(x, kh, kw, stride, padding)  # [N, C*kh*kw, hp*wp]
    cols2 = reshape(transpose(cols, (1, 0, 2)), (c * kh * kw, n * hp * wp))
    w2 = reshape(k, (co, c * kh * kw))
    out2 = matmul(w2, cols2)  # [Co, N*hp*wp]
    out = transpose(reshape(out2, (co, n, hp, wp)), (1, 0, 2, 3))
    if single:
        out = reshape(out, (co, hp, wp))
    return out


def global_avg_pool2d(inputs) -> Tensor:
    """Mean over the spatial plane: [C,H,W] -> [C] or [N,C,H,W] -> [N,C]."""
    x = _as_tensor(inputs)
    if x.data.ndim not in (3, 4):
        raise ValueError(f"global_avg_pool2d expects 3-D or 4-D input, got {x.data.shape}")
    return reduce_mean(x, axis=(-2, -1))


# ---------------------------------------------------------------------------
# classification / regression losses
# ---------------------------------------------------------------------------


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"label index out of range: max {labels.max()} for {n_classes} classes"
        )
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def log_softmax(logits, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax via the log-sum-exp shift."""
    x = _as_tensor(logits)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    shifted = sub(x, shift)
    lse = log(reduce_sum(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def softmax(logits, axis: int = -1) -> Tensor:
    x = _as_tensor(logits)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of [batch, C] logits against labels.

    ``labels`` may be integer class indices of shape [batch] or a one-hot
    array of shape [batch, C].  Stabilised with log-sum-exp.
    """
    x = _as_tensor(logits)
    if x.data.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got {x.data.shape}")
    n, c = x.data.shape
    labels_arr = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if labels_arr.ndim == 1:
        onehot = one_hot(labels_arr, c)
    elif labels_arr.shape == (n, c):
        onehot = labels_arr.astype(np.float64)
    else:
        raise ValueError(
            f"labels must be [batch] indices or [batch, classes] one-hot, got {labels_arr.shape}"
        )
    ls = log_softmax(x, axis=-1)
    picked = reduce_sum(mul(ls, Tensor(onehot)), axis=-1)
    return neg(reduce_mean(picked))


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    p = _as_tensor(pred)
    t = _as_tensor(target)
    if p.data.shape != t.data.shape:
        raise ValueError(f"mse shape mismatch: {p.data.shape} vs {t.data.shape}")
    d = sub(p, t)
    return reduce_mean(mul(d, d))
