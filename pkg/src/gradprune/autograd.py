"""Minimal reverse-mode differentiation over numpy float64 arrays.

Only the operations needed by small feed-forward CNNs are provided:
``conv2d``, ``dense``, ``relu``, ``max_pool2d``, ``flatten``,
``softmax_cross_entropy``, ``tsum`` and ``scale``.

Reductions are written as explicit accumulation loops or ``np.einsum``
without BLAS dispatch, so the summation order is fixed and results are
bit-reproducible regardless of thread count.  In particular ``conv2d``
accumulates over (input channel, kernel row, kernel column) in row-major
order (a sequential reduction over the leading tap axis) and adds the bias
last, which is the order a naive loop uses.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, StateError

GradientSet = Dict[str, np.ndarray]

DTYPE = np.float64

# max elements of the per-chunk product tensor in conv2d
_CONV_CHUNK = 1 << 22


class Tensor:
    """An n-d float64 array with an optional gradient slot and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> GradientSet:
        return backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _node(data, parents, backward_fn) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with OIHW filters plus bias."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW (4 axes), got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weights must be OIHW (4 axes), got shape {weight.shape}")
    n, c, h, w = x.shape
    o, i_ch, kh, kw = weight.shape
    if c != i_ch:
        raise DimensionError(
            f"input channel axis (axis 1, size {c}) does not match weight input axis (axis 1, size {i_ch})"
        )
    if bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match weight output axis (axis 0, size {o})")
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise InputError(f"padding must be >= 0, got {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    wd = weight.data
    k = c * kh * kw
    # patches[k] holds input tap k = (channel, row, col) for every output position: (K, N, Ho, Wo)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    patches = np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(k, n, ho, wo)
    w_taps = wd.reshape(o, k).T
    out = np.empty((n, o, ho, wo), dtype=DTYPE)
    step = max(1, _CONV_CHUNK // max(1, k * o * ho * wo))
    for start in range(0, n, step):
        stop = min(n, start + step)
        # reducing the leading tap axis accumulates taps one by one in row-major order
        prod = w_taps[:, None, :, None, None] * patches[:, start:stop, None]
        out[start:stop] = np.add.reduce(prod, axis=0)
    out += bias.data[None, :, None, None]
    h_end, w_end = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def _backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = np.einsum("nohw,knhw->ok", g, patches).reshape(o, c, kh, kw)
        gx = None
        if x.requires_grad:
            g_taps = np.einsum("ko,nohw->knhw", w_taps, g)
            gxp = np.zeros_like(xp)
            for tap, (ci, i, j) in enumerate(np.ndindex(c, kh, kw)):
                gxp[:, ci, i:i + h_end:stride, j:j + w_end:stride] += g_taps[tap]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    return _node(out, (x, weight, bias), _backward)


def dense(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (N, in), weight (in, out)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"dense expects 2-D input and weights, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"input feature axis (axis 1, size {x.shape[1]}) does not match weight axis 0 (size {weight.shape[0]})"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match weight axis 1 (size {weight.shape[1]})")
    out = np.einsum("nk,ko->no", x.data, weight.data) + bias.data[None, :]

    def _backward(g):
        gx = np.einsum("no,ko->nk", g, weight.data) if x.requires_grad else None
        gw = np.einsum("nk,no->ko", x.data, g)
        return gx, gw, g.sum(axis=0)

    return _node(out, (x, weight, bias), _backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    out = np.where(active, x.data, 0.0)
    return _node(out, (x,), lambda g: (g * active,))


def max_pool2d(x, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling over square windows; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d input must be NCHW, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise InputError("window and stride must be >= 1")
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    h_end, w_end = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]
    stacked = np.stack([x.data[:, :, i:i + h_end:stride, j:j + w_end:stride] for i, j in offsets])
    out = stacked.max(axis=0)

    def _backward(g):
        winner = stacked.argmax(axis=0)
        gx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            gx[:, :, i:i + h_end:stride, j:j + w_end:stride] += np.where(winner == k, g, 0.0)
        return (gx,)

    return _node(out, (x,), _backward)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def tsum(x) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * factor, (x,), lambda g: (g * factor,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, classes), got shape {logits.shape}")
    n, m = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits batch axis (size {n})")
    if n == 0:
        raise InputError("cross-entropy over an empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise InputError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= m:
        raise InputError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (float(g) / n),)

    return _node(np.asarray(loss), (logits,), _backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> GradientSet:
    """Run the reverse pass from a scalar ``loss``.

    Every leaf tensor with ``requires_grad`` that is reachable from ``loss``
    gets its ``.grad`` overwritten with the gradient summed over all of its
    uses.  The returned mapping is keyed by tensor name.  When ``params`` is
    given, each of them appears in the result, with an all-zero gradient if
    it is not on a path to ``loss``.
    """
    if not isinstance(loss, Tensor):
        raise InputError("backward expects a Tensor produced by a forward pass")
    if loss._backward is None:
        raise StateError("backward called on a tensor with no recorded forward pass")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            node.grad = g if g is not None else np.zeros_like(node.data)
            leaves.append(node)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    result: GradientSet = {}
    for leaf in leaves:
        result[leaf.name if leaf.name is not None else f"tensor_{id(leaf)}"] = leaf.grad
    if params is not None:
        for p in params:
            key = p.name if p.name is not None else f"tensor_{id(p)}"
            if key not in result:
                p.grad = np.zeros_like(p.data)
                result[key] = p.grad
    return result
