"""Dense float64 tensors with reverse-mode differentiation.

The op set is deliberately closed and small: exactly what the residual
classifier and the UNet-style denoiser need. There is no broadcasting
beyond tensor-scalar; anything fancier must be spelled out with reshape,
concat or an explicit ones-matrix matmul, which keeps gradients easy to
audit against finite differences.

Graphs are implicit: each Tensor produced by an op keeps references to its
parents and a backward closure. `backward(loss)` walks the DAG in reverse
topological order and accumulates gradients additively; buffers are only
cleared by `zero_grads` or the optimizer step.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ._kernels import conv3x3_backward, conv3x3_forward
from .errors import ShapeError

_STANDARDIZE_EPS = 1e-5

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording; ops executed inside return detached tensors."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        # np.ascontiguousarray would promote 0-d to 1-d; keep scalars 0-d.
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad: bool = bool(requires_grad)
        self.op: Optional[str] = None
        self._parents: tuple = ()
        self._bwd: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op!r})"

    # Arithmetic sugar; everything routes through the closed op set.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), float(other))


def _result(data, parents: tuple, op: str, bwd: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._bwd = bwd
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; `b` may be a same-shape tensor or a scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))
    s = float(b)
    return _result(a.data + s, (a,), "add", lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a same-shape tensor or a scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        return _result(
            a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data)
        )
    s = float(b)
    return _result(a.data * s, (a,), "mul", lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")
    old = x.shape
    return _result(
        x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    datas = [t.data for t in tensors]
    base = datas[0].shape
    for d in datas[1:]:
        if d.ndim != len(base) or any(
            i != axis and d.shape[i] != base[i] for i in range(d.ndim)
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} "
                f"along axis {axis}"
            )
    out = np.concatenate(datas, axis=axis)
    offsets = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _result(out, tuple(tensors), "concat", bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _result(
        np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.full(shape, float(g)),)
    )


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree between {a.shape} and {b.shape}"
        )

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), "matmul", bwd)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D operands, got {x.shape} and {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be 3x3, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match kernel channels {w.shape}"
        )

    def bwd(g):
        return conv3x3_backward(x.data, w.data, g)

    return _result(conv3x3_forward(x.data, w.data), (x, w), "conv2d", bwd)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------


def mean_pool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"mean_pool2x2: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean_pool2x2: spatial dims must be even, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.empty((n, c, h, w))
        gx.reshape(n, c, h // 2, 2, w // 2, 2)[:] = (g * 0.25)[
            :, :, :, None, :, None
        ]
        return (gx,)

    return _result(out, (x,), "mean_pool2x2", bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape

    def bwd(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling; adjoint of a 2x2 sum pool."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), "upsample2x", bwd)


# ---------------------------------------------------------------------------
# Normalization and losses
# ---------------------------------------------------------------------------


def standardize(x: Tensor) -> Tensor:
    """Per-sample standardization over all non-batch axes (batch-free norm)."""
    if x.ndim < 2:
        raise ShapeError(f"standardize: expected at least 2-D input, got {x.shape}")
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + _STANDARDIZE_EPS)
    y = (x.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, (x,), "standardize", bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no graph participation)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def per_row_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """-log softmax(logits)[target] per row, computed outside the graph."""
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return -lp[np.arange(lp.shape[0]), np.asarray(targets, dtype=np.int64)]


def softmax_cross_entropy(
    logits: Tensor,
    targets,
    weights: Optional[np.ndarray] = None,
    divisor: Optional[float] = None,
) -> Tensor:
    """Cross-entropy between softmax(logits) and integer class targets.

    Default reduction is the mean over the batch. `weights` (per row) and
    `divisor` generalize that to sum(w_i * ce_i) / divisor, which is how the
    consistency loss folds its acceptance mask in; weights default to ones
    and divisor to the batch size.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected B x C logits, got {logits.shape}")
    b, c = logits.shape
    if c < 2:
        raise ValueError(f"softmax_cross_entropy: need at least 2 classes, got {c}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise ShapeError(
            f"softmax_cross_entropy: {b} logit rows but {t.shape[0]} targets"
        )
    if t.size and (t.min() < 0 or t.max() >= c):
        bad = t[(t < 0) | (t >= c)][0]
        raise IndexError(f"target {bad} out of range for {c} classes")
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (b,):
        raise ShapeError(f"softmax_cross_entropy: weights shape {w.shape} != ({b},)")
    d = float(b) if divisor is None else float(divisor)

    lp = log_softmax(logits.data)
    ce = -lp[np.arange(b), t]
    loss = float((w * ce).sum() / d)

    def bwd(g):
        p = np.exp(lp)
        p[np.arange(b), t] -= 1.0
        return (p * (float(g) * w / d)[:, None],)

    return _result(np.asarray(loss), (logits,), "softmax_cross_entropy", bwd)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    tgt = _as_tensor(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {tgt.shape} differ")
    diff = pred.data - tgt.data
    n = diff.size

    def bwd(g):
        scaled = (2.0 * float(g) / n) * diff
        return scaled, -scaled

    return _result(np.asarray(float((diff * diff).mean())), (pred, tgt), "mse", bwd)


# ---------------------------------------------------------------------------
# Graph traversal and backward
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Flattened view of the DAG below a root, in valid evaluation order."""

    nodes: list  # (op_kind, parent indices, tensor) triples
    order: list  # indices into `nodes`, topologically sorted


def _topo(root: Tensor) -> list:
    order: list = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def trace(root: Tensor) -> Graph:
    """Materialize the graph below `root` (inputs precede consumers)."""
    order = _topo(root)
    index = {id(t): i for i, t in enumerate(order)}
    nodes = [
        (t.op or "leaf", tuple(index[id(p)] for p in t._parents), t) for t in order
    ]
    return Graph(nodes=nodes, order=list(range(len(nodes))))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every requires_grad tensor.

    Gradients add across calls and across fan-out within a graph; they are
    cleared only by `zero_grads` or an optimizer step.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    flowing: dict = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._bwd is None:
            continue
        parent_grads = t._bwd(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = flowing.get(id(p))
            flowing[id(p)] = pg if acc is None else acc + pg


def zero_grads(params) -> None:
    """Clear gradient buffers on an iterable or mapping of tensors."""
    tensors = params.values() if hasattr(params, "values") else params
    for t in tensors:
        t.grad = None
