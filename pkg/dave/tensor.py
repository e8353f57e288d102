"""Dense tensors with reverse-mode differentiation.

Only the operations the two networks need are implemented: convolution, max
pooling, ReLU, the logistic and softmax squashings, reshape, spatial mean,
elementwise add/scale, and the three losses (softmax NLL, smooth L1, vector
binary cross-entropy).

Each op computes its output eagerly with numpy and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
Graphs are plain object references; no global tape exists, so disjoint graphs
can be built and differentiated from different threads.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from dave.errors import LabelError, NonFiniteError, ShapeError

PROB_CLAMP = 1e-7

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


# -------------------- Precision --------------------

def get_default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype new leaf tensors are created with (per thread)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def float64_mode():
    return precision(np.float64)


def grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops run inside record no backward closures (per thread)."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in output")


# -------------------- Tensor --------------------

class Tensor:
    """N-dimensional array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=get_default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _node(cls, data: np.ndarray, parents: Tuple["Tensor", ...], backward: Optional[BackwardFn]) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.name = ""
        if backward is not None and grad_enabled() and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    # ---------------- properties ----------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._node(self.data, (), None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---------------- arithmetic ----------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    # ---------------- backward ----------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"backward: gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    _check_finite(g, "backward")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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


def constant(data: ArrayLike) -> Tensor:
    """Wrap an array as a tensor that never receives a gradient, keeping its dtype."""
    return Tensor._node(np.asarray(data), (), None)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    _check_finite(data, op)
    return Tensor._node(data, parents, backward)


def _as_array(x: Union[Tensor, ArrayLike], dtype) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


# -------------------- Layers --------------------

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input channels {C} != weight channels {Cw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride {stride} / pad {pad}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"conv2d: input {H}x{W} (pad {pad}) smaller than kernel {kh}x{kw}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")

    s, p = int(stride), int(pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: bad window {k} / stride {stride}")
    if H < k or W < k:
        raise ShapeError(f"maxpool2d: window {k} larger than input {H}x{W}")

    s = int(stride)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    idx = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        if s == k:
            hit = np.arange(k * k) == idx[..., None]
            block = np.where(hit, g[..., None], 0.0).astype(g.dtype)
            block = block.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * k, Wo * k)
            gx[:, :, :Ho * k, :Wo * k] = block
        else:
            di, dj = np.divmod(idx, k)
            rows = np.arange(Ho)[None, None, :, None] * s + di
            cols = np.arange(Wo)[None, None, None, :] * s + dj
            bi = np.broadcast_to(np.arange(B)[:, None, None, None], idx.shape)
            ci = np.broadcast_to(np.arange(C)[None, :, None, None], idx.shape)
            np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g: np.ndarray):
        return (np.where(mask, g, 0).astype(g.dtype),)

    return _result(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data).astype(x.dtype)

    def backward(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))

    def backward(g: np.ndarray):
        return (g.reshape(src),)

    return _result(out, (x,), backward, "reshape")


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pooling: [B,C,H,W] -> [B,C,1,1]."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_mean: expected 4-D input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g: np.ndarray):
        return (np.broadcast_to(g / hw, x.shape).astype(g.dtype),)

    return _result(out, (x,), backward, "spatial_mean")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g: np.ndarray):
        return g, g

    return _result(a.data + b.data, (a, b), backward, "add")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g: np.ndarray):
        return (g * c,)

    return _result(x.data * c, (x,), backward, "scale")


# -------------------- Losses --------------------

def _row_weights(weights: Optional[ArrayLike], rows: int, dtype, op: str) -> np.ndarray:
    if weights is None:
        return np.ones(rows, dtype=dtype)
    w = np.asarray(weights, dtype=dtype).reshape(-1)
    if w.shape != (rows,):
        raise ShapeError(f"{op}: {w.size} weights for {rows} rows")
    if np.any(w < 0):
        raise LabelError(f"{op}: negative row weight")
    return w


def softmax_nll(logits: Tensor, labels: ArrayLike, weights: Optional[ArrayLike] = None) -> Tensor:
    """Mean over rows of ``weight * -log softmax(logits)[label]``.

    Rows with weight 0 contribute zero loss and exactly zero gradient; their
    labels are not checked.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_nll: expected [B,K] logits, got {logits.shape}")
    B, K = logits.shape
    dtype = logits.dtype
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape != (B,):
        raise ShapeError(f"softmax_nll: {y.size} labels for {B} rows")
    w = _row_weights(weights, B, dtype, "softmax_nll")
    active = w > 0
    if np.any(active & ((y < 0) | (y >= K))):
        raise LabelError(f"softmax_nll: label out of range [0, {K})")
    safe = np.where(active, y, 0)
    rows = np.arange(B)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[rows, safe] - logsum
    per_row = np.where(active, -w * logp, 0.0)
    loss = np.asarray(per_row.sum() / B, dtype=dtype)

    def backward(g: np.ndarray):
        p = np.exp(z - logsum[:, None])
        p[rows, safe] -= 1.0
        grad = np.where(active[:, None], p * (w[:, None] * (g / B)), 0.0)
        return (grad.astype(dtype),)

    return _result(loss, (logits,), backward, "softmax_nll")


def smooth_l1(pred: Tensor, target: Union[Tensor, ArrayLike], weights: Optional[ArrayLike] = None) -> Tensor:
    """Per-row weighted sum of f(x) = 0.5x^2 (|x|<1) else |x|-0.5, mean over rows."""
    if pred.ndim != 2:
        raise ShapeError(f"smooth_l1: expected [B,D] prediction, got {pred.shape}")
    dtype = pred.dtype
    t = _as_array(target, dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: target {t.shape} != prediction {pred.shape}")
    B = pred.shape[0]
    w = _row_weights(weights, B, dtype, "smooth_l1")
    active = w > 0

    d = pred.data - t
    ad = np.abs(d)
    inner = ad < 1.0
    f = np.where(inner, 0.5 * d * d, ad - 0.5)
    per_row = np.where(active, w * f.sum(axis=1), 0.0)
    loss = np.asarray(per_row.sum() / B, dtype=dtype)

    def backward(g: np.ndarray):
        local = np.where(inner, d, np.sign(d))
        grad = np.where(active[:, None], local * (w[:, None] * (g / B)), 0.0)
        return (grad.astype(dtype),)

    return _result(loss, (pred,), backward, "smooth_l1")


def binary_cross_entropy_vec(
    pred: Tensor, target: Union[Tensor, ArrayLike], weights: Optional[ArrayLike] = None
) -> Tensor:
    """-(1/N) sum_i [t_i log p_i + (1-t_i) log(1-p_i)], mean over rows."""
    if pred.ndim != 2:
        raise ShapeError(f"binary_cross_entropy_vec: expected [B,N] prediction, got {pred.shape}")
    dtype = pred.dtype
    t = _as_array(target, dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"binary_cross_entropy_vec: target {t.shape} != prediction {pred.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise LabelError("binary_cross_entropy_vec: target outside [0, 1]")
    B, N = pred.shape
    w = _row_weights(weights, B, dtype, "binary_cross_entropy_vec")
    active = w > 0

    p = np.clip(pred.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_elem = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    per_row = np.where(active, w * per_elem.mean(axis=1), 0.0)
    loss = np.asarray(per_row.sum() / B, dtype=dtype)

    def backward(g: np.ndarray):
        local = -(t / p - (1.0 - t) / (1.0 - p)) / N
        grad = np.where(active[:, None], local * (w[:, None] * (g / B)), 0.0)
        return (grad.astype(dtype),)

    return _result(loss, (pred,), backward, "binary_cross_entropy_vec")


# -------------------- Gradient checking --------------------

def grad_check(
    fn: Callable[[Tensor], Tensor],
    inp: Tensor,
    eps: float = 1e-6,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip: Optional[np.ndarray] = None,
    floor: float = 1e-3,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``inp`` must hold 64-bit data. ``skip`` marks elements at non-differentiable
    points; ``samples`` limits the check to a random subset of elements.
    The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if inp.dtype != np.float64:
        raise ShapeError(f"grad_check: needs float64 data, got {inp.dtype}")
    inp.requires_grad = True
    inp.grad = None
    fn(inp).backward()
    analytic = inp.grad.copy() if inp.grad is not None else np.zeros_like(inp.data)
    inp.grad = None

    candidates = np.arange(inp.size)
    if skip is not None:
        candidates = candidates[~np.asarray(skip, dtype=bool).reshape(-1)]
    if samples is not None and samples < candidates.size:
        rng = rng or np.random.default_rng(0)
        candidates = rng.choice(candidates, size=samples, replace=False)

    flat = inp.data.reshape(-1)
    worst = 0.0
    for idx in candidates:
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = float(fn(inp).data)
        flat[idx] = orig - eps
        f_minus = float(fn(inp).data)
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic.reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
