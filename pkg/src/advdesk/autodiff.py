"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every gradient in the benchmark (training steps and input-space attack
steps) flows through the ops defined here. The tape is rebuilt on every
forward pass: each op returns a new Tensor holding its parents and a
closure that routes the incoming adjoint to them. A Tensor graph is a
single-threaded unit of work; distinct graphs are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class NumericOverflowError(ArithmeticError):
    """An operation produced a non-finite (NaN or infinite) value."""


class GraphError(RuntimeError):
    """Backward called on an invalid node or an already-consumed tape."""


def _finite_or_raise(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericOverflowError(f"non-finite value produced by op '{op}'")
    return data


class Tensor:
    """N-dimensional float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _finite_or_raise(arr, "tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; each delegates to a module-level op
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite_or_raise(np.asarray(data, dtype=np.float64), op)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents)
    out._backward = backward_fn if out.requires_grad else None
    out._op = op
    out._done = False
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    `loss` must be a scalar. A tape may be walked once; a second call on
    the same output raises GraphError.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already ran on this graph output; rebuild the forward pass")
    loss._done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "mul", bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), "div", bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * data)

    return _make(data, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _make(data, (a,), "log", bwd)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g * 0.5 / data)

    return _make(data, (a,), "sqrt", bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0.0))

    return _make(data, (a,), "relu", bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), "sigmoid", bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, stabilized by max subtraction."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _make(data, (a,), "softmax", bwd)


def abs_(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bwd(g):
        _accumulate(a, g * np.sign(a.data))

    return _make(data, (a,), "abs", bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            gg = g.reshape((1,) * a.data.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.shape))

    return _make(data, (a,), "sum", bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / count))


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor."""
    return sqrt(tsum(mul(a, a)))


def sum_squares(a: Tensor) -> Tensor:
    return tsum(mul(a, a))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data, (a,), "reshape", bwd)


def flatten_batch(a: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(data, tensors, "concat", bwd)


# ---------------------------------------------------------------------------
# linear algebra and conv/pool ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim > 2 or b.data.ndim > 2:
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}") from e

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:  # inner product -> scalar
            _accumulate(a, g * bd)
            _accumulate(b, g * ad)
        elif ad.ndim == 2 and bd.ndim == 2:
            _accumulate(a, g @ bd.T)
            _accumulate(b, ad.T @ g)
        elif ad.ndim == 1:  # (k,) @ (k,n) -> (n,)
            _accumulate(a, bd @ g)
            _accumulate(b, np.outer(ad, g))
        else:  # (m,k) @ (k,) -> (m,)
            _accumulate(a, np.outer(g, bd))
            _accumulate(b, ad.T @ g)

    return _make(data, (a, b), "matmul", bwd)


def _conv_pad(k: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        total = k - 1
        return total // 2, total - total // 2
    if padding == "valid":
        return 0, 0
    raise ShapeError(f"unknown conv padding '{padding}'")


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation), stride 1, NCHW layout.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wth = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    pt, pb = _conv_pad(kh, padding)
    pl, pr = _conv_pad(kw, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = xp.shape[2] - kh + 1
    ow = xp.shape[3] - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    data = np.einsum("nchwij,ocij->nohw", windows, w.data, optimize=True)

    def bwd(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("nohw,nchwij->ocij", g, windows, optimize=True))
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + oh, j:j + ow] += np.einsum(
                        "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
            _accumulate(x, gx[:, :, pt:pt + h, pl:pl + wth])

    return _make(data, (x, w), "conv2d", bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: (N,C,H,W)+(C,) or (N,K)+(K,)."""
    if x.data.ndim == 4:
        if b.shape != (x.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match channels {x.shape[1]}")
        return add(x, reshape(b, (1, -1, 1, 1)))
    if b.shape != (x.shape[-1],):
        raise ShapeError(f"bias shape {b.shape} does not match features {x.shape[-1]}")
    return add(x, b)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, NCHW. Ties route to the first window slot."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, gx)

    return _make(data, (x,), "maxpool2", bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling, NCHW."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2 expects 4-D input, got {x.shape}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bwd(g):
        gx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        _accumulate(x, gx)

    return _make(data, (x,), "upsample2", bwd)


# ---------------------------------------------------------------------------
# loss functions


def _as_label_array(labels, batch: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(labels))
    if arr.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {arr.shape}")
    return arr.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy from raw logits and integer class labels."""
    z = logits if logits.data.ndim == 2 else reshape(logits, (1, -1))
    n, k = z.shape
    y = _as_label_array(labels, n)
    if y.min() < 0 or y.max() >= k:
        raise ShapeError(f"class index out of range [0, {k}) in labels {y.tolist()}")
    shift = Tensor(z.data.max(axis=1, keepdims=True))  # constant: keeps exp in range
    lse = add(log(tsum(exp(add(z, -shift)), axis=1)), reshape(shift, (n,)))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    picked = tsum(mul(z, Tensor(onehot)), axis=1)
    return tmean(add(lse, -picked))


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean per-element binary cross-entropy from logits, targets in {0,1}."""
    t = _as_tensor(targets)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} != logit shape {logits.shape}")
    # softplus(z) = relu(z) + log(1 + exp(-|z|)) keeps exp bounded
    def softplus(z: Tensor) -> Tensor:
        az = add(relu(z), relu(-z))
        return add(relu(z), log(add(_as_tensor(1.0), exp(-az))))

    per = add(mul(t, softplus(-logits)), mul(add(_as_tensor(1.0), -t), softplus(logits)))
    return tmean(per)


def l1_loss(pred: Tensor, target) -> Tensor:
    t = _as_tensor(target)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    return tmean(abs_(add(pred, -t)))


def mse_loss(pred: Tensor, target) -> Tensor:
    t = _as_tensor(target)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    d = add(pred, -t)
    return tmean(mul(d, d))


def soft_dice_loss(probs: Tensor, target, smooth: float = 1e-6) -> Tensor:
    """1 - (2*overlap + s) / (|pred| + |truth| + s) on soft masks."""
    t = _as_tensor(target)
    if t.shape != probs.shape:
        raise ShapeError(f"target shape {t.shape} != prediction shape {probs.shape}")
    inter = tsum(mul(probs, t))
    total = add(tsum(probs), tsum(t))
    score = div(add(mul(_as_tensor(2.0), inter), _as_tensor(smooth)),
                add(total, _as_tensor(smooth)))
    return add(_as_tensor(1.0), -score)


def gaussian_nll(x: Tensor, mean: np.ndarray, sigma_inverse: np.ndarray,
                 log_det_sigma: float) -> Tensor:
    """Negative log-density of a fixed multivariate Gaussian, differentiable in x."""
    d = x.shape[-1]
    if mean.shape != (d,) or sigma_inverse.shape != (d, d):
        raise ShapeError(f"gaussian parameters do not match dimension {d}")
    v = add(x, Tensor(-mean))
    quad = tsum(mul(v, matmul(v, Tensor(sigma_inverse))))
    const = 0.5 * (d * np.log(2.0 * np.pi) + log_det_sigma)
    return add(mul(_as_tensor(0.5), quad), _as_tensor(const))


@dataclass(frozen=True)
class LossSpec:
    """Declarative loss description; `composite` carries weighted sub-terms."""

    kind: str
    weights: tuple = ()
    terms: tuple = ()
    smooth: float = 1e-6
    gaussian: Optional[tuple] = None  # (mean, sigma_inverse, log_det_sigma)

    KINDS = ("cross-entropy", "binary-cross-entropy", "l1", "mean-squared-error",
             "soft-dice", "gaussian-negative-log-likelihood", "composite")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown loss kind '{self.kind}'")
        if self.kind == "composite":
            if len(self.terms) < 2:
                raise ValueError("composite loss needs at least 2 terms")
            if len(self.weights) != len(self.terms):
                raise ValueError("composite weights must match term count")
            if not all(np.isfinite(w) for w in self.weights):
                raise ValueError("composite weights must be finite")


def compute_loss(spec: LossSpec, prediction: Tensor, target) -> Tensor:
    """Evaluate a LossSpec; records the graph for a subsequent backward."""
    if spec.kind == "cross-entropy":
        return cross_entropy(prediction, target)
    if spec.kind == "binary-cross-entropy":
        return binary_cross_entropy(prediction, target)
    if spec.kind == "l1":
        return l1_loss(prediction, target)
    if spec.kind == "mean-squared-error":
        return mse_loss(prediction, target)
    if spec.kind == "soft-dice":
        return soft_dice_loss(prediction, target, smooth=spec.smooth)
    if spec.kind == "gaussian-negative-log-likelihood":
        if spec.gaussian is None:
            raise ValueError("gaussian loss spec requires (mean, sigma_inverse, log_det)")
        mean, sigma_inv, log_det = spec.gaussian
        return gaussian_nll(prediction, mean, sigma_inv, log_det)
    # composite: weighted sum over sub-terms, all sharing prediction/target
    total = None
    for w, term in zip(spec.weights, spec.terms):
        piece = mul(_as_tensor(float(w)), compute_loss(term, prediction, target))
        total = piece if total is None else add(total, piece)
    return total
