"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly the operations needed by a
question encoder (embedding lookup, recurrent cell arithmetic), a small
convolutional image encoder, glimpse attention with softmax, and an MLP
classifier trained with cross-entropy. Every differentiable op records a
backward closure on the output tensor; `Tensor.backward()` walks the
recorded graph in reverse topological order and accumulates gradients
into the `grad` field of every leaf that requires them.

Shapes follow numpy conventions. Broadcasting is allowed only in `add`
and `mul` (and is undone in the backward pass by summing over the
broadcast axes); every other op demands exact shape agreement and raises
`ShapeError` otherwise.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operands do not conform to an op's shape contract."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (evaluation passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


# Per-thread scratch space for the backward pass: maps id(tensor) -> pending
# gradient for interior graph nodes. One backward runs per thread at a time
# (tapes are single-owner), so thread-local state is sufficient.
_bw = threading.local()


def _acc(t: "Tensor", g: np.ndarray) -> None:
    """Route a gradient contribution to a leaf's .grad or the pending map."""
    if t._op is None:
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g.astype(t.data.dtype, copy=False)
        return
    grads = _bw.grads
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


class Tensor:
    """N-dimensional array plus optional gradient bookkeeping.

    `data` is a numpy array (float32 or float64). `grad` is populated by
    `backward()` for leaves created with `requires_grad=True`, and always
    has the same shape and dtype as `data`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=data.dtype if isinstance(data, np.ndarray) else np.float64)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op: Optional[str] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _make(data: np.ndarray, op: str, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad or p._op is not None for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `grad` of every requiring leaf.

        `self` must be a scalar (size 1) produced by at least one recorded
        op. The recorded graph is released afterwards, so a second call
        without a fresh forward pass raises.
        """
        if self.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {self.shape}")
        if self._op is None:
            raise RuntimeError("backward() called on a tensor with no recorded forward op")

        # Iterative post-order DFS over interior nodes only.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p._op is not None and id(p) not in seen:
                    stack.append((p, False))

        _bw.grads = {id(self): np.ones_like(self.data)}
        try:
            for node in reversed(order):
                g = _bw.grads.pop(id(node), None)
                if g is None:
                    continue
                node._backward(g)  # type: ignore[misc]
        finally:
            _bw.grads = {}
            for node in order:
                node._parents = ()
                node._backward = None
                node._op = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return Tensor._make(data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._make(data, "mul", (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _acc(a, g * s)

    return Tensor._make(a.data * s, "scale", (a,), backward)


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2:
        raise ShapeError("matmul", f"expected 1-D/2-D @ 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.ndim == 1:
            _acc(a, g @ b.data.T)
            _acc(b, np.outer(a.data, g))
        else:
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)

    return Tensor._make(data, "matmul", (a, b), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "empty tensor list")
    nd = ts[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError("concat", f"axis {axis} out of range for ndim {nd}")
    axis = axis % nd
    for t in ts[1:]:
        ok = t.ndim == nd and all(
            i == axis or t.shape[i] == ts[0].shape[i] for i in range(nd))
        if not ok:
            raise ShapeError("concat", f"incompatible shapes {ts[0].shape} vs {t.shape} on axis {axis}")
    data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, gpart in zip(ts, np.split(g, splits, axis=axis)):
            _acc(t, gpart)

    return Tensor._make(data, "concat", ts, backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _acc(a, g.reshape(a.shape))

    return Tensor._make(a.data.reshape(shape), "reshape", (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        _acc(a, np.transpose(g, inv))

    return Tensor._make(np.transpose(a.data, axes), "transpose", (a,), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("narrow", f"axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", f"slice [{start}, {start + length}) exceeds {a.shape} on axis {axis}")
    index = tuple(slice(None) if i != axis else slice(start, start + length)
                  for i in range(a.ndim))

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        _acc(a, ga)

    return Tensor._make(np.ascontiguousarray(a.data[index]), "narrow", (a,), backward)


# -- nonlinearities -----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _acc(a, g * (a.data > 0))

    return Tensor._make(np.maximum(a.data, 0), "relu", (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _acc(a, g * data * (1.0 - data))

    return Tensor._make(data, "sigmoid", (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - data * data))

    return Tensor._make(data, "tanh", (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _acc(a, g / a.data)

    return Tensor._make(np.log(a.data), "log", (a,), backward)


def softmax(a, axis: int) -> Tensor:
    """Softmax along `axis`, numerically stabilized by max subtraction."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("softmax", f"axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, data * (g - dot))

    return Tensor._make(data, "softmax", (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape).copy())
        else:
            gexp = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gexp, a.shape).copy())

    return Tensor._make(np.asarray(data), "sum", (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- stochastic ---------------------------------------------------------------


def dropout(a, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout: train-time Bernoulli mask scaled by 1/(1-p).

    Identity when p == 0 or in eval mode, so no rescaling at inference.
    """
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("train-mode dropout requires an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)

    def backward(g):
        _acc(a, g * keep)

    return Tensor._make(a.data * keep, "dropout", (a,), backward)


# -- lookup -------------------------------------------------------------------


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Select rows of a 2-D table by integer index; grads scatter-add back.

    `ids` may have any shape; output shape is ids.shape + (row_width,).
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("gather_rows", f"table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _acc(table, gt)

    return Tensor._make(table.data[ids], "gather_rows", (table,), backward)


# -- spatial ops --------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout, zero padding.

    x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,) or None.
    Implemented with im2col so the inner product is a single matmul.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"channel mismatch: x {x.shape} vs w {w.shape}")
    if stride < 1:
        raise ShapeError("conv2d", f"stride must be >= 1, got {stride}")
    bsz, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {w.shape} too large for input {x.shape} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sb, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (bsz, cin, ho, wo, kh, kw),
        (sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    ydata = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv2d", f"bias shape {b.shape} != ({cout},)")
        ydata = ydata + b.data
    ydata = np.ascontiguousarray(ydata.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, cout)
        _acc(w, (g2.T @ cols).reshape(w.shape))
        if b is not None:
            _acc(b, g2.sum(axis=0))
        gcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        _acc(x, gxp)

    return Tensor._make(ydata, "conv2d", parents, backward)


def maxpool2d(x, k: int) -> Tensor:
    """k x k max pooling with stride k; spatial dims must divide by k.

    Ties send the gradient to the first maximal element in the window.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("maxpool2d", f"expected 4-D input, got {x.shape}")
    bsz, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("maxpool2d", f"spatial dims {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(bsz, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(win).reshape(bsz, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(bsz, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        _acc(x, np.ascontiguousarray(gx).reshape(x.shape))

    return Tensor._make(np.ascontiguousarray(data), "maxpool2d", (x,), backward)


def downsample_nearest(x, k: int) -> Tensor:
    """Nearest (top-left sample) downsampling by integer factor k."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("downsample_nearest", f"expected 4-D input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % k or w % k:
        raise ShapeError("downsample_nearest", f"spatial dims {h}x{w} not divisible by {k}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::k, ::k] = g
        _acc(x, gx)

    return Tensor._make(np.ascontiguousarray(x.data[:, :, ::k, ::k]),
                        "downsample_nearest", (x,), backward)


# -- operator sugar -----------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__mul__ = lambda self, other: (scale(self, other) if np.isscalar(other) else mul(self, other))
Tensor.__rmul__ = Tensor.__mul__
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__neg__ = lambda self: scale(self, -1.0)
Tensor.__matmul__ = lambda self, other: matmul(self, other)


# -- gradient checking --------------------------------------------------------


class GradCheckReport:
    """Outcome of a finite-difference comparison against tape gradients."""

    def __init__(self, max_rel_error: float, tol: float, n_elements: int):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.n_elements = n_elements
        self.passed = max_rel_error < tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e}, "
                f"tol={self.tol:.1e}, n={self.n_elements})")


def grad_check(f: Callable[..., Tensor], xs, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar-valued `f` against central differences.

    `xs` is one Tensor or a list of Tensors; each is perturbed element-wise
    with step `h`. Relative error uses a unit floor in the denominator:
    |a - n| / max(1, |a| + |n|). Inputs should be float64 for the stated
    tolerances to be meaningful.
    """
    tensors = [xs] if isinstance(xs, Tensor) else list(xs)
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()
        t.requires_grad = True
    loss = f(*tensors)
    loss.backward()
    analytic = [np.array(t.grad, copy=True) if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    max_err = 0.0
    n_elems = 0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*tensors).item()
                flat[i] = orig - h
                fm = f(*tensors).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]) + abs(num))
                max_err = max(max_err, err)
                n_elems += 1
    return GradCheckReport(max_err, tol, n_elems)
