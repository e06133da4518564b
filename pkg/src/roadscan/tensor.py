"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 on request for
numerical audits) and record the operations applied to them so that
``backward()`` can propagate adjoints through the graph in reverse.
Only the layers needed by the verification pipeline are provided:
conv2d, maxpool2d, batchnorm2d, dense, relu/sigmoid, global average
pooling, flatten, dropout and a batched euclidean distance, plus the
RMSprop update rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGMOID_EPS = 1e-7
DIST_EPS = 1e-12


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class UsageError(RuntimeError):
    """An operation was called in a way its contract forbids."""


class StateError(RuntimeError):
    """Stateful operation invoked before its state was initialized."""


class Tensor:
    """A node in the gradient graph.

    ``data`` is always a numpy array. Nodes created by operations keep
    references to their parents and a closure that pushes the adjoint
    one step backward; leaf tensors have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.dtype)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.dtype, copy=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Repeated calls accumulate. Only scalar tensors may seed a
        backward pass.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order = []
        seen = set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        # intermediate adjoints are per-pass scratch; only leaves accumulate
        # across repeated backward calls
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))


def _as_tensor(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _node(data, parents, backward_fn):
    """Create an op-output tensor wired into the graph."""
    req = any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data, dtype=data.dtype)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and reduction primitives ------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(-_unbroadcast(g, b.shape))

    return _node(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bw(g):
        a._accumulate(2.0 * a.data * g)

    return _node(data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / np.maximum(data, np.finfo(data.dtype).tiny))

    return _node(data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bw(g):
        a._accumulate(g * np.sign(a.data))

    return _node(data, (a,), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(np.asarray(data, dtype=a.dtype), (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), Tensor(1.0 / n, dtype=a.dtype))


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: 'relu' or 'sigmoid'.

    Sigmoid output is clamped away from {0, 1} so downstream logs stay
    finite; the gradient uses the unclamped value.
    """
    if kind == "relu":
        data = np.maximum(a.data, 0)

        def bw(g):
            a._accumulate(g * (a.data > 0))

        return _node(data, (a,), bw)
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))
        data = np.clip(s, SIGMOID_EPS, 1.0 - SIGMOID_EPS).astype(a.dtype)

        def bw(g):
            a._accumulate(g * (s * (1.0 - s)).astype(a.dtype))

        return _node(data, (a,), bw)
    raise UsageError(f"unknown activation kind {kind!r}")


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def sigmoid(a: Tensor) -> Tensor:
    return activation(a, "sigmoid")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _node(data, (a,), bw)


# -- structural ops ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _node(data, (a,), bw)


def flatten(a: Tensor) -> Tensor:
    """Collapse all non-batch dimensions, row-major."""
    n = a.shape[0]
    return reshape(a, (n, -1))


def concat_rows(tensors) -> Tensor:
    """Stack 1-D tensors into a matrix row per tensor (used by losses)."""
    data = np.stack([t.data for t in tensors])

    def bw(g):
        for i, t in enumerate(tensors):
            t._accumulate(g[i])

    return _node(data, tuple(tensors), bw)


# -- neural-network layers ---------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b for x:[N,D], w:[D,K], b:[K]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(
            f"dense expects 2-D input and weights, got {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"dense inner dimensions disagree: input {x.shape}, weights {w.shape}"
        )
    data = x.data @ w.data + b.data

    def bw(g):
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)
        b._accumulate(g.sum(axis=0))

    return _node(data, (x, w, b), bw)


def _conv_out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride, h_out, w_out):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
            ]
    return cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: [N,C,H,W], w: [F,C,kH,kW], b: [F] -> [N,F,H',W'] with
    H' = floor((H + 2p - kH)/stride) + 1.
    """
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c}, kernel expects {cw}"
        )
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    h_out = _conv_out(h, kh, stride, padding)
    w_out = _conv_out(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    cols_mat = cols.reshape(n, c * kh * kw, h_out * w_out)
    w_mat = w.data.reshape(f, c * kh * kw)
    out = np.einsum("fk,nkl->nfl", w_mat, cols_mat, optimize=True)
    out = out.reshape(n, f, h_out, w_out) + b.data.reshape(1, f, 1, 1)

    def bw(g):
        g_mat = g.reshape(n, f, h_out * w_out)
        w._accumulate(
            np.einsum("nfl,nkl->fk", g_mat, cols_mat, optimize=True).reshape(w.shape)
        )
        b._accumulate(g.sum(axis=(0, 2, 3)))
        dcols = np.einsum("fk,nfl->nkl", w_mat, g_mat, optimize=True)
        dcols = dcols.reshape(n, c, kh, kw, h_out, w_out)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[
                    :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
                ] += dcols[:, :, i, j]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        x._accumulate(dxp)

    return _node(out, (x, w, b), bw)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling; the gradient routes to the first argmax in each window."""
    n, c, h, wd = x.shape
    if window > h or window > wd:
        raise DimensionError(
            f"pool window {window} exceeds spatial extent {h}x{wd}"
        )
    h_out = (h - window) // stride + 1
    w_out = (wd - window) // stride + 1
    cols = _im2col(x.data, window, window, stride, h_out, w_out)
    # window positions in row-major order so argmax breaks ties on the
    # first occurrence
    flat = cols.reshape(n, c, window * window, h_out, w_out)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        dx = np.zeros_like(x.data)
        wi, wj = np.divmod(arg, window)
        oi = np.arange(h_out)[:, None] * stride
        oj = np.arange(w_out)[None, :] * stride
        rows = (wi + oi).ravel()
        colz = (wj + oj).ravel()
        ni = np.repeat(np.arange(n), c * h_out * w_out)
        ci = np.tile(np.repeat(np.arange(c), h_out * w_out), n)
        np.add.at(dx, (ni, ci, rows, colz), g.ravel())
        x._accumulate(dx)

    return _node(out, (x,), bw)


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer."""

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def copy(self):
        return BatchNormState(
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
        )


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    epsilon: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over [N,C,H,W].

    Train mode uses biased batch statistics and updates the running
    stats by EMA (new = momentum * batch + (1 - momentum) * old); eval
    mode is a deterministic affine map from the running stats.
    """
    n, c, h, wd = x.shape
    gam = gamma.data.reshape(1, c, 1, 1)
    bet = beta.data.reshape(1, c, 1, 1)
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state.running_mean is None:
            state.running_mean = mean.astype(np.float64).copy()
            state.running_var = var.astype(np.float64).copy()
        else:
            state.running_mean += momentum * (mean - state.running_mean)
            state.running_var += momentum * (var - state.running_var)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gam * xhat + bet

        def bw(g):
            m = n * h * wd
            gxh = g * gam
            s1 = gxh.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxh - s1 - xhat * s2)
            x._accumulate(dx)
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta._accumulate(g.sum(axis=(0, 2, 3)))

        return _node(out, (x, gamma, beta), bw)
    if mode == "eval":
        if state.running_mean is None:
            raise StateError("batchnorm eval mode requires populated running stats")
        # cast stats to the compute dtype first so eval output is invariant
        # under the float32 checkpoint round trip
        rv = state.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(rv + np.asarray(epsilon, dtype=x.dtype))
        mean = state.running_mean.astype(x.dtype)
        out = gam * ((x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)) + bet
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def bw(g):
            x._accumulate(g * gam * inv_std.reshape(1, c, 1, 1))
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta._accumulate(g.sum(axis=(0, 2, 3)))

        return _node(out, (x, gamma, beta), bw)
    raise UsageError(f"unknown batchnorm mode {mode!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per feature map: [N,C,H,W] -> [N,C]."""
    n, c, h, wd = x.shape
    data = x.data.mean(axis=(2, 3))

    def bw(g):
        x._accumulate(
            np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).astype(x.dtype)
        )

    return _node(data, (x,), bw)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: identity in eval mode, seeded mask in train mode."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0,1), got {rate}")
    if mode == "eval" or rate == 0.0:
        data = x.data.copy()

        def bw(g):
            x._accumulate(g)

        return _node(data, (x,), bw)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    data = x.data * keep * scale

    def bw(g):
        x._accumulate(g * keep * scale)

    return _node(data, (x,), bw)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """L2 distance between vectors, batched over leading rows.

    1-D inputs give a scalar; [N,D] inputs give [N]. A tiny epsilon
    under the square root keeps the gradient finite at zero distance.
    """
    if a.shape != b.shape:
        raise DimensionError(f"distance operands differ in shape: {a.shape} vs {b.shape}")
    d = sub(a, b)
    sq = tsum(square(d), axis=-1 if a.data.ndim > 1 else None)
    return sqrt(add(sq, Tensor(DIST_EPS, dtype=a.dtype)))


# -- optimizer ---------------------------------------------------------


@dataclass
class RmspropState:
    """RMSprop hyperparameters plus per-parameter squared-gradient EMA."""

    learning_rate: float = 1e-3
    decay_rho: float = 0.9
    epsilon: float = 1e-8
    accumulators: dict = field(default_factory=dict)

    def accumulator_for(self, param: Tensor) -> np.ndarray:
        acc = self.accumulators.get(id(param))
        if acc is None:
            acc = np.zeros_like(param.data)
            self.accumulators[id(param)] = acc
        return acc


def rmsprop_step(params, state: RmspropState):
    """Apply v <- rho v + (1-rho) g^2; theta <- theta - lr g / (sqrt(v)+eps)."""
    for p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}"
            )
        acc = state.accumulator_for(p)
        acc *= state.decay_rho
        acc += (1.0 - state.decay_rho) * g * g
        p.data -= (state.learning_rate * g / (np.sqrt(acc) + state.epsilon)).astype(
            p.dtype
        )
