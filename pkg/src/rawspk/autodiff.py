"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the operation that produced it together with a
closure mapping the output gradient to the gradients of its parents.
:func:`backward` walks the graph in reverse topological order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dsp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


def _topological(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def square(a):
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs_(a):
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """log(1 + exp(a)), computed stably."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, (a,), bw, "mean")


def reduce_std(a, axis=-1, eps=1e-5, keepdims=False):
    """Population standard deviation ``sqrt(var + eps)`` along ``axis``."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    centred = a.data - a.data.mean(axis=axes, keepdims=True)
    std = np.sqrt((centred ** 2).mean(axis=axes, keepdims=True) + eps)
    out = std if keepdims else np.squeeze(std, axis=axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * centred / (count * std),)

    return _result(out, (a,), bw, "std")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` [B, K] against integer ``labels`` [B]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "xent")


# ---------------------------------------------------------------- structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def slice_(a, index):
    a = as_tensor(a)

    key = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), bw, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


# ---------------------------------------------------------------- convolution


def conv_out_len(length, kernel, stride=1, dilation=1):
    span = dilation * (kernel - 1) + 1
    if length < span:
        return 0
    return (length - span) // stride + 1


def _windows(x, kernel, stride, dilation):
    span = dilation * (kernel - 1) + 1
    return sliding_window_view(x, span, axis=-1)[..., ::stride, ::dilation]


def _scatter_windows(gv, shape, kernel, stride, dilation, t_out):
    # adjoint of _windows: gv [..., t_out, kernel] -> [..., T]
    dx = np.zeros(shape, dtype=gv.dtype)
    stop = stride * (t_out - 1) + 1
    for k in range(kernel):
        start = k * dilation
        dx[..., start:start + stop:stride] += gv[..., k]
    return dx


def conv1d(x, w, stride=1, dilation=1):
    """Valid cross-correlation.

    ``x`` is [B, C_in, T] and ``w`` is [C_out, C_in, K]; the result is
    [B, C_out, T_out]. A 1-D ``x`` with a 1-D ``w`` is treated as a single
    channel and returns a 1-D result.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim == 1 and w.ndim == 1:
        out = conv1d(reshape(x, (1, 1, -1)), reshape(w, (1, 1, -1)), stride, dilation)
        return reshape(out, (-1,))
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    kernel = w.shape[2]
    t_out = conv_out_len(x.shape[2], kernel, stride, dilation)
    if t_out < 1:
        raise ValueError(f"conv1d: input {x.shape} shorter than kernel {w.shape}")
    b, c_in, c_out = x.shape[0], x.shape[1], w.shape[0]
    # im2col: [B * T_out, C_in * K] contiguous, so both passes are single matmuls
    cols = np.ascontiguousarray(
        _windows(x.data, kernel, stride, dilation).transpose(0, 2, 1, 3)).reshape(b * t_out, -1)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(b, t_out, c_out).transpose(0, 2, 1)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(b * t_out, c_out)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gv = (g2 @ wmat).reshape(b, t_out, c_in, kernel).transpose(0, 2, 1, 3)
            gx = _scatter_windows(gv, x.shape, kernel, stride, dilation, t_out)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), bw, "conv1d")


def depthwise_conv1d(x, w, stride=1, dilation=1):
    """Per-channel valid cross-correlation: ``x`` [B, C, T], ``w`` [C, K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"depthwise_conv1d: incompatible shapes {x.shape} and {w.shape}")
    kernel = w.shape[1]
    t_out = conv_out_len(x.shape[2], kernel, stride, dilation)
    if t_out < 1:
        raise ValueError(f"depthwise_conv1d: input {x.shape} shorter than kernel {w.shape}")
    xv = _windows(x.data, kernel, stride, dilation)  # [B, C, T_out, K]
    out = np.einsum("bctk,ck->bct", xv, w.data, optimize=True)

    def bw(g):
        gw = np.einsum("bct,bctk->ck", g, xv, optimize=True) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gv = g[..., None] * w.data[None, :, None, :]
            gx = _scatter_windows(gv, x.shape, kernel, stride, dilation, t_out)
        return gx, gw

    return _result(out, (x, w), bw, "depthwise_conv1d")


def hilbert(a):
    """Hilbert transform along the last axis.

    The operator is a real circulant matrix with an odd kernel, so its
    adjoint is its negation.
    """
    a = as_tensor(a)
    out = dsp.hilbert(a.data).astype(a.dtype, copy=False)
    return _result(out, (a,), lambda g: (-dsp.hilbert(g).astype(g.dtype, copy=False),), "hilbert")


def custom(value, parents, backward_fn, op):
    """Register an externally computed value with a hand-written backward."""
    return _result(value, tuple(as_tensor(p) for p in parents), backward_fn, op)


# ---------------------------------------------------------------- optimisation


class Adam:
    """Adam with bias correction over a dict of named parameter tensors.

    ``lr_scale`` maps parameter names to per-parameter learning-rate
    multipliers.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.state = {"t": 0, "m": {}, "v": {}}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        names = list(self.params)
        arrays = [self.params[n].data for n in names]
        grads = [self.params[n].grad if self.params[n].grad is not None
                 else np.zeros_like(self.params[n].data) for n in names]
        lrs = [self.lr * self.lr_scale.get(n, 1.0) for n in names]
        m = [self.state["m"].get(n) for n in names]
        v = [self.state["v"].get(n) for n in names]
        state = {"t": self.state["t"], "m": m, "v": v}
        new, state = adam_step(arrays, grads, state, lrs, *self.betas, self.eps)
        for n, arr, mi, vi in zip(names, new, state["m"], state["v"]):
            self.params[n].data = arr
            self.state["m"][n] = mi
            self.state["v"][n] = vi
        self.state["t"] = state["t"]


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. Returns ``(new_params, new_state)``.

    ``state`` holds the step count ``t`` and per-parameter moment lists ``m``
    and ``v`` (entries may be None before the first step). ``lr`` may be a
    scalar or one value per parameter.
    """
    t = state.get("t", 0) + 1
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    ms = state.get("m") or [None] * len(params)
    vs = state.get("v") or [None] * len(params)
    new_p, new_m, new_v = [], [], []
    for p, g, m, v, step_lr in zip(params, grads, ms, vs, lrs):
        g = np.asarray(g, dtype=p.dtype)
        if p.shape != g.shape:
            raise ValueError(f"adam_step: parameter {p.shape} vs gradient {g.shape}")
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append((p - step_lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------- gradient checks


def numerical_gradient(fn, tensors, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. each tensor's data."""
    out = []
    for t in tensors:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def gradient_error(analytic, numeric, floor=1e-2):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    With ``floor = 1e-2`` a 1e-4 threshold equals a 1e-4 relative tolerance
    with a 1e-6 absolute floor.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def check_gradients(fn, tensors, h=1e-5):
    """Max relative error between backprop and finite-difference gradients."""
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numerical_gradient(fn, tensors, h)
    return max(gradient_error(a, n) for a, n in zip(analytic, numeric))
