"""Finite-difference checks for every differentiable op and composite.

Each check builds a scalar loss from freshly drawn 64-bit inputs and
returns the maximum relative error between backprop and central
differences as computed by :func:`autodiff.check_gradients`. Single ops
use ``h = 1e-5``; front-ends and full tiny models use ``h = 1e-6`` because
ReLU kinks and the ``log|y|`` magnitude make a wider probe unreliable.
"""

import numpy as np

from . import autodiff as ad
from . import dropout as vd
from . import frontend as fe
from . import network as net

TOLERANCE = 1e-4
MODEL_STEP = 1e-6


def _param(rng, *shape, low=None, high=None):
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, shape)
    return ad.Tensor(data, requires_grad=True)


def _weighted_sum(out, rng):
    # projection on a fixed random direction exercises every output element
    r = np.random.default_rng(abs(hash(out.shape)) % 2**32).standard_normal(out.shape)
    return ad.reduce_sum(ad.mul(out, r))


def _unary(op, low=None, high=None):
    def check(rng, shape):
        x = _param(rng, *shape, low=low, high=high)
        return ad.check_gradients(lambda: _weighted_sum(op(x), rng), [x])
    return check


def _binary(op, positive_rhs=False, broadcast=False):
    def check(rng, shape):
        a = _param(rng, *shape)
        b_shape = shape[-1:] if broadcast else shape
        b = _param(rng, *b_shape, low=0.5, high=2.0) if positive_rhs else _param(rng, *b_shape)
        return ad.check_gradients(lambda: _weighted_sum(op(a, b), rng), [a, b])
    return check


def _avoid_kinks(op, margin=1e-3):
    def check(rng, shape):
        data = rng.standard_normal(shape)
        data = np.where(np.abs(data) < margin, margin * 10, data)
        x = ad.Tensor(data, requires_grad=True)
        return ad.check_gradients(lambda: _weighted_sum(op(x), rng), [x])
    return check


def _clip(rng, shape):
    data = rng.uniform(-2, 2, shape)
    data = np.where(np.abs(np.abs(data) - 1.0) < 1e-2, 0.0, data)
    x = ad.Tensor(data, requires_grad=True)
    return ad.check_gradients(lambda: _weighted_sum(ad.clip(x, -1.0, 1.0), rng), [x])


def _matmul(rng, shape):
    a = _param(rng, *shape)
    b = _param(rng, shape[-1], 3)
    return ad.check_gradients(lambda: _weighted_sum(ad.matmul(a, b), rng), [a, b])


def _conv1d(stride, dilation):
    def check(rng, shape):
        b, c, t = shape
        x = _param(rng, b, c, t + 8)
        w = _param(rng, 3, c, 3)
        return ad.check_gradients(
            lambda: _weighted_sum(ad.conv1d(x, w, stride, dilation), rng), [x, w])
    return check


def _depthwise(rng, shape):
    b, c, t = shape
    x = _param(rng, b, c, t + 4)
    w = _param(rng, c, 2)
    return ad.check_gradients(lambda: _weighted_sum(ad.depthwise_conv1d(x, w, 2), rng), [x, w])


def _reduce(op, **kw):
    def check(rng, shape):
        x = _param(rng, *shape)
        return ad.check_gradients(lambda: _weighted_sum(op(x, **kw), rng), [x])
    return check


def _xent(rng, shape):
    b, k = shape[0], shape[-1]
    logits = _param(rng, b, k)
    labels = rng.integers(0, k, b)
    return ad.check_gradients(lambda: ad.softmax_cross_entropy(logits, labels), [logits])


def _slice(rng, shape):
    x = _param(rng, *shape)
    return ad.check_gradients(lambda: _weighted_sum(x[..., 1:], rng), [x])


def _reshape(rng, shape):
    x = _param(rng, *shape)
    return ad.check_gradients(lambda: _weighted_sum(ad.reshape(x, (-1,)), rng), [x])


def _transpose(rng, shape):
    x = _param(rng, *shape)
    return ad.check_gradients(lambda: _weighted_sum(ad.transpose(x), rng), [x])


def _concat(rng, shape):
    a = _param(rng, *shape)
    b = _param(rng, *shape)
    return ad.check_gradients(lambda: _weighted_sum(ad.concat([a, b], axis=-1), rng), [a, b])


def _hilbert(rng, shape):
    x = _param(rng, *shape[:-1], max(shape[-1], 2))
    return ad.check_gradients(lambda: _weighted_sum(ad.hilbert(x), rng), [x])


OP_CHECKS = {
    "add": _binary(ad.add, broadcast=True),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul, broadcast=True),
    "div": _binary(ad.div, positive_rhs=True),
    "matmul": _matmul,
    "conv1d": _conv1d(1, 1),
    "conv1d_strided_dilated": _conv1d(2, 2),
    "depthwise_conv1d": _depthwise,
    "relu": _avoid_kinks(ad.relu),
    "abs": _avoid_kinks(ad.abs_),
    "log": _unary(ad.log, 0.5, 2.0),
    "sqrt": _unary(ad.sqrt, 0.5, 2.0),
    "square": _unary(ad.square),
    "exp": _unary(ad.exp),
    "sigmoid": _unary(ad.sigmoid),
    "softplus": _unary(ad.softplus),
    "clip": _clip,
    "reduce_sum": _reduce(ad.reduce_sum, axis=-1),
    "reduce_mean": _reduce(ad.reduce_mean, axis=-1),
    "reduce_std": _reduce(ad.reduce_std, axis=-1),
    "softmax_cross_entropy": _xent,
    "slice": _slice,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "hilbert": _hilbert,
}

SHAPES = [(2, 3, 5), (1, 2, 8), (3, 1, 6)]


def _frontend(mode):
    def check(rng):
        x = rng.standard_normal((2, 60))
        w = ad.Tensor(fe.gabor_init(3, 16, 16000).weights + 0.1 * rng.standard_normal((3, 16)),
                      requires_grad=True)
        # log|y| in the real mode has curvature ~1/y^2 near zero crossings
        return ad.check_gradients(
            lambda: _weighted_sum(fe.wavegram_tensor(x, w, mode, 3), rng), [w], h=MODEL_STEP)
    return check


def _vd_forward(rng):
    theta = _param(rng, 4, 5)
    ls2 = _param(rng, 4, 5, low=-4, high=0)
    noise = rng.standard_normal((4, 5))
    return ad.check_gradients(
        lambda: _weighted_sum(vd.vd_weights_tensor(theta, ls2, noise), rng), [theta, ls2])


def _vd_kl(rng):
    theta = _param(rng, 4, 5)
    ls2 = _param(rng, 4, 5, low=-4, high=0)
    return ad.check_gradients(lambda: vd.vd_kl_tensor(theta, ls2), [theta, ls2])


def _sinc(rng):
    # interior of the clamping region, plus a negative f_low that folds through |.|
    p = np.column_stack([rng.uniform(100, 3000, 4), rng.uniform(100, 2000, 4)])
    p[0, 0] = -400.0
    params = ad.Tensor(p, requires_grad=True)
    return ad.check_gradients(
        lambda: _weighted_sum(fe.sinc_bank_tensor(params, 32, 16000), rng), [params], h=1e-4)


def tiny_config(n_speakers=3):
    return net.EncoderConfig(n_filters=2, filter_len=16, stride=5, n_blocks=1,
                             channels=(4,), tdnn_widths=(4,), tdnn_kernels=(3,),
                             tdnn_dilations=(1,), embedding_dim=3, n_speakers=n_speakers)


def _tiny_model(front_end, analytic, dropout):
    def check(rng):
        model = net.build_model(tiny_config(), front_end, analytic, dropout,
                                seed=int(rng.integers(1000)), dtype=np.float64)
        for name, p in model.params.items():
            if name.endswith(".b"):
                # zero biases behind an all-zero ReLU input sit exactly on the kink
                p.data += 0.1 * rng.standard_normal(p.data.shape)
        if front_end == "sinc":
            # the mel initialisation puts band edges exactly on the clamps
            # (50 Hz, Nyquist) where the loss has kinks; check at interior points
            model.params["fb.sinc_khz"].data[:] = [[0.3, 1.2], [2.1, 2.6]]
        if dropout == "vd":
            # near-zero Gabor tails pin log-alpha to its clip; keep it interior
            w = model.params["fb.weight"].data
            w[:] = rng.uniform(0.2, 1.0, w.shape) * rng.choice([-1.0, 1.0], w.shape)
            model.params["fb.log_sigma2"].data[:] = np.log(w ** 2) + rng.uniform(-3, 1, w.shape)
        x = rng.standard_normal((3, 120))
        labels = np.array([0, 1, 2])
        seed = int(rng.integers(1000))

        def loss():
            noise_rng = np.random.default_rng(seed)
            _, logits = model.forward(x, training=True, rng=noise_rng)
            out = ad.softmax_cross_entropy(logits, labels)
            kl = model.kl()
            return out if kl is None else out + kl * 1e-3

        # a smaller step keeps the +-h probes on one side of the ReLU / |y| kinks
        return ad.check_gradients(loss, list(model.params.values()), h=MODEL_STEP)
    return check


COMPOSITE_CHECKS = {
    "frontend_analytic": _frontend("analytic"),
    "frontend_real": _frontend("real"),
    "vd_forward": _vd_forward,
    "vd_kl": _vd_kl,
    "sinc_parameterization": _sinc,
    "model_tdf_analytic_vd": _tiny_model("tdf", True, "vd"),
    "model_tdf_real": _tiny_model("tdf", False, "none"),
    "model_sinc_analytic": _tiny_model("sinc", True, "none"),
    "model_mel": _tiny_model("mel", False, "none"),
}


def run_all(seed=0):
    """Map every check name to its worst error over the tested shapes."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, check in OP_CHECKS.items():
        results[name] = max(check(rng, shape) for shape in SHAPES)
    for name, check in COMPOSITE_CHECKS.items():
        results[name] = check(rng)
    return results
