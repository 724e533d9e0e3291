"""Weight noise for the first-layer filters.

Sparse variational dropout learns a per-weight noise variance; weights whose
log-alpha grows past a threshold are pruned at inference. Bernoulli and
Gaussian dropout with a fixed rate are provided for comparison.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

K1, K2, K3 = 0.63576, 1.87320, 1.48695
LOG_ALPHA_CLIP = 10.0
PRUNE_THRESHOLD = 3.0
_STAB = 1e-8


@dataclass
class VDLayer:
    theta: np.ndarray
    log_sigma2: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.log_sigma2 = np.asarray(self.log_sigma2, dtype=np.float64)
        if self.theta.shape != self.log_sigma2.shape:
            raise ValueError(
                f"theta {self.theta.shape} and log_sigma2 {self.log_sigma2.shape} differ")

    @classmethod
    def from_weights(cls, weights, log_sigma2=-10.0):
        w = np.asarray(weights, dtype=np.float64)
        return cls(w.copy(), np.full_like(w, log_sigma2))

    @property
    def log_alpha(self):
        return log_alpha(self.theta, self.log_sigma2)


def log_alpha(theta, log_sigma2):
    la = np.asarray(log_sigma2) - np.log(np.asarray(theta) ** 2 + _STAB)
    return np.clip(la, -LOG_ALPHA_CLIP, LOG_ALPHA_CLIP)


def log_alpha_tensor(theta, log_sigma2):
    la = ad.sub(log_sigma2, ad.log(ad.square(theta) + _STAB))
    return ad.clip(la, -LOG_ALPHA_CLIP, LOG_ALPHA_CLIP)


def kl_per_weight(log_alpha):
    """Approximate KL(q || log-uniform prior) for each weight; decreasing in log-alpha."""
    la = np.asarray(log_alpha, dtype=np.float64)
    sig = 0.5 * (1.0 + np.tanh(0.5 * (K2 + K3 * la)))
    return -(K1 * sig - 0.5 * np.logaddexp(0.0, -la) - K1)


def vd_kl_tensor(theta, log_sigma2):
    la = log_alpha_tensor(theta, log_sigma2)
    neg_kl = K1 * ad.sigmoid(K2 + K3 * la) - 0.5 * ad.softplus(-la) - K1
    return -ad.reduce_sum(neg_kl)


def vd_kl(layer):
    return vd_kl_tensor(ad.Tensor(layer.theta), ad.Tensor(layer.log_sigma2)).item()


def vd_prune_mask(layer, threshold=PRUNE_THRESHOLD):
    return (layer.log_alpha <= threshold).astype(np.float64)


def vd_weights_tensor(theta, log_sigma2, noise):
    """Training-time weights ``theta + exp(log_sigma2 / 2) * noise``."""
    return ad.add(theta, ad.mul(ad.exp(0.5 * ad.as_tensor(log_sigma2)), noise))


def vd_forward(layer, training, rng=None, prune_threshold=PRUNE_THRESHOLD):
    if training:
        if rng is None:
            raise ValueError("training mode needs an explicit rng")
        noise = rng.standard_normal(layer.theta.shape)
        return layer.theta + np.exp(0.5 * layer.log_sigma2) * noise
    return layer.theta * vd_prune_mask(layer, prune_threshold)


def bernoulli_dropout(weights, p, rng=None, training=True):
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    w = np.asarray(weights, dtype=np.float64)
    if not training or p == 0:
        return w.copy()
    keep = rng.random(w.shape) >= p
    return w * keep / (1.0 - p)


def gaussian_dropout(weights, alpha, rng=None, training=True):
    if alpha < 0:
        raise ValueError(f"Gaussian dropout variance must be >= 0, got {alpha}")
    w = np.asarray(weights, dtype=np.float64)
    if not training or alpha == 0:
        return w.copy()
    return w * (1.0 + np.sqrt(alpha) * rng.standard_normal(w.shape))


def bernoulli_mask(shape, p, rng):
    return (rng.random(shape) >= p) / (1.0 - p)


def gaussian_mask(shape, alpha, rng):
    return 1.0 + np.sqrt(alpha) * rng.standard_normal(shape)


def kl_weight_schedule(step, total_steps, warmup_fraction=0.3):
    """Linear ramp 0 -> 1 over the first ``warmup_fraction`` of training."""
    ramp = max(1, int(round(warmup_fraction * total_steps)))
    return min(1.0, step / ramp)


def fit_vd_regression(X, y, steps=3000, lr=1e-2, seed=0, init_log_sigma2=-10.0,
                      kl_weight=None):
    """Linear regression with a variationally dropped-out weight vector.

    The loss is the mean squared error of one noisy weight draw per step
    plus the KL term, whose weight ramps linearly from 0 to ``kl_weight``
    over the first 30% of steps. The default ``kl_weight = 1 / n_samples``
    makes the loss a per-example bound, as in network training; a weight
    of 1 against a mean error shrinks the kept weights heavily. Returns the fitted :class:`VDLayer` and the
    per-step loss history.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if kl_weight is None:
        kl_weight = 1.0 / n
    rng = np.random.default_rng(seed)
    theta = ad.Tensor(np.zeros(d), requires_grad=True)
    log_s2 = ad.Tensor(np.full(d, init_log_sigma2), requires_grad=True)
    opt = ad.Adam({"theta": theta, "log_sigma2": log_s2}, lr=lr)
    history = []
    for step in range(steps):
        opt.zero_grad()
        w = vd_weights_tensor(theta, log_s2, rng.standard_normal(d))
        resid = ad.sub(y, ad.reshape(ad.matmul(X, ad.reshape(w, (d, 1))), (n,)))
        beta = kl_weight * kl_weight_schedule(step, steps)
        loss = ad.reduce_mean(ad.square(resid)) + beta * vd_kl_tensor(theta, log_s2)
        ad.backward(loss)
        opt.step()
        history.append(loss.item())
    return VDLayer(theta.data.copy(), log_s2.data.copy()), history
