"""Sparse variational dropout on a toy regression.

Twenty features, five of which matter. Each weight learns its own noise
level; weights whose noise swamps their mean (log alpha > 3) are set to
exactly zero, and the held-out error barely moves.
"""

import numpy as np

from rawspk import dropout as vd

rng = np.random.default_rng(0)
w_true = np.zeros(20)
w_true[:5] = rng.uniform(1, 3, 5) * rng.choice([-1, 1], 5)
X, Xt = rng.standard_normal((200, 20)), rng.standard_normal((1000, 20))
y = X @ w_true + 0.1 * rng.standard_normal(200)
yt = Xt @ w_true + 0.1 * rng.standard_normal(1000)

layer, history = vd.fit_vd_regression(X, y, seed=0)
la = layer.log_alpha
pruned_w = vd.vd_forward(layer, training=False)

print(" idx   true     theta   log_alpha  kept")
for i in range(20):
    print(f"{i:4d} {w_true[i]:7.3f} {layer.theta[i]:9.4f} {la[i]:10.2f}  {'yes' if la[i] <= 3 else 'no'}")

full = np.mean((Xt @ layer.theta - yt) ** 2)
pruned = np.mean((Xt @ pruned_w - yt) ** 2)
print(f"\nirrelevant weights pruned: {np.sum(la[5:] > 3)}/15")
print(f"held-out MSE  all weights {full:.5f}  pruned {pruned:.5f}  "
      f"(relative change {abs(pruned - full) / full:.1e})")
print(f"KL term at the end: {vd.vd_kl(layer):.2f}, loss {history[0]:.3f} -> {history[-1]:.3f}")
