"""
Concordance correlation as a training objective
===============================================

Agreement between a prediction track and its annotation, the loss built on
it, and a finite-difference look at its gradient.
"""

# %%
# A prediction that is perfectly correlated with the annotation but offset
# and compressed still scores well below one.
import numpy as np

from affect_e2e import metrics

gold = np.sin(np.linspace(0, 6 * np.pi, 300))
pred = 0.4 * gold + 0.3
print("pearson", round(metrics.pearson(pred, gold), 4))
print("ccc    ", round(metrics.ccc(pred, gold), 4))

# %%
# Fixing the mean and the spread recovers full agreement.
fixed = (pred - pred.mean()) / pred.std() * gold.std() + gold.mean()
print("ccc after moment matching", round(metrics.ccc(fixed, gold), 6))

# %%
# The loss is ``1 - ccc``.  Its closed-form gradient with respect to the
# prediction agrees with central differences.
from affect_e2e.autodiff.gradcheck import numerical_gradient

rng = np.random.default_rng(0)
x, y = rng.normal(size=150), rng.normal(size=150)
analytic = metrics.ccc_loss_grad(x, y)
numeric = numerical_gradient(lambda: metrics.ccc_loss(x, y), x)
print("max |analytic - numeric|", np.abs(analytic - numeric).max())

# %%
# Inside a network the same loss is a graph node; ``backward`` fills the
# gradient of every tensor that asked for one.
from affect_e2e.autodiff.tensor import Tensor, backward

out = Tensor(rng.normal(size=(2, 150, 2)), requires_grad=True)
loss = metrics.concordance_loss(out, rng.normal(size=(2, 150, 2)))
backward(loss)
print("loss", round(loss.item(), 4), "grad shape", out.grad.shape)
