# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # MLP backpropagation and Adam
#
# All networks in the package are plain ReLU MLPs stored as lists of numpy
# arrays. Here we check the analytic gradient against central differences and
# fit a small regression problem with Adam.

# %%
import numpy as np

from flowarm.nn import AdamState, adam_step, init_mlp, mlp_backward, mlp_forward, mse_loss

rng = np.random.default_rng(0)
net = init_mlp([3, 16, 16, 2], rng)
x = rng.normal(size=(32, 3))
y = rng.normal(size=(32, 2))


def loss_of(params):
    pred, _ = mlp_forward(params, x)
    return mse_loss(pred, y)[0]


pred, cache = mlp_forward(net, x)
loss, dpred = mse_loss(pred, y)
grads = mlp_backward(net, cache, dpred)

# %% [markdown]
# ## Finite-difference check on a few entries

# %%
h = 1e-6
worst = 0.0
for layer, (w, g) in enumerate(zip(net.weights, grads.weights)):
    for _ in range(5):
        i = tuple(rng.integers(0, s) for s in w.shape)
        old = w[i]
        w[i] = old + h
        up = loss_of(net)
        w[i] = old - h
        down = loss_of(net)
        w[i] = old
        num = (up - down) / (2 * h)
        worst = max(worst, abs(num - g[i]) / max(abs(num) + abs(g[i]), 1e-8))
print(f"max relative error {worst:.2e}")

# %% [markdown]
# ## Fitting a nonlinear map

# %%
xs = rng.uniform(-2, 2, size=(512, 1))
ys = np.sin(2 * xs)
net = init_mlp([1, 32, 32, 1], rng)
opt = AdamState.for_params(net, lr=3e-3)
for it in range(1501):
    idx = rng.integers(0, len(xs), 64)
    pred, cache = mlp_forward(net, xs[idx])
    loss, dpred = mse_loss(pred, ys[idx])
    net, opt = adam_step(net, mlp_backward(net, cache, dpred), opt)
    if it % 500 == 0:
        print(it, round(loss, 5))

grid = np.linspace(-2, 2, 9)[:, None]
print(np.round(np.hstack([grid, np.sin(2 * grid), mlp_forward(net, grid)[0]]), 3))
