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
# # Flow matching in continuous action spaces
#
# An action is chosen by drawing `M` uniform candidates and picking one with
# probability proportional to its edge flow. Training compares the log inflow
# of a state (flows from predicted parents) with its log outflow (flows to
# sampled children plus the scaled terminal reward).

# %%
import math

import numpy as np

from flowarm import cflownets as cf
from flowarm.buffer import Batch
from flowarm.nn import MLPParams

# %% [markdown]
# ## Sampling from a known flow
#
# A 1-D flow network that ignores the state and returns `log(1 + a)` on
# [-1, 1]. The resampled actions should follow a density proportional to
# `1 + a`, which has mean 1/3.

# %%
space = cf.ActionSpace((-1.0,), (1.0,))
rng = np.random.default_rng(0)
draws = []
for _ in range(20_000):
    acts = space.sample(20, rng)
    buf = cf.probability_buffer_from_log_flows(acts, np.log1p(acts[:, 0]))
    draws.append(cf.sample_action(buf, rng)[0])
draws = np.array(draws)
hist, edges = np.histogram(draws, bins=8, range=(-1, 1), density=True)
centers = 0.5 * (edges[1:] + edges[:-1])
print("mean", draws.mean().round(3))
print(np.round(np.vstack([centers, hist, (1 + centers) / 2]), 3))

# %% [markdown]
# ## A hand-checkable loss
#
# One terminal state, one sampled action, a flow network that outputs zero
# everywhere, `epsilon = 1` and scaled reward 1. Inflow is `log(1 + 1)`,
# outflow `log(1 + 1 + 1)`, so the loss is `(log 2 - log 3)^2`.

# %%
zero_flow = cf.FlowNetwork(MLPParams([np.zeros((1, 3))], [np.zeros(1)]))
identity = cf.RetrievalNetwork(MLPParams([np.zeros((2, 3))], [np.zeros(2)]))
batch = Batch(obs=np.zeros((1, 2)), action=np.zeros((1, 1)), reward=np.array([1.0]),
              next_obs=np.zeros((1, 2)), done=np.array([1.0]))
cfg = cf.CFlowNetsConfig(K=1, lam=1.0, epsilon=1.0)
loss, _ = cf.flow_matching_loss(zero_flow, identity, batch, cfg, actions=np.zeros((1, 1, 1)))
print(loss, (math.log(2) - math.log(3)) ** 2)

# %% [markdown]
# ## Variance of the outflow estimate
#
# The outflow sum over `K` sampled actions is a Monte Carlo estimate of an
# integral; its spread shrinks as `K` grows.

# %%
flow = cf.FlowNetwork.init(2, 1, (16,), rng)
state = np.array([0.3, -0.2])
for K in (4, 16, 64, 256):
    est = [cf.compute_log_outflow(flow, state, space.sample(K, rng), 0.0, 1.0, 1e-12) - math.log(K)
           for _ in range(200)]
    print(K, np.std(est).round(4))
