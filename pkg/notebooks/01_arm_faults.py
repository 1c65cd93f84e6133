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
# # The two-link arm and its faults
#
# A planar arm with a shoulder (joint 0) and an elbow (joint 1). Each fault is a
# pure transformation of the nominal `ArmConfig`, so the same dynamics code runs
# for every condition.

# %%
import math

import numpy as np

from flowarm import env as reacher

base = reacher.ArmConfig()
faults = {
    "normal": reacher.FaultSpec.none(),
    "reduced-rom": reacher.FaultSpec.reduced_rom(),
    "increased-damping": reacher.FaultSpec.increased_damping(),
    "actuator-damage": reacher.FaultSpec.actuator_damage(),
    "structural": reacher.FaultSpec.structural_damage(),
}
arms = {name: reacher.apply_fault(base, f) for name, f in faults.items()}
for name, arm in arms.items():
    print(f"{name:18s} ranges={arm.joint_ranges[1]} damping={arm.damping} gears={arm.gears} bend={arm.bend_angle:.3f}")

# %% [markdown]
# ## Elbow coast-down
#
# Start the elbow spinning at 4 rad/s and apply zero torque. Higher damping
# stops it sooner.

# %%
def coast_steps(arm, omega0=4.0, tol=0.1):
    state = reacher.EnvState(np.zeros(2), np.array([0.0, omega0]), np.array([0.1, 0.0]), 0)
    arm = arm.replace(horizon=10_000)
    for n in range(1, arm.horizon):
        state, _ = reacher.step(arm, state, np.zeros(2))
        if abs(state.omega[1]) < tol:
            return n
    return None


for name in ("normal", "increased-damping"):
    print(name, coast_steps(arms[name]))

# %% [markdown]
# ## Reachable workspace
#
# Targets are drawn only where inverse kinematics finds a solution inside the
# joint limits. Limiting the elbow to [-1, 1] rad carves out the inner disc.

# %%
grid = np.linspace(-0.2, 0.2, 41)
for name in ("normal", "reduced-rom"):
    reach = np.array([[reacher.is_reachable(arms[name], (x, y)) for x in grid] for y in grid])
    print(name, f"reachable fraction of the square: {reach.mean():.3f}")

# %% [markdown]
# ## Structural bend
#
# The bent second link shifts the fingertip by a fixed rotation of the forearm.

# %%
theta = np.array([0.3, -0.7])
tip = reacher.forward_kinematics(arms["structural"], theta)
l1, l2 = base.link_lengths
closed = np.array([
    l1 * math.cos(theta[0]) + l2 * math.cos(theta.sum() + math.pi / 4),
    l1 * math.sin(theta[0]) + l2 * math.sin(theta.sum() + math.pi / 4),
])
print(tip, closed, np.abs(tip - closed).max())
