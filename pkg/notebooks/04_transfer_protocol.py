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
# # Pre-train, inject a fault, adapt
#
# Stage 1 trains on the normal arm. Stage 3 resumes on a faulted arm under one
# of three transfer modes: a fresh model, the old parameters, or the old
# parameters together with the old replay buffer. The budgets below are tiny
# so the notebook runs in seconds; the command line tool runs the same code at
# full size.

# %%
import json
import tempfile
from pathlib import Path

import numpy as np

from flowarm import baselines as bl
from flowarm import cli
from flowarm import env as reacher
from flowarm.harness import RunManifest, TransferMode, detect_asymptote, run_stage1, run_stage3

manifest = RunManifest(
    algorithm="TD3", seed=1, timestep_budget=3000, eval_freq=500, eval_episodes=5,
    baseline=bl.BaselineConfig(hidden=(32, 32), batch_size=64, start_steps=500, lr_actor=1e-3, lr_critic=1e-3),
)
ckpt, stage1 = run_stage1(manifest)
print([round(r.mean_return, 2) for r in stage1])

# %% [markdown]
# ## Stage 3 on a damped elbow

# %%
fault = reacher.FaultSpec.increased_damping()
curves = {}
for mode in TransferMode:
    _, evals = run_stage3(ckpt, fault, mode, manifest)
    curves[mode.value] = evals
    print(f"{mode.value:14s}", [round(r.mean_return, 2) for r in evals])

# %% [markdown]
# The first evaluation of a transferred run scores the Stage 1 policy on the
# faulted arm before any update, so the gap at timestep 0 is the jumpstart.

# %%
for mode, evals in curves.items():
    early = np.mean([r.mean_return for r in evals[:5]])
    rep = detect_asymptote(evals, window=4)
    print(f"{mode:14s} early={early:7.2f} asymptote={rep.asymptotic_value:7.2f} converged={rep.converged}")

# %% [markdown]
# ## The same comparison from saved runs
#
# `flowarm compare` reads `summary.json` files written by `train` and
# `transfer` and groups them by algorithm, fault and transfer mode.

# %%
with tempfile.TemporaryDirectory() as tmp:
    cfg = Path(tmp) / "config.json"
    cfg.write_text(json.dumps({"algorithm": "TD3", "timestep_budget": 1000, "eval_freq": 250, "eval_episodes": 3,
                               "baseline": {"hidden": [16], "batch_size": 32, "start_steps": 250}}))
    runs = Path(tmp) / "runs"
    cli.main(["train", "--config", str(cfg), "--out", str(runs / "normal")])
    for mode in ("from-scratch", "params+buffer"):
        cli.main(["transfer", "--checkpoint", str(runs / "normal" / "checkpoint.bin"), "--fault",
                  "increased-damping", "--mode", mode, "--config", str(cfg), "--out", str(runs / mode)])
    print(cli.format_table(cli.compare_runs(runs, window=3)))
