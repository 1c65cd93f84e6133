"""Three-stage fault-adaptation protocol and its metrics.

Stage 1 trains on the healthy arm and stores parameters plus replay memory.
Stage 3 continues on a faulted arm under one of three transfer modes. Every
evaluation freezes the policy and averages dense returns over a fixed set of
reseeded episodes.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import baselines as bl
from . import cflownets as cf
from . import env as reacher
from .buffer import ReplayBuffer
from .nn import AdamState, MLPParams

ALGORITHMS = ("CFlowNets", "TD3", "DDPG")


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE3 = "stage3"


class TransferMode(str, Enum):
    FROM_SCRATCH = "from-scratch"
    PARAMS_ONLY = "params"
    PARAMS_AND_BUFFER = "params+buffer"


@dataclass
class RunManifest:
    algorithm: str = "CFlowNets"
    stage: Stage = Stage.STAGE1
    fault: reacher.FaultSpec = field(default_factory=reacher.FaultSpec.none)
    seed: int = 0
    timestep_budget: int = 200_000
    eval_freq: int = 5000
    eval_episodes: int = 10
    transfer_mode: TransferMode = TransferMode.FROM_SCRATCH
    # None: off in stage 1, on in stage 3
    finetune_retrieval: bool | None = None
    arm: reacher.ArmConfig = field(default_factory=reacher.ArmConfig)
    cflownets: cf.CFlowNetsConfig = field(default_factory=cf.CFlowNetsConfig)
    baseline: bl.BaselineConfig = field(default_factory=bl.BaselineConfig)

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.transfer_mode = TransferMode(self.transfer_mode)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.stage is Stage.STAGE1 and (
                self.fault.kind is not reacher.FaultKind.NONE or self.transfer_mode is not TransferMode.FROM_SCRATCH):
            raise ValueError("stage 1 runs use the healthy arm and train from scratch")
        if self.timestep_budget < 0 or self.eval_freq < 1 or self.eval_episodes < 1:
            raise ValueError("budget must be >= 0, eval_freq and eval_episodes >= 1")

    def replace(self, **changes) -> "RunManifest":
        return dataclasses.replace(self, **changes)


@dataclass
class EvalRecord:
    timestep: int
    returns: np.ndarray
    sparse_returns: np.ndarray | None = None
    final_distances: np.ndarray | None = None

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))


@dataclass
class Checkpoint:
    algorithm: str
    networks: dict[str, MLPParams]
    buffer: ReplayBuffer | None
    manifest: dict
    train_seconds: float = 0.0
    pretrain_seconds: float = 0.0
    # free-form scalar metadata, e.g. the retrieval network's residual flag
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.algorithm == other.algorithm and self.manifest == other.manifest
            and self.train_seconds == other.train_seconds and self.pretrain_seconds == other.pretrain_seconds
            and self.meta == other.meta and self.networks.keys() == other.networks.keys()
            and all(self.networks[k] == other.networks[k] for k in self.networks)
            and self.buffer == other.buffer
        )


@dataclass
class AsymptoteReport:
    converged: bool
    convergence_index: int | None
    convergence_timestep: int | None
    asymptotic_value: float
    window_size: int
    variance_threshold: float


# -- evaluation ------------------------------------------------------------

def evaluate_policy(arm: reacher.ArmConfig, policy, n_episodes: int, seed_key=(0,)) -> EvalRecord:
    """Run ``n_episodes`` frozen-policy episodes.

    ``policy(obs, rng, step)`` returns an action. Episode ``i`` draws its target
    and any policy randomness from ``default_rng([*seed_key, i])`` so evaluation
    never touches a training stream. The record's timestep is left at 0 for the
    caller to set.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    dense, sparse, dist = [], [], []
    for i in range(n_episodes):
        rng = np.random.default_rng([*seed_key, i])
        env = reacher.ReacherEnv(arm)
        obs = env.reset(rng)
        total = 0.0
        for t in range(arm.horizon):
            result = env.step(policy(obs, rng, t))
            total += result.dense_reward
            obs = result.observation
        dense.append(total)
        sparse.append(result.sparse_reward)
        dist.append(env.distance())
    return EvalRecord(0, np.array(dense), np.array(sparse), np.array(dist))


def _eval_hook(manifest: RunManifest, arm: reacher.ArmConfig, stage_tag: int):
    def hook(timestep, model):
        if isinstance(model, cf.CFlowNetsModel):
            cfg = manifest.cflownets
            policy = model.policy(cfg.M, cfg.horizon, cfg.time_feature)
        else:
            policy = model.policy()
        record = evaluate_policy(arm, policy, manifest.eval_episodes,
                                 (manifest.seed, stage_tag, timestep // manifest.eval_freq))
        record.timestep = timestep
        return record
    return hook


def _arm_for(manifest: RunManifest, cfg_horizon: int, fault: reacher.FaultSpec) -> reacher.ArmConfig:
    return reacher.apply_fault(manifest.arm.replace(horizon=cfg_horizon), fault)


# -- checkpoints -----------------------------------------------------------

def _cflownets_checkpoint(model: cf.CFlowNetsModel, buffer, manifest, seconds, pretrain_seconds):
    return Checkpoint(
        "CFlowNets", {"flow": model.flow.net, "retrieval": model.retrieval.net}, buffer,
        manifest_to_dict(manifest), seconds, pretrain_seconds,
        {"retrieval_residual": model.retrieval.residual},
    )


def _baseline_checkpoint(model: bl.ActorCriticModel, buffer, manifest, seconds):
    nets = {"actor": model.actor, "actor_target": model.actor_target}
    for i, (c, t) in enumerate(zip(model.critics, model.critic_targets)):
        nets[f"critic{i}"] = c
        nets[f"critic_target{i}"] = t
    return Checkpoint(model.algorithm, nets, buffer, manifest_to_dict(manifest), seconds, 0.0)


def cflownets_model_from_checkpoint(ckpt: Checkpoint, cfg: cf.CFlowNetsConfig) -> cf.CFlowNetsModel:
    flow = cf.FlowNetwork(ckpt.networks["flow"].copy())
    retrieval = cf.RetrievalNetwork(ckpt.networks["retrieval"].copy(), ckpt.meta.get("retrieval_residual", True))
    return cf.CFlowNetsModel(flow, retrieval, AdamState.for_params(flow.net, lr=cfg.lr),
                             AdamState.for_params(retrieval.net, lr=cfg.retrieval_lr))


def baseline_model_from_checkpoint(ckpt: Checkpoint, cfg: bl.BaselineConfig) -> bl.ActorCriticModel:
    n = 2 if ckpt.algorithm == "TD3" else 1
    critics = [ckpt.networks[f"critic{i}"].copy() for i in range(n)]
    actor = ckpt.networks["actor"].copy()
    return bl.ActorCriticModel(
        ckpt.algorithm, actor, critics, ckpt.networks["actor_target"].copy(),
        [ckpt.networks[f"critic_target{i}"].copy() for i in range(n)],
        AdamState.for_params(actor, lr=cfg.lr_actor),
        [AdamState.for_params(c, lr=cfg.lr_critic) for c in critics],
    )


def checkpoint_policy(ckpt: Checkpoint, manifest: RunManifest):
    """Frozen evaluation policy stored in ``ckpt``."""
    if ckpt.algorithm == "CFlowNets":
        cfg = manifest.cflownets
        return cflownets_model_from_checkpoint(ckpt, cfg).policy(cfg.M, cfg.horizon, cfg.time_feature)
    return baseline_model_from_checkpoint(ckpt, manifest.baseline).policy()


# -- stages ----------------------------------------------------------------

def _pretrained_retrieval(arm, cfg: cf.CFlowNetsConfig, rng):
    data = cf.random_policy_dataset(arm, cfg.pretrain_samples, rng)
    retrieval, _ = cf.pretrain_retrieval(data, cfg, rng)
    return retrieval


def _train(manifest: RunManifest, arm, rng, stage_tag, model=None, buffer=None, finetune=False,
           start_steps=None):
    """Shared training body; returns ``(model, evals, buffer, seconds, pretrain_seconds)``."""
    hook = _eval_hook(manifest, arm, stage_tag)
    pretrain_seconds = 0.0
    if manifest.algorithm == "CFlowNets":
        cfg = dataclasses.replace(manifest.cflownets, eval_freq=manifest.eval_freq, finetune_retrieval=finetune)
        if model is None:
            t0 = time.perf_counter()
            retrieval = _pretrained_retrieval(arm, cfg, rng)
            pretrain_seconds = time.perf_counter() - t0
            model = cf.CFlowNetsModel.create(cfg, retrieval, rng)
        t0 = time.perf_counter()
        model, evals, buffer = cf.cflownets_train(arm, cfg, model, manifest.timestep_budget, rng, hook, buffer)
    else:
        cfg = dataclasses.replace(manifest.baseline, eval_freq=manifest.eval_freq)
        if model is None:
            model = bl.ActorCriticModel.create(manifest.algorithm, cfg, rng)
        t0 = time.perf_counter()
        model, evals, buffer = bl.baseline_train(arm, cfg, model, manifest.timestep_budget, rng, hook, buffer,
                                                 start_steps=start_steps)
    return model, evals, buffer, time.perf_counter() - t0, pretrain_seconds


def _checkpoint(manifest, model, buffer, seconds, pretrain_seconds):
    if manifest.algorithm == "CFlowNets":
        return _cflownets_checkpoint(model, buffer, manifest, seconds, pretrain_seconds)
    return _baseline_checkpoint(model, buffer, manifest, seconds)


def run_stage1(manifest: RunManifest):
    """Train on the healthy arm; returns ``(checkpoint, eval_log)``."""
    if manifest.stage is not Stage.STAGE1:
        raise ValueError("run_stage1 needs a stage-1 manifest")
    horizon = manifest.cflownets.horizon if manifest.algorithm == "CFlowNets" else manifest.baseline.horizon
    arm = _arm_for(manifest, horizon, reacher.FaultSpec.none())
    rng = np.random.default_rng([manifest.seed, 1])
    finetune = bool(manifest.finetune_retrieval)
    model, evals, buffer, seconds, pre = _train(manifest, arm, rng, 1, finetune=finetune)
    return _checkpoint(manifest, model, buffer, seconds, pre), evals


def run_stage3(checkpoint: Checkpoint, fault: reacher.FaultSpec, transfer_mode, manifest: RunManifest):
    """Continue learning on the faulted arm; returns ``(checkpoint, eval_log)``."""
    transfer_mode = TransferMode(transfer_mode)
    if fault.kind is reacher.FaultKind.NONE:
        raise ValueError("stage 3 needs a fault")
    if checkpoint.algorithm != manifest.algorithm:
        raise ValueError(f"checkpoint holds {checkpoint.algorithm}, manifest asks for {manifest.algorithm}")
    if transfer_mode is TransferMode.PARAMS_AND_BUFFER and checkpoint.buffer is None:
        raise ValueError("params+buffer transfer requested but the checkpoint has no replay buffer")
    manifest = manifest.replace(stage=Stage.STAGE3, fault=fault, transfer_mode=transfer_mode)
    horizon = manifest.cflownets.horizon if manifest.algorithm == "CFlowNets" else manifest.baseline.horizon
    arm = _arm_for(manifest, horizon, fault)
    rng = np.random.default_rng([manifest.seed, 3])
    finetune = True if manifest.finetune_retrieval is None else manifest.finetune_retrieval
    model, buffer, start_steps = None, None, None
    if transfer_mode is not TransferMode.FROM_SCRATCH:
        start_steps = 0
        if manifest.algorithm == "CFlowNets":
            want = manifest.cflownets.flow_obs_dim + reacher.ACTION_DIM
            if checkpoint.networks["flow"].in_dim != want:
                raise ValueError("checkpoint flow network does not match the time_feature setting")
            model = cflownets_model_from_checkpoint(checkpoint, manifest.cflownets)
            capacity = manifest.cflownets.replay_capacity
        else:
            model = baseline_model_from_checkpoint(checkpoint, manifest.baseline)
            capacity = manifest.baseline.replay_capacity
        if transfer_mode is TransferMode.PARAMS_AND_BUFFER:
            buffer = checkpoint.buffer.resized(capacity)
    model, evals, buffer, seconds, pre = _train(manifest, arm, rng, 3, model, buffer, finetune, start_steps)
    return _checkpoint(manifest, model, buffer, seconds, pre), evals


# -- metrics ---------------------------------------------------------------

def default_variance_threshold(values) -> float:
    q75, q25 = np.percentile(values, [75, 25])
    return 0.01 * float(q75 - q25)


def detect_asymptote(values, window: int = 20, threshold: float | None = None, eval_freq: int | None = None,
                     timesteps=None) -> AsymptoteReport:
    """Earliest trailing window whose variance falls below ``threshold``.

    ``values`` are per-evaluation mean returns (or EvalRecords). Without a
    convergence point the asymptotic value is the mean of the final window.
    """
    values = list(values)
    if timesteps is None and values and isinstance(values[0], EvalRecord):
        timesteps = [v.timestep for v in values]
    values = [v.mean_return if isinstance(v, EvalRecord) else v for v in values]
    values = np.asarray(values, dtype=np.float64)
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(values) < window:
        raise ValueError(f"series of length {len(values)} is shorter than the window {window}")
    if threshold is None:
        threshold = default_variance_threshold(values)
    for end in range(window - 1, len(values)):
        seg = values[end - window + 1:end + 1]
        if np.var(seg) < threshold:
            if timesteps is not None:
                ts = int(timesteps[end])
            elif eval_freq is not None:
                ts = end * eval_freq
            else:
                ts = None
            return AsymptoteReport(True, end, ts, float(np.mean(seg)), window, threshold)
    return AsymptoteReport(False, None, None, float(np.mean(values[-window:])), window, threshold)


def retention_percent(normal_asym: float, fault_asym: float) -> float:
    """Share of normal performance kept under a fault, for negative returns."""
    if not (normal_asym < 0 and fault_asym < 0):
        raise ValueError("retention is defined for negative asymptotic returns")
    return 100.0 * normal_asym / fault_asym


def aggregate_runs(logs):
    """Pointwise mean and 95% half-width over seeds.

    ``logs`` is a list of eval logs (lists of EvalRecord) or of ``(timesteps, values)`` pairs.
    Returns ``(timesteps, mean, half_width)``.
    """
    series = []
    for run in logs:
        if isinstance(run, tuple):
            ts, vals = run
        else:
            ts = [r.timestep for r in run]
            vals = [r.mean_return for r in run]
        series.append((np.asarray(ts), np.asarray(vals, dtype=np.float64)))
    if len(series) < 2:
        raise ValueError("need at least two runs to aggregate")
    ts0 = series[0][0]
    for ts, _ in series[1:]:
        if ts.shape != ts0.shape or not np.array_equal(ts, ts0):
            raise ValueError("runs have misaligned timesteps")
    values = np.stack([v for _, v in series])
    n = values.shape[0]
    half = 1.96 * values.std(axis=0, ddof=1) / math.sqrt(n)
    return ts0, values.mean(axis=0), half


def adaptation_speed_summary(rows):
    """Tabulate timesteps-to-asymptote and wall-clock per algorithm and fault.

    ``rows`` are dicts with ``algorithm``, ``fault``, ``report`` (AsymptoteReport),
    ``eval_freq`` and ``wall_clock``. Unconverged runs stay in the table.
    """
    table = []
    for row in rows:
        rep = row["report"]
        table.append({
            "algorithm": row["algorithm"],
            "fault": row["fault"],
            "converged": rep.converged,
            "timesteps_to_asymptote": rep.convergence_index * row["eval_freq"] if rep.converged else None,
            "wall_clock_seconds": float(row["wall_clock"]),
            "asymptotic_return": rep.asymptotic_value,
        })
    return table


def manifest_to_dict(m: RunManifest) -> dict:
    from .io import manifest_to_dict as _to
    return _to(m)
