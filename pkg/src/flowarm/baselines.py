"""TD3 and DDPG on dense rewards.

DDPG runs through the TD3 code path with one critic, no target smoothing and
``policy_delay = 1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import env as reacher
from .buffer import Batch, ReplayBuffer
from .nn import AdamState, MLPParams, adam_step, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

ALGORITHMS = ("TD3", "DDPG")


@dataclass
class BaselineConfig:
    gamma: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    exploration_sigma: float = 0.1
    policy_delay: int = 2
    batch_size: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    replay_capacity: int = 200_000
    hidden: tuple[int, ...] = (256, 256)
    # uniform-random actions before the first update
    start_steps: int = 5000
    eval_freq: int = 5000
    horizon: int = 50

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.policy_delay < 1 or self.batch_size < 1:
            raise ValueError("policy_delay and batch_size must be >= 1")
        self.hidden = tuple(self.hidden)


@dataclass
class ActorCriticModel:
    algorithm: str
    actor: MLPParams
    critics: list[MLPParams]
    actor_target: MLPParams
    critic_targets: list[MLPParams]
    actor_opt: AdamState
    critic_opts: list[AdamState]
    updates: int = 0

    @classmethod
    def create(cls, algorithm: str, cfg: BaselineConfig, rng: np.random.Generator,
               obs_dim=reacher.OBS_DIM, action_dim=reacher.ACTION_DIM) -> "ActorCriticModel":
        if algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        actor = init_mlp([obs_dim, *cfg.hidden, action_dim], rng)
        n_critics = 2 if algorithm == "TD3" else 1
        critics = [init_mlp([obs_dim + action_dim, *cfg.hidden, 1], rng) for _ in range(n_critics)]
        return cls(
            algorithm, actor, critics, actor.copy(), [c.copy() for c in critics],
            AdamState.for_params(actor, lr=cfg.lr_actor),
            [AdamState.for_params(c, lr=cfg.lr_critic) for c in critics],
        )

    @property
    def twin(self) -> bool:
        return len(self.critics) == 2

    def act(self, obs) -> np.ndarray:
        out, _ = mlp_forward(self.actor, obs)
        return np.tanh(out)

    def policy(self):
        """Deterministic evaluation policy ``(obs, rng, step) -> action``."""
        return lambda obs, rng, step=0: self.act(obs)


def select_action(model: ActorCriticModel, obs, sigma: float, rng: np.random.Generator) -> np.ndarray:
    action = model.act(obs)
    if sigma > 0:
        action = action + rng.normal(0.0, sigma, size=action.shape)
    return np.clip(action, -1.0, 1.0)


def td3_target(r, gamma, q1_next, q2_next, done):
    return r + gamma * (1.0 - done) * np.minimum(q1_next, q2_next)


def ddpg_target(r, gamma, q_next, done):
    return r + gamma * (1.0 - done) * q_next


def soft_update(target: MLPParams, source: MLPParams, tau: float) -> MLPParams:
    ta, sa = target.arrays(), source.arrays()
    if len(ta) != len(sa) or any(a.shape != b.shape for a, b in zip(ta, sa)):
        raise ValueError("target and source shapes differ")
    return MLPParams.from_arrays([tau * s + (1.0 - tau) * t for t, s in zip(ta, sa)], target.output_activation)


def _q(critic: MLPParams, obs, action):
    out, cache = mlp_forward(critic, np.concatenate([obs, action], axis=1))
    return out[:, 0], cache


def critic_targets(model: ActorCriticModel, batch: Batch, cfg: BaselineConfig, rng: np.random.Generator):
    out, _ = mlp_forward(model.actor_target, batch.next_obs)
    next_action = np.tanh(out)
    if model.twin and cfg.policy_noise > 0:
        noise = np.clip(rng.normal(0.0, cfg.policy_noise, size=next_action.shape), -cfg.noise_clip, cfg.noise_clip)
        next_action = np.clip(next_action + noise, -1.0, 1.0)
    qs = [_q(c, batch.next_obs, next_action)[0] for c in model.critic_targets]
    if model.twin:
        return td3_target(batch.reward, cfg.gamma, qs[0], qs[1], batch.done)
    return ddpg_target(batch.reward, cfg.gamma, qs[0], batch.done)


def bellman_mse(model: ActorCriticModel, batch: Batch, y) -> float:
    return float(np.mean([np.mean((_q(c, batch.obs, batch.action)[0] - y) ** 2) for c in model.critics]))


def critic_update(model: ActorCriticModel, batch: Batch, y) -> float:
    """One Adam step per critic toward fixed targets ``y``; returns the mean pre-update MSE."""
    n = len(batch)
    losses = []
    for i, critic in enumerate(model.critics):
        q, cache = _q(critic, batch.obs, batch.action)
        diff = q - y
        losses.append(float(np.mean(diff * diff)))
        grads = mlp_backward(critic, cache, (2.0 * diff / n)[:, None])
        model.critics[i], model.critic_opts[i] = adam_step(critic, grads, model.critic_opts[i])
    return float(np.mean(losses))


def actor_update(model: ActorCriticModel, batch: Batch) -> float:
    """Deterministic policy gradient step through critic 1; returns -mean Q."""
    n = len(batch)
    pre, actor_cache = mlp_forward(model.actor, batch.obs)
    action = np.tanh(pre)
    q, cache = _q(model.critics[0], batch.obs, action)
    grads_q = mlp_backward(model.critics[0], cache, np.full((n, 1), -1.0 / n), need_input_grad=True)
    d_action = grads_q.input_grad[:, -action.shape[1]:]
    grads = mlp_backward(model.actor, actor_cache, d_action * (1.0 - action * action))
    model.actor, model.actor_opt = adam_step(model.actor, grads, model.actor_opt)
    return -float(np.mean(q))


def train_step(model: ActorCriticModel, buffer: ReplayBuffer, cfg: BaselineConfig, rng: np.random.Generator):
    batch = buffer.sample(cfg.batch_size, rng)
    y = critic_targets(model, batch, cfg, rng)
    critic_update(model, batch, y)
    model.updates += 1
    delay = cfg.policy_delay if model.twin else 1
    if model.updates % delay == 0:
        actor_update(model, batch)
        model.actor_target = soft_update(model.actor_target, model.actor, cfg.tau)
        model.critic_targets = [soft_update(t, c, cfg.tau) for t, c in zip(model.critic_targets, model.critics)]


def baseline_train(arm: reacher.ArmConfig, cfg: BaselineConfig, model: ActorCriticModel, budget: int,
                   rng: np.random.Generator, eval_hook=None, buffer: ReplayBuffer | None = None,
                   start_steps: int | None = None):
    """Off-policy training for ``budget`` environment steps on dense rewards.

    Evaluations follow the same cadence as :func:`flowarm.cflownets.cflownets_train`.
    Returns ``(model, eval_log, buffer)``.
    """
    if buffer is None:
        buffer = ReplayBuffer(cfg.replay_capacity, reacher.OBS_DIM, reacher.ACTION_DIM)
    if start_steps is None:
        start_steps = cfg.start_steps
    env = reacher.ReacherEnv(arm.replace(horizon=cfg.horizon))
    evals = []
    next_eval = 0
    obs = None
    for t in range(budget + 1 if budget > 0 else 0):
        if eval_hook is not None and t == next_eval:
            evals.append(eval_hook(t, model))
            next_eval += cfg.eval_freq
        if t == budget:
            break
        if obs is None:
            obs = env.reset(rng)
        if t < start_steps:
            action = rng.uniform(-1.0, 1.0, size=reacher.ACTION_DIM)
        else:
            action = select_action(model, obs, cfg.exploration_sigma, rng)
        result = env.step(action)
        # the horizon is a time limit, not a true terminal: keep bootstrapping
        buffer.add(obs, action, result.dense_reward, result.observation, False)
        obs = None if result.done else result.observation
        if t >= start_steps:
            train_step(model, buffer, cfg, rng)
    return model, evals, buffer
