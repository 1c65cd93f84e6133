"""Continuous generative flow networks trained by log-space flow matching.

The flow network outputs a log edge flow ``F_log(s, a)``. Actions are chosen by
drawing ``M`` uniform candidates and sampling one in proportion to its flow.
Training matches, for every visited state, the estimated inflow (through parents
predicted by a retrieval network) against outflow plus scaled terminal reward.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import env as reacher
from .buffer import Batch, ReplayBuffer, Transition
from .nn import AdamState, GradientBundle, MLPParams, adam_step, init_mlp, mlp_backward, mlp_forward, mse_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActionSpace:
    low: tuple[float, ...] = (-1.0, -1.0)
    high: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self):
        if len(self.low) != len(self.high) or not self.low:
            raise ValueError("low and high must have the same non-zero length")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError(f"each dimension needs low < high, got {self.low} / {self.high}")

    @property
    def dimension(self) -> int:
        return len(self.low)

    @property
    def measure(self) -> float:
        return float(np.prod(np.subtract(self.high, self.low)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        return rng.uniform(self.low, self.high, size=(n, self.dimension))


def sample_actions_uniform(space: ActionSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    return space.sample(n, rng)


@dataclass
class CFlowNetsConfig:
    M: int = 100
    K: int = 100
    # reward scale; None means "use K"
    lam: float | None = None
    epsilon: float = 1.0
    batch_size: int = 256
    replay_capacity: int = 100_000
    lr: float = 3e-3
    eval_freq: int = 5000
    horizon: int = 50
    retrieval_hidden: tuple[int, ...] = (256, 256, 256)
    flow_hidden: tuple[int, ...] = (256, 256)
    updates_per_episode: int = 1
    finetune_retrieval: bool = False
    finetune_steps: int = 10
    retrieval_lr: float = 3e-3
    retrieval_batch: int = 256
    pretrain_samples: int = 50_000
    pretrain_epochs: int = 60
    # include sampled outflows of terminal states in the outflow term
    terminal_outflow: bool = True
    # append step_index / horizon to the flow network's state input
    time_feature: bool = False

    def __post_init__(self):
        if self.M < 1 or self.K < 1 or self.batch_size < 1:
            raise ValueError("M, K and batch_size must be >= 1")
        if self.epsilon <= 0 or (self.lam is not None and self.lam <= 0):
            raise ValueError("epsilon and lambda must be positive")
        self.retrieval_hidden = tuple(self.retrieval_hidden)
        self.flow_hidden = tuple(self.flow_hidden)

    @property
    def reward_scale(self) -> float:
        return float(self.K if self.lam is None else self.lam)

    @property
    def flow_obs_dim(self) -> int:
        return reacher.OBS_DIM + int(self.time_feature)


def flow_state(obs, step: int, horizon: int, time_feature: bool) -> np.ndarray:
    """State seen by the flow network: the observation, optionally with the elapsed-time fraction."""
    obs = np.asarray(obs, dtype=np.float64)
    if not time_feature:
        return obs
    return np.append(obs, step / horizon)


@dataclass
class FlowNetwork:
    net: MLPParams

    @classmethod
    def init(cls, obs_dim, action_dim, hidden, rng) -> "FlowNetwork":
        return cls(init_mlp([obs_dim + action_dim, *hidden, 1], rng))

    def log_flow(self, obs, actions) -> np.ndarray:
        """Log flows of ``actions`` (n x d) taken at ``obs`` (one state or n states)."""
        actions = np.atleast_2d(actions)
        obs = np.broadcast_to(obs, (actions.shape[0], np.shape(obs)[-1]))
        out, _ = mlp_forward(self.net, np.concatenate([obs, actions], axis=1))
        return out[:, 0]


@dataclass
class RetrievalNetwork:
    """Predicts the parent observation of ``(next_obs, action)``.

    With ``residual`` the network output is added to ``next_obs``.
    """

    net: MLPParams
    residual: bool = True

    @classmethod
    def init(cls, obs_dim, action_dim, hidden, rng, residual=True) -> "RetrievalNetwork":
        return cls(init_mlp([obs_dim + action_dim, *hidden, obs_dim], rng), residual)

    def _forward(self, next_obs, actions):
        x = np.concatenate([next_obs, actions], axis=1)
        out, cache = mlp_forward(self.net, x)
        if self.residual:
            out = out + next_obs
        return out, cache

    def predict(self, next_obs, actions) -> np.ndarray:
        actions = np.atleast_2d(actions)
        next_obs = np.broadcast_to(next_obs, (actions.shape[0], np.shape(next_obs)[-1]))
        return self._forward(next_obs, actions)[0]


@dataclass
class ActionProbabilityBuffer:
    actions: np.ndarray
    log_flows: np.ndarray
    probabilities: np.ndarray


def logsumexp(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(x, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    out = np.log(np.sum(np.exp(x - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis)


def probability_buffer_from_log_flows(actions, log_flows) -> ActionProbabilityBuffer:
    log_flows = np.asarray(log_flows, dtype=np.float64)
    if not np.all(np.isfinite(log_flows)):
        raise ValueError("non-finite flow output")
    probs = np.exp(log_flows - logsumexp(log_flows))
    probs /= probs.sum()
    return ActionProbabilityBuffer(np.asarray(actions), log_flows, probs)


def build_action_probability_buffer(flow: FlowNetwork, obs, space: ActionSpace, M: int,
                                    rng: np.random.Generator) -> ActionProbabilityBuffer:
    actions = space.sample(M, rng)
    return probability_buffer_from_log_flows(actions, flow.log_flow(obs, actions))


def sample_action(buffer: ActionProbabilityBuffer, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(len(buffer.probabilities), p=buffer.probabilities)
    return buffer.actions[idx]


def greedy_policy(flow: FlowNetwork, space: ActionSpace, M: int, horizon: int = 50, time_feature: bool = False):
    """Evaluation policy ``(obs, rng, step) -> action``; samples exactly as in training."""
    if M < 1:
        raise ValueError("M must be >= 1")

    def policy(obs, rng, step=0):
        state = flow_state(obs, step, horizon, time_feature)
        return sample_action(build_action_probability_buffer(flow, state, space, M, rng), rng)

    return policy


def collect_episode(env: reacher.ReacherEnv, flow: FlowNetwork, space: ActionSpace, M: int,
                    rng: np.random.Generator, time_feature: bool = False) -> list[Transition]:
    """One episode of flow-proportional actions.

    With ``time_feature`` the stored observations carry the elapsed-time fraction
    as a trailing component.
    """
    obs = flow_state(env.reset(rng), 0, env.horizon, time_feature)
    trajectory = []
    for t in range(env.horizon):
        action = sample_action(build_action_probability_buffer(flow, obs, space, M, rng), rng)
        result = env.step(action)
        next_obs = flow_state(result.observation, t + 1, env.horizon, time_feature)
        trajectory.append(Transition(obs, action, result.sparse_reward, next_obs, result.done))
        obs = next_obs
        if result.done:
            break
    return trajectory


# -- flow matching ---------------------------------------------------------

def compute_log_inflow(flow: FlowNetwork, retrieval: RetrievalNetwork, obs, actions, epsilon: float) -> float:
    actions = np.atleast_2d(actions)
    parents = retrieval.predict(obs, actions)
    f = flow.log_flow(parents, actions)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite flow output")
    return float(logsumexp(np.concatenate([[math.log(epsilon)], f])))


def compute_log_outflow(flow: FlowNetwork, obs, actions, reward: float, lam: float, epsilon: float) -> float:
    if reward < 0 or not math.isfinite(reward):
        raise ValueError("reward must be finite and non-negative")
    actions = np.atleast_2d(actions)
    f = flow.log_flow(obs, actions)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite flow output")
    return float(logsumexp(np.concatenate([[math.log(epsilon + lam * reward)], f])))


def flow_matching_loss(flow: FlowNetwork, retrieval: RetrievalNetwork, batch: Batch, cfg: CFlowNetsConfig,
                       rng: np.random.Generator | None = None, actions=None):
    """Mean squared log-inflow minus log-outflow over the batch's next states.

    ``actions`` (B x K x d) freezes the K sampled actions; otherwise they are
    drawn uniformly from ``[-1, 1]^d`` with ``rng``. The same actions serve the
    inflow and the outflow of a state. Gradients reach only the flow network.
    """
    states = np.asarray(batch.next_obs, dtype=np.float64)
    rewards = np.asarray(batch.reward, dtype=np.float64)
    B = states.shape[0]
    if B == 0:
        raise ValueError("empty minibatch")
    obs_dim = states.shape[1]
    if actions is None:
        d = flow.net.in_dim - obs_dim
        actions = rng.uniform(-1.0, 1.0, size=(B, cfg.K, d))
    actions = np.asarray(actions, dtype=np.float64)
    K, d = actions.shape[1], actions.shape[2]
    flat_actions = actions.reshape(B * K, d)
    rep_states = np.repeat(states, K, axis=0)
    if cfg.time_feature:
        # the parent is one step earlier; only the physical part needs predicting
        parents = np.concatenate([retrieval.predict(rep_states[:, :-1], flat_actions),
                                  rep_states[:, -1:] - 1.0 / cfg.horizon], axis=1)
    else:
        parents = retrieval.predict(rep_states, flat_actions)
    x = np.concatenate([
        np.concatenate([parents, flat_actions], axis=1),
        np.concatenate([rep_states, flat_actions], axis=1),
    ])
    out, cache = mlp_forward(flow.net, x)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite flow output")
    f_in = out[: B * K, 0].reshape(B, K)
    f_out = out[B * K:, 0].reshape(B, K)
    if not cfg.terminal_outflow:
        f_out = np.where(np.asarray(batch.done, dtype=bool)[:, None], -np.inf, f_out)
    log_eps = np.full((B, 1), math.log(cfg.epsilon))
    log_base_out = np.log(cfg.epsilon + cfg.reward_scale * rewards)[:, None]
    lin = logsumexp(np.concatenate([log_eps, f_in], axis=1))
    lout = logsumexp(np.concatenate([log_base_out, f_out], axis=1))
    delta = lin - lout
    loss = float(np.mean(delta * delta))
    coef = (2.0 / B) * delta[:, None]
    g_in = coef * np.exp(f_in - lin[:, None])
    g_out = -coef * np.exp(f_out - lout[:, None])
    grad_out = np.concatenate([g_in.reshape(-1), g_out.reshape(-1)])[:, None]
    return loss, mlp_backward(flow.net, cache, grad_out)


# -- retrieval network -----------------------------------------------------

def random_policy_dataset(config: reacher.ArmConfig, n: int, rng: np.random.Generator) -> Batch:
    """``n`` transitions from uniformly random actions in the given arm."""
    env = reacher.ReacherEnv(config)
    rows = []
    obs = env.reset(rng)
    while len(rows) < n:
        action = rng.uniform(-1.0, 1.0, size=reacher.ACTION_DIM)
        result = env.step(action)
        rows.append(Transition(obs, action, result.sparse_reward, result.observation, result.done))
        obs = env.reset(rng) if result.done else result.observation
    return Batch.from_transitions(rows)


def _retrieval_grad(retrieval: RetrievalNetwork, next_obs, actions, parents):
    pred, cache = retrieval._forward(next_obs, actions)
    loss, g = mse_loss(pred, parents)
    return loss, mlp_backward(retrieval.net, cache, g)


def retrieval_mse(retrieval: RetrievalNetwork, data: Batch) -> float:
    return mse_loss(retrieval.predict(data.next_obs, data.action), data.obs)[0]


def pretrain_retrieval(dataset: Batch, cfg: CFlowNetsConfig, rng: np.random.Generator,
                       holdout: float = 0.1, patience: int = 5):
    """Fit the retrieval network on ``dataset``; returns ``(network, held-out MSE)``.

    Training stops when the held-out MSE has not improved by 1% for ``patience``
    epochs, or after ``cfg.pretrain_epochs`` epochs.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty retrieval dataset")
    obs_dim, act_dim = dataset.obs.shape[1], dataset.action.shape[1]
    perm = rng.permutation(n)
    n_hold = int(round(holdout * n)) if n > 1 else 0
    hold = Batch(*(a[perm[:n_hold]] for a in dataset))
    train = Batch(*(a[perm[n_hold:]] for a in dataset))
    if n_hold == 0:
        hold = train
    net = RetrievalNetwork.init(obs_dim, act_dim, cfg.retrieval_hidden, rng)
    opt = AdamState.for_params(net.net, lr=cfg.retrieval_lr)
    best, stale = math.inf, 0
    m = len(train)
    bs = min(cfg.retrieval_batch, m)
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(m)
        for start in range(0, m, bs):
            idx = order[start:start + bs]
            _, grads = _retrieval_grad(net, train.next_obs[idx], train.action[idx], train.obs[idx])
            params, opt = adam_step(net.net, grads, opt)
            net = RetrievalNetwork(params, net.residual)
        score = retrieval_mse(net, hold)
        log.debug("retrieval epoch %d held-out mse %.3e", epoch, score)
        if score < best * 0.99:
            best, stale = score, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return net, retrieval_mse(net, hold)


def fine_tune_retrieval(retrieval: RetrievalNetwork, buffer: ReplayBuffer, steps: int, cfg: CFlowNetsConfig,
                        rng: np.random.Generator, opt: AdamState | None = None):
    """Continue MSE training on minibatches from ``buffer``; returns ``(network, optimizer state)``."""
    if len(buffer) == 0:
        raise ValueError("cannot fine-tune on an empty buffer")
    if opt is None:
        opt = AdamState.for_params(retrieval.net, lr=cfg.retrieval_lr)
    for _ in range(steps):
        b = buffer.sample(cfg.retrieval_batch, rng)
        n = retrieval.net.out_dim
        _, grads = _retrieval_grad(retrieval, b.next_obs[:, :n], b.action, b.obs[:, :n])
        params, opt = adam_step(retrieval.net, grads, opt)
        retrieval = RetrievalNetwork(params, retrieval.residual)
    return retrieval, opt


# -- training loop ---------------------------------------------------------

@dataclass
class CFlowNetsModel:
    flow: FlowNetwork
    retrieval: RetrievalNetwork
    flow_opt: AdamState
    retrieval_opt: AdamState
    space: ActionSpace = field(default_factory=ActionSpace)

    @classmethod
    def create(cls, cfg: CFlowNetsConfig, retrieval: RetrievalNetwork, rng: np.random.Generator,
               space: ActionSpace | None = None) -> "CFlowNetsModel":
        space = space or ActionSpace()
        flow = FlowNetwork.init(cfg.flow_obs_dim, space.dimension, cfg.flow_hidden, rng)
        return cls(flow, retrieval, AdamState.for_params(flow.net, lr=cfg.lr),
                   AdamState.for_params(retrieval.net, lr=cfg.retrieval_lr), space)

    def policy(self, M: int, horizon: int = 50, time_feature: bool = False):
        return greedy_policy(self.flow, self.space, M, horizon, time_feature)


def cflownets_train(arm: reacher.ArmConfig, cfg: CFlowNetsConfig, model: CFlowNetsModel, budget: int,
                    rng: np.random.Generator, eval_hook=None, buffer: ReplayBuffer | None = None):
    """Run the collect / store / fine-tune / match loop for ``budget`` env steps.

    ``eval_hook(timestep, model)`` is called at every multiple of ``cfg.eval_freq``
    in ``[0, budget]`` (nothing when the budget is zero); its results form the
    returned eval log. Returns ``(model, eval_log, buffer)``.
    """
    if buffer is None:
        buffer = ReplayBuffer(cfg.replay_capacity, cfg.flow_obs_dim, model.space.dimension)
    env = reacher.ReacherEnv(arm.replace(horizon=cfg.horizon))
    evals = []
    t = 0
    next_eval = 0
    while budget > 0 and t <= budget:
        while eval_hook is not None and t >= next_eval and next_eval <= budget:
            evals.append(eval_hook(next_eval, model))
            next_eval += cfg.eval_freq
        if t == budget:
            break
        episode = collect_episode(env, model.flow, model.space, cfg.M, rng, cfg.time_feature)
        episode = episode[: budget - t]
        buffer.extend(episode)
        t += len(episode)
        if cfg.finetune_retrieval and cfg.finetune_steps > 0:
            model.retrieval, model.retrieval_opt = fine_tune_retrieval(
                model.retrieval, buffer, cfg.finetune_steps, cfg, rng, model.retrieval_opt)
        for _ in range(cfg.updates_per_episode):
            batch = buffer.sample(cfg.batch_size, rng)
            loss, grads = flow_matching_loss(model.flow, model.retrieval, batch, cfg, rng)
            params, model.flow_opt = adam_step(model.flow.net, grads, model.flow_opt)
            model.flow = FlowNetwork(params)
        log.debug("t=%d flow-matching loss %.4f", t, loss)
    return model, evals, buffer
