"""Planar two-link reacher with injectable hardware faults.

Everything here is a pure function of its inputs. ``ReacherEnv`` is a thin
stateful wrapper used by the trainers.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

OBS_DIM = 10
ACTION_DIM = 2


class FaultKind(str, Enum):
    NONE = "none"
    REDUCED_ROM = "reduced-rom"
    INCREASED_DAMPING = "increased-damping"
    ACTUATOR_DAMAGE = "actuator-damage"
    STRUCTURAL_DAMAGE = "structural"


# parameter name carried by each fault kind
_FAULT_PARAM = {
    FaultKind.NONE: None,
    FaultKind.REDUCED_ROM: "joint_range",
    FaultKind.INCREASED_DAMPING: "damping",
    FaultKind.ACTUATOR_DAMAGE: "gear",
    FaultKind.STRUCTURAL_DAMAGE: "bend_angle",
}


class UnreachableTargetError(RuntimeError):
    """Raised when no reachable target is found within the retry budget."""


@dataclass(frozen=True)
class ArmConfig:
    link_lengths: tuple[float, float] = (0.1, 0.1)
    # joint 0 is the shoulder, joint 1 the elbow
    joint_ranges: tuple[tuple[float, float], tuple[float, float]] = ((-math.pi, math.pi), (-3.0, 3.0))
    damping: tuple[float, float] = (1.0, 1.0)
    gears: tuple[float, float] = (200.0, 200.0)
    bend_angle: float = 0.0
    inertia: tuple[float, float] = (0.05, 0.05)
    dt: float = 0.02
    horizon: int = 50
    torque_limit: float = 1.0
    omega_max: float = 8.0
    target_radius_range: tuple[float, float] = (0.05, 0.18)
    ctrl_cost_weight: float = 0.1
    sparse_reward_scale: float = 8.0
    # effective torque is gear / gear_divisor * torque_limit * action
    gear_divisor: float = 50.0

    def __post_init__(self):
        l1, l2 = self.link_lengths
        r_min, r_max = self.target_radius_range
        if l1 <= 0 or l2 <= 0:
            raise ValueError("link lengths must be positive")
        if self.dt <= 0 or self.horizon < 1:
            raise ValueError("dt must be positive and horizon >= 1")
        if not (0 <= r_min < r_max <= l1 + l2):
            raise ValueError(f"invalid target radius range {self.target_radius_range}")
        for lo, hi in self.joint_ranges:
            if not lo < hi:
                raise ValueError(f"invalid joint range ({lo}, {hi})")
        for name in ("damping", "gears", "inertia"):
            if any(v <= 0 for v in getattr(self, name)):
                raise ValueError(f"{name} entries must be positive")
        if self.torque_limit <= 0 or self.omega_max <= 0 or self.gear_divisor <= 0:
            raise ValueError("torque_limit, omega_max and gear_divisor must be positive")

    def replace(self, **changes) -> "ArmConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind = FaultKind.NONE
    value: object = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.kind is FaultKind.NONE:
            if self.value is not None:
                raise ValueError("fault 'none' takes no parameter")
        elif self.value is None:
            raise ValueError(f"fault {self.kind.value!r} requires a {_FAULT_PARAM[self.kind]} parameter")
        if self.kind is FaultKind.REDUCED_ROM:
            object.__setattr__(self, "value", tuple(float(v) for v in self.value))
        elif self.value is not None:
            object.__setattr__(self, "value", float(self.value))

    @classmethod
    def none(cls) -> "FaultSpec":
        return cls(FaultKind.NONE)

    @classmethod
    def reduced_rom(cls, joint_range=(-1.0, 1.0)) -> "FaultSpec":
        return cls(FaultKind.REDUCED_ROM, joint_range)

    @classmethod
    def increased_damping(cls, damping=5.0) -> "FaultSpec":
        return cls(FaultKind.INCREASED_DAMPING, damping)

    @classmethod
    def actuator_damage(cls, gear=100.0) -> "FaultSpec":
        return cls(FaultKind.ACTUATOR_DAMAGE, gear)

    @classmethod
    def structural_damage(cls, bend_angle=math.pi / 4) -> "FaultSpec":
        return cls(FaultKind.STRUCTURAL_DAMAGE, bend_angle)

    @classmethod
    def from_kind(cls, kind) -> "FaultSpec":
        """Fault of the given kind with its default severity."""
        kind = FaultKind(kind)
        return {
            FaultKind.NONE: cls.none,
            FaultKind.REDUCED_ROM: cls.reduced_rom,
            FaultKind.INCREASED_DAMPING: cls.increased_damping,
            FaultKind.ACTUATOR_DAMAGE: cls.actuator_damage,
            FaultKind.STRUCTURAL_DAMAGE: cls.structural_damage,
        }[kind]()

    def to_dict(self) -> dict:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"kind": self.kind.value, "value": value}

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        unknown = set(d) - {"kind", "value"}
        if unknown:
            raise ValueError(f"unknown fault keys: {sorted(unknown)}")
        return cls(FaultKind(d["kind"]), d.get("value"))


def apply_fault(base: ArmConfig, fault: FaultSpec) -> ArmConfig:
    """Return a copy of ``base`` with the attribute group of ``fault`` modified.

    Faults act on the elbow joint (joint 1) and the second link, except actuator
    damage which weakens both motors.
    """
    kind = FaultKind(fault.kind)
    if kind is FaultKind.NONE:
        return base
    if kind is FaultKind.REDUCED_ROM:
        lo, hi = fault.value
        if not lo < hi:
            raise ValueError(f"invalid joint range ({lo}, {hi})")
        return base.replace(joint_ranges=(base.joint_ranges[0], (lo, hi)))
    if kind is FaultKind.INCREASED_DAMPING:
        if fault.value <= 0:
            raise ValueError("damping must be positive")
        return base.replace(damping=(base.damping[0], fault.value))
    if kind is FaultKind.ACTUATOR_DAMAGE:
        if fault.value <= 0:
            raise ValueError("gear must be positive")
        return base.replace(gears=(fault.value, fault.value))
    if kind is FaultKind.STRUCTURAL_DAMAGE:
        if not math.isfinite(fault.value):
            raise ValueError("bend angle must be finite")
        return base.replace(bend_angle=fault.value)
    raise ValueError(f"unknown fault kind {fault.kind!r}")


@dataclass(frozen=True)
class EnvState:
    theta: np.ndarray
    omega: np.ndarray
    target: np.ndarray
    step_index: int = 0


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    dense_reward: float
    sparse_reward: float
    done: bool


def forward_kinematics(config: ArmConfig, theta) -> np.ndarray:
    l1, l2 = config.link_lengths
    t1, t2 = float(theta[0]), float(theta[1])
    outer = t1 + t2 + config.bend_angle
    return np.array([l1 * math.cos(t1) + l2 * math.cos(outer), l1 * math.sin(t1) + l2 * math.sin(outer)])


def _wrap_into(angle: float, lo: float, hi: float) -> float | None:
    """Shift ``angle`` by a multiple of 2*pi into [lo, hi], if possible."""
    tol = 1e-9
    k = math.ceil((lo - tol - angle) / (2 * math.pi))
    shifted = angle + 2 * math.pi * k
    if shifted <= hi + tol:
        return min(max(shifted, lo), hi)
    return None


def inverse_kinematics(config: ArmConfig, target) -> list[np.ndarray]:
    """All joint configurations inside the joint ranges that reach ``target``."""
    l1, l2 = config.link_lengths
    x, y = float(target[0]), float(target[1])
    r2 = x * x + y * y
    c = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if c > 1 + 1e-12 or c < -1 - 1e-12:
        return []
    c = min(1.0, max(-1.0, c))
    (lo1, hi1), (lo2, hi2) = config.joint_ranges
    solutions = []
    for phi in {math.acos(c), -math.acos(c)}:
        # phi is the relative angle of link 2 including the bend
        t2 = _wrap_into(phi - config.bend_angle, lo2, hi2)
        if t2 is None:
            continue
        t1 = math.atan2(y, x) - math.atan2(l2 * math.sin(phi), l1 + l2 * math.cos(phi))
        t1 = _wrap_into(t1, lo1, hi1)
        if t1 is None:
            continue
        solutions.append(np.array([t1, t2]))
    return solutions


def is_reachable(config: ArmConfig, target) -> bool:
    return bool(inverse_kinematics(config, target))


def reset(config: ArmConfig, rng: np.random.Generator, max_tries: int = 100_000) -> EnvState:
    lows = np.array([r[0] for r in config.joint_ranges])
    highs = np.array([r[1] for r in config.joint_ranges])
    theta = np.clip(np.zeros(2), lows, highs)
    r_min, r_max = config.target_radius_range
    for _ in range(max_tries):
        radius = rng.uniform(r_min, r_max)
        angle = rng.uniform(0.0, 2 * math.pi)
        target = np.array([radius * math.cos(angle), radius * math.sin(angle)])
        if is_reachable(config, target):
            return EnvState(theta=theta, omega=np.zeros(2), target=target, step_index=0)
    raise UnreachableTargetError(f"no reachable target after {max_tries} draws")


def observe(config: ArmConfig, state: EnvState) -> np.ndarray:
    th, om, tg = state.theta, state.omega, state.target
    d = tg - forward_kinematics(config, th)
    return np.array([
        math.cos(th[0]), math.sin(th[0]), math.cos(th[1]), math.sin(th[1]),
        tg[0], tg[1],
        om[0] / config.omega_max, om[1] / config.omega_max,
        d[0], d[1],
    ])


def fingertip_distance(config: ArmConfig, state: EnvState) -> float:
    return float(np.linalg.norm(state.target - forward_kinematics(config, state.theta)))


def dense_reward(config: ArmConfig, state_after: EnvState, action) -> float:
    a = np.asarray(action, dtype=float)
    return -fingertip_distance(config, state_after) - config.ctrl_cost_weight * float(a @ a)


def sparse_terminal_reward(config: ArmConfig, terminal_state: EnvState) -> float:
    return math.exp(-config.sparse_reward_scale * fingertip_distance(config, terminal_state))


def step(config: ArmConfig, state: EnvState, action) -> tuple[EnvState, StepResult]:
    """Advance one control step.

    Velocities use semi-implicit Euler with the damping term taken implicitly,
    so large damping-to-inertia ratios decay instead of oscillating.
    """
    action = np.asarray(action, dtype=float)
    if action.shape != (ACTION_DIM,) or not np.all(np.isfinite(action)):
        raise ValueError(f"action must be a finite 2-vector, got {action!r}")
    if not (np.all(np.isfinite(state.theta)) and np.all(np.isfinite(state.omega))):
        raise ValueError("non-finite state")
    if state.step_index >= config.horizon:
        raise ValueError("episode already finished")
    a = np.clip(action, -1.0, 1.0)
    gears = np.asarray(config.gears)
    inertia = np.asarray(config.inertia)
    damping = np.asarray(config.damping)
    torque = gears / config.gear_divisor * config.torque_limit * a
    omega = (state.omega + config.dt * torque / inertia) / (1.0 + config.dt * damping / inertia)
    omega = np.clip(omega, -config.omega_max, config.omega_max)
    theta = state.theta + config.dt * omega
    lows = np.array([r[0] for r in config.joint_ranges])
    highs = np.array([r[1] for r in config.joint_ranges])
    hit = (theta < lows) | (theta > highs)
    theta = np.clip(theta, lows, highs)
    omega = np.where(hit, 0.0, omega)
    new_state = EnvState(theta=theta, omega=omega, target=state.target, step_index=state.step_index + 1)
    done = new_state.step_index == config.horizon
    sparse = sparse_terminal_reward(config, new_state) if done else 0.0
    result = StepResult(
        observation=observe(config, new_state),
        dense_reward=dense_reward(config, new_state, a),
        sparse_reward=sparse,
        done=done,
    )
    return new_state, result


@dataclass
class ReacherEnv:
    """Stateful convenience wrapper around :func:`reset` and :func:`step`."""

    config: ArmConfig = field(default_factory=ArmConfig)
    state: EnvState | None = None

    @property
    def horizon(self) -> int:
        return self.config.horizon

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = reset(self.config, rng)
        return observe(self.config, self.state)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state, result = step(self.config, self.state, action)
        return result

    def distance(self) -> float:
        return fingertip_distance(self.config, self.state)
