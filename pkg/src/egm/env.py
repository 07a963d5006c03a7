"""Planar articulated-chain motion-tracking environment.

Joints are fixed-base, decoupled second-order systems driven by PD
controllers toward target joint positions:

    I_i * acc_i = tau_i - c_i * vel_i + d_i(t)

integrated with semi-implicit Euler at ``substeps`` physics steps per
control step (the PD law runs at the physics rate, like a motor driver).
Keypoints are the link ends of the planar chain. Stage 2 adds domain
randomization, scheduled torque impulses ("pushes"), observation noise
and sharper rewards with heavier penalties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError

TERMINATION_RAD = 1.5
REWARD_EXP_CAP = 700.0  # keeps exp(-x) strictly positive


def _vec(value, n, name):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (n,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite")
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class ChainModel:
    n_joints: int = 5
    link_lengths: tuple = 1.0
    inertias: tuple = 0.05
    damping: tuple = 0.1
    torque_limits: tuple = 20.0
    kp: tuple = 30.0
    kd: tuple = 1.0
    dt: float = 0.002
    substeps: int = 20
    n_upper: int = 2

    def __post_init__(self):
        n = int(self.n_joints)
        if n < 1:
            raise ValidationError("n_joints must be >= 1")
        for f in ("link_lengths", "inertias", "damping", "torque_limits", "kp", "kd"):
            object.__setattr__(self, f, _vec(getattr(self, f), n, f))
        for f in ("link_lengths", "inertias", "torque_limits"):
            if min(getattr(self, f)) <= 0:
                raise ValidationError(f"{f} must be positive")
        for f in ("damping", "kp", "kd"):
            if min(getattr(self, f)) < 0:
                raise ValidationError(f"{f} must be non-negative")
        if not 0 < self.dt <= 0.05:
            raise ValidationError("dt must lie in (0, 0.05]")
        if int(self.substeps) < 1:
            raise ValidationError("substeps must be >= 1")
        if not 0 <= self.n_upper <= n:
            raise ValidationError("n_upper must lie in [0, n_joints]")

    @property
    def upper_joints(self):
        return tuple(range(self.n_upper))

    @property
    def lower_joints(self):
        return tuple(range(self.n_upper, self.n_joints))

    def array(self, name):
        return np.array(getattr(self, name))


@dataclass(frozen=True)
class DrConfig:
    """Multiplicative ranges for physical parameters plus pushes and sensor noise."""

    inertia: tuple = (1.0, 1.0)
    damping: tuple = (1.0, 1.0)
    pd_gains: tuple = (1.0, 1.0)
    torque_limits: tuple = (1.0, 1.0)
    push_interval_s: float = 0.0  # 0 disables pushes
    push_impulse: float = 0.0  # N*m*s
    obs_noise_std: float = 0.0

    def __post_init__(self):
        for f in ("inertia", "damping", "pd_gains", "torque_limits"):
            lo, hi = (float(x) for x in getattr(self, f))
            if not (0 < lo <= 1.0 <= hi) or not np.isfinite(hi):
                raise ValidationError(f"{f} range must be positive and bracket 1.0")
            object.__setattr__(self, f, (lo, hi))
        if self.push_interval_s < 0 or self.push_impulse < 0 or self.obs_noise_std < 0:
            raise ValidationError("push and noise settings must be non-negative")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def stage2(cls):
        return cls(inertia=(0.7, 1.3), damping=(0.5, 1.5), pd_gains=(0.8, 1.2),
                   torque_limits=(0.8, 1.2), push_interval_s=2.0, push_impulse=0.05,
                   obs_noise_std=0.01)

    @property
    def is_identity(self):
        return all(getattr(self, f) == (1.0, 1.0)
                   for f in ("inertia", "damping", "pd_gains", "torque_limits"))


PHYS_FIELDS = ("inertia", "damping", "kp", "kd", "torque_limit")


@dataclass(frozen=True, eq=False)
class PhysParams:
    """Per-episode multipliers on the nominal chain parameters, one row per joint."""

    scale: np.ndarray  # (5, n_joints) in PHYS_FIELDS order

    @classmethod
    def nominal(cls, n_joints):
        return cls(np.ones((len(PHYS_FIELDS), n_joints)))

    def values(self, model):
        s = self.scale
        return {
            "inertia": model.array("inertias") * s[0],
            "damping": model.array("damping") * s[1],
            "kp": model.array("kp") * s[2],
            "kd": model.array("kd") * s[3],
            "torque_limit": model.array("torque_limits") * s[4],
        }


def randomize(model, cfg, rng):
    """Independent uniform multiplier per parameter and joint."""
    n = model.n_joints
    ranges = (cfg.inertia, cfg.damping, cfg.pd_gains, cfg.pd_gains, cfg.torque_limits)
    scale = np.empty((len(PHYS_FIELDS), n))
    for row, (lo, hi) in enumerate(ranges):
        scale[row] = rng.uniform(lo, hi, n)
    return PhysParams(scale)


@dataclass(frozen=True)
class RewardConfig:
    alpha: tuple = (2.0, 0.2, 2.0)  # sharpness of (pos, vel, keypoint) terms
    track_weights: tuple = (1.0, 0.5, 1.0)
    penalty_weights: tuple = (0.01, 0.001, 0.0)  # (action rate, torque, smoothness)

    @classmethod
    def stage(cls, stage):
        if stage == 1:
            return cls()
        if stage == 2:
            return cls(alpha=(5.0, 0.5, 5.0), penalty_weights=(0.05, 0.005, 0.01))
        raise ConfigError(f"reward stage must be 1 or 2, got {stage}")


@dataclass(frozen=True)
class ObsConfig:
    horizons: tuple = (1, 2, 5)  # control steps ahead for goal positions
    vel_scale: float = 0.1
    goal_scale: float = 4.0
    privileged_scale: float = 1.0 / 0.3


@dataclass(frozen=True, eq=False)
class RewardTerms:
    r_pos: np.ndarray
    r_vel: np.ndarray
    r_key: np.ndarray
    p_action_rate: np.ndarray
    p_torque: np.ndarray
    p_smooth: np.ndarray
    tracking: np.ndarray
    total: np.ndarray


@dataclass(frozen=True, eq=False)
class Observation:
    proprio: np.ndarray  # (B, 3n): positions, scaled velocities, last target relative to position
    goal: np.ndarray  # (B, n*len(horizons) + n)
    privileged: np.ndarray  # (B, 5n)

    def teacher(self):
        return np.concatenate([self.proprio, self.goal, self.privileged], axis=-1)

    def base(self):
        return np.concatenate([self.proprio, self.goal], axis=-1)


@dataclass(frozen=True, eq=False)
class EnvState:
    theta: np.ndarray
    theta_dot: np.ndarray
    t: int
    ref_positions: np.ndarray
    ref_velocities: np.ndarray
    phys: PhysParams
    last_action: np.ndarray


def obs_dims(model, obs_cfg=ObsConfig()):
    n = model.n_joints
    return {"proprio": 3 * n, "goal": n * len(obs_cfg.horizons) + n,
            "privileged": len(PHYS_FIELDS) * n}


def pd_torque(target, theta, theta_dot, kp, kd, limit):
    """``clamp(kp * (target - theta) - kd * theta_dot, -limit, limit)``."""
    return np.clip(kp * (np.subtract(target, theta)) - kd * np.asarray(theta_dot), -limit, limit)


def fk_keypoints(theta, link_lengths):
    """Planar link-end positions ``(..., n, 2)`` for joint angles ``(..., n)``."""
    theta = np.asarray(theta, dtype=np.float64)
    lengths = np.asarray(link_lengths, dtype=np.float64)
    if theta.shape[-1] != lengths.shape[-1]:
        raise ShapeError(f"{theta.shape[-1]} angles for {lengths.shape[-1]} links")
    cum = np.cumsum(theta, axis=-1)
    x = np.cumsum(lengths * np.cos(cum), axis=-1)
    y = np.cumsum(lengths * np.sin(cum), axis=-1)
    return np.stack([x, y], axis=-1)


def compute_reward(theta, theta_dot, ref_pos, ref_vel, action, last_action, prev_action,
                   torque_sq, link_lengths, cfg):
    """Tracking terms ``exp(-alpha * squared error)`` minus weighted penalties."""
    a_pos, a_vel, a_key = cfg.alpha
    e_pos = np.sum((theta - ref_pos) ** 2, axis=-1)
    e_vel = np.sum((theta_dot - ref_vel) ** 2, axis=-1)
    kp = fk_keypoints(theta, link_lengths)
    kr = fk_keypoints(ref_pos, link_lengths)
    e_key = np.sum((kp - kr) ** 2, axis=(-1, -2))
    r_pos = np.exp(-np.minimum(a_pos * e_pos, REWARD_EXP_CAP))
    r_vel = np.exp(-np.minimum(a_vel * e_vel, REWARD_EXP_CAP))
    r_key = np.exp(-np.minimum(a_key * e_key, REWARD_EXP_CAP))
    p_rate = np.sum((action - last_action) ** 2, axis=-1)
    p_smooth = np.sum((action - 2 * last_action + prev_action) ** 2, axis=-1)
    w_pos, w_vel, w_key = cfg.track_weights
    tracking = w_pos * r_pos + w_vel * r_vel + w_key * r_key
    q_rate, q_torque, q_smooth = cfg.penalty_weights
    total = tracking - q_rate * p_rate - q_torque * torque_sq - q_smooth * p_smooth
    return RewardTerms(r_pos, r_vel, r_key, p_rate, torque_sq, p_smooth, tracking, total)


def integrate(theta, theta_dot, target, values, dt, substeps, impulse=None):
    """Advance one control step; returns ``(theta, theta_dot, mean normalized torque^2)``."""
    h = dt / substeps
    inertia, damping = values["inertia"], values["damping"]
    kp, kd, limit = values["kp"], values["kd"], values["torque_limit"]
    torque_sq = np.zeros(theta.shape[:-1])
    for s in range(substeps):
        tau = pd_torque(target, theta, theta_dot, kp, kd, limit)
        acc = tau - damping * theta_dot
        if s == 0 and impulse is not None:
            acc = acc + impulse / h
        theta_dot = theta_dot + h * acc / inertia
        theta = theta + h * theta_dot
        torque_sq = torque_sq + np.sum((tau / limit) ** 2, axis=-1)
    return theta, theta_dot, torque_sq / substeps


class TrackingEnv:
    """A batch of independent chain instances, each tracking its own reference.

    The batch is a loop-free vectorization: instances never interact, every
    per-instance quantity lives in row ``i`` of the state arrays.
    """

    def __init__(self, model, n_envs=1, stage=1, dr=None, reward_cfg=None, obs_cfg=None,
                 seed=0, termination=TERMINATION_RAD):
        self.model = model
        self.n_envs = int(n_envs)
        self.stage = stage
        self.dr = dr if dr is not None else (DrConfig.stage2() if stage == 2 else DrConfig.identity())
        self.reward_cfg = reward_cfg if reward_cfg is not None else RewardConfig.stage(stage)
        self.obs_cfg = obs_cfg or ObsConfig()
        self.termination = termination
        self.rng = np.random.default_rng(seed)
        n, B = model.n_joints, self.n_envs
        self.lengths_links = model.array("link_lengths")
        self.theta = np.zeros((B, n))
        self.theta_dot = np.zeros((B, n))
        self.t = np.zeros(B, dtype=np.int64)
        self.horizon = np.zeros(B, dtype=np.int64)
        self.last_action = np.zeros((B, n))
        self.prev_action = np.zeros((B, n))
        self.phys = [PhysParams.nominal(n) for _ in range(B)]
        self.scale = np.ones((B, len(PHYS_FIELDS), n))
        self.active = np.zeros(B, dtype=bool)
        self._ref_pos = np.zeros((B, 1, n))
        self._ref_vel = np.zeros((B, 1, n))
        self._push_every = 0
        if self.dr.push_interval_s > 0 and self.dr.push_impulse > 0:
            self._push_every = max(1, int(round(self.dr.push_interval_s / model.dt)))

    # -- helpers -----------------------------------------------------------

    def steps_per_frame(self, fps):
        k = 1.0 / (fps * self.model.dt)
        if abs(k - round(k)) > 1e-9 or round(k) < 1:
            raise ConfigError(f"control step {self.model.dt} s does not divide the frame period 1/{fps} s")
        return int(round(k))

    def _values(self):
        s = self.scale
        return {
            "inertia": self.model.array("inertias") * s[:, 0],
            "damping": self.model.array("damping") * s[:, 1],
            "kp": self.model.array("kp") * s[:, 2],
            "kd": self.model.array("kd") * s[:, 3],
            "torque_limit": self.model.array("torque_limits") * s[:, 4],
        }

    def _ensure_capacity(self, steps):
        need = steps + max(self.obs_cfg.horizons) + 1
        if self._ref_pos.shape[1] < need:
            B, old, n = self._ref_pos.shape
            grow_p = np.zeros((B, need, n))
            grow_v = np.zeros((B, need, n))
            grow_p[:, :old] = self._ref_pos
            grow_v[:, :old] = self._ref_vel
            self._ref_pos, self._ref_vel = grow_p, grow_v

    def reset(self, i, positions, velocities, fps, phys=None):
        """Start instance ``i`` at the first reference frame; returns the episode length in steps."""
        positions = np.asarray(positions, dtype=np.float64)
        velocities = np.asarray(velocities, dtype=np.float64)
        if positions.shape[-1] != self.model.n_joints:
            raise ShapeError(f"reference has {positions.shape[-1]} joints, model has {self.model.n_joints}")
        k = self.steps_per_frame(fps)
        L = len(positions)
        steps = (L - 1) * k
        # linear interpolation of the frame sequence onto control steps
        grid = np.arange(steps + 1) / k
        idx = np.minimum(np.floor(grid).astype(int), L - 1)
        nxt = np.minimum(idx + 1, L - 1)
        frac = (grid - idx)[:, None]
        ref_p = positions[idx] * (1 - frac) + positions[nxt] * frac
        ref_v = velocities[idx] * (1 - frac) + velocities[nxt] * frac
        self._ensure_capacity(steps)
        self._ref_pos[i, : steps + 1] = ref_p
        self._ref_pos[i, steps + 1:] = ref_p[-1]
        self._ref_vel[i, : steps + 1] = ref_v
        self._ref_vel[i, steps + 1:] = 0.0
        if phys is None:
            phys = randomize(self.model, self.dr, self.rng) if not self.dr.is_identity else \
                PhysParams.nominal(self.model.n_joints)
        self.phys[i] = phys
        self.scale[i] = phys.scale
        self.theta[i] = ref_p[0]
        self.theta_dot[i] = ref_v[0]
        self.last_action[i] = ref_p[0]
        self.prev_action[i] = ref_p[0]
        self.t[i] = 0
        self.horizon[i] = steps
        self.active[i] = True
        return steps

    def state(self, i):
        h = self.horizon[i]
        return EnvState(self.theta[i].copy(), self.theta_dot[i].copy(), int(self.t[i]),
                        self._ref_pos[i, : h + 1].copy(), self._ref_vel[i, : h + 1].copy(),
                        self.phys[i], self.last_action[i].copy())

    def reference_at(self, offset=0):
        rows = np.arange(self.n_envs)
        return self._ref_pos[rows, self.t + offset], self._ref_vel[rows, self.t + offset]

    # -- observation ---------------------------------------------------------

    def observe(self):
        cfg = self.obs_cfg
        theta, theta_dot = self.theta, self.theta_dot
        if self.dr.obs_noise_std > 0:
            theta = theta + self.rng.normal(0.0, self.dr.obs_noise_std, theta.shape)
            theta_dot = theta_dot + self.rng.normal(0.0, self.dr.obs_noise_std, theta.shape)
        rows = np.arange(self.n_envs)
        goal = [(self._ref_pos[rows, self.t + h] - theta) * cfg.goal_scale for h in cfg.horizons]
        goal.append((self._ref_vel[rows, self.t + 1] - theta_dot) * cfg.vel_scale)
        proprio = np.concatenate([theta, theta_dot * cfg.vel_scale, self.last_action - theta], axis=-1)
        privileged = ((self.scale - 1.0) * cfg.privileged_scale).reshape(self.n_envs, -1)
        return Observation(proprio, np.concatenate(goal, axis=-1), privileged)

    def residual_targets(self, obs, residual, action_scale):
        """Target positions = next reference frame (recovered from ``obs``) + scaled residual."""
        n = self.model.n_joints
        theta_meas = obs.proprio[:, :n]
        ref_next = theta_meas + obs.goal[:, :n] / self.obs_cfg.goal_scale
        return ref_next + action_scale * residual

    # -- dynamics ------------------------------------------------------------

    def step(self, action):
        """Apply target joint positions ``(B, n)`` to every active instance.

        Returns ``(obs, reward_terms, done, info)``; ``info`` holds
        ``terminated`` and ``truncated`` masks. Finished instances keep their
        state until :meth:`reset`.
        """
        action = np.asarray(action, dtype=np.float64)
        if action.shape != self.theta.shape:
            raise ShapeError(f"action shape {action.shape}, expected {self.theta.shape}")
        impulse = None
        if self._push_every:
            due = ((self.t + 1) % self._push_every == 0) & self.active
            if due.any():
                impulse = np.zeros_like(self.theta)
                rows = np.flatnonzero(due)
                joints = self.rng.integers(self.model.n_joints, size=len(rows))
                mag = self.dr.push_impulse * self.rng.uniform(0.5, 1.0, len(rows))
                impulse[rows, joints] = mag * self.rng.choice([-1.0, 1.0], len(rows))
        theta, theta_dot, torque_sq = integrate(self.theta, self.theta_dot, action, self._values(),
                                                self.model.dt, self.model.substeps, impulse)
        act = self.active
        self.theta = np.where(act[:, None], theta, self.theta)
        self.theta_dot = np.where(act[:, None], theta_dot, self.theta_dot)
        self.t = self.t + act
        ref_p, ref_v = self.reference_at()
        terms = compute_reward(self.theta, self.theta_dot, ref_p, ref_v, action, self.last_action,
                               self.prev_action, torque_sq, self.lengths_links, self.reward_cfg)
        self.prev_action = np.where(act[:, None], self.last_action, self.prev_action)
        self.last_action = np.where(act[:, None], action, self.last_action)
        terminated = act & np.any(np.abs(self.theta - ref_p) > self.termination, axis=-1)
        truncated = act & ~terminated & (self.t >= self.horizon)
        done = terminated | truncated
        self.active = act & ~done
        obs = self.observe()
        return obs, terms, done, {"terminated": terminated, "truncated": truncated}
