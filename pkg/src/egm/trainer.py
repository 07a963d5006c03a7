"""PPO teacher training, stage orchestration and DAgger distillation.

The teacher outputs a residual on top of the next reference frame; the
environment receives ``reference_next + action_scale * residual`` as PD
targets. Episodes are seeded by the bin sampler and every finished episode
reports its composite error back to the bin it started from.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, minimum, no_grad
from .cdmoe import CdmoePolicy, HistoryBuffer, PlainMoE, StudentPolicy, matched_plain_moe
from .env import ChainModel, DrConfig, ObsConfig, RewardConfig, TrackingEnv, fk_keypoints, obs_dims
from .errors import ConfigError, NumericalError, ValidationError
from .motion import extract_window
from .nn import MLP, Adam, Module, load_archive, param, save_params
from .sampler import EpisodeErrors

LOG_2PI = math.log(2.0 * math.pi)
LOG_FIELDS = ("step", "stage", "mean_reward", "mean_tracking", "mean_mpkpe", "lambda", "tau",
              "clip_fraction", "kl", "pg_loss", "v_loss", "entropy", "episodes")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam_gae: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 512
    lr: float = 3e-4
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 1.0
    total_steps: int = 200_000
    n_envs: int = 16
    horizon: int = 64
    action_scale: float = 0.5
    log_std_init: float = -1.0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValidationError("gamma must lie in [0, 1)")
        if not 0 <= self.lam_gae <= 1:
            raise ValidationError("lam_gae must lie in [0, 1]")
        if not self.clip_eps > 0:
            raise ValidationError("clip_eps must be positive")
        for name in ("epochs", "minibatch", "total_steps", "n_envs", "horizon"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("lr", "action_scale", "max_grad_norm"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.ent_coef < 0 or self.vf_coef < 0:
            raise ValidationError("loss coefficients must be non-negative")


@dataclass(frozen=True)
class DistillConfig:
    H: int = 10
    d_hist: int = 16
    iterations: int = 20
    beta_decay_iters: float = 20.0  # beta = max(0, 1 - it / beta_decay_iters); 0 keeps beta at 1
    steps_per_iter: int = 4096
    epochs: int = 4
    minibatch: int = 512
    lr: float = 1e-3
    buffer_cap: int = 60_000
    loss_tolerance: float = 1e3  # abort when the imitation loss exceeds this
    n_envs: int = 16

    def __post_init__(self):
        for name in ("H", "d_hist", "iterations", "steps_per_iter", "epochs", "minibatch",
                     "buffer_cap", "n_envs"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.beta_decay_iters < 0 or not self.lr > 0 or not self.loss_tolerance > 0:
            raise ValidationError("beta_decay_iters >= 0, lr > 0 and loss_tolerance > 0 required")

    def beta(self, iteration):
        if self.beta_decay_iters == 0:
            return 1.0
        return max(0.0, 1.0 - iteration / self.beta_decay_iters)


# --------------------------------------------------------------------------
# advantage estimation


def gae(rewards, values, dones, gamma, lam, bootstrap=0.0):
    """Generalized advantage estimates along the leading time axis.

    ``values[t]`` is ``V(s_t)``; ``bootstrap`` is ``V(s_T)`` for tails that
    did not end. Returns ``(advantages, returns)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    T = len(r)
    adv = np.zeros_like(r)
    next_v = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), r.shape[1:])
    next_a = np.zeros(r.shape[1:])
    for t in range(T - 1, -1, -1):
        keep = 1.0 - d[t]
        delta = r[t] + gamma * next_v * keep - v[t]
        next_a = delta + gamma * lam * keep * next_a
        adv[t] = next_a
        next_v = v[t]
    return adv, adv + v


# --------------------------------------------------------------------------
# policies


def build_policy_net(arch, obs_dim, action_dims, rng, n_experts=(4, 6), k=2, d_feat=32,
                     hidden=(64, 64), match_params=None, head_hidden=()):
    """``arch`` is ``"cdmoe"`` or ``"moe"``; the plain MoE matches ``match_params`` when given."""
    if arch == "cdmoe":
        return CdmoePolicy(obs_dim, action_dims, rng, n_experts, k, d_feat, hidden, head_hidden=head_hidden)
    if arch == "moe":
        if match_params is None:
            return PlainMoE(obs_dim, sum(action_dims), rng, hidden=hidden)
        return matched_plain_moe(match_params, obs_dim, sum(action_dims), rng, depth=len(hidden))
    raise ConfigError(f"unknown policy architecture {arch!r}")


class GaussianPolicy(Module):
    """Diagonal Gaussian over residual actions with a state-independent log std."""

    def __init__(self, net, log_std_init=-1.0):
        self.net = net
        self.log_std = param(np.full(net.act_dim, float(log_std_init)))

    @property
    def act_dim(self):
        return self.net.act_dim

    def mean(self, obs):
        x = obs if isinstance(obs, Tensor) else Tensor(obs)
        return self.net(x)

    def log_prob(self, mean, actions):
        z = (Tensor(actions) - mean) * (-self.log_std).exp()
        return -(z * z * 0.5 + self.log_std).sum(axis=-1) - 0.5 * LOG_2PI * self.act_dim

    def entropy(self):
        return self.log_std.sum() + self.act_dim * 0.5 * (1.0 + LOG_2PI)


def gaussian_log_prob(mean, log_std, actions):
    z = (actions - mean) / np.exp(log_std)
    return -np.sum(0.5 * z * z + log_std, axis=-1) - 0.5 * LOG_2PI * mean.shape[-1]


def value_net(obs_dim, rng, hidden=(64, 64)):
    return MLP(obs_dim, hidden, 1, rng)


# --------------------------------------------------------------------------
# PPO


@dataclass
class RolloutBatch:
    observations: np.ndarray  # (T, B, D)
    actions: np.ndarray  # (T, B, A) residual samples
    log_probs: np.ndarray  # (T, B)
    rewards: np.ndarray  # (T, B), truncation bootstrap folded in
    values: np.ndarray  # (T, B)
    dones: np.ndarray  # (T, B)
    last_values: np.ndarray  # (B,)
    episodes: list = field(default_factory=list)

    def __post_init__(self):
        T, B = self.rewards.shape
        for name in ("observations", "actions", "log_probs", "values", "dones"):
            if getattr(self, name).shape[:2] != (T, B):
                raise ValidationError(f"{name} is not aligned with rewards")
        if not np.all(np.isfinite(self.rewards)):
            raise NumericalError("non-finite reward in rollout", stage="rollout")


@dataclass(frozen=True)
class EpisodeRecord:
    bin_id: int
    errors: EpisodeErrors
    composite: float
    length: int
    tracking_mean: float
    end_step: int
    terminated: bool


def ppo_loss(policy, value, obs, actions, old_log_probs, advantages, returns, cfg):
    """Clipped surrogate plus value and entropy terms; returns ``(loss, stats)``."""
    mean = policy.mean(obs)
    logp = policy.log_prob(mean, actions)
    ratio = (logp - Tensor(old_log_probs)).exp()
    adv = Tensor(advantages)
    surr = minimum(ratio * adv, ratio.clip(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv)
    pg_loss = -surr.mean()
    v = value(Tensor(obs) if not isinstance(obs, Tensor) else obs).reshape(-1)
    v_loss = ((v - Tensor(returns)) ** 2).mean()
    ent = policy.entropy()
    loss = pg_loss + v_loss * cfg.vf_coef - ent * cfg.ent_coef
    r = ratio.data
    stats = {"pg_loss": float(pg_loss.data), "v_loss": float(v_loss.data),
             "entropy": float(ent.data),
             "clip_fraction": float(np.mean(np.abs(r - 1.0) > cfg.clip_eps)),
             "kl": float(np.mean((r - 1.0) - np.log(r)))}
    return loss, stats


def ppo_update(policy, value, optimizers, batch, cfg, rng):
    """Several epochs of minibatch PPO on one rollout; returns averaged stats.

    ``optimizers`` is a sequence of :class:`Adam` instances covering the
    policy and value parameters (each clips its own gradient norm).
    """
    T, B = batch.rewards.shape
    adv, ret = gae(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.lam_gae, batch.last_values)
    N = T * B
    obs = batch.observations.reshape(N, -1)
    act = batch.actions.reshape(N, -1)
    old = batch.log_probs.reshape(N)
    adv = adv.reshape(N)
    ret = ret.reshape(N)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    totals, count = {}, 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        for start in range(0, N, cfg.minibatch):
            idx = perm[start: start + cfg.minibatch]
            loss, stats = ppo_loss(policy, value, obs[idx], act[idx], old[idx], adv[idx], ret[idx], cfg)
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"non-finite PPO loss (|adv| max {np.abs(adv[idx]).max():.3g}, "
                    f"returns range [{ret[idx].min():.3g}, {ret[idx].max():.3g}])", stage="ppo_update")
            for opt in optimizers:
                opt.zero_grad()
            loss.backward()
            policy.check_gradients()
            value.check_gradients()
            for opt in optimizers:
                opt.step()
            for key, val in stats.items():
                totals[key] = totals.get(key, 0.0) + val
            count += 1
    return {key: val / count for key, val in totals.items()}


# --------------------------------------------------------------------------
# rollouts


class EpisodeTracker:
    """Per-instance accumulators for the composite error and the mean tracking reward."""

    def __init__(self, env):
        self.env = env
        B, n = env.n_envs, env.model.n_joints
        self.bin_id = np.full(B, -1)
        self.steps = np.zeros(B, dtype=np.int64)
        self.sum_pos = np.zeros(B)
        self.sum_key = np.zeros(B)
        self.sum_vel = np.zeros(B)
        self.sum_track = np.zeros(B)
        self.prev_kp = np.zeros((B, n, 2))
        self.prev_kr = np.zeros((B, n, 2))

    def start(self, i, bin_id):
        self.bin_id[i] = bin_id
        self.steps[i] = 0
        self.sum_pos[i] = self.sum_key[i] = self.sum_vel[i] = self.sum_track[i] = 0.0
        kp = 1000.0 * fk_keypoints(self.env.theta[i], self.env.lengths_links)
        self.prev_kp[i] = kp
        self.prev_kr[i] = kp

    def update(self, stepped, tracking, k):
        env = self.env
        ref_p, _ = env.reference_at()
        kp = 1000.0 * fk_keypoints(env.theta, env.lengths_links)
        kr = 1000.0 * fk_keypoints(ref_p, env.lengths_links)
        m = stepped.astype(np.float64)
        self.steps += stepped
        self.sum_pos += m * 1000.0 * np.mean(np.abs(env.theta - ref_p), axis=-1)
        self.sum_key += m * np.mean(np.linalg.norm(kp - kr, axis=-1), axis=-1)
        dv = (kp - self.prev_kp) - (kr - self.prev_kr)
        self.sum_vel += m * k * np.mean(np.linalg.norm(dv, axis=-1), axis=-1)
        self.sum_track += m * tracking
        self.prev_kp = np.where(stepped[:, None, None], kp, self.prev_kp)
        self.prev_kr = np.where(stepped[:, None, None], kr, self.prev_kr)

    def finish(self, i):
        n = max(int(self.steps[i]), 1)
        return EpisodeErrors(self.sum_key[i] / n, self.sum_vel[i] / n, self.sum_pos[i] / n), \
            self.sum_track[i] / n, int(self.steps[i])


class Runner:
    """Steps a vectorized env, seeding each episode from the sampler.

    Counts env steps (one per active instance per vector step) and
    recomputes the sampling distribution every ``recompute_interval`` of
    them, with training progress measured against ``budget``.
    """

    def __init__(self, env, dataset, sampler, rng, budget):
        self.env = env
        self.dataset = dataset
        self.sampler = sampler
        self.rng = rng
        self.budget = budget
        self.total_steps = 0
        self.interval = sampler.cfg.recompute_interval
        self.next_recompute = self.interval
        self.tracker = EpisodeTracker(env)
        self.k = None
        self.episodes = []
        self.sampled_bins = []
        self.on_reset = None
        for i in range(env.n_envs):
            self._start(i)
        self.obs = env.observe()

    def _start(self, i):
        b = self.sampler.sample_bin(self.rng)
        w = extract_window(self.dataset, b, rng=self.rng)
        self.k = self.env.steps_per_frame(w.fps)
        self.env.reset(i, w.positions, w.velocities, w.fps)
        self.tracker.start(i, b.global_id)
        self.sampled_bins.append(b.global_id)
        if self.on_reset is not None:
            self.on_reset(i)

    def step(self, targets):
        """Advance all instances; finished ones are recorded and restarted."""
        env = self.env
        stepped = env.active.copy()
        obs, terms, done, info = env.step(targets)
        if not np.all(np.isfinite(terms.total)):
            raise NumericalError("non-finite reward", stage="env.step")
        self.tracker.update(stepped, terms.tracking, self.k)
        self.total_steps += int(stepped.sum())
        finished = []
        for i in np.flatnonzero(done):
            errors, track, length = self.tracker.finish(i)
            bin_id = int(self.tracker.bin_id[i])
            comp = self.sampler.record(bin_id, errors)
            rec = EpisodeRecord(bin_id, errors, comp, length, track, self.total_steps,
                                bool(info["terminated"][i]))
            self.episodes.append(rec)
            finished.append(rec)
        while self.total_steps >= self.next_recompute:
            self.sampler.recompute(min(self.next_recompute / self.budget, 1.0))
            self.next_recompute += self.interval
        final_obs = obs
        if done.any():
            for i in np.flatnonzero(done):
                self._start(i)
            obs = env.observe()
        self.obs = obs
        return final_obs, terms, done, info, finished


def collect(runner, policy, value, horizon, cfg, rng):
    env = runner.env
    B = env.n_envs
    D = runner.obs.teacher().shape[-1]
    A = policy.act_dim
    obs_b = np.empty((horizon, B, D))
    act_b = np.empty((horizon, B, A))
    logp_b = np.empty((horizon, B))
    rew_b = np.empty((horizon, B))
    val_b = np.empty((horizon, B))
    done_b = np.empty((horizon, B))
    episodes = []
    log_std = policy.log_std.data
    with no_grad():
        for t in range(horizon):
            x = runner.obs.teacher()
            mean = policy.mean(x).data
            v = value(Tensor(x)).data[:, 0]
            a = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
            targets = env.residual_targets(runner.obs, a, cfg.action_scale)
            final_obs, terms, done, info, finished = runner.step(targets)
            r = terms.total.copy()
            trunc = info["truncated"]
            if trunc.any():
                r[trunc] += cfg.gamma * value(Tensor(final_obs.teacher()[trunc])).data[:, 0]
            obs_b[t], act_b[t], val_b[t], rew_b[t], done_b[t] = x, a, v, r, done
            logp_b[t] = gaussian_log_prob(mean, log_std, a)
            episodes.extend(finished)
        last = value(Tensor(runner.obs.teacher())).data[:, 0]
    return RolloutBatch(obs_b, act_b, logp_b, rew_b, val_b, done_b, last, episodes)


# --------------------------------------------------------------------------
# stage orchestration


@dataclass(frozen=True)
class EnvConfig:
    chain: ChainModel = ChainModel(dt=0.02)
    dr: DrConfig = DrConfig.stage2()
    obs: ObsConfig = ObsConfig()
    reward1: RewardConfig = RewardConfig.stage(1)
    reward2: RewardConfig = RewardConfig.stage(2)


@dataclass(frozen=True)
class PolicyConfig:
    arch: str = "cdmoe"
    n_experts: tuple = (4, 6)
    k: int = 2
    d_feat: int = 32
    hidden: tuple = (64, 64)
    value_hidden: tuple = (64, 64)
    head_hidden: tuple = ()  # CDMoE output head hidden sizes; () is a linear head
    match_params: int = 0  # plain MoE parameter target; 0 means "match the default CDMoE"

    def __post_init__(self):
        if self.arch not in ("cdmoe", "moe"):
            raise ValidationError("arch must be 'cdmoe' or 'moe'")
        object.__setattr__(self, "n_experts", tuple(int(m) for m in self.n_experts))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "value_hidden", tuple(int(h) for h in self.value_hidden))
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if len(self.n_experts) != 2 or self.n_experts[1] <= self.n_experts[0] or min(self.n_experts) < 1:
            raise ValidationError("n_experts must be (upper, lower) with lower > upper >= 1")
        if not 1 <= self.k <= self.n_experts[0]:
            raise ValidationError("k must lie in [1, upper expert count]")
        if self.d_feat < 1 or not self.hidden or min(self.hidden + self.head_hidden) < 1:
            raise ValidationError("d_feat and hidden sizes must be >= 1")


@dataclass
class Teacher:
    policy: GaussianPolicy
    value: Module
    optimizers: tuple
    stage: int
    obs_layout: dict
    steps: int = 0


def make_env(env_cfg, stage, n_envs, seed):
    if stage not in (1, 2):
        raise ConfigError(f"environment stage must be 1 or 2, got {stage}")
    dr, reward = (env_cfg.dr, env_cfg.reward2) if stage == 2 else (DrConfig.identity(), env_cfg.reward1)
    return TrackingEnv(env_cfg.chain, n_envs, stage, dr, reward, env_cfg.obs, seed)


def obs_layout(env_cfg):
    dims = obs_dims(env_cfg.chain, env_cfg.obs)
    return {"n_joints": env_cfg.chain.n_joints, "n_upper": env_cfg.chain.n_upper, **dims}


def new_teacher(env_cfg, policy_cfg, ppo_cfg, seed):
    rng = np.random.default_rng([seed, 7])
    layout = obs_layout(env_cfg)
    obs_dim = layout["proprio"] + layout["goal"] + layout["privileged"]
    action_dims = (env_cfg.chain.n_upper, env_cfg.chain.n_joints - env_cfg.chain.n_upper)
    match = None
    if policy_cfg.arch == "moe":
        match = policy_cfg.match_params or CdmoePolicy(
            obs_dim, action_dims, np.random.default_rng(0), policy_cfg.n_experts, policy_cfg.k,
            policy_cfg.d_feat, policy_cfg.hidden, head_hidden=policy_cfg.head_hidden).num_parameters()
    net = build_policy_net(policy_cfg.arch, obs_dim, action_dims, rng, policy_cfg.n_experts,
                           policy_cfg.k, policy_cfg.d_feat, policy_cfg.hidden, match, policy_cfg.head_hidden)
    policy = GaussianPolicy(net, ppo_cfg.log_std_init)
    value = value_net(obs_dim, rng, policy_cfg.value_hidden)
    opts = (Adam(policy.parameters(), lr=ppo_cfg.lr, max_grad_norm=ppo_cfg.max_grad_norm),
            Adam(value.parameters(), lr=ppo_cfg.lr, max_grad_norm=ppo_cfg.max_grad_norm))
    return Teacher(policy, value, opts, 0, layout)


@dataclass
class StageResult:
    teacher: Teacher
    log: list
    episodes: list
    sampled_bins: list
    sampler: object
    steps: int = 0  # env steps taken in this stage

    def tracking_deciles(self):
        """Mean episode tracking reward over episodes ending in the first and last 10% of steps."""
        end = np.array([e.end_step for e in self.episodes])
        track = np.array([e.tracking_mean for e in self.episodes])
        total = self.steps
        first = track[end <= 0.1 * total]
        last = track[end > 0.9 * total]
        # nan when no episode ended inside a decile (very short runs)
        return tuple(float(x.mean()) if len(x) else float("nan") for x in (first, last))


def run_stage(stage, teacher, sampler, dataset, env_cfg, ppo_cfg, seed, from_scratch=False,
              log_path=None, progress=None):
    """Train ``teacher`` with PPO for ``ppo_cfg.total_steps`` env steps of ``stage``.

    Stage 2 continues a Stage-1 teacher; pass ``from_scratch=True`` to train
    Stage-2 settings on a fresh teacher (the curriculum ablation).
    """
    if stage not in (1, 2):
        raise ConfigError(f"PPO stages are 1 and 2, got {stage}")
    if teacher.obs_layout != obs_layout(env_cfg):
        raise ConfigError(f"checkpoint observation layout {teacher.obs_layout} does not match "
                          f"the environment {obs_layout(env_cfg)}")
    if stage == 2 and teacher.stage < 1 and not from_scratch:
        raise ConfigError("stage 2 needs a stage-1 checkpoint")
    rng = np.random.default_rng([seed, stage, 11])
    env = make_env(env_cfg, stage, ppo_cfg.n_envs, int(rng.integers(2**31)))
    runner = Runner(env, dataset, sampler, rng, ppo_cfg.total_steps)
    log = []
    while runner.total_steps < ppo_cfg.total_steps:
        batch = collect(runner, teacher.policy, teacher.value, ppo_cfg.horizon, ppo_cfg, rng)
        stats = ppo_update(teacher.policy, teacher.value, teacher.optimizers, batch, ppo_cfg, rng)
        eps = batch.episodes
        row = {
            "step": runner.total_steps, "stage": stage,
            "mean_reward": float(batch.rewards.mean()),
            "mean_tracking": float(np.mean([e.tracking_mean for e in eps])) if eps else float("nan"),
            "mean_mpkpe": float(np.mean([e.errors.mpkpe for e in eps])) if eps else float("nan"),
            "lambda": sampler.dist.lambda_used, "tau": sampler.dist.tau_used,
            "episodes": len(eps), **stats,
        }
        log.append(row)
        if progress is not None:
            progress(row)
    teacher.stage = max(teacher.stage, stage)
    teacher.steps += runner.total_steps
    if log_path is not None:
        write_log(log_path, log)
    return StageResult(teacher, log, runner.episodes, runner.sampled_bins, sampler, runner.total_steps)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return Path(path)


# --------------------------------------------------------------------------
# actors (evaluation-time policies)


class TeacherActor:
    """Deterministic teacher: mean residual on the privileged observation."""

    def __init__(self, policy, action_scale):
        self.policy, self.action_scale = policy, action_scale

    def begin(self, n_envs):
        pass

    def reset(self, i):
        pass

    def residual(self, obs):
        with no_grad():
            return self.policy.mean(obs.teacher()).data

    def __call__(self, obs, env):
        return env.residual_targets(obs, self.residual(obs), self.action_scale)


class StudentActor:
    """History-conditioned student acting on the non-privileged observation."""

    def __init__(self, student, action_scale):
        self.student, self.action_scale = student, action_scale
        self.history = None

    def begin(self, n_envs):
        enc = self.student.encoder
        self.history = HistoryBuffer(n_envs, enc.H, enc.proprio_dim)

    def reset(self, i):
        self.history.reset(i)

    def residual(self, obs, hist=None):
        if hist is None:
            hist = self.history.push(obs.proprio)
        with no_grad():
            return self.student(obs.base(), hist).data

    def __call__(self, obs, env):
        return env.residual_targets(obs, self.residual(obs), self.action_scale)


class ReferenceActor:
    """Zero residual: PD targets are the next reference frame."""

    def begin(self, n_envs):
        pass

    def reset(self, i):
        pass

    def __call__(self, obs, env):
        return env.residual_targets(obs, np.zeros_like(env.theta), 1.0)


# --------------------------------------------------------------------------
# distillation


def new_student(teacher, env_cfg, distill_cfg, policy_cfg, seed):
    rng = np.random.default_rng([seed, 13])
    layout = teacher.obs_layout
    base_dim = layout["proprio"] + layout["goal"]
    action_dims = (env_cfg.chain.n_upper, env_cfg.chain.n_joints - env_cfg.chain.n_upper)
    return StudentPolicy(base_dim, action_dims, distill_cfg.H, layout["proprio"], rng,
                         distill_cfg.d_hist, n_experts=policy_cfg.n_experts, k=policy_cfg.k,
                         d_feat=policy_cfg.d_feat, hidden=policy_cfg.hidden,
                         head_hidden=policy_cfg.head_hidden)


def imitation_loss(student, base, hist, labels):
    diff = student(base, hist) - Tensor(labels)
    return (diff * diff).sum(axis=-1).mean()


def dagger_distill(teacher, student, sampler, dataset, env_cfg, distill_cfg, action_scale, seed,
                   stage=2, progress=None):
    """DAgger: roll out a per-step beta-mixture of teacher and student, label visited
    states with the teacher's residual, regress the student on the aggregate."""
    if teacher.stage < 1:
        raise ConfigError("distillation needs a trained teacher")
    rng = np.random.default_rng([seed, 3, 17])
    env = make_env(env_cfg, stage, distill_cfg.n_envs, int(rng.integers(2**31)))
    total = distill_cfg.iterations * distill_cfg.steps_per_iter
    t_actor = TeacherActor(teacher.policy, action_scale)
    s_actor = StudentActor(student, action_scale)
    s_actor.begin(env.n_envs)
    runner = Runner(env, dataset, sampler, rng, total)
    runner.on_reset = s_actor.reset
    for i in range(env.n_envs):
        s_actor.reset(i)
    opt = Adam(student.parameters(), lr=distill_cfg.lr, max_grad_norm=10.0)
    buf_base, buf_hist, buf_lab = [], [], []
    log = []
    for it in range(distill_cfg.iterations):
        beta = distill_cfg.beta(it)
        steps = 0
        while steps < distill_cfg.steps_per_iter:
            obs = runner.obs
            hist = s_actor.history.push(obs.proprio)
            label = t_actor.residual(obs)
            use_teacher = rng.random(env.n_envs) < beta
            if use_teacher.all():
                res = label
            else:
                res = np.where(use_teacher[:, None], label, s_actor.residual(obs, hist))
            buf_base.append(obs.base())
            buf_hist.append(hist)
            buf_lab.append(label)
            runner.step(env.residual_targets(obs, res, action_scale))
            steps += env.n_envs
        base = np.concatenate(buf_base)[-distill_cfg.buffer_cap:]
        hist = np.concatenate(buf_hist)[-distill_cfg.buffer_cap:]
        lab = np.concatenate(buf_lab)[-distill_cfg.buffer_cap:]
        buf_base, buf_hist, buf_lab = [base], [hist], [lab]
        N = len(lab)
        losses = []
        for _ in range(distill_cfg.epochs):
            perm = rng.permutation(N)
            for start in range(0, N, distill_cfg.minibatch):
                idx = perm[start: start + distill_cfg.minibatch]
                loss = imitation_loss(student, base[idx], hist[idx], lab[idx])
                val = float(loss.data)
                if not np.isfinite(val) or val > distill_cfg.loss_tolerance:
                    raise NumericalError(f"imitation loss diverged at iteration {it}: {val:.3g}",
                                         stage="dagger")
                opt.zero_grad()
                loss.backward()
                student.check_gradients()
                opt.step()
                losses.append(val)
        row = {"iteration": it, "beta": beta, "loss": float(np.mean(losses[-max(1, N // distill_cfg.minibatch):])),
               "buffer": N, "episodes": len(runner.episodes)}
        log.append(row)
        if progress is not None:
            progress(row)
    return student, log


# --------------------------------------------------------------------------
# checkpoints


def save_teacher(path, teacher, extra_meta=None):
    meta = {"kind": "teacher", "stage": teacher.stage, "steps": teacher.steps,
            "obs_layout": teacher.obs_layout, "log_std_dim": int(teacher.policy.act_dim)}
    meta.update(extra_meta or {})
    value_state = {k: v for k, v in teacher.value.state_dict().items()}
    save_params(path, teacher.policy, meta, value=value_state,
                optim_policy=teacher.optimizers[0].state_dict(),
                optim_value=teacher.optimizers[1].state_dict())


def load_teacher(path, teacher):
    """Load parameters, optimizer state and stage into a freshly built ``teacher``."""
    params, groups, meta = load_archive(path)
    if meta.get("kind") != "teacher":
        raise ConfigError(f"{path} is not a teacher checkpoint")
    if meta.get("obs_layout") != teacher.obs_layout:
        raise ConfigError(f"checkpoint observation layout {meta.get('obs_layout')} does not match "
                          f"{teacher.obs_layout}")
    teacher.policy.load_state_dict(params)
    teacher.value.load_state_dict(groups.get("value", {}))
    for opt, key in zip(teacher.optimizers, ("optim_policy", "optim_value")):
        if key in groups:
            opt.load_state_dict(groups[key])
    teacher.stage = int(meta["stage"])
    teacher.steps = int(meta.get("steps", 0))
    return teacher


def save_student(path, student, meta=None):
    save_params(path, student, {"kind": "student", **(meta or {})})


def load_student(path, student):
    params, _, meta = load_archive(path)
    if meta.get("kind") != "student":
        raise ConfigError(f"{path} is not a student checkpoint")
    student.load_state_dict(params)
    return student


def config_dict(obj):
    return asdict(obj)
