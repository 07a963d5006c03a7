"""Tracking metrics and evaluation reports.

Keypoint quantities are reported in millimetres and differentiated per
frame; joint quantities are in radians.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .env import fk_keypoints
from .errors import ConfigError, EgmError, ShapeError

METRICS = ("mpkpe", "umpjpe", "lmpjpe", "acc_dist", "vel_dist")


@dataclass(frozen=True, eq=False)
class TrackedPair:
    ref_keypoints: np.ndarray  # (T, K, 2) mm
    act_keypoints: np.ndarray
    ref_joints: np.ndarray  # (T, n) rad
    act_joints: np.ndarray
    fps: int
    upper: tuple
    lower: tuple

    def __post_init__(self):
        for a, b, what in ((self.ref_keypoints, self.act_keypoints, "keypoint"),
                           (self.ref_joints, self.act_joints, "joint")):
            if np.shape(a) != np.shape(b):
                raise ShapeError(f"{what} layouts differ: {np.shape(a)} vs {np.shape(b)}")
        if len(self.ref_keypoints) != len(self.ref_joints):
            raise ShapeError("keypoint and joint frame counts differ")

    @classmethod
    def from_joints(cls, ref_joints, act_joints, link_lengths, fps, upper, lower):
        ref_joints = np.asarray(ref_joints, dtype=np.float64)
        act_joints = np.asarray(act_joints, dtype=np.float64)
        return cls(1000.0 * fk_keypoints(ref_joints, link_lengths),
                   1000.0 * fk_keypoints(act_joints, link_lengths),
                   ref_joints, act_joints, fps, tuple(upper), tuple(lower))

    @property
    def frames(self):
        return len(self.ref_joints)


def mpkpe(pair):
    """Mean Euclidean keypoint distance over frames and keypoints (mm)."""
    return float(np.mean(np.linalg.norm(pair.act_keypoints - pair.ref_keypoints, axis=-1)))


def _check_partition(pair):
    n = pair.ref_joints.shape[-1]
    joined = sorted(pair.upper + pair.lower)
    if joined != list(range(n)) or not pair.upper or not pair.lower:
        raise ConfigError(f"joint partition {pair.upper} / {pair.lower} does not split {n} joints")


def umpjpe(pair):
    """Mean absolute joint error over the upper-body joints (rad)."""
    _check_partition(pair)
    idx = list(pair.upper)
    return float(np.mean(np.abs(pair.act_joints[:, idx] - pair.ref_joints[:, idx])))


def lmpjpe(pair):
    """Mean absolute joint error over the lower-body joints (rad)."""
    _check_partition(pair)
    idx = list(pair.lower)
    return float(np.mean(np.abs(pair.act_joints[:, idx] - pair.ref_joints[:, idx])))


def mpjpe(pair):
    return float(np.mean(np.abs(pair.act_joints - pair.ref_joints)))


def _diff_dist(pair, order):
    if pair.frames < 3:
        raise ShapeError(f"need at least 3 frames, got {pair.frames}")
    d_ref = np.diff(pair.ref_keypoints, n=order, axis=0)
    d_act = np.diff(pair.act_keypoints, n=order, axis=0)
    return float(np.mean(np.linalg.norm(d_act - d_ref, axis=-1)))


def vel_dist(pair):
    """Mean keypoint velocity error from first differences (mm/frame)."""
    return _diff_dist(pair, 1)


def acc_dist(pair):
    """Mean keypoint acceleration error from second differences (mm/frame^2)."""
    return _diff_dist(pair, 2)


def all_metrics(pair):
    return {"mpkpe": mpkpe(pair), "umpjpe": umpjpe(pair), "lmpjpe": lmpjpe(pair),
            "acc_dist": acc_dist(pair) if pair.frames >= 3 else np.nan,
            "vel_dist": vel_dist(pair) if pair.frames >= 3 else np.nan}


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ClipEval:
    name: str
    duration_s: float
    mean: dict
    std: dict
    completed_fraction: float
    error: str = ""


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Per-seed, per-clip metric values; ``values[m]`` has shape ``(n_seeds, n_clips)``."""

    names: tuple
    durations: np.ndarray
    seeds: tuple
    values: dict
    completed: np.ndarray
    errors: tuple = ()

    @property
    def clips(self):
        out = {}
        errs = dict(self.errors)
        for j, name in enumerate(self.names):
            mean = {m: float(np.mean(self.values[m][:, j])) for m in METRICS}
            std = {m: float(np.std(self.values[m][:, j])) for m in METRICS}
            out[name] = ClipEval(name, float(self.durations[j]), mean, std,
                                 float(np.mean(self.completed[:, j])), errs.get(name, ""))
        return out

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return EvalReport(tuple(n for n, k in zip(self.names, mask) if k), self.durations[mask],
                          self.seeds, {m: v[:, mask] for m, v in self.values.items()},
                          self.completed[:, mask],
                          tuple(e for e in self.errors if e[0] in set(np.array(self.names)[mask])))

    def aggregate(self):
        """Mean and std over seeds of the per-seed average across clips."""
        out = {}
        for m in METRICS:
            per_seed = np.nanmean(self.values[m], axis=1)
            out[m] = (float(np.mean(per_seed)), float(np.std(per_seed)))
        return out

    def mean(self, metric="mpkpe"):
        return self.aggregate()[metric][0]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip", "duration_s"]
                       + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
                       + ["completed_fraction"])
            for name, c in self.clips.items():
                w.writerow([name, f"{c.duration_s:.6g}"]
                           + [f"{c.__dict__[s][m]:.9g}" for m in METRICS for s in ("mean", "std")]
                           + [f"{c.completed_fraction:.6g}"])
        return Path(path)


def rollout_pairs(actor, env, references, fps):
    """Run ``actor`` on one env instance per reference until every instance finishes.

    ``references`` is a list of ``(positions, velocities)`` arrays. Returns
    per-instance ``(TrackedPair, completed)``, where frames after an early
    termination are excluded.
    """
    model = env.model
    k = env.steps_per_frame(fps)
    B = len(references)
    if env.n_envs != B:
        raise ShapeError(f"env has {env.n_envs} instances for {B} references")
    actor.begin(B)
    for i, (pos, vel) in enumerate(references):
        env.reset(i, pos, vel, fps)
        actor.reset(i)
    frames = [[env.theta[i].copy()] for i in range(B)]
    terminated = np.zeros(B, dtype=bool)
    obs = env.observe()
    with no_grad():
        while env.active.any():
            was_active = env.active.copy()
            targets = actor(obs, env)
            obs, _, done, info = env.step(targets)
            for i in np.flatnonzero(was_active):
                if env.t[i] % k == 0 or info["terminated"][i]:
                    frames[i].append(env.theta[i].copy())
            terminated |= info["terminated"]
    out = []
    for i, (pos, _) in enumerate(references):
        act = np.array(frames[i])
        ref = np.asarray(pos)[: len(act)]
        pair = TrackedPair.from_joints(ref, act, model.link_lengths, fps,
                                       model.upper_joints, model.lower_joints)
        out.append((pair, not terminated[i]))
    return out


def evaluate(actor, dataset, env_factory, seeds=(0,)):
    """One rollout per clip per seed from the clip's first frame.

    ``env_factory(n_envs, seed)`` builds the environment; ``actor`` maps
    observations to target joint positions (see :mod:`egm.trainer`). A clip
    whose rollout raises is recorded with NaN metrics and its error message.
    """
    names = tuple(dataset.names())
    n = len(names)
    values = {m: np.full((len(seeds), n), np.nan) for m in METRICS}
    completed = np.zeros((len(seeds), n), dtype=bool)
    errors = {}
    refs = [(c.frames, c.velocities) for c in dataset]
    fps_set = {c.fps for c in dataset}
    for s, seed in enumerate(seeds):
        groups = [list(range(n))] if len(fps_set) == 1 else [[j] for j in range(n)]
        for group in groups:
            try:
                results = rollout_pairs(actor, env_factory(len(group), seed),
                                        [refs[j] for j in group], dataset[group[0]].fps)
            except EgmError:
                if len(group) > 1:
                    groups.extend([j] for j in group)
                    continue
                results = None
                errors[names[group[0]]] = "rollout failed"
            if results is None:
                continue
            for j, (pair, ok) in zip(group, results):
                for m, v in all_metrics(pair).items():
                    values[m][s, j] = v
                completed[s, j] = ok
    return EvalReport(names, np.array([c.duration_s for c in dataset]), tuple(seeds), values,
                      completed, tuple(sorted(errors.items())))


def dump_rollout(actor, env, clip, path):
    """Roll ``actor`` over ``clip`` on a single-instance env and write one CSV row per control step."""
    n = env.model.n_joints
    actor.begin(1)
    env.reset(0, clip.frames, clip.velocities, clip.fps)
    actor.reset(0)
    obs = env.observe()
    header = (["t"] + [f"theta{j}" for j in range(n)] + [f"theta_dot{j}" for j in range(n)]
              + [f"ref{j}" for j in range(n)]
              + ["r_pos", "r_vel", "r_key", "p_action_rate", "p_torque", "p_smooth", "total"])
    with open(path, "w", newline="") as fh, no_grad():
        w = csv.writer(fh)
        w.writerow(header)
        while env.active[0]:
            obs, terms, _, _ = env.step(actor(obs, env))
            ref, _ = env.reference_at()
            t = int(env.t[0]) * env.model.dt
            w.writerow([f"{t:.6g}"] + [f"{v:.9g}" for v in (*env.theta[0], *env.theta_dot[0], *ref[0])]
                       + [f"{float(getattr(terms, k)[0]):.9g}" for k in
                          ("r_pos", "r_vel", "r_key", "p_action_rate", "p_torque", "p_smooth", "total")])
    return Path(path)
