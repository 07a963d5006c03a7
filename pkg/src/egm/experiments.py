"""Seed-fixed comparison experiments on the imbalanced toy preset.

Each harness trains the arms it compares under identical settings and
evaluates them deterministically. Trained teachers are memoized per
``(arm, seed, steps)`` so harnesses that share an arm reuse one run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import evaluate
from .motion import clip_families, imbalanced_preset
from .sampler import BinRegistry, UniformClipSampler, sample_report
from .trainer import (DistillConfig, EnvConfig, PolicyConfig, PpoConfig, StudentActor, TeacherActor,
                      dagger_distill, make_env, new_student, new_teacher, run_stage)

LONG_CLIP_S = 20.0


@dataclass
class Harness:
    steps: int = 1_000_000  # per training stage
    preset_seed: int = 0
    eval_seeds: tuple = (0, 1)
    env_cfg: EnvConfig = field(default_factory=EnvConfig)
    policy_cfg: PolicyConfig = field(default_factory=PolicyConfig)
    ppo_cfg: PpoConfig = field(default_factory=PpoConfig)
    distill_cfg: DistillConfig = field(default_factory=lambda: DistillConfig(epochs=2, buffer_cap=30_000))
    verbose: bool = False
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train, self.eval = imbalanced_preset(self.preset_seed)

    def _say(self, msg):
        if self.verbose:
            print(msg, flush=True)

    def _sampler(self, kind):
        return (UniformClipSampler if kind == "uniform" else BinRegistry)(self.train)

    def teacher(self, seed, sampler="bccas", arch="cdmoe", stages=(1,), steps=None):
        """Train (or fetch) a teacher through ``stages``; ``(2,)`` alone trains Stage 2 from scratch."""
        steps = steps or self.steps
        key = (sampler, arch, seed, stages, steps)
        if key in self.cache:
            return self.cache[key]
        t0 = time.time()
        ppo = replace(self.ppo_cfg, total_steps=steps)
        if len(stages) > 1:
            prev = self.teacher(seed, sampler, arch, stages[:-1], steps)
            teacher = _clone_teacher(prev["teacher"], self.env_cfg, replace(self.policy_cfg, arch=arch), ppo, seed)
            reg = _clone_sampler(prev["sampler"])
        else:
            teacher = new_teacher(self.env_cfg, replace(self.policy_cfg, arch=arch), ppo, seed)
            reg = self._sampler(sampler)
        stage = stages[-1]
        res = run_stage(stage, teacher, reg, self.train, self.env_cfg, ppo, seed,
                        from_scratch=(stages == (2,)))
        out = {"teacher": teacher, "sampler": reg, "result": res}
        self.cache[key] = out
        self._say(f"trained {key} in {time.time() - t0:.0f}s")
        return out

    def evaluate(self, actor, dataset, stage):
        factory = lambda n, s: make_env(self.env_cfg, stage, n, 10_000 + s)  # noqa: E731
        return evaluate(actor, dataset, factory, self.eval_seeds)

    def teacher_actor(self, teacher):
        return TeacherActor(teacher.policy, self.ppo_cfg.action_scale)

    # -- comparisons ----------------------------------------------------------

    def bccas_vs_uniform(self, seeds=(0, 1, 2, 3)):
        """Long-clip eval error per seed for both samplers plus BCCAS sample ratios by family."""
        long_mask = self.eval_durations() >= LONG_CLIP_S
        rows = []
        for seed in seeds:
            arms = {}
            for kind in ("bccas", "uniform"):
                run = self.teacher(seed, sampler=kind)
                rep = self.evaluate(self.teacher_actor(run["teacher"]), self.eval, stage=1)
                arms[kind] = rep.subset(long_mask).mean("mpkpe")
            ratios = family_ratios(self.teacher(seed)["sampler"], self.train)
            rows.append({"seed": seed, "bccas": arms["bccas"], "uniform": arms["uniform"],
                         "burst_ratio": ratios.get("burst_like", np.nan),
                         "idle_ratio": ratios.get("idle", np.nan)})
            self._say(rows[-1])
        return rows

    def cdmoe_vs_moe(self, seeds=(0, 1, 2, 3)):
        rows = []
        for seed in seeds:
            arms = {}
            for arch in ("cdmoe", "moe"):
                run = self.teacher(seed, arch=arch)
                arms[arch] = self.evaluate(self.teacher_actor(run["teacher"]), self.eval, 1).mean("mpkpe")
                arms[arch + "_params"] = run["teacher"].policy.net.num_parameters()
            rows.append({"seed": seed, **arms})
            self._say(rows[-1])
        return rows

    def curriculum(self, seeds=(0, 1, 2, 3), distill=True):
        """Stage 1 then 2 vs Stage 2 from scratch for the same total steps, plus the distilled student."""
        rows = []
        for seed in seeds:
            staged = self.teacher(seed, stages=(1, 2))
            scratch = self.teacher(seed, stages=(2,), steps=2 * self.steps)
            row = {"seed": seed,
                   "staged": self.evaluate(self.teacher_actor(staged["teacher"]), self.eval, 2).mean(),
                   "scratch": self.evaluate(self.teacher_actor(scratch["teacher"]), self.eval, 2).mean()}
            if distill:
                student = self.student(seed)
                row["student"] = self.evaluate(StudentActor(student, self.ppo_cfg.action_scale),
                                               self.eval, 2).mean()
            rows.append(row)
            self._say(row)
        return rows

    def student(self, seed):
        key = ("student", seed, self.steps)
        if key not in self.cache:
            t0 = time.time()
            staged = self.teacher(seed, stages=(1, 2))
            student = new_student(staged["teacher"], self.env_cfg, self.distill_cfg, self.policy_cfg, seed)
            dagger_distill(staged["teacher"], student, _clone_sampler(staged["sampler"]), self.train,
                           self.env_cfg, self.distill_cfg, self.ppo_cfg.action_scale, seed)
            self.cache[key] = student
            self._say(f"distilled {key} in {time.time() - t0:.0f}s")
        return self.cache[key]

    def eval_durations(self):
        return np.array([c.duration_s for c in self.eval])


def family_ratios(sampler, dataset):
    """Mean sample ratio (bin draws per second of clip) for each clip family."""
    fams = dict(zip(dataset.names(), clip_families(dataset)))
    out = {}
    for row in sample_report(sampler.stats(), dataset):
        out.setdefault(fams[row.clip_name], []).append(row.ratio)
    return {k: float(np.mean(v)) for k, v in out.items()}


def _clone_teacher(teacher, env_cfg, policy_cfg, ppo_cfg, seed):
    fresh = new_teacher(env_cfg, policy_cfg, ppo_cfg, seed)
    fresh.policy.load_state_dict(teacher.policy.state_dict())
    fresh.value.load_state_dict(teacher.value.state_dict())
    for dst, src in zip(fresh.optimizers, teacher.optimizers):
        dst.load_state_dict(src.state_dict())
    fresh.stage, fresh.steps = teacher.stage, teacher.steps
    return fresh


def _clone_sampler(sampler):
    out = type(sampler)(sampler.dataset, sampler.cfg, sampler.weights)
    out.load_dict(sampler.to_dict())
    return out
