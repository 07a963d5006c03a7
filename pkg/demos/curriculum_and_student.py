"""Stage 1, Stage 2 hardening, then DAgger distillation into a history-based student.

Stage 2 keeps the Stage-1 weights and turns on domain randomization,
pushes and the sharper reward. The student never sees the privileged
physics parameters; it reads a short window of past proprioception
instead. All three are scored in the Stage-2 environment.

Run: python3 demos/curriculum_and_student.py [--steps N]
"""

import argparse

from egm.metrics import evaluate
from egm.motion import imbalanced_preset
from egm.sampler import BinRegistry
from egm.trainer import (DistillConfig, EnvConfig, PolicyConfig, PpoConfig, StudentActor, TeacherActor,
                         dagger_distill, make_env, new_student, new_teacher, run_stage)

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=30_000, help="env steps per PPO stage")
args = ap.parse_args()

train, ev = imbalanced_preset(0)
env_cfg, pol_cfg = EnvConfig(), PolicyConfig()
ppo = PpoConfig(total_steps=args.steps)
factory = lambda n, s: make_env(env_cfg, 2, n, 10_000 + s)  # noqa: E731


def score(actor):
    return evaluate(actor, ev, factory, seeds=(0,)).mean("mpkpe")


teacher = new_teacher(env_cfg, pol_cfg, ppo, seed=0)
sampler = BinRegistry(train)
run_stage(1, teacher, sampler, train, env_cfg, ppo, seed=0)
print(f"after stage 1: {score(TeacherActor(teacher.policy, ppo.action_scale)):6.1f} mm (stage-2 env)")
run_stage(2, teacher, sampler, train, env_cfg, ppo, seed=0)
print(f"after stage 2: {score(TeacherActor(teacher.policy, ppo.action_scale)):6.1f} mm")

distill = DistillConfig(iterations=8, beta_decay_iters=6, steps_per_iter=2048, epochs=2, buffer_cap=20_000)
student = new_student(teacher, env_cfg, distill, pol_cfg, seed=0)
_, log = dagger_distill(teacher, student, sampler, train, env_cfg, distill, ppo.action_scale, seed=0)
for row in log:
    print(f"  dagger iteration {row['iteration']:2d} beta {row['beta']:.2f} loss {row['loss']:.5f}")
print(f"student:       {score(StudentActor(student, ppo.action_scale)):6.1f} mm")
