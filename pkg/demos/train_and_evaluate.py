"""Short Stage-1 run on the imbalanced preset, then evaluation against the raw reference.

The reference actor sends the next reference frame straight to the PD
controllers with no correction; the trained teacher learns residuals on
top of that. Defaults finish in a couple of minutes; pass ``--steps``
for longer runs (the acceptance runs use 200 000).

Run: python3 demos/train_and_evaluate.py [--steps N] [--seed S]
"""

import argparse
import time

import numpy as np

from egm.metrics import evaluate
from egm.motion import clip_families, imbalanced_preset
from egm.sampler import BinRegistry
from egm.trainer import (EnvConfig, PolicyConfig, PpoConfig, ReferenceActor, TeacherActor, make_env,
                         new_teacher, run_stage)

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=40_000)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

train, ev = imbalanced_preset(0)
env_cfg, ppo = EnvConfig(), PpoConfig(total_steps=args.steps)
teacher = new_teacher(env_cfg, PolicyConfig(), ppo, args.seed)
sampler = BinRegistry(train)


def show(row):
    if row["step"] % 8192 < ppo.n_envs * ppo.horizon:
        print(f"  step {row['step']:7d} reward {row['mean_reward']:.3f} "
              f"lambda {row['lambda']:.2f} tau {row['tau']:.2f}")


t0 = time.time()
res = run_stage(1, teacher, sampler, train, env_cfg, ppo, args.seed, progress=show)
first, last = res.tracking_deciles()
print(f"trained {res.steps} steps in {time.time() - t0:.0f} s; "
      f"tracking reward first decile {first:.3f} -> last decile {last:.3f}")

factory = lambda n, s: make_env(env_cfg, 1, n, 10_000 + s)  # noqa: E731
fams = np.array(clip_families(ev))
for name, actor in (("reference", ReferenceActor()), ("teacher", TeacherActor(teacher.policy, ppo.action_scale))):
    rep = evaluate(actor, ev, factory, seeds=(0,))
    per = [rep.clips[c.name].mean["mpkpe"] for c in ev]
    by_fam = {f: float(np.mean([p for p, g in zip(per, fams) if g == f])) for f in sorted(set(fams))}
    print(f"{name:9s} mean E_mpkpe {rep.mean('mpkpe'):6.1f} mm |",
          " ".join(f"{f} {v:.1f}" for f, v in by_fam.items()))
