"""Feed the bin sampler synthetic per-family errors and watch the distribution sharpen.

Hard families (spin, burst) get larger errors than easy ones (idle, walk).
As lambda falls and tau rises, draws move toward their bins and the
per-clip sample ratio ends up highest on the hard clips.

Run: python3 demos/adaptive_sampling.py
"""

import numpy as np

from egm.experiments import family_ratios
from egm.motion import clip_families, imbalanced_preset
from egm.sampler import BinRegistry, EpisodeErrors, UniformClipSampler

train, _ = imbalanced_preset(0)
fams = clip_families(train)
print(f"{len(train)} clips, {train.total_duration:.0f} s")
for fam in sorted(set(fams)):
    n = sum(f == fam for f in fams)
    secs = sum(c.duration_s for c, f in zip(train, fams) if f == fam)
    print(f"  {fam:10s} {n:3d} clips {secs:7.1f} s")

BASE = {"idle": 5.0, "walk_like": 30.0, "spin_like": 90.0, "burst_like": 120.0}
rng = np.random.default_rng(0)


def run(reg, episodes=4000, every=200):
    for ep in range(episodes):
        b = reg.sample_bin(rng)
        level = BASE[fams[b.clip_index]] * rng.uniform(0.7, 1.3)
        reg.record(b.global_id, EpisodeErrors(level, 0.2 * level, 2 * level))
        if (ep + 1) % every == 0:
            reg.recompute((ep + 1) / episodes)
    return reg


for name, reg in (("bccas", BinRegistry(train)), ("uniform", UniformClipSampler(train))):
    run(reg)
    d = reg.dist
    print(f"\n{name}: lambda {d.lambda_used:.2f} tau {d.tau_used:.2f} version {d.version}")
    print("  mean sample ratio (draws per clip second):")
    for fam, r in sorted(family_ratios(reg, train).items(), key=lambda kv: -kv[1]):
        print(f"    {fam:10s} {r:7.3f}")
    mass = {f: d.probs[[fams[b.clip_index] == f for b in reg.bins]].sum() for f in BASE}
    print("  probability mass:", {f: round(float(m), 3) for f, m in mass.items()})
