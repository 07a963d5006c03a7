import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egm.env import ChainModel, TrackingEnv
from egm.errors import ConfigError, EgmError, ShapeError
from egm.metrics import (METRICS, TrackedPair, acc_dist, all_metrics, dump_rollout, evaluate, lmpjpe,
                         mpjpe, mpkpe, umpjpe, vel_dist)
from egm.motion import Dataset
from egm.trainer import ReferenceActor

from conftest import IdealEnv, make_clip


def keypoint_pair(ref, act, joints=None):
    ref = np.asarray(ref, dtype=np.float64)
    act = np.asarray(act, dtype=np.float64)
    j = np.zeros((len(ref), 2)) if joints is None else joints
    return TrackedPair(ref, act, j, j, 50, (0,), (1,))


def joint_pair(ref, act, upper=(0, 1), lower=(2, 3)):
    return TrackedPair.from_joints(ref, act, np.ones(np.shape(ref)[-1]), 50, upper, lower)


def random_pair(rng, T=12, n=4):
    ref = rng.normal(0, 0.5, (T, n))
    return joint_pair(ref, ref + rng.normal(0, 0.1, (T, n)))


# -- examples ----------------------------------------------------------------


def test_mpkpe_examples():
    ref = np.zeros((2, 1, 2))
    assert mpkpe(keypoint_pair(ref, ref)) == 0.0
    assert mpkpe(keypoint_pair(ref, ref + [1.0, 0.0])) == 1.0
    act = np.array([[[3.0, 0.0]], [[0.0, 4.0]]])
    assert mpkpe(keypoint_pair(ref, act)) == 3.5


def test_joint_errors_examples():
    ref = np.zeros((5, 4))
    assert umpjpe(joint_pair(ref, ref)) == 0.0 and lmpjpe(joint_pair(ref, ref)) == 0.0
    act = ref.copy()
    act[:, 1] = 0.2
    p = joint_pair(ref, act)
    assert lmpjpe(p) == 0.0 and umpjpe(p) > 0
    act = ref.copy()
    act[:, 0], act[:, 1] = 0.1, 0.3
    assert umpjpe(joint_pair(ref, act)) == pytest.approx(0.2)


def test_bad_partition():
    ref = np.zeros((3, 4))
    for up, lo in (((0, 1), (1, 2, 3)), ((0,), (1, 2)), ((), (0, 1, 2, 3))):
        with pytest.raises(ConfigError):
            umpjpe(joint_pair(ref, ref, up, lo))


def test_velocity_and_acceleration_examples():
    ref = np.zeros((6, 2, 2))
    assert vel_dist(keypoint_pair(ref, ref)) == 0.0 and acc_dist(keypoint_pair(ref, ref)) == 0.0
    shifted = ref + [7.0, -2.0]
    assert vel_dist(keypoint_pair(ref, shifted)) == 0.0 and acc_dist(keypoint_pair(ref, shifted)) == 0.0
    # constant 5 mm/frame motion, actual delayed by one frame
    line = np.zeros((8, 1, 2))
    line[:, 0, 0] = 5.0 * np.arange(8)
    delayed = np.concatenate([line[:1], line[:-1]])
    interior = keypoint_pair(line[1:], delayed[1:])
    assert vel_dist(interior) == 0.0


def test_too_few_frames():
    ref = np.zeros((2, 1, 2))
    with pytest.raises(ShapeError):
        vel_dist(keypoint_pair(ref, ref))
    with pytest.raises(ShapeError):
        acc_dist(keypoint_pair(ref, ref))
    assert np.isnan(all_metrics(joint_pair(np.zeros((2, 4)), np.zeros((2, 4))))["vel_dist"])


def test_layout_mismatch():
    with pytest.raises(ShapeError):
        keypoint_pair(np.zeros((3, 2, 2)), np.zeros((3, 1, 2)))


def test_keypoints_are_in_millimetres():
    ref = np.zeros((3, 2))
    act = np.zeros((3, 2))
    act[:, 0] = 1e-3  # tiny rotation of the first joint
    p = TrackedPair.from_joints(ref, act, [1.0, 1.0], 50, (0,), (1,))
    # link ends move by ~1 mm and ~2 mm
    assert mpkpe(p) == pytest.approx(1.5, rel=1e-5)


# -- properties --------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_non_negative_and_zero_on_identity(seed):
    rng = np.random.default_rng(seed)
    p = random_pair(rng)
    vals = all_metrics(p)
    assert all(v >= 0 for v in vals.values())
    same = joint_pair(p.ref_joints, p.ref_joints)
    assert all(v == 0 for v in all_metrics(same).values())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_rigid_translation_invariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    ref = rng.normal(0, 100, (10, 3, 2))
    act = ref + rng.normal(0, 5, ref.shape)
    a = keypoint_pair(ref, act)
    b = keypoint_pair(ref + [dx, dy], act + [dx, dy])
    for f in (mpkpe, vel_dist, acc_dist):
        assert f(a) == pytest.approx(f(b), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50), st.floats(-50, 50))
def test_mpkpe_constant_offset_and_differences_invariant(seed, dx, dy):
    rng = np.random.default_rng(seed)
    ref = rng.normal(0, 100, (10, 3, 2))
    p = keypoint_pair(ref, ref + [dx, dy])
    assert mpkpe(p) == pytest.approx(np.hypot(dx, dy), rel=1e-9, abs=1e-9)
    assert vel_dist(p) < 1e-9 and acc_dist(p) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 5))
def test_partition_recombines(seed, nu, nl):
    rng = np.random.default_rng(seed)
    n = nu + nl
    ref = rng.normal(0, 1, (7, n))
    p = joint_pair(ref, ref + rng.normal(0, 0.2, ref.shape), tuple(range(nu)), tuple(range(nu, n)))
    assert (nu * umpjpe(p) + nl * lmpjpe(p)) / n == pytest.approx(mpjpe(p), rel=1e-12)


# -- evaluation -------------------------------------------------------------


def _dataset():
    rng = np.random.default_rng(0)
    clips = [make_clip(f"c{i}", np.cumsum(rng.normal(0, 0.05, (20 + 5 * i, 5)), axis=0)) for i in range(3)]
    return Dataset(tuple(clips))


def test_reference_actor_in_ideal_env_is_exact():
    ds = _dataset()
    factory = lambda n, s: IdealEnv(ChainModel(dt=0.02), n_envs=n, seed=s)  # noqa: E731
    rep = evaluate(ReferenceActor(), ds, factory, seeds=(0,))
    for m in METRICS:
        assert np.all(np.abs(rep.values[m]) < 1e-6)
    assert rep.completed.all()


def test_two_seeds_deterministic_zero_std():
    ds = _dataset()
    factory = lambda n, s: TrackingEnv(ChainModel(dt=0.02), n_envs=n, seed=s)  # noqa: E731
    rep = evaluate(ReferenceActor(), ds, factory, seeds=(3, 4))
    agg = rep.aggregate()
    assert all(agg[m][1] == 0.0 for m in METRICS)
    assert all(c.std["mpkpe"] == 0.0 for c in rep.clips.values())
    assert rep.mean() > 0


def test_aggregate_matches_independent_recomputation():
    ds = _dataset()
    model = ChainModel(dt=0.02)
    rep = evaluate(ReferenceActor(), ds, lambda n, s: TrackingEnv(model, n_envs=n, seed=s), seeds=(0,))
    per_clip = []
    for clip in ds:
        env = TrackingEnv(model, n_envs=1)
        env.reset(0, clip.frames, clip.velocities, clip.fps)
        act = [env.theta[0].copy()]
        obs = env.observe()
        while env.active[0]:
            obs, _, _, _ = env.step(ReferenceActor()(obs, env))
            if env.t[0] % env.steps_per_frame(clip.fps) == 0:
                act.append(env.theta[0].copy())
        per_clip.append(mpkpe(TrackedPair.from_joints(clip.frames, np.array(act), model.link_lengths,
                                                      clip.fps, (0, 1), (2, 3, 4))))
    assert rep.mean("mpkpe") == pytest.approx(np.mean(per_clip), rel=1e-12)


def test_failures_are_recorded_per_clip():
    ds = _dataset()

    class Flaky(ReferenceActor):
        def __call__(self, obs, env):
            if env.horizon.max() > 130:
                raise EgmError("boom")
            return super().__call__(obs, env)

    rep = evaluate(Flaky(), ds, lambda n, s: TrackingEnv(ChainModel(dt=0.02), n_envs=n), seeds=(0,))
    errs = dict(rep.errors)
    assert set(errs) == {"c2"}
    assert np.isnan(rep.values["mpkpe"][0, 2]) and np.isfinite(rep.values["mpkpe"][0, 0])


def test_terminated_rollouts_are_flagged():
    clip = make_clip("wild", np.linspace(0, 300, 40)[:, None] * np.ones(5))
    rep = evaluate(ReferenceActor(), Dataset((clip,)), lambda n, s: TrackingEnv(ChainModel(dt=0.02), n_envs=n),
                   seeds=(0,))
    assert not rep.completed[0, 0]
    assert np.isfinite(rep.values["mpkpe"][0, 0])


def test_report_csv(tmp_path):
    ds = _dataset()
    rep = evaluate(ReferenceActor(), ds, lambda n, s: TrackingEnv(ChainModel(dt=0.02), n_envs=n), seeds=(0, 1))
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["clip"] for r in rows] == ["c0", "c1", "c2"]
    assert set(rows[0]) == ({"clip", "duration_s", "completed_fraction"}
                            | {f"{m}_{s}" for m in METRICS for s in ("mean", "std")})
    assert float(rows[0]["mpkpe_mean"]) == pytest.approx(rep.clips["c0"].mean["mpkpe"], rel=1e-8)


def test_subset_keeps_alignment():
    ds = _dataset()
    rep = evaluate(ReferenceActor(), ds, lambda n, s: TrackingEnv(ChainModel(dt=0.02), n_envs=n), seeds=(0,))
    sub = rep.subset([False, True, True])
    assert sub.names == ("c1", "c2")
    assert np.array_equal(sub.values["mpkpe"], rep.values["mpkpe"][:, 1:])


def test_dump_rollout(tmp_path):
    clip = _dataset()[0]
    dump_rollout(ReferenceActor(), TrackingEnv(ChainModel(dt=0.02)), clip, tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0][0] == "t" and rows[0][-1] == "total"
    assert len(rows) - 1 == (clip.frame_count - 1) * 5
