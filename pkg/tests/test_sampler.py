import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from egm.errors import ArgumentError, MetricError, ValidationError
from egm.motion import Dataset
from egm.sampler import (BinRegistry, BinStats, CompositeErrorWeights, CurriculumConfig, EpisodeErrors,
                         SamplingDistribution, UniformClipSampler, composite_error, compute_probs,
                         draw, normalize_errors, sample_report, schedule, update_error)

from conftest import make_clip

unit = st.floats(1e-3, 1.0, allow_nan=False)


def test_composite_error_examples():
    w = CompositeErrorWeights(1.0, 0.5, 0.0)
    assert composite_error((0, 0, 0), CompositeErrorWeights()) == 0.0
    assert composite_error((10, 4, 99), w) == 12.0
    double = CompositeErrorWeights(2.0, 1.0, 0.0)
    assert composite_error((10, 4, 99), double) == 24.0
    assert composite_error(EpisodeErrors(10, 4, 99), w) == 12.0


def test_composite_error_rejects_bad_metrics():
    with pytest.raises(MetricError):
        composite_error((float("nan"), 0, 0), CompositeErrorWeights())
    with pytest.raises(MetricError):
        composite_error((-1.0, 0, 0), CompositeErrorWeights())


def test_weights_need_a_positive_entry():
    with pytest.raises(ValidationError):
        CompositeErrorWeights(0, 0, 0)


def test_update_error_examples():
    seen = BinStats(0, 0.0, True)
    assert update_error(seen, 1.0, 0.1).ema_error == pytest.approx(0.1)
    s = BinStats(0, 0.4, True)
    assert update_error(s, 0.4, 0.3).ema_error == 0.4
    fresh = update_error(BinStats(0), 0.7, 0.1)
    assert fresh.ema_error == 0.7 and fresh.seen


def test_unseen_bin_must_hold_init_value():
    with pytest.raises(ValidationError):
        BinStats(0, 0.5, False)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0.01, 1.0), st.integers(0, 60))
def test_ema_geometric_convergence(e0, target, beta, n):
    s = BinStats(0, e0, True)
    for _ in range(n):
        s = update_error(s, target, beta)
    expected = (1 - beta) ** n * abs(e0 - target)
    assert abs(s.ema_error - target) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def _stats(errors, seen=None):
    seen = [True] * len(errors) if seen is None else seen
    return [BinStats(i, e if s else 0.0, s) for i, (e, s) in enumerate(zip(errors, seen))]


def test_normalize_examples():
    assert np.array_equal(normalize_errors(_stats([2, 2, 2])), [1, 1, 1])
    assert np.allclose(normalize_errors(_stats([0, 5, 10]), 0.001), [0.001, 0.5, 1.0])
    out = normalize_errors(_stats([1, 3, 0], [True, True, False]))
    assert out[2] == 1.0


def test_compute_probs_examples():
    assert np.allclose(compute_probs([0.2, 0.9, 1.0], 1.7, 1.0).probs, 1 / 3, atol=0)
    p = compute_probs([1.0, 0.001], 1.0, 0.5).probs
    assert np.allclose(p, [0.25 + 0.5 / 1.001, 0.25 + 0.5 * 0.001 / 1.001], atol=1e-15)
    assert p[0] == pytest.approx(0.7495, abs=5e-5) and p[1] == pytest.approx(0.2505, abs=5e-5)
    assert np.allclose(compute_probs([0.3] * 5, 0.7, 0.2).probs, 0.2)


def test_compute_probs_preconditions():
    with pytest.raises(ArgumentError):
        compute_probs([0.5], 0.0, 0.5)
    with pytest.raises(ArgumentError):
        compute_probs([0.5], 1.0, 1.5)
    with pytest.raises(ArgumentError):
        compute_probs([0.0, 1.0], 1.0, 0.5)


def test_schedule_examples():
    cfg = CurriculumConfig()
    assert schedule(0.0, cfg) == (0.5, 0.5)
    assert schedule(1.0, cfg) == pytest.approx((0.1, 2.0))
    assert schedule(0.5, cfg) == pytest.approx((0.3, 1.25))
    with pytest.raises(ArgumentError):
        schedule(1.5, cfg)


def test_point_mass_draw():
    dist = SamplingDistribution(np.array([1.0, 0.0, 0.0]), 0.0, 1.0)
    rng = np.random.default_rng(0)
    assert {draw(dist, rng) for _ in range(500)} == {0}


def test_uniform_draw_counts_within_four_sigma():
    dist = SamplingDistribution(np.full(4, 0.25), 1.0, 1.0)
    rng = np.random.default_rng(1)
    n = 100_000
    counts = np.bincount([draw(dist, rng) for _ in range(n)], minlength=4)
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - 25_000) <= 4 * sigma)


def test_draws_are_reproducible():
    dist = compute_probs(np.linspace(0.1, 1, 8), 1.3, 0.2)
    a = [draw(dist, np.random.default_rng(5)) for _ in range(1)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [draw(dist, r1) for _ in range(200)] == [draw(dist, r2) for _ in range(200)]
    assert a


@settings(max_examples=200, deadline=None)
@given(st.lists(unit, min_size=1, max_size=40), st.floats(0.05, 5.0), st.floats(0.0, 1.0))
def test_simplex_property(errors, tau, lam):
    p = compute_probs(errors, tau, lam).probs
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(unit, min_size=2, max_size=20), st.integers(0, 19), st.floats(0.0, 1.0),
       st.floats(0.05, 5.0), st.floats(0.0, 1.0))
def test_monotonic_in_own_error(errors, i, bump, tau, lam):
    i = i % len(errors)
    higher = list(errors)
    higher[i] = errors[i] + bump * (1.0 - errors[i])
    assert compute_probs(higher, tau, lam).probs[i] >= compute_probs(errors, tau, lam).probs[i] - 1e-15


@settings(max_examples=200, deadline=None)
@given(st.lists(unit, min_size=2, max_size=20), st.floats(0.05, 4.0), st.floats(0.0, 3.0))
def test_sharpening_in_tau(errors, tau, extra):
    lo = compute_probs(errors, tau, 0.0).probs.max()
    hi = compute_probs(errors, tau + extra, 0.0).probs.max()
    assert hi >= lo - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_normalization_scale_invariance(errors, c):
    a = normalize_errors(_stats(errors))
    b = normalize_errors(_stats([c * e for e in errors]))
    assert np.allclose(a, b, rtol=1e-9, atol=1e-12)


def test_chi_square_goodness_of_fit():
    rng = np.random.default_rng(2024)
    dist = compute_probs(rng.uniform(0.01, 1.0, 32), 1.5, 0.2)
    draws = np.array([draw(dist, rng) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=32)
    _, pvalue = sps.chisquare(counts, dist.probs * len(draws))
    assert pvalue > 0.001


# -- registry ------------------------------------------------------------------------


def _dataset():
    return Dataset((make_clip("a", np.zeros((100, 2))), make_clip("b", np.zeros((35, 2)))))


def test_registry_sampling_counts_and_record():
    reg = BinRegistry(_dataset())
    assert len(reg) == 10 + 4
    rng = np.random.default_rng(0)
    ids = [reg.sample_bin(rng).global_id for _ in range(50)]
    assert reg.counts.sum() == 50 and np.array_equal(np.bincount(ids, minlength=14), reg.counts)
    reg.record(3, EpisodeErrors(10.0, 2.0, 4.0))
    assert reg.seen[3] and reg.ema[3] == pytest.approx(13.0)
    reg.record(3, EpisodeErrors(0.0, 0.0, 0.0))
    assert reg.ema[3] == pytest.approx(0.9 * 13.0)


def test_registry_recompute_bumps_version_and_uses_schedule():
    reg = BinRegistry(_dataset())
    for i, e in enumerate([5.0, 1.0, 3.0]):
        reg.record(i, EpisodeErrors(e, 0, 0))
    d = reg.recompute(0.5)
    assert d.version == 1 and (d.lambda_used, d.tau_used) == pytest.approx((0.3, 1.25))
    expected = compute_probs(reg.normalized(), 1.25, 0.3).probs
    assert np.allclose(d.probs, expected)
    assert reg.normalized()[1] == pytest.approx(1e-3)


def test_registry_checkpoint_roundtrip(tmp_path):
    reg = BinRegistry(_dataset())
    rng = np.random.default_rng(3)
    for _ in range(20):
        b = reg.sample_bin(rng)
        reg.record(b.global_id, EpisodeErrors(rng.uniform(0, 9), 1.0, 2.0))
    reg.recompute(0.25)
    path = tmp_path / "s.json"
    reg.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"bins", "lambda", "tau", "version"}
    assert set(doc["bins"]["0"]) == {"ema_error", "seen", "sample_count"}
    back = BinRegistry.load(path, _dataset())
    assert np.array_equal(back.ema, reg.ema) and np.array_equal(back.counts, reg.counts)
    assert np.allclose(back.dist.probs, reg.dist.probs) and back.version == reg.version


def test_registry_checkpoint_size_mismatch(tmp_path):
    reg = BinRegistry(_dataset())
    path = tmp_path / "s.json"
    reg.save(path)
    other = Dataset((make_clip("a", np.zeros((100, 2))),))
    with pytest.raises(ValidationError):
        BinRegistry.load(path, other)


def test_uniform_sampler_is_clip_uniform():
    ds = _dataset()
    s = UniformClipSampler(ds)
    p = s.dist.probs
    assert p[:10].sum() == pytest.approx(0.5) and p[10:].sum() == pytest.approx(0.5)
    s.record(0, EpisodeErrors(100.0, 0, 0))
    assert np.array_equal(s.recompute(0.9).probs, p)
    assert s.version == 1


def test_sample_report_examples():
    ds = Dataset((make_clip("ten", np.zeros((100, 2))), make_clip("five", np.zeros((50, 2))),
                  make_clip("never", np.zeros((20, 2)))))
    stats = [BinStats(i, sample_count=3 if i < 10 else (6 if i < 15 else 0)) for i in range(17)]
    rows = sample_report(stats, ds)
    by = {r.clip_name: r for r in rows}
    assert by["ten"].ratio == pytest.approx(3.0)
    assert by["five"].ratio == pytest.approx(6.0)
    assert by["never"].ratio == 0.0
    assert [r.ratio for r in rows] == sorted((r.ratio for r in rows), reverse=True)


def test_sample_report_proportional_to_inverse_duration():
    ds = Dataset((make_clip("a", np.zeros((50, 2))), make_clip("b", np.zeros((100, 2)))))
    stats = [BinStats(i, sample_count=(4 if i == 0 else (4 if i == 5 else 0))) for i in range(15)]
    by = {r.clip_name: r.ratio for r in sample_report(stats, ds)}
    assert by["a"] == pytest.approx(2 * by["b"])
