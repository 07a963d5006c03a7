"""Bin-based cross-motion curriculum adaptive sampling.

Every 1-second bin keeps an EMA of the composite tracking error of the
episodes it seeded. Errors are min-max normalized over the whole dataset,
sharpened with a power ``tau`` and mixed with a uniform share ``lambda``;
the curriculum moves ``lambda`` down and ``tau`` up over training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError, MetricError, ValidationError
from .motion import segment_bins

ERROR_INIT = 0.0


@dataclass(frozen=True)
class BinStats:
    global_id: int
    ema_error: float = ERROR_INIT
    seen: bool = False
    sample_count: int = 0

    def __post_init__(self):
        if not math.isfinite(self.ema_error) or self.ema_error < 0:
            raise ValidationError("ema_error must be finite and non-negative")
        if self.sample_count < 0:
            raise ValidationError("sample_count must be non-negative")
        if not self.seen and self.ema_error != ERROR_INIT:
            raise ValidationError("unseen bin must carry the init error")


@dataclass(frozen=True)
class CompositeErrorWeights:
    """Weights on (E_mpkpe in mm, keypoint velocity error in mm/frame, mean joint error in mrad)."""

    w_pos: float = 1.0
    w_vel: float = 0.5
    w_key: float = 0.5

    def __post_init__(self):
        ws = (self.w_pos, self.w_vel, self.w_key)
        if any(not math.isfinite(w) or w < 0 for w in ws) or max(ws) <= 0:
            raise ValidationError("weights must be non-negative with at least one positive")


@dataclass(frozen=True)
class EpisodeErrors:
    mpkpe: float  # mean keypoint position error, mm
    vel_dist: float  # keypoint velocity error, mm/frame
    joint: float  # mean absolute joint error, mrad


@dataclass(frozen=True)
class CurriculumConfig:
    lambda_start: float = 0.5
    lambda_end: float = 0.1
    tau_start: float = 0.5
    tau_end: float = 2.0
    recompute_interval: int = 10_000
    ema_beta: float = 0.1
    error_floor: float = 1e-3

    def __post_init__(self):
        vals = (self.lambda_start, self.lambda_end, self.tau_start, self.tau_end,
                self.ema_beta, self.error_floor)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("curriculum values must be finite")
        for name in ("lambda_start", "lambda_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in ("tau_start", "tau_end", "error_floor"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 < self.ema_beta <= 1:
            raise ValidationError("ema_beta must lie in (0, 1]")
        if int(self.recompute_interval) != self.recompute_interval or self.recompute_interval < 1:
            raise ValidationError("recompute_interval must be an integer >= 1")


@dataclass(frozen=True, eq=False)
class SamplingDistribution:
    probs: np.ndarray
    lambda_used: float
    tau_used: float
    version: int = 0

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError("probs must be a non-negative vector summing to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


def composite_error(metrics, weights):
    """Weighted sum of the episode's error terms."""
    if isinstance(metrics, EpisodeErrors):
        values = (metrics.mpkpe, metrics.vel_dist, metrics.joint)
    else:
        values = tuple(float(m) for m in metrics)
    if len(values) != 3:
        raise MetricError("expected three metric values")
    for v in values:
        if not math.isfinite(v):
            raise MetricError(f"non-finite metric {v}")
        if v < 0:
            raise MetricError(f"negative metric {v}")
    return weights.w_pos * values[0] + weights.w_vel * values[1] + weights.w_key * values[2]


def update_error(stats, new_error, beta):
    """EMA update; the first observation of a bin replaces the init value."""
    if not 0 < beta <= 1:
        raise ArgumentError("beta must lie in (0, 1]")
    if not math.isfinite(new_error) or new_error < 0:
        raise ArgumentError("new_error must be finite and non-negative")
    if not stats.seen:
        return replace(stats, ema_error=float(new_error), seen=True)
    # (1 - beta) * ema + beta * new, arranged so new == ema is an exact fixed point
    return replace(stats, ema_error=stats.ema_error + beta * (float(new_error) - stats.ema_error))


def _normalize(ema, seen, floor):
    out = np.ones(len(ema))
    if seen.any():
        e = ema[seen]
        lo, hi = e.min(), e.max()
        if hi > lo:
            out[seen] = np.maximum((e - lo) / (hi - lo), floor)
    return out


def normalize_errors(stats, floor=1e-3):
    """Min-max normalize seen bins into ``[floor, 1]``; unseen bins get 1."""
    if not stats:
        raise ArgumentError("need at least one bin")
    ema = np.array([s.ema_error for s in stats], dtype=np.float64)
    seen = np.array([s.seen for s in stats], dtype=bool)
    return _normalize(ema, seen, floor)


def compute_probs(norm_errors, tau, lam, version=0):
    """``lam`` uniform plus ``1 - lam`` of the ``tau``-powered normalized errors."""
    e = np.asarray(norm_errors, dtype=np.float64)
    if tau <= 0:
        raise ArgumentError("tau must be positive")
    if not 0 <= lam <= 1:
        raise ArgumentError("lambda must lie in [0, 1]")
    if len(e) == 0 or np.any(e <= 0) or np.any(e > 1):
        raise ArgumentError("normalized errors must lie in (0, 1]")
    powered = e ** tau
    p = lam / len(e) + (1.0 - lam) * powered / powered.sum()
    p /= p.sum()
    return SamplingDistribution(p, float(lam), float(tau), version)


def schedule(progress, cfg):
    """Linear ``(lambda, tau)`` at ``progress`` in [0, 1] of training."""
    if not 0 <= progress <= 1:
        raise ArgumentError("progress must lie in [0, 1]")
    lam = cfg.lambda_start + progress * (cfg.lambda_end - cfg.lambda_start)
    tau = cfg.tau_start + progress * (cfg.tau_end - cfg.tau_start)
    return lam, tau


def draw(dist, rng):
    """Draw one id from ``dist`` (inverse CDF on a single uniform)."""
    cdf = np.cumsum(dist.probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(cdf) - 1)


class BinRegistry:
    """Mutable per-bin table shared between rollout workers and the sampler.

    Statistics are stored column-wise; :meth:`stats` materializes
    :class:`BinStats` records. Recomputing publishes a new immutable
    :class:`SamplingDistribution` with an incremented version.
    """

    def __init__(self, dataset, cfg=None, weights=None):
        self.dataset = dataset
        self.bins = segment_bins(dataset)
        self.cfg = cfg or CurriculumConfig()
        self.weights = weights or CompositeErrorWeights()
        n = len(self.bins)
        self.ema = np.full(n, ERROR_INIT)
        self.seen = np.zeros(n, dtype=bool)
        self.counts = np.zeros(n, dtype=np.int64)
        self.clip_of_bin = np.array([b.clip_index for b in self.bins])
        lam, tau = schedule(0.0, self.cfg)
        self.dist = compute_probs(np.ones(n), tau, lam, version=0)

    def __len__(self):
        return len(self.bins)

    @property
    def version(self):
        return self.dist.version

    def stats(self):
        return [BinStats(i, float(self.ema[i]), bool(self.seen[i]), int(self.counts[i]))
                for i in range(len(self.bins))]

    def sample_bin(self, rng):
        i = draw(self.dist, rng)
        self.counts[i] += 1
        return self.bins[i]

    def record(self, global_id, errors):
        """Attribute one episode's composite error to the bin that seeded it."""
        e = composite_error(errors, self.weights)
        s = update_error(BinStats(global_id, float(self.ema[global_id]), bool(self.seen[global_id]),
                                  int(self.counts[global_id])), e, self.cfg.ema_beta)
        self.ema[global_id] = s.ema_error
        self.seen[global_id] = s.seen
        return e

    def normalized(self):
        return _normalize(self.ema, self.seen, self.cfg.error_floor)

    def recompute(self, progress):
        lam, tau = schedule(min(max(progress, 0.0), 1.0), self.cfg)
        self.dist = compute_probs(self.normalized(), tau, lam, version=self.dist.version + 1)
        return self.dist

    # -- checkpoint --------------------------------------------------------

    def to_dict(self):
        return {
            "bins": {str(i): {"ema_error": float(self.ema[i]), "seen": bool(self.seen[i]),
                              "sample_count": int(self.counts[i])} for i in range(len(self.bins))},
            "lambda": self.dist.lambda_used,
            "tau": self.dist.tau_used,
            "version": self.dist.version,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    def load_dict(self, doc):
        bins = doc["bins"]
        if len(bins) != len(self.bins):
            raise ValidationError(f"checkpoint has {len(bins)} bins, dataset has {len(self.bins)}")
        for key, rec in bins.items():
            i = int(key)
            self.ema[i] = float(rec["ema_error"])
            self.seen[i] = bool(rec["seen"])
            self.counts[i] = int(rec["sample_count"])
        self.dist = compute_probs(self.normalized(), float(doc["tau"]), float(doc["lambda"]),
                                  version=int(doc["version"]))

    @classmethod
    def load(cls, path, dataset, cfg=None, weights=None):
        reg = cls(dataset, cfg, weights)
        reg.load_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        return reg


class UniformClipSampler(BinRegistry):
    """Baseline without adaptive sampling: a clip uniformly, then a bin uniformly within it.

    Keeps the same bookkeeping (errors, counts, versions) so the two are
    interchangeable in training, but the published distribution never
    depends on the errors.
    """

    def __init__(self, dataset, cfg=None, weights=None):
        super().__init__(dataset, cfg, weights)
        per_clip = np.bincount(self.clip_of_bin)
        p = 1.0 / (len(per_clip) * per_clip[self.clip_of_bin])
        self._uniform = p / p.sum()
        self.dist = SamplingDistribution(self._uniform, 1.0, 1.0, 0)

    def recompute(self, progress):
        self.dist = SamplingDistribution(self._uniform, 1.0, 1.0, self.dist.version + 1)
        return self.dist

    def load_dict(self, doc):
        super().load_dict(doc)
        self.dist = SamplingDistribution(self._uniform, 1.0, 1.0, int(doc["version"]))


@dataclass(frozen=True)
class SampleRatio:
    clip_name: str
    duration_s: float
    count: int
    ratio: float


def sample_report(stats, dataset):
    """Per-clip bin sample count divided by clip duration, sorted descending."""
    bins = segment_bins(dataset)
    if len(stats) != len(bins):
        raise ArgumentError(f"{len(stats)} stats for {len(bins)} bins")
    counts = np.zeros(len(dataset), dtype=np.int64)
    for s in stats:
        counts[bins[s.global_id].clip_index] += s.sample_count
    rows = [SampleRatio(c.name, c.duration_s, int(counts[i]), counts[i] / c.duration_s)
            for i, c in enumerate(dataset)]
    return sorted(rows, key=lambda r: -r.ratio)
