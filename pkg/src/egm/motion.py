"""Motion clips, datasets, 1-second bins, reference windows and curation filters."""

from __future__ import annotations

import json
import os
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgumentError, MissingEvaluationError, ParseError, ValidationError

CLIP_SUFFIX = ".clip.json"
FAMILIES = ("idle", "walk_like", "spin_like", "burst_like", "composite")
MAX_WINDOW_S = 20
MAX_OFFSET_S = 5.0


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def finite_difference_velocity(frames, fps):
    """Central differences inside the clip, one-sided at its two ends (rad/s)."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) < 2:
        return np.zeros_like(frames)
    return np.gradient(frames, 1.0 / fps, axis=0, edge_order=1)


@dataclass(frozen=True, eq=False)
class MotionClip:
    name: str
    fps: int
    dof_count: int
    frames: np.ndarray
    tags: frozenset = frozenset()
    source: str = "procedural"

    def __post_init__(self):
        if not isinstance(self.fps, (int, np.integer)) or self.fps < 1:
            raise ValidationError(f"fps must be a positive integer, got {self.fps!r}")
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.dof_count:
            raise ValidationError(
                f"every frame must have dof_count={self.dof_count} entries, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("non-finite frame value")
        if len(frames) < self.fps:
            raise ValidationError("clip shorter than 1 s")
        if self.source not in ("procedural", "file"):
            raise ValidationError(f"unknown source {self.source!r}")
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "velocities", _frozen(finite_difference_velocity(frames, self.fps)))

    @property
    def frame_count(self):
        return len(self.frames)

    @property
    def duration_s(self):
        return self.frame_count / self.fps

    def __eq__(self, other):
        if not isinstance(other, MotionClip):
            return NotImplemented
        return (self.name == other.name and self.fps == other.fps
                and self.dof_count == other.dof_count and self.tags == other.tags
                and np.array_equal(self.frames, other.frames))

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    clips: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        names = [c.name for c in self.clips]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"clip names must be unique, duplicates: {dup}")

    @property
    def total_duration(self):
        return float(sum(c.duration_s for c in self.clips))

    def __len__(self):
        return len(self.clips)

    def __iter__(self):
        return iter(self.clips)

    def __getitem__(self, i):
        return self.clips[i]

    def names(self):
        return [c.name for c in self.clips]

    def index_of(self, name):
        for i, c in enumerate(self.clips):
            if c.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class MotionBin:
    global_id: int
    clip_index: int
    start_frame: int
    length_frames: int


@dataclass(frozen=True, eq=False)
class ReferenceWindow:
    clip_index: int
    start_frame: int
    length_frames: int
    positions: np.ndarray
    velocities: np.ndarray
    fps: int

    @property
    def duration_s(self):
        return self.length_frames / self.fps


# --------------------------------------------------------------------------
# clip files and manifests


def _fmt(x):
    return format(float(x), ".16e")


def dump_clip(clip):
    header = json.dumps({"name": clip.name, "fps": int(clip.fps), "dof_count": int(clip.dof_count),
                         "tags": sorted(clip.tags)})
    rows = ",\n    ".join("[" + ", ".join(_fmt(v) for v in row) + "]" for row in clip.frames)
    return f'{{\n  "header": {header},\n  "frames": [\n    {rows}\n  ]\n}}\n'


def save_clip(clip, path):
    path = Path(path)
    path.write_text(dump_clip(clip), encoding="utf-8")
    return path


def load_clip(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", path=path)
    for key in ("header", "frames"):
        if key not in doc:
            raise ParseError("missing", path=path, field=key)
    header = doc["header"]
    if not isinstance(header, dict):
        raise ParseError("must be an object", path=path, field="header")
    for key, kind in (("name", str), ("fps", int), ("dof_count", int), ("tags", list)):
        if key not in header:
            raise ParseError("missing", path=path, field=f"header.{key}")
        if not isinstance(header[key], kind) or isinstance(header[key], bool):
            raise ParseError(f"expected {kind.__name__}", path=path, field=f"header.{key}")
    frames = doc["frames"]
    if not isinstance(frames, list) or not all(isinstance(r, list) for r in frames):
        raise ParseError("must be an array of arrays", path=path, field="frames")
    dof = header["dof_count"]
    for i, row in enumerate(frames):
        if len(row) != dof:
            raise ValidationError(f"frame {i} has {len(row)} entries, expected dof_count={dof}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
            raise ParseError("non-numeric entry", path=path, field=f"frames[{i}]")
    arr = np.array(frames, dtype=np.float64).reshape(len(frames), dof)
    return MotionClip(name=header["name"], fps=header["fps"], dof_count=dof, frames=arr,
                      tags=frozenset(header["tags"]), source="file")


def read_manifest(path):
    """Relative clip paths listed one per line; blank lines and ``#`` comments skipped."""
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(path.parent / line)
    return out


def load_dataset(manifest):
    return Dataset(tuple(load_clip(p) for p in read_manifest(manifest)))


def save_dataset(dataset, directory, manifest_name="manifest.txt"):
    """Write every clip plus a manifest into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for clip in dataset:
        rel = f"{clip.name}{CLIP_SUFFIX}"
        save_clip(clip, directory / rel)
        lines.append(rel)
    manifest = directory / manifest_name
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def write_manifest(path, clip_paths):
    """Manifest listing ``clip_paths`` relative to the manifest's own directory."""
    path = Path(path)
    rels = [os.path.relpath(Path(p).resolve(), path.parent.resolve()) if Path(p).is_absolute()
            else str(p) for p in clip_paths]
    path.write_text("\n".join(rels) + ("\n" if rels else ""), encoding="utf-8")


# --------------------------------------------------------------------------
# procedural clips


def _cos_ramp(s, T):
    """0 → 1 over ``[0, T]`` with zero slope at both ends (C¹)."""
    s = np.clip(s / T, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * s))


def _walk(rng, t, dof):
    base = rng.uniform(-0.2, 0.2, dof)
    freq = rng.uniform(0.8, 1.2)
    amp = rng.uniform(0.15, 0.35, dof)
    phase = rng.uniform(0.0, 2 * np.pi, dof)
    return base + amp * np.sin(2 * np.pi * freq * t[:, None] + phase)


def _spin(rng, t, dof):
    base = rng.uniform(-0.2, 0.2, dof)
    f1, f2 = rng.uniform(0.3, 0.6), rng.uniform(1.2, 2.0)
    a1, a2 = rng.uniform(0.4, 0.8, dof), rng.uniform(0.15, 0.3, dof)
    p1, p2 = rng.uniform(0.0, 2 * np.pi, (2, dof))
    tt = t[:, None]
    return base + a1 * np.sin(2 * np.pi * f1 * tt + p1) + a2 * np.sin(2 * np.pi * f2 * tt + p2)


def _burst(rng, t, dof):
    base = rng.uniform(-0.2, 0.2, dof)
    freq = rng.uniform(0.8, 1.2)
    amp = rng.uniform(0.05, 0.15, dof)
    phase = rng.uniform(0.0, 2 * np.pi, dof)
    out = base + amp * np.sin(2 * np.pi * freq * t[:, None] + phase)
    duration = t[-1] if len(t) else 0.0
    onset = rng.uniform(0.1, 0.3)
    while onset < duration:
        joints = rng.random(dof) < 0.5
        joints[rng.integers(dof)] = True
        height = rng.uniform(0.9, 1.2) * rng.choice([-1.0, 1.0], dof)
        rise = rng.uniform(0.10, 0.15)
        hold = rng.uniform(0.1, 0.4)
        up = _cos_ramp(t - onset, rise)
        down = _cos_ramp(t - (onset + rise + hold), rise)
        out += (up - down)[:, None] * np.where(joints, height, 0.0)
        onset += 2 * rise + hold + rng.uniform(1.2, 3.0)
    return out


def gen_procedural(family, seed, duration_s, dof_count, fps=50):
    """Deterministic synthetic motion of a given family.

    ``idle`` holds a constant pose, ``walk_like`` is a gentle periodic gait,
    ``spin_like`` a larger two-frequency sweep, ``burst_like`` a quiet base
    with sudden C¹ jumps (peak joint speeds several times a walk's), and
    ``composite`` blends a walk into a sweep halfway through.
    """
    if family not in FAMILIES:
        raise ArgumentError(f"unknown family {family!r}")
    if duration_s < 1:
        raise ArgumentError("duration_s must be at least 1")
    if dof_count < 2:
        raise ArgumentError("dof_count must be at least 2")
    if int(fps) != fps or fps < 1:
        raise ArgumentError("fps must be a positive integer")
    fps = int(fps)
    n = int(round(duration_s * fps))
    t = np.arange(n) / fps
    rng = np.random.default_rng([int(seed), FAMILIES.index(family), dof_count])
    if family == "idle":
        frames = np.tile(rng.uniform(-0.3, 0.3, dof_count), (n, 1))
    elif family == "walk_like":
        frames = _walk(rng, t, dof_count)
    elif family == "spin_like":
        frames = _spin(rng, t, dof_count)
    elif family == "burst_like":
        frames = _burst(rng, t, dof_count)
    else:
        walk = _walk(rng, t, dof_count)
        spin = _spin(rng, t, dof_count)
        mid = t[-1] / 2 if n else 0.0
        blend = _cos_ramp(t - (mid - 0.5), 1.0)[:, None]
        frames = (1 - blend) * walk + blend * spin
    return MotionClip(name=f"{family}_{seed:04d}", fps=fps, dof_count=dof_count, frames=frames,
                      tags=frozenset({family}), source="procedural")


def imbalanced_preset(seed=0, dof_count=5, fps=50):
    """The ``imbalanced`` toy corpus: many short easy clips, few long hard ones.

    Returns ``(train, eval)``. Training holds 60 idle/walk clips of 2–10 s,
    10 spin clips of 20–40 s and 4 burst clips of 30–60 s; the evaluation
    split has the same mix at a quarter of the size, drawn from disjoint
    seeds.
    """
    rng = np.random.default_rng([int(seed), 7919])

    def build(n_short, n_spin, n_burst, seed_base):
        clips = []
        k = seed_base
        for i in range(n_short):
            family = "idle" if i % 2 == 0 else "walk_like"
            clips.append(gen_procedural(family, k, round(rng.uniform(2, 10), 2), dof_count, fps))
            k += 1
        for _ in range(n_spin):
            clips.append(gen_procedural("spin_like", k, round(rng.uniform(20, 40), 2), dof_count, fps))
            k += 1
        for _ in range(n_burst):
            clips.append(gen_procedural("burst_like", k, round(rng.uniform(30, 60), 2), dof_count, fps))
            k += 1
        return Dataset(tuple(clips))

    base = 1000 * int(seed)
    return build(60, 10, 4, base), build(12, 3, 2, base + 500)


# --------------------------------------------------------------------------
# bins and windows


def segment_bins(dataset):
    """Tile every clip with 1-second bins; a short final bin is kept."""
    if len(dataset) == 0:
        raise ArgumentError("dataset is empty")
    bins = []
    for ci, clip in enumerate(dataset):
        for start in range(0, clip.frame_count, clip.fps):
            bins.append(MotionBin(len(bins), ci, start, min(clip.fps, clip.frame_count - start)))
    return bins


def extract_window(dataset, bin, offset_s=None, rng=None):
    """Reference window starting ``offset_s`` after ``bin``, capped at 20 s.

    With ``offset_s=None`` the offset is drawn uniformly from [0, 5] s.
    The start is clamped so at least one second of reference remains.
    """
    clip = dataset[bin.clip_index]
    if offset_s is None:
        if rng is None:
            raise ArgumentError("either offset_s or rng is required")
        offset_s = rng.uniform(0.0, MAX_OFFSET_S)
    fps = clip.fps
    start = bin.start_frame + int(round(offset_s * fps))
    start = max(0, min(start, clip.frame_count - fps))
    length = min(MAX_WINDOW_S * fps, clip.frame_count - start)
    sl = slice(start, start + length)
    return ReferenceWindow(bin.clip_index, start, length, clip.frames[sl], clip.velocities[sl], fps)


# --------------------------------------------------------------------------
# curation

RULE_KINDS = ("keyword_reject", "joint_limit", "velocity_limit", "keypoint_height_band")


@dataclass(frozen=True)
class CurationRule:
    """One machine-checkable filter.

    ``keyword_reject``: ``keywords`` (case-insensitive substrings of name or tags).
    ``joint_limit``: ``lower``/``upper`` in rad. ``velocity_limit``: ``max_abs``
    in rad/s. ``keypoint_height_band``: ``lower``/``upper`` in metres on the
    planar-chain keypoint heights, optional ``link_lengths``.
    """

    kind: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValidationError(f"unknown rule kind {self.kind!r}")
        p = dict(self.params)
        if self.kind == "keyword_reject":
            kws = p.get("keywords")
            if isinstance(kws, str):
                kws = [kws]
            if not kws:
                raise ValidationError("keyword_reject needs at least one keyword")
            p["keywords"] = tuple(str(k) for k in kws)
        elif self.kind == "velocity_limit":
            v = float(p.get("max_abs", math.nan))
            if not math.isfinite(v) or v <= 0:
                raise ValidationError("velocity_limit needs a finite positive max_abs")
            p["max_abs"] = v
        else:
            lo, hi = float(p.get("lower", math.nan)), float(p.get("upper", math.nan))
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValidationError(f"{self.kind} bounds must be finite")
            if not lo < hi:
                raise ValidationError(f"{self.kind} needs lower < upper")
            p["lower"], p["upper"] = lo, hi
            if "link_lengths" in p:
                p["link_lengths"] = tuple(float(x) for x in p["link_lengths"])
        object.__setattr__(self, "params", p)

    @classmethod
    def keyword_reject(cls, *keywords):
        return cls("keyword_reject", {"keywords": keywords})

    @classmethod
    def joint_limit(cls, lower, upper):
        return cls("joint_limit", {"lower": lower, "upper": upper})

    @classmethod
    def velocity_limit(cls, max_abs):
        return cls("velocity_limit", {"max_abs": max_abs})

    @classmethod
    def keypoint_height_band(cls, lower, upper, link_lengths=None):
        p = {"lower": lower, "upper": upper}
        if link_lengths is not None:
            p["link_lengths"] = link_lengths
        return cls("keypoint_height_band", p)

    def check(self, clip):
        """Return a detail string when the rule fires on ``clip``, else ``None``."""
        p = self.params
        if self.kind == "keyword_reject":
            hay = [clip.name.lower(), *(t.lower() for t in clip.tags)]
            for kw in p["keywords"]:
                if any(kw.lower() in h for h in hay):
                    return f"keyword {kw!r}"
            return None
        if self.kind == "joint_limit":
            lo, hi = clip.frames.min(), clip.frames.max()
            if lo < p["lower"] or hi > p["upper"]:
                return f"joint range [{lo:.4g}, {hi:.4g}] outside [{p['lower']}, {p['upper']}] rad"
            return None
        if self.kind == "velocity_limit":
            peak = float(np.abs(clip.velocities).max())
            if peak > p["max_abs"]:
                return f"peak speed {peak:.4g} rad/s > {p['max_abs']}"
            return None
        lengths = p.get("link_lengths") or (1.0,) * clip.dof_count
        if len(lengths) != clip.dof_count:
            return f"link_lengths has {len(lengths)} entries for {clip.dof_count} joints"
        angles = np.cumsum(clip.frames, axis=1)
        heights = np.cumsum(np.asarray(lengths) * np.sin(angles), axis=1)
        lo, hi = heights.min(), heights.max()
        if lo < p["lower"] or hi > p["upper"]:
            return f"keypoint heights [{lo:.4g}, {hi:.4g}] outside [{p['lower']}, {p['upper']}] m"
        return None


@dataclass(frozen=True)
class Rejection:
    clip_name: str
    rule: CurationRule
    detail: str


def rule_filter(dataset, rules):
    """Split ``dataset`` by ``rules``; each rejection records the first rule that fired."""
    if len(dataset) and not rules:
        raise ArgumentError("rules must be non-empty")
    kept, rejected = [], []
    for clip in dataset:
        for rule in rules:
            detail = rule.check(clip)
            if detail is not None:
                rejected.append(Rejection(clip.name, rule, detail))
                break
        else:
            kept.append(clip)
    return Dataset(tuple(kept)), rejected


def policy_error_filter(dataset, report, threshold_mpkpe):
    """Keep the clips whose evaluated E_mpkpe (mm) is at most ``threshold_mpkpe``."""
    kept = []
    for clip in dataset:
        if clip.name not in report.clips:
            raise MissingEvaluationError(clip.name)
        if report.clips[clip.name].mean["mpkpe"] <= threshold_mpkpe:
            kept.append(clip)
    return Dataset(tuple(kept))


def clip_families(dataset: Dataset) -> Sequence[str]:
    """The procedural family of each clip (first matching tag), ``'other'`` if none."""
    out = []
    for clip in dataset:
        fam = next((f for f in FAMILIES if f in clip.tags), "other")
        out.append(fam)
    return out
