import numpy as np
import pytest

from egm.env import ChainModel, TrackingEnv
from egm.motion import Dataset, MotionClip, gen_procedural


class IdealEnv(TrackingEnv):
    """Actuation without dynamics: each step lands exactly on the commanded targets."""

    def step(self, action):
        action = np.asarray(action, dtype=np.float64)
        act = self.active.copy()
        new_dot = (action - self.theta) / self.model.dt
        self.theta_dot = np.where(act[:, None], new_dot, self.theta_dot)
        self.theta = np.where(act[:, None], action, self.theta)
        self.t = self.t + act
        terms = None
        truncated = act & (self.t >= self.horizon)
        terminated = np.zeros_like(act)
        self.active = act & ~truncated
        return self.observe(), terms, truncated, {"terminated": terminated, "truncated": truncated}


def make_clip(name, frames, fps=10, tags=()):
    frames = np.asarray(frames, dtype=np.float64)
    return MotionClip(name, fps, frames.shape[1], frames, frozenset(tags))


@pytest.fixture
def small_dataset():
    clips = (gen_procedural("walk_like", 1, 3.0, 5, fps=50),
             gen_procedural("spin_like", 2, 4.5, 5, fps=50),
             gen_procedural("idle", 3, 2.0, 5, fps=50))
    return Dataset(clips)


@pytest.fixture
def fast_chain():
    return ChainModel(dt=0.02)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
