import numpy as np
import pytest

from skillseg.core import Trajectory
from skillseg.predictor import PredictorModel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class ScriptedModel(PredictorModel):
    """Assigns probability ``exp(-losses[obs])`` to action 0, whatever the context.

    Observation ``t`` is used as a clock, so the loss of step ``t`` does not
    depend on resets.  Every call is recorded for inspection.
    """

    def __init__(self, losses, act_vocab=2):
        self.losses = list(losses)
        self.obs_vocab = len(self.losses)
        self.act_vocab = act_vocab
        self.window = None
        self.log: list[tuple] = []
        self._init_context()

    def _init_context(self):
        self.ctx: list[int] = []

    def reset(self):
        self.log.append(("reset",))
        self.ctx = []

    def observe(self, obs, act):
        self.ctx.append(obs)
        if self.window is not None and len(self.ctx) > self.window:
            self.ctx = self.ctx[-self.window:]

    def context_length(self):
        return len(self.ctx)

    def predict(self, obs):
        self.log.append(("predict", obs, tuple(self.ctx)))
        p0 = float(np.exp(-self.losses[obs]))
        row = np.full(self.act_vocab, (1 - p0) / (self.act_vocab - 1))
        row[0] = p0
        return row


def scripted_trajectory(losses, tid="scripted", events=None):
    n = len(losses)
    return Trajectory.from_arrays(tid, np.arange(n), np.zeros(n, dtype=int), n, 2, events=events)


@pytest.fixture
def scripted():
    return ScriptedModel, scripted_trajectory
