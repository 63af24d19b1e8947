"""Shared test helpers: a fake stage context for driving stages directly."""

import numpy as np
import pytest

from voxpipe.messages import ControlSignal


class FakeCtx:
    """Minimal StageContext stand-in collecting outputs and timers."""

    def __init__(self, now_ns=0):
        self._now = now_ns
        self.published = []  # (t_ns, topic, payload, turn_id)
        self.logs = []
        self.samples = []
        self.timers = []  # (due_ns, fn)
        self.halted = set()
        self.active_turn = None
        self.halt_broadcasts = []

    def now(self):
        return self._now

    def advance_to(self, t_ns):
        """Run due timers in due order, advancing the clock."""
        while True:
            due = sorted((d, i) for i, (d, fn) in enumerate(self.timers)
                         if d <= t_ns and fn is not None)
            if not due:
                break
            d, i = due[0]
            fn = self.timers[i][1]
            self.timers[i] = (d, None)
            self._now = d
            fn(self)
        self._now = t_ns

    def publish(self, topic, payload, turn_id):
        self.published.append((self._now, topic, payload, turn_id))
        return 1

    def telemetry(self, kind, value=0.0, turn_id=-1, **detail):
        self.samples.append((self._now, kind, value, turn_id, detail))

    def log(self, kind, turn_id=-1, **info):
        self.logs.append((self._now, kind, turn_id, info))

    def schedule(self, delay_ns, fn, label=""):
        self.timers.append((self._now + delay_ns, fn))

    def is_halted(self, turn_id):
        return turn_id in self.halted

    def broadcast_halt(self, turn_id):
        self.halt_broadcasts.append((self._now, turn_id))
        return {"llm", "tts", "vocoder", "player"}

    def set_active_agent_turn(self, turn_id):
        self.active_turn = turn_id

    def record(self, kind, dt_ms, turn_id=-1):
        pass

    def run_step(self, step):
        """Charge a step's latency and commit it (no halt checks)."""
        self._now += step.charge_ns
        step.commit(self)

    def payloads(self, topic=None):
        return [p for (_, t, p, _) in self.published
                if topic is None or t == topic]


@pytest.fixture
def fake_ctx():
    return FakeCtx()


def mel_frames(indices, hop_ms=10.0):
    """Placeholder mel frames with correct indices for recognizer tests."""
    from voxpipe.messages import MelFrame

    out = []
    for j in indices:
        out.append(MelFrame(bins=np.zeros(4), frame_index=j, normalized=True,
                            window_start=int(j * hop_ms * 1e6),
                            window_end=int((j * hop_ms + 25.0) * 1e6)))
    return out
