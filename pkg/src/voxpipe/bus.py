"""Topic-based pub/sub transport connecting the pipeline stages.

Each subscription owns a two-lane bounded queue: control signals ride a
priority lane that overtakes queued data and is never blocked by a full
data lane; data rides a bounded FIFO lane with publisher backpressure
(spilled envelopes park in a pending list and the producer is considered
blocked until a consumer frees space — nothing is ever dropped silently).

Stale-turn filtering happens at dequeue: once a subscriber has popped a
halt for turn T, any queued data envelope still tagged with turn T is
discarded (and counted) instead of being handed to the stage.
"""

from __future__ import annotations

import threading
from collections import deque
from typing import Callable, Iterable, Optional

from .messages import ControlSignal, Envelope, SignalKind

TOPIC_AUDIO = "audio.chunks"
TOPIC_MEL = "mel.frames"
TOPIC_TOKENS = "asr.tokens"
TOPIC_LLM = "llm.tokens"
TOPIC_TTS = "tts.frames"
TOPIC_PCM = "pcm.chunks"
TOPIC_CONTROL = "control.signals"
TOPIC_TELEMETRY = "telemetry.samples"

ALL_TOPICS = (
    TOPIC_AUDIO,
    TOPIC_MEL,
    TOPIC_TOKENS,
    TOPIC_LLM,
    TOPIC_TTS,
    TOPIC_PCM,
    TOPIC_CONTROL,
    TOPIC_TELEMETRY,
)


class BusError(Exception):
    pass


class UnknownTopic(BusError):
    pass


class SequenceRegression(BusError):
    pass


class DuplicateSubscription(BusError):
    pass


class NoActiveAgentTurn(BusError):
    pass


class Subscription:
    """One stage's inbound queue for one topic. Single consumer."""

    def __init__(self, topic: str, stage: str, capacity: int, lock: threading.RLock):
        self.topic = topic
        self.stage = stage
        self.capacity = capacity
        self._lock = lock
        self._not_empty = threading.Condition(lock)
        self._control: deque[Envelope] = deque()
        self._data: deque[Envelope] = deque()
        # data spilled past capacity; producers that spilled are blocked
        self._pending: deque[tuple[Envelope, str]] = deque()
        self.halted_turns: set[int] = set()
        self.stale_dropped = 0
        self._on_offer: Optional[Callable[[], None]] = None  # runtime wake hook

    # -- producer side (bus holds the lock) --

    def _offer(self, env: Envelope, producer: str) -> bool:
        """Queue the envelope; returns False when the producer spilled (blocked)."""
        try:
            if env.is_control:
                self._control.append(env)
                self._not_empty.notify()
                return True
            if self._pending or len(self._data) >= self.capacity:
                self._pending.append((env, producer))
                return False
            self._data.append(env)
            self._not_empty.notify()
            return True
        finally:
            if self._on_offer is not None:
                self._on_offer()

    def _promote_pending(self) -> set[str]:
        """Move spilled envelopes into freed data slots; returns producers unblocked."""
        freed: set[str] = set()
        while self._pending and len(self._data) < self.capacity:
            env, producer = self._pending.popleft()
            self._data.append(env)
            self._not_empty.notify()
            if not any(p == producer for _, p in self._pending):
                freed.add(producer)
        return freed

    # -- consumer side --

    def try_pop(self) -> Optional[Envelope]:
        with self._lock:
            return self._pop_locked()

    def pop(self, timeout: Optional[float] = None) -> Optional[Envelope]:
        """Blocking pop for realtime workers; None on timeout."""
        with self._not_empty:
            env = self._pop_locked()
            while env is None:
                if not self._not_empty.wait(timeout):
                    return None
                env = self._pop_locked()
            return env

    def _pop_locked(self) -> Optional[Envelope]:
        if self._control:
            env = self._control.popleft()
            sig = env.payload
            if isinstance(sig, ControlSignal) and sig.kind is SignalKind.HALT:
                self.halted_turns.add(sig.turn_id)
            return env
        while self._data:
            env = self._data.popleft()
            self._promote_pending()
            if env.turn_id in self.halted_turns:
                self.stale_dropped += 1
                continue
            return env
        return None

    def peek_kind(self) -> Optional[str]:
        with self._lock:
            if self._control:
                return "control"
            if self._data:
                return "data"
            return None

    def data_queued(self) -> int:
        with self._lock:
            return len(self._data) + len(self._pending)

    def __len__(self) -> int:
        with self._lock:
            return len(self._control) + len(self._data) + len(self._pending)


class Bus:
    """In-process transport with per-topic subscriptions and a priority control lane."""

    def __init__(self, data_capacity: int = 256):
        self._lock = threading.RLock()
        self._space = threading.Condition(self._lock)
        self._topics: dict[str, list[Subscription]] = {}
        self._last_seq: dict[tuple[str, str], int] = {}
        self._last_produced_at: dict[str, int] = {}
        self._data_capacity = data_capacity
        self._active_agent_turn: Optional[int] = None
        self._halt_targets: tuple[str, ...] = ()
        self._on_deliver: Optional[Callable[[Envelope, str], None]] = None

    # -- wiring --

    def register_topic(self, topic: str) -> None:
        with self._lock:
            self._topics.setdefault(topic, [])

    def register_topics(self, topics: Iterable[str]) -> None:
        for t in topics:
            self.register_topic(t)

    def has_topic(self, topic: str) -> bool:
        with self._lock:
            return topic in self._topics

    def subscribe(self, topic: str, stage: str, capacity: Optional[int] = None) -> Subscription:
        with self._lock:
            if topic not in self._topics:
                raise UnknownTopic(topic)
            if any(s.stage == stage for s in self._topics[topic]):
                raise DuplicateSubscription(f"{stage} already subscribed to {topic}")
            sub = Subscription(topic, stage, capacity or self._data_capacity, self._lock)
            self._topics[topic].append(sub)
            return sub

    def set_halt_targets(self, stages: Iterable[str]) -> None:
        self._halt_targets = tuple(stages)

    def set_delivery_tap(self, cb: Optional[Callable[[Envelope, str], None]]) -> None:
        """Observe every delivered envelope (subscriber stage as second arg)."""
        self._on_deliver = cb

    # -- agent turn tracking (for halt preconditions) --

    def set_active_agent_turn(self, turn_id: Optional[int]) -> None:
        with self._lock:
            self._active_agent_turn = turn_id

    @property
    def active_agent_turn(self) -> Optional[int]:
        return self._active_agent_turn

    # -- publishing --

    def next_seq(self, topic: str, producer: str) -> int:
        with self._lock:
            return self._last_seq.get((topic, producer), -1) + 1

    def publish(self, env: Envelope, producer: str, block: bool = True,
                timeout: Optional[float] = None) -> int:
        """Deliver to every subscriber of env.topic; returns subscriber count.

        With block=True (realtime) the call waits until no subscriber is left
        with the envelope parked in its pending list. With block=False (sim)
        spilled deliveries stay pending and `blocked_subs` reports them.
        """
        blocked = self.offer(env, producer)
        if block and blocked:
            with self._space:
                deadline = None if timeout is None else (timeout + _monotonic())
                while any(sub._pending for sub in blocked):
                    remaining = None if deadline is None else deadline - _monotonic()
                    if remaining is not None and remaining <= 0:
                        raise TimeoutError(f"publish to {env.topic} timed out")
                    self._space.wait(remaining)
        with self._lock:
            return len(self._topics[env.topic])

    def offer(self, env: Envelope, producer: str) -> list[Subscription]:
        """Non-blocking publish; returns subscriptions where delivery spilled."""
        with self._lock:
            subs = self._topics.get(env.topic)
            if subs is None:
                raise UnknownTopic(env.topic)
            key = (env.topic, producer)
            last = self._last_seq.get(key)
            if last is not None and env.seq <= last:
                raise SequenceRegression(
                    f"{producer} on {env.topic}: seq {env.seq} after {last}"
                )
            last_t = self._last_produced_at.get(producer)
            if last_t is not None and env.produced_at < last_t:
                raise BusError(
                    f"{producer}: produced_at went backwards "
                    f"({env.produced_at} < {last_t})"
                )
            self._last_seq[key] = env.seq
            self._last_produced_at[producer] = env.produced_at
            blocked = []
            for sub in subs:
                if not sub._offer(env, producer):
                    blocked.append(sub)
                if self._on_deliver is not None:
                    self._on_deliver(env, sub.stage)
            return blocked

    def make_envelope(self, topic: str, producer: str, produced_at: int,
                      turn_id: int, payload) -> Envelope:
        return Envelope(
            topic=topic,
            seq=self.next_seq(topic, producer),
            produced_at=produced_at,
            turn_id=turn_id,
            payload=payload,
        )

    def notify_space(self) -> None:
        """Wake publishers after a consumer freed space (realtime mode)."""
        with self._space:
            self._space.notify_all()

    def drain_unblocked(self) -> set[str]:
        """Promote pendings everywhere; returns names of producers unblocked (sim mode)."""
        with self._lock:
            freed: set[str] = set()
            for subs in self._topics.values():
                for sub in subs:
                    freed |= sub._promote_pending()
            return freed

    # -- halt broadcast --

    def broadcast_halt(self, origin: str, turn_id: int, produced_at: int) -> set[str]:
        """Deliver a halt on every downstream control lane; returns stages reached."""
        with self._lock:
            if self._active_agent_turn is None or self._active_agent_turn != turn_id:
                raise NoActiveAgentTurn(f"no active agent turn {turn_id}")
            sig = ControlSignal(kind=SignalKind.HALT, origin=origin, turn_id=turn_id)
            env = self.make_envelope(TOPIC_CONTROL, origin, produced_at, turn_id, sig)
            self.offer(env, origin)
            reached = {
                sub.stage
                for sub in self._topics[TOPIC_CONTROL]
                if sub.stage in self._halt_targets
            }
            return reached

    def subscriptions(self, topic: str) -> list[Subscription]:
        with self._lock:
            if topic not in self._topics:
                raise UnknownTopic(topic)
            return list(self._topics[topic])

    def stale_drop_total(self) -> int:
        with self._lock:
            return sum(
                sub.stale_dropped for subs in self._topics.values() for sub in subs
            )


def _monotonic() -> float:
    import time

    return time.monotonic()
