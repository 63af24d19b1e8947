"""Stage lifecycle and scheduling under two clocks.

Stages are event-driven state machines: deliveries buffer input
(`on_data` / `on_control`), and whenever a stage is idle the runtime asks
it for its next unit of work (`poll`), a Step with a latency charge and a
commit callback that publishes the step's outputs at completion time.

Sim mode runs a single-threaded discrete-event loop: every event carries a
total-order key (time, lane, stage registration order, tick) so identical
inputs replay to byte-identical event logs. Control deliveries sort ahead
of step completions, which sort ahead of data deliveries, making halts
preempt between steps exactly as they do live. Realtime mode runs one
sequential worker thread per stage with the same stage code, sleeping out
latency charges against the wall clock.
"""

from __future__ import annotations

import heapq
import json
import threading
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .bus import Bus, Subscription, UnknownTopic
from .messages import (
    ControlSignal,
    Envelope,
    SignalKind,
    TelemetrySample,
    payload_log_info,
)

LANE_CONTROL = 0
LANE_STEP = 1
LANE_DATA = 2
_HALT_KIND = SignalKind.HALT


class RuntimeError_(Exception):
    pass


class DuplicateStage(RuntimeError_):
    pass


class NoSourceStage(RuntimeError_):
    pass


@dataclass
class StageSpec:
    """Registration record: topology plus the stage's wait/latency contract."""

    name: str
    input_topics: tuple[str, ...] = ()
    output_topics: tuple[str, ...] = ()
    wait_policy: str = ""
    wait_ms: Optional[float] = None
    inference_ms: Optional[float] = None

    @property
    def is_source(self) -> bool:
        return not self.input_topics


@dataclass(frozen=True)
class LogEntry:
    time_ns: int
    stage: str
    kind: str
    turn_id: int
    seq: int
    info: tuple[tuple[str, object], ...] = ()

    def to_json(self) -> str:
        return json.dumps(
            {
                "t": self.time_ns,
                "stage": self.stage,
                "kind": self.kind,
                "turn": self.turn_id,
                "seq": self.seq,
                "info": {k: v for k, v in self.info},
            },
            sort_keys=True,
            separators=(",", ":"),
        )


class EventLog:
    """Strictly ordered record of everything observable the run did."""

    def __init__(self) -> None:
        self.entries: list[LogEntry] = []

    def append(self, entry: LogEntry) -> None:
        self.entries.append(entry)

    def serialize(self) -> str:
        return "\n".join(e.to_json() for e in self.entries) + "\n"

    def kinds(self) -> set[str]:
        return {e.kind for e in self.entries}

    def of_kind(self, *kinds: str) -> list[LogEntry]:
        ks = set(kinds)
        return [e for e in self.entries if e.kind in ks]

    def first(self, kind: str, **info_match) -> Optional[LogEntry]:
        for e in self.entries:
            if e.kind != kind:
                continue
            d = dict(e.info)
            if all(d.get(k) == v for k, v in info_match.items()):
                return e
        return None

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Step:
    """One unit of stage work: charge the latency, then commit the outputs."""

    charge_ns: int
    commit: Callable[["StageContext"], None]
    turn_id: Optional[int] = None  # committing is skipped if this turn was halted
    label: str = ""
    output: bool = True  # False for warmup steps that produce nothing


class Stage:
    """Base class for pipeline stages."""

    name: str = "stage"

    def spec(self) -> StageSpec:
        raise NotImplementedError

    def on_start(self, ctx: "StageContext") -> None:
        pass

    def on_data(self, env: Envelope, ctx: "StageContext") -> None:
        pass

    def on_control(self, sig: ControlSignal, ctx: "StageContext") -> None:
        pass

    def poll(self, ctx: "StageContext") -> Optional[Step]:
        return None


class StageContext:
    """Runtime services handed to stage code; identical across both clocks."""

    def __init__(self, runtime: "Runtime", record: "_StageRecord"):
        self._runtime = runtime
        self._record = record

    def now(self) -> int:
        return self._runtime.now()

    @property
    def stage_name(self) -> str:
        return self._record.stage.name

    def publish(self, topic: str, payload, turn_id: int) -> int:
        return self._runtime._publish_from(self._record, topic, payload, turn_id)

    def telemetry(self, kind: str, value: float = 0.0, turn_id: int = -1,
                  **detail) -> None:
        """Publish an instrumentation sample on the telemetry topic."""
        sample = TelemetrySample(
            kind=kind, stage=self._record.stage.name, turn_id=turn_id,
            value=value, detail=detail,
        )
        self._runtime._publish_from(
            self._record, self._runtime.telemetry_topic, sample, turn_id
        )

    def log(self, kind: str, turn_id: int = -1, **info) -> None:
        self._runtime._log(self._record.stage.name, kind, turn_id, info)

    def schedule(self, delay_ns: int, fn: Callable[["StageContext"], None],
                 label: str = "") -> None:
        self._runtime._schedule_timer(self._record, delay_ns, fn, label)

    def is_halted(self, turn_id: int) -> bool:
        return turn_id in self._record.halted_turns

    def broadcast_halt(self, turn_id: int) -> set[str]:
        return self._runtime.broadcast_halt(self._record, turn_id)

    def set_active_agent_turn(self, turn_id: Optional[int]) -> None:
        self._runtime.bus.set_active_agent_turn(turn_id)

    def record(self, kind: str, dt_ms: float, turn_id: int = -1) -> None:
        if self._runtime.hub is not None:
            self._runtime.hub.record(self._record.stage.name, kind, dt_ms, turn_id)

    @property
    def config(self):
        return self._runtime.config


@dataclass
class _StageRecord:
    stage: Stage
    spec: StageSpec
    order: int
    subs: list[Subscription] = field(default_factory=list)
    busy: bool = False
    blocked: bool = False
    halted_turns: set[int] = field(default_factory=set)
    ctx: Optional[StageContext] = None
    first_poll_logged: bool = False
    first_done_logged: bool = False
    # realtime-only
    thread: Optional[threading.Thread] = None
    wake: Optional[threading.Condition] = None
    timers: list = field(default_factory=list)


class Runtime:
    """Registers stages against a bus and runs them in sim or realtime mode."""

    def __init__(self, bus: Bus, config, mode: str = "sim",
                 telemetry_topic: str = "telemetry.samples"):
        if mode not in ("sim", "realtime"):
            raise ValueError(f"unknown mode {mode!r}")
        self.bus = bus
        self.config = config
        self.mode = mode
        self.telemetry_topic = telemetry_topic
        self.log = EventLog()
        self._records: dict[str, _StageRecord] = {}
        self._order: list[_StageRecord] = []
        self._heap: list = []
        self._tick = 0
        self._now_ns = 0
        self._wall_start: Optional[int] = None
        self._until_ns = 0
        self._stop = threading.Event()
        self._log_lock = threading.Lock()
        self.hub = None  # optional TelemetryHub attached by the harness

    # -- registration --

    def register(self, stage: Stage) -> str:
        spec = stage.spec()
        if spec.name in self._records:
            raise DuplicateStage(spec.name)
        for topic in (*spec.input_topics, *spec.output_topics):
            if not self.bus.has_topic(topic):
                raise UnknownTopic(topic)
        record = _StageRecord(stage=stage, spec=spec, order=len(self._order))
        for topic in spec.input_topics:
            record.subs.append(self.bus.subscribe(topic, spec.name))
        record.ctx = StageContext(self, record)
        self._records[spec.name] = record
        self._order.append(record)
        return spec.name

    def stages(self) -> list[str]:
        return [r.spec.name for r in self._order]

    # -- clock --

    def now(self) -> int:
        if self.mode == "sim":
            return self._now_ns
        if self._wall_start is None:
            return 0
        return _time.monotonic_ns() - self._wall_start

    # -- logging --

    def _log(self, stage: str, kind: str, turn_id: int, info: dict,
             seq: int = -1) -> None:
        entry = LogEntry(
            time_ns=self.now(),
            stage=stage,
            kind=kind,
            turn_id=turn_id,
            seq=seq,
            info=tuple(sorted(info.items())),
        )
        with self._log_lock:
            self.log.append(entry)

    # -- publishing --

    def _publish_from(self, record: _StageRecord, topic: str, payload,
                      turn_id: int) -> int:
        env = self.bus.make_envelope(
            topic, record.spec.name, self.now(), turn_id, payload
        )
        info = {"topic": topic}
        info.update(payload_log_info(payload))
        self._log(record.spec.name, env.kind, turn_id, info, seq=env.seq)
        if self.mode == "sim":
            blocked = self.bus.offer(env, record.spec.name)
            if blocked:
                record.blocked = True
            lane = LANE_CONTROL if env.is_control else LANE_DATA
            for sub in self.bus.subscriptions(topic):
                target = self._records.get(sub.stage)
                if target is not None:
                    self._push_event(self._now_ns, lane, target.order,
                                     lambda t=target: self._kick(t))
        else:
            self.bus.publish(env, record.spec.name, block=True, timeout=30.0)
            for sub in self.bus.subscriptions(topic):
                target = self._records.get(sub.stage)
                if target is not None and target.wake is not None:
                    with target.wake:
                        target.wake.notify_all()
        return len(self.bus.subscriptions(topic))

    def broadcast_halt(self, record: _StageRecord, turn_id: int) -> set[str]:
        """Halt the active agent turn on every downstream control lane."""
        from .bus import NoActiveAgentTurn, TOPIC_CONTROL

        if self.bus.active_agent_turn != turn_id:
            raise NoActiveAgentTurn(f"agent turn {turn_id} is not active")
        sig = ControlSignal(kind=_HALT_KIND, origin=record.spec.name, turn_id=turn_id)
        self._publish_from(record, TOPIC_CONTROL, sig, turn_id)
        reached = {
            sub.stage
            for sub in self.bus.subscriptions(TOPIC_CONTROL)
            if sub.stage in self.bus._halt_targets
        }
        self._log(record.spec.name, "halt_broadcast", turn_id,
                  {"reached": ",".join(sorted(reached))})
        return reached

    # -- timers --

    def _schedule_timer(self, record: _StageRecord, delay_ns: int,
                        fn: Callable[[StageContext], None], label: str) -> None:
        if self.mode == "sim":
            self._push_event(
                self._now_ns + delay_ns, LANE_STEP, record.order,
                lambda: self._run_timer(record, fn),
            )
        else:
            due = self.now() + delay_ns
            record.timers.append((due, fn))
            if record.wake is not None:
                with record.wake:
                    record.wake.notify_all()

    def _run_timer(self, record: _StageRecord, fn) -> None:
        fn(record.ctx)
        self._drain_and_poll(record)

    # -- sim event loop --

    def _push_event(self, time_ns: int, lane: int, order: int, fn) -> None:
        self._tick += 1
        heapq.heappush(self._heap, (time_ns, lane, order, self._tick, fn))

    def _kick(self, record: _StageRecord) -> None:
        self._drain_and_poll(record)

    def _drain_and_poll(self, record: _StageRecord) -> None:
        ctx = record.ctx
        # control first: it preempts anything queued
        progressed = True
        while progressed:
            progressed = False
            for sub in record.subs:
                while sub.peek_kind() == "control":
                    env = sub.try_pop()
                    sig = env.payload
                    if isinstance(sig, ControlSignal):
                        self._note_control(record, sig)
                        record.stage.on_control(sig, ctx)
                        progressed = True
            for sub in record.subs:
                env = sub.try_pop() if sub.peek_kind() == "data" else None
                if env is not None:
                    record.stage.on_data(env, ctx)
                    progressed = True
        self._maybe_start_step(record)
        freed = self.bus.drain_unblocked()
        for name in freed:
            rec = self._records.get(name)
            if rec is not None:
                rec.blocked = False
                self._push_event(self._now_ns, LANE_DATA, rec.order,
                                 lambda r=rec: self._maybe_start_step(r))

    def _note_control(self, record: _StageRecord, sig: ControlSignal) -> None:
        """Track halted turns on the stage and all its subscriptions."""
        self._log(record.spec.name, "control_processed", sig.turn_id,
                  {"signal": sig.kind.value, "origin": sig.origin})
        if sig.kind is SignalKind.HALT:
            record.halted_turns.add(sig.turn_id)
            for sub in record.subs:
                sub.halted_turns.add(sig.turn_id)

    def _maybe_start_step(self, record: _StageRecord) -> None:
        if record.busy or record.blocked:
            return
        step = record.stage.poll(record.ctx)
        if step is None:
            return
        if step.output:
            self._mark_first_poll(record)
        record.busy = True
        self._push_event(
            self._now_ns + step.charge_ns, LANE_STEP, record.order,
            lambda: self._complete_step(record, step),
        )

    def _mark_first_poll(self, record: _StageRecord) -> None:
        if not record.first_poll_logged:
            record.first_poll_logged = True
            self._log(record.spec.name, "first_input_ready", -1, {})

    def _mark_first_done(self, record: _StageRecord) -> None:
        if not record.first_done_logged:
            record.first_done_logged = True
            self._log(record.spec.name, "first_step_done", -1, {})

    def _complete_step(self, record: _StageRecord, step: Step) -> None:
        record.busy = False
        if step.turn_id is not None and step.turn_id in record.halted_turns:
            self._log(record.spec.name, "step_discarded", step.turn_id,
                      {"label": step.label})
        else:
            step.commit(record.ctx)
        if step.output:
            self._mark_first_done(record)
            if self.hub is not None and self.hub.run_active:
                self.hub.record(record.spec.name, "inference",
                                step.charge_ns / 1e6,
                                step.turn_id if step.turn_id is not None else -1)
        self._drain_and_poll(record)

    # -- run --

    def run(self, until_ns: int) -> EventLog:
        if not any(r.spec.is_source for r in self._order):
            raise NoSourceStage("register at least one source stage")
        self._until_ns = until_ns
        if self.mode == "sim":
            self._run_sim(until_ns)
        else:
            self._run_realtime(until_ns)
        return self.log

    def _run_sim(self, until_ns: int) -> None:
        for record in self._order:
            record.stage.on_start(record.ctx)
        while self._heap:
            time_ns, lane, order, tick, fn = heapq.heappop(self._heap)
            if time_ns > until_ns:
                break
            self._now_ns = time_ns
            fn()
        self._now_ns = until_ns
        self._log("runtime", "run_complete", -1, {"until": until_ns})

    # -- realtime workers --

    def _run_realtime(self, until_ns: int) -> None:
        self._wall_start = _time.monotonic_ns()
        self._stop.clear()
        for record in self._order:
            record.wake = threading.Condition()
            self._attach_wake(record)
        for record in self._order:
            record.thread = threading.Thread(
                target=self._worker, args=(record,), daemon=True,
                name=f"stage-{record.spec.name}",
            )
            record.thread.start()
        deadline = self._wall_start + until_ns
        while _time.monotonic_ns() < deadline and not self._stop.is_set():
            _time.sleep(0.005)
        self._stop.set()
        for record in self._order:
            if record.wake is not None:
                with record.wake:
                    record.wake.notify_all()
        for record in self._order:
            if record.thread is not None:
                record.thread.join(timeout=2.0)
        self._log("runtime", "run_complete", -1, {"until": until_ns})

    def _attach_wake(self, record: _StageRecord) -> None:
        for sub in record.subs:
            sub_wake = record.wake

            def notify(_env=None, _w=sub_wake):
                with _w:
                    _w.notify_all()

            sub._on_offer = notify  # hook invoked by Subscription._offer

    def request_stop(self) -> None:
        self._stop.set()

    def _worker(self, record: _StageRecord) -> None:
        ctx = record.ctx
        record.stage.on_start(ctx)
        while not self._stop.is_set():
            worked = self._rt_drain_control(record)
            env = self._rt_pop_data(record)
            if env is not None:
                record.stage.on_data(env, ctx)
                self.bus.notify_space()
                worked = True
            worked |= self._rt_run_timers(record)
            if not record.blocked:
                step = record.stage.poll(ctx)
                if step is not None:
                    if step.output:
                        self._mark_first_poll(record)
                    self._rt_sleep(step.charge_ns)
                    self._rt_drain_control(record)
                    if not (step.turn_id is not None
                            and step.turn_id in record.halted_turns):
                        step.commit(ctx)
                    else:
                        self._log(record.spec.name, "step_discarded",
                                  step.turn_id, {"label": step.label})
                    if step.output:
                        self._mark_first_done(record)
                    worked = True
            if not worked:
                with record.wake:
                    record.wake.wait(timeout=self._rt_next_wait(record))

    def _rt_drain_control(self, record: _StageRecord) -> bool:
        worked = False
        for sub in record.subs:
            while sub.peek_kind() == "control":
                env = sub.try_pop()
                if env is None:
                    break
                sig = env.payload
                if isinstance(sig, ControlSignal):
                    self._note_control(record, sig)
                    record.stage.on_control(sig, record.ctx)
                worked = True
        return worked

    def _rt_pop_data(self, record: _StageRecord) -> Optional[Envelope]:
        for sub in record.subs:
            if sub.peek_kind() == "data":
                return sub.try_pop()
        return None

    def _rt_run_timers(self, record: _StageRecord) -> bool:
        if not record.timers:
            return False
        now = self.now()
        due = [t for t in record.timers if t[0] <= now]
        if not due:
            return False
        record.timers = [t for t in record.timers if t[0] > now]
        for _, fn in sorted(due, key=lambda t: t[0]):
            fn(record.ctx)
        return True

    def _rt_next_wait(self, record: _StageRecord) -> float:
        if record.timers:
            now = self.now()
            soonest = min(t[0] for t in record.timers)
            return max(0.0, min(0.05, (soonest - now) / 1e9))
        return 0.05

    def _rt_sleep(self, charge_ns: int) -> None:
        if charge_ns > 0:
            _time.sleep(charge_ns / 1e9)
