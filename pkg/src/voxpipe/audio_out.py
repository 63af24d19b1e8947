"""Output chain: 40 Hz frames -> 160 Hz upsampler -> 24 kHz wave -> player.

The vocoder's waveform content is a deterministic placeholder (amplitude
keyed by the frame payload) sufficient for sample-count and timing tests;
each 40 Hz input yields exactly four 160 Hz frames and 600 PCM samples.
The player tracks which alignment index is being vocalized, primes 25 ms
before a turn's first chunk, plays gaplessly, and on a halt finishes the
in-flight chunk then reports the last vocalized n-gram back upstream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bus import TOPIC_CONTROL, TOPIC_PCM, TOPIC_TELEMETRY, TOPIC_TTS
from .config import PlayerConfig, VocoderConfig
from .messages import (
    PCM_SAMPLES_PER_CHUNK,
    ControlSignal,
    PcmChunk,
    SignalKind,
    SpeechFrame,
    ms_to_ns,
)
from .runtime import Stage, StageContext, StageSpec, Step

SAMPLES_PER_160HZ_FRAME = 150  # 24000 / 160


@dataclass(frozen=True)
class Frame160:
    """Intermediate upsampled frame between the two vocoder halves."""

    payload: np.ndarray
    ngram_index: int
    turn_id: int
    sub_index: int  # 0..3 within the source 40 Hz frame


def upsample(frame: SpeechFrame, factor: int = 4) -> list[Frame160]:
    """One 40 Hz frame becomes `factor` 160 Hz frames, alignment preserved."""
    return [
        Frame160(payload=frame.payload, ngram_index=frame.ngram_index,
                 turn_id=frame.turn_id, sub_index=i)
        for i in range(factor)
    ]


_BASE_WAVE = np.sin(
    2.0 * np.pi * 3.0 * np.arange(SAMPLES_PER_160HZ_FRAME) / SAMPLES_PER_160HZ_FRAME
).astype(np.float32)


def vocode(frame: Frame160) -> np.ndarray:
    """150 samples per 160 Hz frame; causal, content keyed by the payload."""
    amplitude = 0.1 + 0.4 * (abs(float(np.sum(frame.payload))) % 1.0)
    return (amplitude * _BASE_WAVE).astype(np.float32)


class VocoderStage(Stage):
    name = "vocoder"

    def __init__(self, config: VocoderConfig):
        self.cfg = config
        self._frames: deque[SpeechFrame] = deque()

    def spec(self) -> StageSpec:
        return StageSpec(
            name=self.name,
            input_topics=(TOPIC_TTS, TOPIC_CONTROL),
            output_topics=(TOPIC_PCM,),
            wait_policy="1 frame",
            wait_ms=25.0,
            inference_ms=self.cfg.chunk_inference_ms,
        )

    def on_data(self, env, ctx: StageContext) -> None:
        if isinstance(env.payload, SpeechFrame):
            self._frames.append(env.payload)

    def on_control(self, sig: ControlSignal, ctx: StageContext) -> None:
        if sig.kind is SignalKind.HALT:
            dropped = sum(1 for f in self._frames if f.turn_id == sig.turn_id)
            self._frames = deque(
                f for f in self._frames if f.turn_id != sig.turn_id
            )
            if dropped:
                ctx.log("vocoder_halted", sig.turn_id, dropped_frames=dropped)

    def poll(self, ctx: StageContext) -> Optional[Step]:
        if not self._frames:
            return None
        frame = self._frames.popleft()

        def commit(c: StageContext, frame=frame) -> None:
            samples = np.concatenate(
                [vocode(f160) for f160 in upsample(frame, self.cfg.upsample_factor)]
            )
            assert len(samples) == PCM_SAMPLES_PER_CHUNK
            c.publish(
                TOPIC_PCM,
                PcmChunk(samples=samples, ngram_index=frame.ngram_index,
                         turn_id=frame.turn_id, produced_at=c.now(),
                         end_of_turn=frame.end_of_turn),
                turn_id=frame.turn_id,
            )

        return Step(charge_ns=ms_to_ns(self.cfg.chunk_inference_ms),
                    commit=commit, turn_id=frame.turn_id, label="vocode")


@dataclass(eq=False)
class _ScheduledPlayback:
    chunk: PcmChunk
    start_ns: int
    end_ns: int
    started: bool = False
    done: bool = False
    cancelled: bool = False


@dataclass
class PlaybackState:
    last_played_ngram: int = -1
    playing_turn: Optional[int] = None
    buffered_chunks: int = 0
    play_head_ns: int = 0  # when the playback device frees up
    halt_pending: Optional[int] = None
    primed_turn: Optional[int] = None
    started_turns: set = field(default_factory=set)
    stale_discarded: int = 0


class PlayerStage(Stage):
    name = "player"

    def __init__(self, config: PlayerConfig, capture_pcm: bool = True):
        self.cfg = config
        self.st = PlaybackState()
        self._queue: deque[PcmChunk] = deque()
        self._scheduled: list[_ScheduledPlayback] = []
        self.capture_pcm = capture_pcm
        self.played: dict[int, list[np.ndarray]] = {}  # per-turn waveform
        self._last_spoken_ngram: Optional[int] = None

    def spec(self) -> StageSpec:
        return StageSpec(
            name=self.name,
            input_topics=(TOPIC_PCM, TOPIC_CONTROL),
            output_topics=(TOPIC_CONTROL, TOPIC_TELEMETRY),
            wait_policy=f"{self.cfg.priming_ms:g} ms priming",
            wait_ms=self.cfg.priming_ms,
            inference_ms=self.cfg.per_chunk_ms,
        )

    # -- data path --

    def on_data(self, env, ctx: StageContext) -> None:
        chunk = env.payload
        if not isinstance(chunk, PcmChunk):
            return
        if ctx.is_halted(chunk.turn_id):
            self.st.stale_discarded += 1
            ctx.telemetry("stale_chunk_discarded", turn_id=chunk.turn_id)
            return
        self._queue.append(chunk)
        self.st.buffered_chunks = len(self._queue)

    def poll(self, ctx: StageContext) -> Optional[Step]:
        if not self._queue:
            return None
        chunk = self._queue[0]

        def commit(c: StageContext, chunk=chunk) -> None:
            if not self._queue or self._queue[0] is not chunk:
                return
            self._queue.popleft()
            self.st.buffered_chunks = len(self._queue)
            self._schedule_playback(chunk, c)

        return Step(charge_ns=ms_to_ns(self.cfg.per_chunk_ms), commit=commit,
                    turn_id=chunk.turn_id, label="play_chunk")

    def _schedule_playback(self, chunk: PcmChunk, ctx: StageContext) -> None:
        now = ctx.now()
        start = max(now, self.st.play_head_ns)
        if chunk.turn_id != self.st.primed_turn:
            # jitter-buffer priming before a turn's first chunk
            self.st.primed_turn = chunk.turn_id
            self._last_spoken_ngram = None
            start = max(now + ms_to_ns(self.cfg.priming_ms), self.st.play_head_ns)
        play_ns = ms_to_ns(self.cfg.chunk_play_ms)
        entry = _ScheduledPlayback(chunk=chunk, start_ns=start,
                                   end_ns=start + play_ns)
        self._scheduled.append(entry)
        self.st.play_head_ns = entry.end_ns
        self.st.playing_turn = chunk.turn_id
        ctx.schedule(start - now, lambda c, e=entry: self._at_start(e, c),
                     label="playback_start")
        ctx.schedule(entry.end_ns - now, lambda c, e=entry: self._at_end(e, c),
                     label="playback_end")

    def _at_start(self, entry: _ScheduledPlayback, ctx: StageContext) -> None:
        if entry.cancelled:
            return
        entry.started = True
        chunk = entry.chunk
        ctx.log("playback_start", chunk.turn_id, ngram=chunk.ngram_index)
        if chunk.turn_id not in self.st.started_turns:
            self.st.started_turns.add(chunk.turn_id)
            ctx.telemetry("playback_started", turn_id=chunk.turn_id)
        if chunk.ngram_index != self._last_spoken_ngram:
            self._last_spoken_ngram = chunk.ngram_index
            ctx.telemetry("speaking", value=chunk.ngram_index,
                          turn_id=chunk.turn_id, ngram=chunk.ngram_index)
        if self.capture_pcm:
            self.played.setdefault(chunk.turn_id, []).append(
                np.asarray(chunk.samples)
            )

    def _at_end(self, entry: _ScheduledPlayback, ctx: StageContext) -> None:
        if entry.cancelled:
            return
        entry.done = True
        self._scheduled.remove(entry)
        chunk = entry.chunk
        self.st.last_played_ngram = chunk.ngram_index
        ctx.log("playback_end", chunk.turn_id, ngram=chunk.ngram_index)
        if self.st.halt_pending == chunk.turn_id:
            self._emit_feedback(chunk.turn_id, ctx)
        elif chunk.end_of_turn:
            self.st.playing_turn = None
            ctx.telemetry("playback_finished", turn_id=chunk.turn_id,
                          halted=False)
            ctx.log("turn_playback_done", chunk.turn_id)

    # -- interruption path --

    def on_control(self, sig: ControlSignal, ctx: StageContext) -> None:
        if sig.kind is not SignalKind.HALT:
            return
        if self.st.halt_pending == sig.turn_id:
            return  # repeated halt during the same teardown
        now = ctx.now()
        dropped = sum(1 for c in self._queue if c.turn_id == sig.turn_id)
        self._queue = deque(c for c in self._queue if c.turn_id != sig.turn_id)
        self.st.buffered_chunks = len(self._queue)
        in_flight = None
        for entry in list(self._scheduled):
            if entry.chunk.turn_id != sig.turn_id or entry.done:
                continue
            if entry.start_ns <= now < entry.end_ns:
                in_flight = entry  # current chunk completes
            else:
                entry.cancelled = True
                self._scheduled.remove(entry)
                dropped += 1
        if dropped:
            self.st.stale_discarded += dropped
            ctx.telemetry("stale_chunk_discarded", value=dropped,
                          turn_id=sig.turn_id)
        if in_flight is not None:
            self.st.halt_pending = sig.turn_id
            self.st.play_head_ns = in_flight.end_ns
            ctx.log("halt_received_playing", sig.turn_id,
                    in_flight_ngram=in_flight.chunk.ngram_index)
        else:
            self.st.play_head_ns = min(self.st.play_head_ns, now)
            last = (self.st.last_played_ngram
                    if sig.turn_id in self.st.started_turns else -1)
            self._emit_feedback(sig.turn_id, ctx, last_override=last)

    def _emit_feedback(self, turn_id: int, ctx: StageContext,
                       last_override: Optional[int] = None) -> None:
        ngram = (self.st.last_played_ngram
                 if last_override is None else last_override)
        self.st.halt_pending = None
        self.st.playing_turn = None
        ctx.publish(
            TOPIC_CONTROL,
            ControlSignal(kind=SignalKind.PLAYBACK_FEEDBACK, origin=self.name,
                          turn_id=turn_id, ngram_index=ngram),
            turn_id=turn_id,
        )
        ctx.telemetry("playback_finished", turn_id=turn_id, halted=True)
        ctx.log("feedback_sent", turn_id, ngram=ngram)

    def turn_waveform(self, turn_id: int) -> np.ndarray:
        parts = self.played.get(turn_id, [])
        if not parts:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate(parts)
