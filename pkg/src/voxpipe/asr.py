"""Scripted streaming recognizer with voice-activity and barge-in duties.

Consumes mel frames in 16-frame batches. Recognition is scripted: the
scenario supplies (word, start, end) alignments and each word's token is
emitted by the batch containing the word's end time, which preserves the
real system's streaming/timing contract without a neural model. The same
frame walk drives the VAD state machine: end-of-turn pauses hand the floor
to the agent, non-blank tokens during an agent turn halt all downstream
stages, and long silence (or the 30 s cap) resets the simulated key-value
cache. Speaker-window scheduling runs inside this stage's worker.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .bus import TOPIC_CONTROL, TOPIC_MEL, TOPIC_TELEMETRY, TOPIC_TOKENS
from .config import AsrConfig, SpeakerConfig
from .messages import (
    ControlSignal,
    MelFrame,
    SignalKind,
    TelemetrySample,
    TokenEvent,
    ms_to_ns,
)
from .runtime import Stage, StageContext, StageSpec, Step
from .speaker import SpeakerScheduler
from .trace import WordSpan


class ShortBatch(ValueError):
    """Batch smaller than 16 frames outside an end-of-stream flush."""


class TurnPhase(enum.Enum):
    IDLE = "idle"
    USER_SPEAKING = "user_speaking"
    AGENT_THINKING = "agent_thinking"
    AGENT_SPEAKING = "agent_speaking"


AGENT_PHASES = (TurnPhase.AGENT_THINKING, TurnPhase.AGENT_SPEAKING)


@dataclass
class AsrState:
    cache_frames: int = 0
    silence_run_ms: float = 0.0
    turn_phase: TurnPhase = TurnPhase.IDLE
    speech_seen: bool = False  # user spoke since gaining the floor
    upcoming_turn: int = 0  # agent turn the current user speech feeds
    active_agent_turn: Optional[int] = None
    last_token_text: Optional[str] = None
    last_token_frame: int = -10**9
    blank_since_last_token: bool = True


@dataclass
class BatchResult:
    """Ordered emissions of one batch step: the commit replays them in order."""

    events: list[tuple[str, object]] = field(default_factory=list)

    def add(self, kind: str, value) -> None:
        self.events.append((kind, value))

    @property
    def tokens(self) -> list[TokenEvent]:
        return [v for k, v in self.events if k == "token"]

    @property
    def turn_boundary(self) -> Optional[int]:
        return next((v for k, v in self.events if k == "turn_boundary"), None)

    @property
    def halted_turn(self) -> Optional[int]:
        return next((v for k, v in self.events if k == "halt"), None)

    @property
    def cache_resets(self) -> list[str]:
        return [v for k, v in self.events if k == "cache_reset"]


class AsrStage(Stage):
    name = "asr"

    def __init__(self, words: list[WordSpan], config: AsrConfig,
                 speaker_config: Optional[SpeakerConfig] = None,
                 hop_ms: float = 10.0):
        self.words = sorted(words, key=lambda w: w.start_ms)
        self.cfg = config
        self.hop_ms = hop_ms
        self.state = AsrState()
        self.cap_frames = round(config.cache_cap_s * 1000.0 / hop_ms)
        self._frames: list[MelFrame] = []
        self._emit_index: dict[int, list[WordSpan]] = {}
        for w in self.words:
            j = self._emit_frame(w)
            self._emit_index.setdefault(j, []).append(w)
        self._emitted_words: set[int] = set()  # live mode dedup by identity
        self.speaker: Optional[SpeakerScheduler] = None
        if speaker_config is not None:
            self.speaker = SpeakerScheduler(
                words,
                enroll_s=speaker_config.enroll_window_s,
                window_s=speaker_config.sliding_window_s,
                min_speech_ratio=speaker_config.min_speech_ratio,
                threshold=speaker_config.similarity_threshold,
                embedding_dim=speaker_config.embedding_dim,
            )

    def spec(self) -> StageSpec:
        return StageSpec(
            name=self.name,
            input_topics=(TOPIC_MEL, TOPIC_TELEMETRY),
            output_topics=(TOPIC_TOKENS, TOPIC_CONTROL, TOPIC_TELEMETRY),
            wait_policy=f"{self.cfg.batch_frames} frames",
            wait_ms=self.cfg.batch_frames * self.hop_ms,
            inference_ms=self.cfg.inference_ms,
        )

    # -- alignment helpers --

    def _emit_frame(self, word: WordSpan) -> int:
        """Frame index whose hop interval contains the word's end."""
        return int((word.end_ms - 1e-9) // self.hop_ms)

    def frame_is_speech(self, frame_index: int) -> bool:
        a = frame_index * self.hop_ms
        b = a + self.hop_ms
        return any(w.overlaps(a, b) for w in self.words)

    def words_ending_at(self, frame_index: int) -> list[WordSpan]:
        return self._emit_index.get(frame_index, [])

    # -- contract-level operations (also used by the pipeline path) --

    def detect_turn_end(self, state: AsrState, pause_ms: float) -> bool:
        """True when a user pause long enough to switch turns was observed.

        A pause requires at least one silence frame; silence_run resets to
        zero on speech, so the check only holds while silence accumulates.
        """
        return (
            state.turn_phase is TurnPhase.USER_SPEAKING
            and state.speech_seen
            and state.silence_run_ms > 0
            and state.silence_run_ms >= pause_ms
        )

    def maybe_interrupt(self, tok: TokenEvent, state: AsrState) -> Optional[int]:
        """Turn id to halt when a non-blank token lands during an agent turn."""
        if tok.is_blank or state.turn_phase not in AGENT_PHASES:
            return None
        return state.active_agent_turn

    def silence_cache_reset(self, state: AsrState,
                            reset_after_ms: Optional[float] = None) -> bool:
        reset_after = self.cfg.silence_reset_ms if reset_after_ms is None \
            else reset_after_ms
        if state.cache_frames >= self.cap_frames:
            state.cache_frames = 0
            return True
        if state.silence_run_ms >= reset_after and state.cache_frames > 0:
            state.cache_frames = 0
            return True
        return False

    # -- batched scripted inference --

    def ingest_batch(self, frames: list[MelFrame], flush: bool = False) -> BatchResult:
        """Process one 16-frame batch; shorter batches only at end-of-stream."""
        if len(frames) < self.cfg.batch_frames and not flush:
            raise ShortBatch(f"{len(frames)} < {self.cfg.batch_frames} frames")
        st = self.state
        result = BatchResult()
        for frame in frames:
            j = frame.frame_index
            speech = self.frame_is_speech(j)
            st.cache_frames += 1
            if st.cache_frames >= self.cap_frames:
                if self.silence_cache_reset(st):
                    result.add("cache_reset", "cap")
            prev_silence = st.silence_run_ms
            if speech:
                st.silence_run_ms = 0.0
                if st.turn_phase is TurnPhase.IDLE:
                    st.turn_phase = TurnPhase.USER_SPEAKING
                if st.turn_phase is TurnPhase.USER_SPEAKING:
                    st.speech_seen = True
            else:
                st.silence_run_ms += self.hop_ms
                st.blank_since_last_token = True
                reset_after = self.cfg.silence_reset_ms
                if prev_silence < reset_after <= st.silence_run_ms:
                    if self.silence_cache_reset(st):
                        result.add("cache_reset", "silence")
            for word in self.words_ending_at(j):
                tok = TokenEvent(text=word.text, frame_index=j, emitted_at=0,
                                 is_blank=False, turn_id=st.upcoming_turn)
                # CTC collapse: identical consecutive emission with no blank between
                if (tok.text == st.last_token_text
                        and not st.blank_since_last_token):
                    continue
                halted = self.maybe_interrupt(tok, st)
                if halted is not None:
                    result.add("halt", halted)
                    st.turn_phase = TurnPhase.USER_SPEAKING
                    st.upcoming_turn = halted + 1
                    st.speech_seen = True
                    tok = TokenEvent(text=tok.text, frame_index=j, emitted_at=0,
                                     is_blank=False, turn_id=st.upcoming_turn)
                result.add("token", tok)
                st.last_token_text = tok.text
                st.last_token_frame = j
                st.blank_since_last_token = False
            if self.detect_turn_end(st, self.cfg.pause_ms):
                result.add("turn_boundary", st.upcoming_turn)
                st.turn_phase = TurnPhase.AGENT_THINKING
                st.active_agent_turn = st.upcoming_turn
                st.speech_seen = False
        return result

    # -- stage wiring --

    def on_data(self, env, ctx: StageContext) -> None:
        payload = env.payload
        if isinstance(payload, MelFrame):
            self._frames.append(payload)
        elif isinstance(payload, TelemetrySample):
            self._on_marker(payload, ctx)

    def _on_marker(self, sample: TelemetrySample, ctx: StageContext) -> None:
        st = self.state
        if sample.kind == "playback_started":
            if (st.turn_phase is TurnPhase.AGENT_THINKING
                    and sample.turn_id == st.active_agent_turn):
                st.turn_phase = TurnPhase.AGENT_SPEAKING
                ctx.log("phase", sample.turn_id, phase=st.turn_phase.value)
        elif sample.kind == "playback_finished":
            halted = bool(sample.detail.get("halted", False))
            if sample.turn_id == st.active_agent_turn:
                st.active_agent_turn = None
                ctx.set_active_agent_turn(None)
                if not halted:
                    st.turn_phase = TurnPhase.USER_SPEAKING
                    st.upcoming_turn = sample.turn_id + 1
                    st.speech_seen = False
                    ctx.log("phase", sample.turn_id, phase=st.turn_phase.value)
        elif sample.kind == "response_complete" and sample.detail.get("ngrams") == 0:
            # agent turn with no speech output ends immediately
            if sample.turn_id == st.active_agent_turn:
                st.active_agent_turn = None
                ctx.set_active_agent_turn(None)
                st.turn_phase = TurnPhase.USER_SPEAKING
                st.upcoming_turn = sample.turn_id + 1
                st.speech_seen = False
                ctx.log("phase", sample.turn_id, phase=st.turn_phase.value)

    def poll(self, ctx: StageContext) -> Optional[Step]:
        if len(self._frames) < self.cfg.batch_frames:
            return None
        batch = self._frames[:self.cfg.batch_frames]
        self._frames = self._frames[self.cfg.batch_frames:]

        def commit(c: StageContext, batch=batch) -> None:
            self._commit_batch(batch, c)

        return Step(charge_ns=ms_to_ns(self.cfg.inference_ms), commit=commit,
                    label="asr_batch")

    def _commit_batch(self, batch: list[MelFrame], ctx: StageContext) -> None:
        result = self.ingest_batch(batch)
        now = ctx.now()
        for kind, value in result.events:
            if kind == "halt":
                reached = ctx.broadcast_halt(value)
                ctx.log("interrupt", value, reached=len(reached))
            elif kind == "cache_reset":
                ctx.publish(
                    TOPIC_CONTROL,
                    ControlSignal(kind=SignalKind.CACHE_RESET, origin=self.name,
                                  turn_id=self.state.upcoming_turn,
                                  scope=frozenset({self.name})),
                    turn_id=-1,
                )
                ctx.log("asr_cache_reset", -1, reason=value)
            elif kind == "token":
                tok = value
                ctx.publish(
                    TOPIC_TOKENS,
                    TokenEvent(text=tok.text, frame_index=tok.frame_index,
                               emitted_at=now, is_blank=False,
                               turn_id=tok.turn_id),
                    turn_id=tok.turn_id,
                )
            elif kind == "turn_boundary":
                ctx.set_active_agent_turn(value)
                ctx.publish(
                    TOPIC_CONTROL,
                    ControlSignal(kind=SignalKind.TURN_BOUNDARY, origin=self.name,
                                  turn_id=value),
                    turn_id=value,
                )
        if self.speaker is not None:
            audio_ms = (batch[-1].frame_index + 1) * self.hop_ms
            for decision in self.speaker.on_audio_time(audio_ms):
                ctx.publish(
                    TOPIC_TELEMETRY,
                    TelemetrySample(
                        kind="speaker_decision", stage=self.name,
                        turn_id=self.state.upcoming_turn,
                        value=decision.similarity,
                        detail={
                            "label": decision.label,
                            "speaker": decision.speaker or "",
                            "window_start_ms": decision.window.start_ms,
                            "enrollment": decision.window.enrollment,
                        },
                    ),
                    turn_id=-1,
                )
