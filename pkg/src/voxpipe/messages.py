"""Message types carried on the pipeline bus.

All timestamps are integer nanoseconds on the session clock (simulated or
wall). Every envelope carries exactly one payload variant and a turn tag so
that stale data from an interrupted agent turn can be filtered at dequeue.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

MS = 1_000_000  # nanoseconds per millisecond


def ms_to_ns(ms: float) -> int:
    return round(ms * MS)


def ns_to_ms(ns: int) -> float:
    return ns / MS


class SignalKind(enum.Enum):
    HALT = "halt"
    CACHE_RESET = "cache_reset"
    TURN_BOUNDARY = "turn_boundary"
    PLAYBACK_FEEDBACK = "playback_feedback"


@dataclass(frozen=True)
class ControlSignal:
    """Priority message: halts, cache resets, turn hand-offs, playback feedback."""

    kind: SignalKind
    origin: str
    turn_id: int
    ngram_index: Optional[int] = None  # PLAYBACK_FEEDBACK only
    scope: Optional[frozenset[str]] = None  # CACHE_RESET only

    def __post_init__(self) -> None:
        if self.kind is SignalKind.PLAYBACK_FEEDBACK:
            if self.ngram_index is None or self.ngram_index < -1:
                raise ValueError("playback feedback requires ngram_index >= -1")
        elif self.ngram_index is not None:
            raise ValueError(f"{self.kind.value} must not carry ngram_index")
        if self.scope is not None and self.kind is not SignalKind.CACHE_RESET:
            raise ValueError(f"{self.kind.value} must not carry scope")


@dataclass(frozen=True, eq=False)
class AudioChunk:
    """10 ms of PCM samples from the capture source."""

    samples: np.ndarray  # float32, shape (rate // 100,)
    sample_rate: int
    start_time: int  # ns position in the session audio timeline
    padded: bool = False  # trailing partial chunk, zero-filled

    @property
    def duration_ns(self) -> int:
        return ms_to_ns(10)


@dataclass(frozen=True, eq=False)
class MelFrame:
    """One log-mel filterbank frame (100 Hz rate, 25 ms analysis window)."""

    bins: np.ndarray  # float64, shape (n_mels,)
    frame_index: int
    normalized: bool
    # audio timeline span of the analysis window, ns
    window_start: int = 0
    window_end: int = 0


@dataclass(frozen=True)
class TokenEvent:
    """Recognized token with its frame alignment."""

    text: str
    frame_index: int
    emitted_at: int
    is_blank: bool
    turn_id: int


@dataclass(frozen=True)
class StateBlock:
    """Motivation/emotion readout generated before each agent response."""

    user_motivation: str = ""
    user_emotion: str = ""
    agent_motivation: str = ""
    agent_emotion: str = ""

    def as_tuple(self) -> tuple[str, str, str, str]:
        return (
            self.user_motivation,
            self.user_emotion,
            self.agent_motivation,
            self.agent_emotion,
        )


@dataclass(frozen=True)
class WordChunk:
    """1-4 response words forming one alignment unit of the synthesis stream."""

    words: tuple[str, ...]
    ngram_index: int
    turn_id: int
    sentence_final: bool = False
    end_of_turn: bool = False
    frames_per_word: Optional[int] = None  # trace override

    def __post_init__(self) -> None:
        if not 1 <= len(self.words) <= 4:
            raise ValueError("word chunk must carry 1-4 words")

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass(frozen=True, eq=False)
class SpeechFrame:
    """One 40 Hz synthesis frame tagged with its word-level alignment."""

    frame_index: int
    payload: np.ndarray  # opaque token vector
    ngram_index: int
    turn_id: int
    phonetic: bool = True  # first frame after a sentence break must be phonetic
    sentence_start: bool = False
    end_of_turn: bool = False


PCM_SAMPLES_PER_CHUNK = 600  # one 40 Hz frame at 24 kHz


@dataclass(frozen=True, eq=False)
class PcmChunk:
    """25 ms of output waveform (600 samples at 24 kHz)."""

    samples: np.ndarray  # float32, shape (600,)
    ngram_index: int
    turn_id: int
    produced_at: int
    end_of_turn: bool = False

    def __post_init__(self) -> None:
        if len(self.samples) != PCM_SAMPLES_PER_CHUNK:
            raise ValueError(
                f"pcm chunk must hold {PCM_SAMPLES_PER_CHUNK} samples, got {len(self.samples)}"
            )


@dataclass(frozen=True)
class TelemetrySample:
    """Free-form instrumentation sample (latency points, speaker decisions, markers)."""

    kind: str
    stage: str
    turn_id: int
    value: float = 0.0
    detail: dict = field(default_factory=dict)


Payload = Union[
    AudioChunk,
    MelFrame,
    TokenEvent,
    StateBlock,
    WordChunk,
    SpeechFrame,
    PcmChunk,
    ControlSignal,
    TelemetrySample,
]

PAYLOAD_KINDS = {
    AudioChunk: "audio_chunk",
    MelFrame: "mel_frame",
    TokenEvent: "token",
    StateBlock: "state_block",
    WordChunk: "word_chunk",
    SpeechFrame: "speech_frame",
    PcmChunk: "pcm_chunk",
    ControlSignal: "control",
    TelemetrySample: "telemetry",
}


def payload_log_info(payload: Payload) -> dict:
    """Small deterministic payload summary for the event log."""
    if isinstance(payload, ControlSignal):
        info = {"signal": payload.kind.value, "origin": payload.origin}
        if payload.ngram_index is not None:
            info["ngram"] = payload.ngram_index
        return info
    if isinstance(payload, TokenEvent):
        return {"text": payload.text, "frame": payload.frame_index}
    if isinstance(payload, WordChunk):
        return {"ngram": payload.ngram_index, "text": payload.text,
                "final": payload.end_of_turn}
    if isinstance(payload, SpeechFrame):
        info = {"ngram": payload.ngram_index, "frame": payload.frame_index}
        if payload.sentence_start:
            info["sentence_start"] = True
            info["phonetic"] = payload.phonetic
        return info
    if isinstance(payload, PcmChunk):
        return {"ngram": payload.ngram_index}
    if isinstance(payload, MelFrame):
        return {"frame": payload.frame_index}
    if isinstance(payload, TelemetrySample):
        info = {"sample": payload.kind}
        info.update({k: v for k, v in sorted(payload.detail.items())
                     if isinstance(v, (str, int, float, bool))})
        return info
    if isinstance(payload, StateBlock):
        return {"states": "|".join(payload.as_tuple())}
    return {}


@dataclass(frozen=True)
class Envelope:
    """Timestamped, turn-tagged bus message carrying one payload variant."""

    topic: str
    seq: int
    produced_at: int
    turn_id: int
    payload: Payload

    @property
    def kind(self) -> str:
        return PAYLOAD_KINDS[type(self.payload)]

    @property
    def is_control(self) -> bool:
        return isinstance(self.payload, ControlSignal)
