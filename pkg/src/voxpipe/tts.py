"""Streaming synthesis simulator with interleaved text/speech contract.

Buffers five words before a turn's generation starts (flushing earlier when
the turn's text ends or a sentence closes short), then emits 40 Hz frames
tagged with word-level alignment, one latency charge per frame. Sentence-
final punctuation finishes the sentence's frames, clears the synthesis
cache, and re-encodes a short audio prefix so the first frame of the next
sentence carries phonetic content rather than silence.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bus import TOPIC_CONTROL, TOPIC_LLM, TOPIC_TTS
from .config import TtsConfig
from .messages import ControlSignal, SignalKind, SpeechFrame, WordChunk, ms_to_ns
from .runtime import Stage, StageContext, StageSpec, Step


class NotReady(RuntimeError):
    pass


@dataclass
class TtsState:
    """Per-turn synthesis state."""

    turn_id: int = -1
    buffered_words: int = 0
    started: bool = False
    text_ended: bool = False
    chunks: deque = field(default_factory=deque)  # WordChunks awaiting synthesis
    frames_left_in_chunk: int = 0
    current: Optional[WordChunk] = None
    frame_index: int = 0
    sentence_start_next: bool = True  # next frame opens a (re-encoded) sentence
    pending_sentence_reset: bool = False
    prefix_reencodes: int = 0


def buffer_word(chunk: WordChunk, st: TtsState, buffer_words: int = 5) -> bool:
    """Append a chunk; True once generation may start (5 words or a flush)."""
    st.chunks.append(chunk)
    st.buffered_words += len(chunk.words)
    if chunk.end_of_turn:
        st.text_ended = True
    if not st.started:
        if (st.buffered_words >= buffer_words or st.text_ended
                or chunk.sentence_final):
            st.started = True
    return st.started


def frame_payload(word_text: str, frame_number: int, dim: int = 8) -> np.ndarray:
    """Deterministic opaque token vector standing in for a synthesis frame."""
    seed = (hash_text(word_text) * 31 + frame_number) % (2**31)
    rng = np.random.default_rng(seed)
    return rng.standard_normal(dim)


def hash_text(text: str) -> int:
    h = 2166136261
    for ch in text.encode("utf-8"):
        h = ((h ^ ch) * 16777619) % (2**32)
    return h


class TtsStage(Stage):
    name = "tts"

    def __init__(self, config: TtsConfig):
        self.cfg = config
        self.st = TtsState()
        self.cache_resets = 0

    def spec(self) -> StageSpec:
        return StageSpec(
            name=self.name,
            input_topics=(TOPIC_LLM, TOPIC_CONTROL),
            output_topics=(TOPIC_TTS,),
            wait_policy=f"{self.cfg.buffer_words} words",
            wait_ms=None,
            inference_ms=self.cfg.frame_inference_ms,
        )

    def on_data(self, env, ctx: StageContext) -> None:
        chunk = env.payload
        if not isinstance(chunk, WordChunk):
            return
        if chunk.turn_id != self.st.turn_id:
            # new turn: synthesis cache reinitializes per turn
            self.st = TtsState(turn_id=chunk.turn_id)
            ctx.log("tts_turn_start", chunk.turn_id)
        ready = buffer_word(chunk, self.st, self.cfg.buffer_words)
        if ready and self.st.buffered_words < self.cfg.buffer_words:
            ctx.log("tts_flush_start", chunk.turn_id,
                    words=self.st.buffered_words)

    def on_control(self, sig: ControlSignal, ctx: StageContext) -> None:
        if sig.kind is SignalKind.HALT and sig.turn_id == self.st.turn_id:
            dropped = len(self.st.chunks) + (
                1 if self.st.frames_left_in_chunk else 0
            )
            self.st = TtsState(turn_id=-1)
            ctx.log("tts_halted", sig.turn_id, dropped_chunks=dropped)

    def frames_for(self, chunk: WordChunk) -> int:
        per_word = chunk.frames_per_word or self.cfg.frames_per_word
        return per_word * len(chunk.words)

    def poll(self, ctx: StageContext) -> Optional[Step]:
        st = self.st
        if not st.started:
            return None
        if st.pending_sentence_reset:
            turn = st.turn_id

            def commit_reset(c: StageContext, turn=turn) -> None:
                st = self.st
                if st.turn_id != turn:
                    return
                st.pending_sentence_reset = False
                st.sentence_start_next = True
                st.prefix_reencodes += 1
                self.cache_resets += 1
                c.log("tts_cache_reset", turn, prefix_reencoded=True)

            return Step(charge_ns=ms_to_ns(self.cfg.prefix_reencode_ms),
                        commit=commit_reset, turn_id=turn, label="tts_prefix")
        if st.current is None and st.chunks:
            st.current = st.chunks.popleft()
            st.frames_left_in_chunk = self.frames_for(st.current)
        if st.current is None:
            return None
        turn = st.turn_id
        chunk = st.current
        word_pos = self.frames_for(chunk) - st.frames_left_in_chunk
        per_word = chunk.frames_per_word or self.cfg.frames_per_word
        word_text = chunk.words[min(word_pos // per_word, len(chunk.words) - 1)]

        def commit_frame(c: StageContext, turn=turn, chunk=chunk,
                         word_text=word_text) -> None:
            st = self.st
            if st.turn_id != turn or st.current is not chunk:
                return
            st.frames_left_in_chunk -= 1
            last_of_chunk = st.frames_left_in_chunk == 0
            end_of_turn = (last_of_chunk and chunk.end_of_turn
                           and not st.chunks)
            frame = SpeechFrame(
                frame_index=st.frame_index,
                payload=frame_payload(word_text, st.frame_index),
                ngram_index=chunk.ngram_index,
                turn_id=turn,
                phonetic=True,
                sentence_start=st.sentence_start_next,
                end_of_turn=end_of_turn,
            )
            st.frame_index += 1
            st.sentence_start_next = False
            c.publish(TOPIC_TTS, frame, turn_id=turn)
            if last_of_chunk:
                st.current = None
                if chunk.sentence_final and not end_of_turn:
                    st.pending_sentence_reset = True

        return Step(charge_ns=ms_to_ns(self.cfg.frame_inference_ms),
                    commit=commit_frame, turn_id=turn, label="tts_frame")
