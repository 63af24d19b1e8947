"""Speaker identity scheduling: 3 s enrollment, then 1.5 s sliding windows.

Embeddings are mocked deterministically (one-hot vectors keyed by the
scripted speaker label), so same-speaker windows score cosine 1.0 and
different speakers score 0.0. Windows with 20% speech or less are skipped
after enrollment to avoid pointless inference on silence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

FRAME_MS = 10.0  # VAD mark granularity


class NotInvoked(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerWindow:
    start_ms: float
    length_ms: float
    speech_ratio: float
    invoked: bool
    enrollment: bool = False

    @property
    def end_ms(self) -> float:
        return self.start_ms + self.length_ms


@dataclass(frozen=True)
class SpeakerDecision:
    window: SpeakerWindow
    similarity: float
    label: str  # "enrolled" | "other"
    speaker: Optional[str] = None  # scripted majority label, for the viewer


def frame_speech_ratio(speech_spans_ms: list[tuple[float, float]],
                       start_ms: float, end_ms: float) -> float:
    """Fraction of 10 ms frames inside [start, end) overlapping any speech span."""
    first = round(start_ms / FRAME_MS)
    last = round(end_ms / FRAME_MS)
    total = last - first
    if total <= 0:
        return 0.0
    speech = 0
    for j in range(first, last):
        a, b = j * FRAME_MS, (j + 1) * FRAME_MS
        if any(s < b and e > a for s, e in speech_spans_ms):
            speech += 1
    return speech / total


def schedule_windows(speech_spans_ms: list[tuple[float, float]],
                     session_ms: float, enroll_s: float = 3.0,
                     window_s: float = 1.5,
                     min_speech_ratio: float = 0.20) -> list[SpeakerWindow]:
    """Oracle schedule: which windows exist and which are invoked.

    The enrollment window is invoked unconditionally once 3 s of audio
    exists; later windows only when they exceed the speech-ratio floor.
    Trailing incomplete windows are not scheduled.
    """
    windows: list[SpeakerWindow] = []
    enroll_ms = enroll_s * 1000.0
    step_ms = window_s * 1000.0
    if session_ms < enroll_ms:
        return windows
    ratio = frame_speech_ratio(speech_spans_ms, 0.0, enroll_ms)
    windows.append(SpeakerWindow(0.0, enroll_ms, ratio, invoked=True, enrollment=True))
    start = enroll_ms
    while start + step_ms <= session_ms:
        ratio = frame_speech_ratio(speech_spans_ms, start, start + step_ms)
        windows.append(
            SpeakerWindow(start, step_ms, ratio, invoked=ratio > min_speech_ratio)
        )
        start += step_ms
    return windows


class EmbeddingRegistry:
    """Deterministic unit vectors per scripted speaker label."""

    def __init__(self, dim: int = 8):
        self.dim = dim
        self._labels: dict[str, int] = {}

    def vector(self, label: Optional[str]) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        if label is None:
            return v
        idx = self._labels.setdefault(label, len(self._labels))
        v[idx % self.dim] = 1.0
        return v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def majority_speaker(words, start_ms: float, end_ms: float) -> Optional[str]:
    """Speaker with the most speech time inside the window; ties go earliest."""
    totals: dict[str, float] = {}
    first_seen: dict[str, float] = {}
    for w in words:
        a = max(w.start_ms, start_ms)
        b = min(w.end_ms, end_ms)
        if b > a:
            totals[w.speaker] = totals.get(w.speaker, 0.0) + (b - a)
            first_seen.setdefault(w.speaker, a)
    if not totals:
        return None
    return max(totals, key=lambda s: (totals[s], -first_seen[s]))


def embed_and_decide(window: SpeakerWindow, speaker_label: Optional[str],
                     enrolled: np.ndarray, registry: EmbeddingRegistry,
                     threshold: float = 0.5) -> SpeakerDecision:
    if not window.invoked:
        raise NotInvoked(f"window at {window.start_ms} ms was not invoked")
    emb = registry.vector(speaker_label)
    sim = cosine(emb, enrolled)
    label = "enrolled" if sim >= threshold else "other"
    return SpeakerDecision(window=window, similarity=sim, label=label,
                           speaker=speaker_label)


class SpeakerScheduler:
    """Incremental window driver fed by the recognizer's frame clock.

    Lives inside the recognizer worker: `on_audio_time` is called as frames
    are processed and returns any decisions whose window just completed.
    """

    def __init__(self, words, enroll_s: float = 3.0, window_s: float = 1.5,
                 min_speech_ratio: float = 0.20, threshold: float = 0.5,
                 embedding_dim: int = 8):
        # the list may be shared and appended to while a live session runs
        self.words = sorted(words, key=lambda w: w.start_ms) \
            if not isinstance(words, list) else words
        self.enroll_ms = enroll_s * 1000.0
        self.step_ms = window_s * 1000.0
        self.min_speech_ratio = min_speech_ratio
        self.threshold = threshold
        self.registry = EmbeddingRegistry(embedding_dim)
        self.enrolled_vec: Optional[np.ndarray] = None
        self.windows: list[SpeakerWindow] = []
        self.decisions: list[SpeakerDecision] = []
        self._next_end = self.enroll_ms

    @property
    def spans(self) -> list[tuple[float, float]]:
        return [(w.start_ms, w.end_ms) for w in self.words]

    def on_audio_time(self, audio_ms: float) -> list[SpeakerDecision]:
        out: list[SpeakerDecision] = []
        while audio_ms >= self._next_end:
            start = self._next_end - (
                self.enroll_ms if not self.windows else self.step_ms
            )
            length = self._next_end - start
            enrollment = not self.windows
            ratio = frame_speech_ratio(self.spans, start, self._next_end)
            invoked = enrollment or ratio > self.min_speech_ratio
            window = SpeakerWindow(start, length, ratio, invoked, enrollment)
            self.windows.append(window)
            if invoked:
                label = majority_speaker(self.words, start, self._next_end)
                if enrollment:
                    self.enrolled_vec = self.registry.vector(label)
                decision = embed_and_decide(
                    window, label,
                    self.enrolled_vec if self.enrolled_vec is not None
                    else np.zeros(self.registry.dim),
                    self.registry, self.threshold,
                )
                self.decisions.append(decision)
                out.append(decision)
            self._next_end += self.step_ms
        return out

    @property
    def invocation_count(self) -> int:
        return len(self.decisions)
