"""Audio frontend: 10 ms chunking and streaming log-mel features.

The feature extractor is real (not simulated): triangular mel filterbank
over the magnitude spectrum of Hann-windowed 25 ms segments at a 10 ms hop,
followed by running mean/std normalization so the whole chain stays
streaming. Frames produced chunk-by-chunk are identical to whole-signal
processing; a frame is emitted only once its full analysis window exists,
so a 1 s / 16 kHz signal yields floor((16000-400)/160)+1 = 98 frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.io import wavfile

from .bus import TOPIC_AUDIO, TOPIC_MEL
from .messages import AudioChunk, MelFrame, ms_to_ns
from .runtime import Stage, StageContext, StageSpec, Step


class UnsupportedRate(ValueError):
    """Sample rate without an integer number of samples per 10 ms."""


def samples_per_chunk(rate: int, chunk_ms: float = 10.0) -> int:
    exact = rate * chunk_ms / 1000.0
    n = round(exact)
    if abs(exact - n) > 1e-9 or n <= 0:
        raise UnsupportedRate(f"{rate} Hz has no integer sample count per {chunk_ms} ms")
    return n


def chunk_source(samples: np.ndarray, rate: int, chunk_ms: float = 10.0,
                 start_time: int = 0) -> Iterator[AudioChunk]:
    """Split a signal into consecutive non-overlapping 10 ms chunks.

    A trailing partial chunk is zero-padded and flagged.
    """
    n = samples_per_chunk(rate, chunk_ms)
    samples = np.asarray(samples, dtype=np.float32)
    step_ns = ms_to_ns(chunk_ms)
    pos = 0
    index = 0
    while pos < len(samples):
        block = samples[pos:pos + n]
        padded = len(block) < n
        if padded:
            block = np.concatenate([block, np.zeros(n - len(block), dtype=np.float32)])
        yield AudioChunk(
            samples=block,
            sample_rate=rate,
            start_time=start_time + index * step_ns,
            padded=padded,
        )
        pos += n
        index += 1


def hz_to_mel(hz: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, rate: int,
                   fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular mel filterbank applied to rfft magnitude bins."""
    if fmax is None:
        fmax = rate / 2.0
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, rate / 2.0, n_bins)
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - left) / max(center - left, 1e-12)
        down = (right - fft_freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


class MelTransform:
    """Log-mel of one windowed segment; shared by streaming and batch paths."""

    def __init__(self, rate: int = 16000, n_mels: int = 80,
                 window_ms: float = 25.0, hop_ms: float = 10.0,
                 log_floor: float = 1e-10):
        self.rate = rate
        self.n_mels = n_mels
        self.win = round(rate * window_ms / 1000.0)
        self.hop = round(rate * hop_ms / 1000.0)
        if self.hop <= 0 or self.win <= self.hop:
            raise ValueError("window must exceed hop")
        self.log_floor = log_floor
        self.window = periodic_hann(self.win)
        self.filterbank = mel_filterbank(n_mels, self.win, rate)

    def frame_bins(self, segment: np.ndarray) -> np.ndarray:
        windowed = np.asarray(segment, dtype=np.float64) * self.window
        magnitude = np.abs(np.fft.rfft(windowed))
        energies = self.filterbank @ magnitude
        return np.log(np.maximum(energies, self.log_floor))

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.win:
            return 0
        return (n_samples - self.win) // self.hop + 1


@dataclass
class RunningStats:
    """Per-bin streaming mean/variance (Welford), population semantics."""

    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def update(self, x: np.ndarray) -> None:
        if self.count == 0:
            self.mean = np.zeros_like(x, dtype=np.float64)
            self.m2 = np.zeros_like(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.mean)
        return self.m2 / self.count

    def std(self) -> np.ndarray:
        return np.sqrt(self.variance())


def normalize_running(bins: np.ndarray, stats: RunningStats,
                      std_floor: float = 1e-5) -> np.ndarray:
    """Update stats with the frame, then normalize it by the updated stats.

    The current frame is included in its own statistics; the very first
    frame therefore normalizes to all zeros.
    """
    stats.update(bins)
    std = np.maximum(stats.std(), std_floor)
    return (bins - stats.mean) / std


class StreamingMelExtractor:
    """Chunk-fed mel frontend holding at most one window of history."""

    def __init__(self, transform: Optional[MelTransform] = None,
                 std_floor: float = 1e-5, normalize: bool = True):
        self.transform = transform or MelTransform()
        self.std_floor = std_floor
        self.normalize = normalize
        self.stats = RunningStats()
        self._buffer = np.zeros(0, dtype=np.float64)
        self._buffer_start = 0  # absolute sample index of _buffer[0]
        self._next_frame = 0

    def feed(self, chunk: AudioChunk) -> list[MelFrame]:
        """Consume one chunk; emit every frame whose window is now complete."""
        t = self.transform
        self._buffer = np.concatenate(
            [self._buffer, np.asarray(chunk.samples, dtype=np.float64)]
        )
        frames: list[MelFrame] = []
        rate_ns = 1_000_000_000
        while True:
            start = self._next_frame * t.hop
            end = start + t.win
            if end > self._buffer_start + len(self._buffer):
                break
            segment = self._buffer[start - self._buffer_start:end - self._buffer_start]
            bins = t.frame_bins(segment)
            if self.normalize:
                bins = normalize_running(bins, self.stats, self.std_floor)
            frames.append(
                MelFrame(
                    bins=bins,
                    frame_index=self._next_frame,
                    normalized=self.normalize,
                    window_start=round(start * rate_ns / t.rate),
                    window_end=round(end * rate_ns / t.rate),
                )
            )
            self._next_frame += 1
        keep_from = self._next_frame * t.hop
        if keep_from > self._buffer_start:
            self._buffer = self._buffer[keep_from - self._buffer_start:]
            self._buffer_start = keep_from
        return frames

    @property
    def frames_emitted(self) -> int:
        return self._next_frame


def extract_mel_batch(samples: np.ndarray, transform: Optional[MelTransform] = None,
                      std_floor: float = 1e-5, normalize: bool = True) -> np.ndarray:
    """Whole-signal processing path (same transform, same running semantics)."""
    t = transform or MelTransform()
    samples = np.asarray(samples, dtype=np.float64)
    n = t.num_frames(len(samples))
    out = np.zeros((n, t.n_mels), dtype=np.float64)
    stats = RunningStats()
    for k in range(n):
        bins = t.frame_bins(samples[k * t.hop:k * t.hop + t.win])
        out[k] = normalize_running(bins, stats, std_floor) if normalize else bins
    return out


def load_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a PCM16 or float WAV into float32 [-1, 1] mono."""
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    else:
        data = data.astype(np.float32)
    return data, int(rate)


def synth_audio(speech_spans_ms: list[tuple[float, float]], duration_ms: float,
                rate: int = 16000, tone_hz: float = 220.0,
                amplitude: float = 0.3) -> np.ndarray:
    """Synthetic session audio: a tone during speech spans, silence elsewhere."""
    n = round(duration_ms * rate / 1000.0)
    out = np.zeros(n, dtype=np.float32)
    t = np.arange(n, dtype=np.float64) / rate
    tone = (amplitude * np.sin(2.0 * np.pi * tone_hz * t)).astype(np.float32)
    for start_ms, end_ms in speech_spans_ms:
        a = max(0, round(start_ms * rate / 1000.0))
        b = min(n, round(end_ms * rate / 1000.0))
        if b > a:
            out[a:b] = tone[a:b]
    return out


# -- pipeline stages --------------------------------------------------------


class MicStage(Stage):
    """Capture source: replays a waveform as real-time paced 10 ms chunks.

    Chunk i becomes available when its last sample has been captured, i.e.
    at (i+1) * 10 ms on the session clock.
    """

    name = "mic"

    def __init__(self, audio: np.ndarray, rate: int = 16000, chunk_ms: float = 10.0):
        self.chunks = list(chunk_source(audio, rate, chunk_ms))
        self.chunk_ns = ms_to_ns(chunk_ms)
        self._next = 0

    def spec(self) -> StageSpec:
        return StageSpec(
            name=self.name,
            output_topics=(TOPIC_AUDIO,),
            wait_policy="continuous capture",
            wait_ms=0.0,
            inference_ms=0.0,
        )

    def on_start(self, ctx: StageContext) -> None:
        if self.chunks:
            ctx.schedule(self.chunk_ns, self._tick, label="capture")

    def _tick(self, ctx: StageContext) -> None:
        chunk = self.chunks[self._next]
        self._next += 1
        ctx.publish(TOPIC_AUDIO, chunk, turn_id=-1)
        if self._next < len(self.chunks):
            due = (self._next + 1) * self.chunk_ns
            ctx.schedule(due - ctx.now(), self._tick, label="capture")
        else:
            ctx.telemetry("audio_ended", value=self._next)


class MelStage(Stage):
    """Streaming feature extractor stage wrapping StreamingMelExtractor."""

    name = "mel"

    def __init__(self, transform: Optional[MelTransform] = None,
                 std_floor: float = 1e-5, inference_ms: float = 1.0):
        self.extractor = StreamingMelExtractor(transform, std_floor=std_floor)
        self.inference_ns = ms_to_ns(inference_ms)
        self._inference_ms = inference_ms
        self._pending_chunks: list[AudioChunk] = []

    def spec(self) -> StageSpec:
        return StageSpec(
            name=self.name,
            input_topics=(TOPIC_AUDIO,),
            output_topics=(TOPIC_MEL,),
            wait_policy="1 chunk (10 ms)",
            wait_ms=10.0,
            inference_ms=self._inference_ms,
        )

    def on_data(self, env, ctx: StageContext) -> None:
        if isinstance(env.payload, AudioChunk):
            self._pending_chunks.append(env.payload)

    def poll(self, ctx: StageContext) -> Optional[Step]:
        if not self._pending_chunks:
            return None
        chunk = self._pending_chunks.pop(0)
        frames = self.extractor.feed(chunk)

        def commit(c: StageContext, frames=frames) -> None:
            for f in frames:
                c.publish(TOPIC_MEL, f, turn_id=-1)

        return Step(
            charge_ns=self.inference_ns * len(frames),
            commit=commit,
            label="mel",
            output=bool(frames),
        )
