"""Per-stage latency ledger and turn-level metrics.

The ledger mirrors the reference latency table: one row per stage with its
configured wait policy, configured per-output inference latency, and the
measured cumulative time to the stage's first output. Cumulative values
for the capture-side stages (mic/mel/asr) are measured against the session
audio start shifted by the frontend analysis-window warmup (the stage's
first input became complete later than its wait policy alone implies
because a 25 ms analysis window spans beyond the 10 ms hop); the warmup is
reported explicitly. Stages at and after the dialog model are measured
from the first turn boundary.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Optional

from .config import PipelineConfig
from .messages import ns_to_ms
from .runtime import EventLog

PIPELINE_ORDER = ("mic", "mel", "asr", "llm-state", "llm", "tts", "vocoder", "player")


class NoAudioForTurn(LookupError):
    pass


class NotRunning(RuntimeError):
    pass


@dataclass(frozen=True)
class LatencyRecord:
    stage: str
    wait_label: str
    wait_ms: Optional[float]
    inference_ms: Optional[float]
    cumulative_ms: Optional[float]
    reference: str  # "audio-start+warmup" | "turn-boundary"
    warmup_ms: float = 0.0


@dataclass
class TurnMetrics:
    turn_id: int
    turn_boundary_ms: Optional[float] = None
    last_user_word_ms: Optional[float] = None
    first_audio_ms: Optional[float] = None
    halted: bool = False
    halt_ms: Optional[float] = None
    feedback_ngram: Optional[int] = None
    playback_stop_ms: Optional[float] = None

    @property
    def ttfa_from_word_ms(self) -> Optional[float]:
        if self.first_audio_ms is None or self.last_user_word_ms is None:
            return None
        return self.first_audio_ms - self.last_user_word_ms

    @property
    def ttfa_from_boundary_ms(self) -> Optional[float]:
        if self.first_audio_ms is None or self.turn_boundary_ms is None:
            return None
        return self.first_audio_ms - self.turn_boundary_ms

    @property
    def interruption_to_silence_ms(self) -> Optional[float]:
        if self.halt_ms is None or self.playback_stop_ms is None:
            return None
        return self.playback_stop_ms - self.halt_ms


class TelemetryHub:
    """Thread-safe sample collector for per-stage wait/inference durations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.samples: list[tuple[str, str, float, int]] = []
        self.run_active = False

    def record(self, stage: str, kind: str, dt_ms: float, turn_id: int = -1) -> None:
        if not self.run_active:
            raise NotRunning("telemetry recording outside an active run")
        if kind not in ("wait", "inference"):
            raise ValueError(f"unknown sample kind {kind!r}")
        with self._lock:
            self.samples.append((stage, kind, dt_ms, turn_id))

    def stage_samples(self, stage: str, kind: str) -> list[float]:
        with self._lock:
            return [dt for s, k, dt, _ in self.samples if s == stage and k == kind]

    def mean(self, stage: str, kind: str) -> float:
        xs = self.stage_samples(stage, kind)
        return sum(xs) / len(xs) if xs else 0.0

    def percentile(self, stage: str, kind: str, q: float) -> float:
        xs = sorted(self.stage_samples(stage, kind))
        if not xs:
            return 0.0
        idx = min(len(xs) - 1, max(0, round(q / 100.0 * (len(xs) - 1))))
        return xs[idx]


def _first_time(log: EventLog, kind: str, stage: Optional[str] = None,
                **info_match) -> Optional[int]:
    for e in log.entries:
        if e.kind != kind:
            continue
        if stage is not None and e.stage != stage:
            continue
        d = dict(e.info)
        if all(d.get(k) == v for k, v in info_match.items()):
            return e.time_ns
    return None


def _first_turn_boundary(log: EventLog) -> Optional[int]:
    return _first_time(log, "control", stage="asr", signal="turn_boundary")


WAIT_LABELS = {
    "mic": "0",
    "mel": "10 ms chunk",
    "asr": "16 frames",
    "llm-state": "[pause]",
    "llm": "0",
    "tts": "[5 words]",
    "vocoder": "1 frame",
    "player": "25 ms priming",
}


def closed_form_cumulative(cfg: PipelineConfig) -> dict[str, float]:
    """Analytic latency budget per stage from configured waits and inferences.

    Capture-side waits overlap on the audio timeline, so each row is its
    own wait plus its own inference; dialog-and-later rows cascade from the
    turn boundary.
    """
    state = cfg.dialog.state_ms
    first_token = state + cfg.dialog.token_ms
    tts = state + cfg.tts.buffer_words * cfg.dialog.token_ms + cfg.tts.frame_inference_ms
    vocoder = tts + cfg.vocoder.chunk_inference_ms
    player = vocoder + cfg.player.per_chunk_ms + cfg.player.priming_ms
    return {
        "mic": 0.0,
        "mel": cfg.dsp.chunk_ms + cfg.dsp.mel_inference_ms,
        "asr": cfg.asr.batch_frames * cfg.dsp.hop_ms + cfg.asr.inference_ms,
        "llm-state": state,
        "llm": first_token,
        "tts": tts,
        "vocoder": vocoder,
        "player": player,
    }


def build_ledger(log: EventLog, cfg: PipelineConfig,
                 stages: Optional[list[str]] = None) -> list[LatencyRecord]:
    """Assemble the per-stage (wait, inference, cumulative) table from a run."""
    present = set(stages) if stages is not None else None
    tb = _first_turn_boundary(log)
    rows: list[LatencyRecord] = []

    def want(stage: str) -> bool:
        return present is None or stage in present

    def warmup_row(stage: str, wait_ms: float, inference_ms: float) -> LatencyRecord:
        ready = _first_time(log, "first_input_ready", stage=stage)
        done = _first_time(log, "first_step_done", stage=stage)
        cumulative = None
        warmup = 0.0
        if ready is not None and done is not None:
            warmup = ns_to_ms(ready) - wait_ms
            cumulative = ns_to_ms(done) - warmup
        return LatencyRecord(
            stage=stage, wait_label=WAIT_LABELS[stage], wait_ms=wait_ms,
            inference_ms=inference_ms, cumulative_ms=cumulative,
            reference="audio-start+warmup", warmup_ms=warmup,
        )

    def tb_row(stage: str, wait_ms: Optional[float], inference_ms: float,
               first_ns: Optional[int]) -> LatencyRecord:
        cumulative = None
        if tb is not None and first_ns is not None:
            cumulative = ns_to_ms(first_ns - tb)
        return LatencyRecord(
            stage=stage, wait_label=WAIT_LABELS[stage], wait_ms=wait_ms,
            inference_ms=inference_ms, cumulative_ms=cumulative,
            reference="turn-boundary",
        )

    if want("mic"):
        rows.append(LatencyRecord("mic", WAIT_LABELS["mic"], 0.0, 0.0, 0.0,
                                  "audio-start+warmup"))
    if want("mel"):
        rows.append(warmup_row("mel", cfg.dsp.chunk_ms, cfg.dsp.mel_inference_ms))
    if want("asr"):
        rows.append(warmup_row("asr", cfg.asr.batch_frames * cfg.dsp.hop_ms,
                               cfg.asr.inference_ms))
    if want("llm"):
        rows.append(tb_row("llm-state", None, cfg.dialog.state_ms,
                           _first_time(log, "state_block", stage="llm")))
        rows.append(tb_row("llm", 0.0, cfg.dialog.token_ms,
                           _first_time(log, "word_chunk", stage="llm")))
    if want("tts"):
        rows.append(tb_row("tts", None, cfg.tts.frame_inference_ms,
                           _first_time(log, "speech_frame", stage="tts")))
    if want("vocoder"):
        rows.append(tb_row("vocoder", 25.0, cfg.vocoder.chunk_inference_ms,
                           _first_time(log, "pcm_chunk", stage="vocoder")))
    if want("player"):
        rows.append(tb_row("player", cfg.player.priming_ms, cfg.player.per_chunk_ms,
                           _first_time(log, "playback_start", stage="player")))
    return rows


def collect_turn_metrics(log: EventLog, trace=None) -> dict[int, TurnMetrics]:
    metrics: dict[int, TurnMetrics] = {}

    def m(turn: int) -> TurnMetrics:
        return metrics.setdefault(turn, TurnMetrics(turn_id=turn))

    for e in log.entries:
        d = dict(e.info)
        t_ms = ns_to_ms(e.time_ns)
        if e.kind == "control" and d.get("signal") == "turn_boundary" \
                and e.stage == "asr":
            m(e.turn_id).turn_boundary_ms = t_ms
        elif e.kind == "playback_start":
            tm = m(e.turn_id)
            if tm.first_audio_ms is None:
                tm.first_audio_ms = t_ms
        elif e.kind == "halt_broadcast":
            tm = m(e.turn_id)
            tm.halted = True
            if tm.halt_ms is None:
                tm.halt_ms = t_ms
        elif e.kind == "feedback_sent":
            tm = m(e.turn_id)
            tm.feedback_ngram = d.get("ngram")
            tm.playback_stop_ms = t_ms
    if trace is not None:
        words = trace.all_words()
        for turn, tm in metrics.items():
            if tm.turn_boundary_ms is None:
                continue
            ends = [w.end_ms for w in words if w.end_ms <= tm.turn_boundary_ms]
            if ends:
                tm.last_user_word_ms = max(ends)
    return metrics


def time_to_first_audio(log: EventLog, trace, turn_id: int,
                        reference: str = "last-user-word") -> float:
    metrics = collect_turn_metrics(log, trace)
    tm = metrics.get(turn_id)
    if tm is None or tm.first_audio_ms is None:
        raise NoAudioForTurn(f"turn {turn_id} played no audio")
    if reference == "last-user-word":
        value = tm.ttfa_from_word_ms
    elif reference == "turn-boundary":
        value = tm.ttfa_from_boundary_ms
    else:
        raise ValueError(f"unknown reference {reference!r}")
    if value is None:
        raise NoAudioForTurn(f"turn {turn_id} lacks a {reference} reference")
    return value


def render_report(log: EventLog, cfg: PipelineConfig, trace=None,
                  stages: Optional[list[str]] = None) -> tuple[str, dict]:
    """Aligned text table plus a machine-readable dict of the same content."""
    rows = build_ledger(log, cfg, stages)
    metrics = collect_turn_metrics(log, trace)
    header = f"{'stage':<10} {'wait':<14} {'infer/out':<12} {'cumulative':<12} ref"
    lines = [header, "-" * len(header)]
    for r in rows:
        cum = f"{r.cumulative_ms:.1f} ms" if r.cumulative_ms is not None else "-"
        inf = f"{r.inference_ms:g} ms" if r.inference_ms is not None else "-"
        lines.append(
            f"{r.stage:<10} {r.wait_label:<14} {inf:<12} {cum:<12} {r.reference}"
        )
    warmups = {r.stage: r.warmup_ms for r in rows if r.warmup_ms}
    if warmups:
        noted = ", ".join(f"{s}={w:.0f} ms" for s, w in warmups.items())
        lines.append(f"analysis-window warmup: {noted}")
    lines.append("")
    for turn in sorted(metrics):
        tm = metrics[turn]
        if tm.turn_boundary_ms is None:
            continue
        parts = [f"turn {turn}:"]
        if tm.ttfa_from_word_ms is not None:
            parts.append(f"first-audio {tm.ttfa_from_word_ms:.1f} ms after last user word")
        if tm.ttfa_from_boundary_ms is not None:
            parts.append(f"({tm.ttfa_from_boundary_ms:.1f} ms after turn boundary)")
        if tm.halted:
            parts.append(f"halted; feedback ngram {tm.feedback_ngram}")
            if tm.interruption_to_silence_ms is not None:
                parts.append(
                    f"silence {tm.interruption_to_silence_ms:.1f} ms after halt"
                )
        lines.append(" ".join(parts))
    text = "\n".join(lines) + "\n"
    payload = {
        "rows": [
            {
                "stage": r.stage,
                "wait_label": r.wait_label,
                "wait_ms": r.wait_ms,
                "inference_ms": r.inference_ms,
                "cumulative_ms": r.cumulative_ms,
                "reference": r.reference,
                "warmup_ms": r.warmup_ms,
            }
            for r in rows
        ],
        "turns": {
            str(t): {
                "turn_boundary_ms": tm.turn_boundary_ms,
                "last_user_word_ms": tm.last_user_word_ms,
                "first_audio_ms": tm.first_audio_ms,
                "ttfa_from_word_ms": tm.ttfa_from_word_ms,
                "ttfa_from_boundary_ms": tm.ttfa_from_boundary_ms,
                "halted": tm.halted,
                "feedback_ngram": tm.feedback_ngram,
                "interruption_to_silence_ms": tm.interruption_to_silence_ms,
            }
            for t, tm in sorted(metrics.items())
        },
    }
    return text, payload


def report_to_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True)
