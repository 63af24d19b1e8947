"""Scenario runner: assembles a pipeline (full or any stage subset), runs it
in sim or realtime mode, and collects the event log, latency report, and
per-turn PCM."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.io import wavfile

from .asr import AsrStage
from .audio_out import PlayerStage, VocoderStage
from .bus import ALL_TOPICS, TOPIC_CONTROL, TOPIC_LLM, TOPIC_TOKENS, TOPIC_TTS, Bus
from .config import PipelineConfig
from .dialog import DialogStage
from .dsp import MelStage, MelTransform, MicStage, synth_audio
from .messages import (
    ControlSignal,
    SignalKind,
    SpeechFrame,
    TokenEvent,
    WordChunk,
    ms_to_ns,
)
from .runtime import EventLog, Runtime, Stage, StageContext, StageSpec
from .telemetry import TelemetryHub, collect_turn_metrics, render_report
from .trace import ScenarioTrace
from .tts import TtsStage, frame_payload

STAGE_SETS = {
    "full": ("mic", "mel", "asr", "llm", "tts", "vocoder", "player"),
    "asr": ("mic", "mel", "asr"),
    "asr+llm": ("mic", "mel", "asr", "llm"),
    "llm": ("llm",),
    "llm+tts+vocoder": ("llm", "tts", "vocoder"),
    "tts+vocoder": ("tts", "vocoder"),
    "vocoder": ("vocoder",),
}


@dataclass
class RunResult:
    log: EventLog
    report_text: str
    report: dict
    runtime: Runtime
    stages: dict[str, Stage] = field(default_factory=dict)
    player: Optional[PlayerStage] = None
    pcm: dict[int, np.ndarray] = field(default_factory=dict)

    def turn_metrics(self, trace: ScenarioTrace):
        return collect_turn_metrics(self.log, trace)


class TokenInjectorStage(Stage):
    """Source for dialog-first subsets: scripted tokens plus turn boundaries."""

    name = "token-injector"

    def __init__(self, trace: ScenarioTrace, pause_ms: float):
        self.events: list[tuple[int, str, object]] = []
        for turn, utt in enumerate(trace.utterances):
            words = sorted(utt, key=lambda w: w.start_ms)
            for w in words:
                self.events.append((ms_to_ns(w.end_ms), "token",
                                    (turn, w.text)))
            if words:
                boundary = words[-1].end_ms + pause_ms
                self.events.append((ms_to_ns(boundary), "boundary", turn))
        self.events.sort(key=lambda e: e[0])
        self._i = 0

    def spec(self) -> StageSpec:
        return StageSpec(name=self.name,
                         output_topics=(TOPIC_TOKENS, TOPIC_CONTROL),
                         wait_policy="scripted", wait_ms=0.0, inference_ms=0.0)

    def on_start(self, ctx: StageContext) -> None:
        self._arm(ctx)

    def _arm(self, ctx: StageContext) -> None:
        if self._i >= len(self.events):
            return
        due = self.events[self._i][0]
        ctx.schedule(max(0, due - ctx.now()), self._fire, label="inject")

    def _fire(self, ctx: StageContext) -> None:
        due, kind, value = self.events[self._i]
        self._i += 1
        if kind == "token":
            turn, text = value
            ctx.publish(TOPIC_TOKENS,
                        TokenEvent(text=text, frame_index=0,
                                   emitted_at=ctx.now(), is_blank=False,
                                   turn_id=turn),
                        turn_id=turn)
        else:
            ctx.set_active_agent_turn(value)
            ctx.publish(TOPIC_CONTROL,
                        ControlSignal(kind=SignalKind.TURN_BOUNDARY,
                                      origin="asr", turn_id=value),
                        turn_id=value)
        self._arm(ctx)


class WordInjectorStage(Stage):
    """Source feeding scripted word chunks straight into the synthesis path."""

    name = "word-injector"

    def __init__(self, trace: ScenarioTrace, token_ms: float,
                 turn_spacing_ms: float = 5000.0):
        self.events: list[tuple[int, WordChunk]] = []
        for turn, script in enumerate(trace.agent_scripts):
            t0 = turn * turn_spacing_ms
            t = t0
            for i, words in enumerate(script.ngrams):
                t += token_ms * len(words)
                self.events.append((
                    ms_to_ns(t),
                    WordChunk(words=words, ngram_index=i, turn_id=turn,
                              sentence_final=words[-1].endswith((".", "!", "?")),
                              end_of_turn=(i == len(script.ngrams) - 1),
                              frames_per_word=script.frames_per_ngram.get(i)),
                ))
        self.events.sort(key=lambda e: e[0])
        self._i = 0

    def spec(self) -> StageSpec:
        return StageSpec(name=self.name, output_topics=(TOPIC_LLM,),
                         wait_policy="scripted", wait_ms=0.0, inference_ms=0.0)

    def on_start(self, ctx: StageContext) -> None:
        self._arm(ctx)

    def _arm(self, ctx: StageContext) -> None:
        if self._i >= len(self.events):
            return
        due = self.events[self._i][0]
        ctx.schedule(max(0, due - ctx.now()), self._fire, label="inject")

    def _fire(self, ctx: StageContext) -> None:
        _, chunk = self.events[self._i]
        self._i += 1
        ctx.publish(TOPIC_LLM, chunk, turn_id=chunk.turn_id)
        self._arm(ctx)


class FrameInjectorStage(Stage):
    """Source feeding 40 Hz frames straight into the vocoder."""

    name = "frame-injector"

    def __init__(self, trace: ScenarioTrace, frames_per_word: int,
                 turn_spacing_ms: float = 5000.0):
        self.events: list[tuple[int, SpeechFrame]] = []
        for turn, script in enumerate(trace.agent_scripts):
            t = turn * turn_spacing_ms
            index = 0
            total = [(i, w) for i, g in enumerate(script.ngrams) for w in g]
            for pos, (ngram_index, word) in enumerate(total):
                for _ in range(frames_per_word):
                    t += 25.0  # 40 Hz cadence
                    self.events.append((
                        ms_to_ns(t),
                        SpeechFrame(frame_index=index,
                                    payload=frame_payload(word, index),
                                    ngram_index=ngram_index, turn_id=turn,
                                    end_of_turn=(pos == len(total) - 1)),
                    ))
                    index += 1
        self.events.sort(key=lambda e: e[0])
        self._i = 0

    def spec(self) -> StageSpec:
        return StageSpec(name=self.name, output_topics=(TOPIC_TTS,),
                         wait_policy="scripted", wait_ms=0.0, inference_ms=0.0)

    def on_start(self, ctx: StageContext) -> None:
        self._arm(ctx)

    def _arm(self, ctx: StageContext) -> None:
        if self._i >= len(self.events):
            return
        due = self.events[self._i][0]
        ctx.schedule(max(0, due - ctx.now()), self._fire, label="inject")

    def _fire(self, ctx: StageContext) -> None:
        _, frame = self.events[self._i]
        self._i += 1
        ctx.publish(TOPIC_TTS, frame, turn_id=frame.turn_id)
        self._arm(ctx)


def build_pipeline(trace: ScenarioTrace, config: PipelineConfig,
                   mode: str = "sim", stages: str = "full",
                   capture_pcm: bool = True) -> tuple[Runtime, dict[str, Stage]]:
    if stages not in STAGE_SETS:
        raise ValueError(f"unknown stage set {stages!r}; "
                         f"choose from {sorted(STAGE_SETS)}")
    wanted = STAGE_SETS[stages]
    bus = Bus(data_capacity=config.bus.data_capacity)
    bus.register_topics(ALL_TOPICS)
    bus.set_halt_targets([s for s in ("llm", "tts", "vocoder", "player")
                          if s in wanted])
    runtime = Runtime(bus, config, mode=mode)
    runtime.hub = TelemetryHub()
    built: dict[str, Stage] = {}

    if "mic" in wanted:
        audio = synth_audio(trace.speech_spans_ms(), trace.end_ms(),
                            rate=trace.sample_rate)
        built["mic"] = MicStage(audio, trace.sample_rate, config.dsp.chunk_ms)
    if "mel" in wanted:
        transform = MelTransform(
            rate=trace.sample_rate, n_mels=config.dsp.mel_bins,
            window_ms=config.dsp.window_ms, hop_ms=config.dsp.hop_ms,
            log_floor=config.dsp.log_floor,
        )
        built["mel"] = MelStage(transform, std_floor=config.dsp.std_floor,
                                inference_ms=config.dsp.mel_inference_ms)
    if "asr" in wanted:
        built["asr"] = AsrStage(trace.all_words(), config.asr,
                                speaker_config=config.speaker,
                                hop_ms=config.dsp.hop_ms)
    if "llm" in wanted:
        built["llm"] = DialogStage(trace, config.dialog)
        if "asr" not in wanted:
            built["token-injector"] = TokenInjectorStage(trace,
                                                         config.asr.pause_ms)
    if "tts" in wanted:
        built["tts"] = TtsStage(config.tts)
        if "llm" not in wanted:
            built["word-injector"] = WordInjectorStage(trace,
                                                       config.dialog.token_ms)
    if "vocoder" in wanted:
        built["vocoder"] = VocoderStage(config.vocoder)
        if "tts" not in wanted:
            built["frame-injector"] = FrameInjectorStage(
                trace, config.tts.frames_per_word)
    if "player" in wanted:
        built["player"] = PlayerStage(config.player, capture_pcm=capture_pcm)

    order = ("mic", "mel", "asr", "token-injector", "llm", "word-injector",
             "tts", "frame-injector", "vocoder", "player")
    for name in order:
        if name in built:
            runtime.register(built[name])
    return runtime, built


def default_horizon_ms(trace: ScenarioTrace, config: PipelineConfig) -> float:
    """Session horizon: trace end plus the longest possible agent tail."""
    tail = 2000.0
    for script in trace.agent_scripts:
        wc = script.word_count
        frames = sum(
            script.frames_per_ngram.get(i, config.tts.frames_per_word * len(g))
            for i, g in enumerate(script.ngrams)
        )
        tail = max(tail, config.dialog.state_ms + wc * config.dialog.token_ms
                   + frames * 25.0 + 2000.0)
    return trace.end_ms() + tail


def run_scenario(trace: ScenarioTrace, config: Optional[PipelineConfig] = None,
                 mode: str = "sim", stages: str = "full",
                 until_ms: Optional[float] = None,
                 pcm_dir: Optional[str | Path] = None,
                 report_path: Optional[str | Path] = None) -> RunResult:
    config = config or PipelineConfig()
    runtime, built = build_pipeline(trace, config, mode=mode, stages=stages)
    horizon = until_ms if until_ms is not None else default_horizon_ms(trace, config)
    runtime.hub.run_active = True
    try:
        log = runtime.run(ms_to_ns(horizon))
    finally:
        runtime.hub.run_active = False
    report_text, report = render_report(log, config, trace,
                                        stages=list(STAGE_SETS[stages]))
    player = built.get("player")
    result = RunResult(log=log, report_text=report_text, report=report,
                       runtime=runtime, stages=built, player=player)
    if player is not None:
        for turn in sorted(player.played):
            result.pcm[turn] = player.turn_waveform(turn)
    if pcm_dir is not None:
        out = Path(pcm_dir)
        out.mkdir(parents=True, exist_ok=True)
        for turn, wave in result.pcm.items():
            pcm16 = np.clip(wave, -1.0, 1.0)
            wavfile.write(str(out / f"turn_{turn:02d}.wav"),
                          config.vocoder.output_rate,
                          (pcm16 * 32767.0).astype(np.int16))
    if report_path is not None:
        Path(report_path).write_text(report_text)
    return result


def diff_logs(a: EventLog, b: EventLog) -> list[str]:
    """Structural differences between two event logs; empty means identical."""
    diffs: list[str] = []
    for i, (ea, eb) in enumerate(zip(a.entries, b.entries)):
        if ea != eb:
            diffs.append(f"entry {i}: {ea.to_json()} != {eb.to_json()}")
    if len(a.entries) != len(b.entries):
        diffs.append(f"length {len(a.entries)} != {len(b.entries)}")
    return diffs
