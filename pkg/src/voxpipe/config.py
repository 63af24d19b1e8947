"""Pipeline configuration: per-stage wait policies and inference latencies.

Defaults reproduce the published latency budget of the reference system:
10 ms capture chunks, 16-frame recognizer batches, a 100 ms end-of-turn
pause, a 5-word synthesis buffer, per-frame vocoding, and 25 ms playback
priming. All latencies are fixed per-output durations; optional uniform
jitter (+/-10%) can be enabled for robustness experiments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DspConfig:
    sample_rate: int = 16000
    chunk_ms: float = 10.0
    mel_bins: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    log_floor: float = 1e-10
    std_floor: float = 1e-5
    mel_inference_ms: float = 1.0


@dataclass
class AsrConfig:
    batch_frames: int = 16
    frame_stacking: int = 4
    inference_ms: float = 13.0
    pause_ms: float = 100.0
    silence_reset_ms: float = 5000.0
    cache_cap_s: float = 30.0
    # recorded for parity with the modeled recognizer; not used by the simulator
    model_meta: dict = field(
        default_factory=lambda: {"experts": 4, "word_pieces": 8000, "params_m": 650}
    )


@dataclass
class SpeakerConfig:
    enroll_window_s: float = 3.0
    sliding_window_s: float = 1.5
    min_speech_ratio: float = 0.20
    similarity_threshold: float = 0.5
    embedding_dim: int = 8


@dataclass
class DialogConfig:
    state_ms: float = 560.0
    token_ms: float = 16.0
    cache_capacity: int = 4096
    reset_after_turns: int = 4
    state_scaffold_tokens: int = 8


@dataclass
class TtsConfig:
    buffer_words: int = 5
    frames_per_word: int = 12
    frame_inference_ms: float = 20.0
    prefix_reencode_ms: float = 10.0
    frame_rate_hz: int = 40


@dataclass
class VocoderConfig:
    chunk_inference_ms: float = 13.0
    upsample_factor: int = 4
    output_rate: int = 24000


@dataclass
class PlayerConfig:
    priming_ms: float = 25.0
    per_chunk_ms: float = 0.2
    chunk_play_ms: float = 25.0


@dataclass
class BusConfig:
    data_capacity: int = 256


@dataclass
class JitterConfig:
    enabled: bool = False
    fraction: float = 0.10


@dataclass
class PipelineConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    asr: AsrConfig = field(default_factory=AsrConfig)
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig)
    dialog: DialogConfig = field(default_factory=DialogConfig)
    tts: TtsConfig = field(default_factory=TtsConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    player: PlayerConfig = field(default_factory=PlayerConfig)
    bus: BusConfig = field(default_factory=BusConfig)
    jitter: JitterConfig = field(default_factory=JitterConfig)

    def zero_inference(self) -> "PipelineConfig":
        """Copy with every inference latency set to zero (wait policies kept)."""
        cfg = copy_config(self)
        cfg.dsp.mel_inference_ms = 0.0
        cfg.asr.inference_ms = 0.0
        cfg.dialog.state_ms = 0.0
        cfg.dialog.token_ms = 0.0
        cfg.tts.frame_inference_ms = 0.0
        cfg.tts.prefix_reencode_ms = 0.0
        cfg.vocoder.chunk_inference_ms = 0.0
        cfg.player.per_chunk_ms = 0.0
        return cfg


def copy_config(cfg: PipelineConfig) -> PipelineConfig:
    return _from_dict(PipelineConfig, _to_dict(cfg))


def _to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_dict(v) for k, v in obj.items()}
    return obj


def _from_dict(cls: type, data: dict) -> Any:
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in field_map:
            raise ConfigError(f"unknown config key {cls.__name__}.{key}")
        f = field_map[key]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type.endswith("Config")
        ):
            sub_cls = _SECTION_TYPES.get(key)
            if sub_cls is None:
                raise ConfigError(f"unknown config section {key}")
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be a mapping")
            kwargs[key] = _from_dict(sub_cls, value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "dsp": DspConfig,
    "asr": AsrConfig,
    "speaker": SpeakerConfig,
    "dialog": DialogConfig,
    "tts": TtsConfig,
    "vocoder": VocoderConfig,
    "player": PlayerConfig,
    "bus": BusConfig,
    "jitter": JitterConfig,
}


def load_config(path: str | Path | None) -> PipelineConfig:
    """Load a YAML config file; omitted keys keep their defaults."""
    if path is None:
        return PipelineConfig()
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        return PipelineConfig()
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = PipelineConfig()
    for section, values in raw.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        sub = getattr(cfg, section)
        for key, value in values.items():
            if not hasattr(sub, key):
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(sub, key, value)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(_to_dict(cfg), sort_keys=True)
