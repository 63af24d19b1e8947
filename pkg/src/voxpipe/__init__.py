"""Streaming cascaded voice-agent pipeline runtime with simulated model stages."""

from .bus import ALL_TOPICS, Bus
from .config import PipelineConfig, load_config
from .harness import RunResult, build_pipeline, diff_logs, run_scenario
from .runtime import EventLog, Runtime, Stage, StageSpec
from .telemetry import render_report, time_to_first_audio
from .trace import ScenarioTrace, load_trace, reference_trace

__version__ = "0.1.0"

__all__ = [
    "ALL_TOPICS",
    "Bus",
    "EventLog",
    "PipelineConfig",
    "RunResult",
    "Runtime",
    "ScenarioTrace",
    "Stage",
    "StageSpec",
    "build_pipeline",
    "diff_logs",
    "load_config",
    "load_trace",
    "reference_trace",
    "render_report",
    "run_scenario",
    "time_to_first_audio",
]
