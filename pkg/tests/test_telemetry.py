"""Ledger tests: table rows, cumulative semantics, turn metrics, closed form."""

import pytest

from voxpipe.config import PipelineConfig
from voxpipe.harness import run_scenario
from voxpipe.telemetry import (
    NoAudioForTurn,
    NotRunning,
    TelemetryHub,
    closed_form_cumulative,
    collect_turn_metrics,
    time_to_first_audio,
)
from voxpipe.trace import reference_trace


@pytest.fixture(scope="module")
def default_run():
    return run_scenario(reference_trace())


def rows_by_stage(result):
    return {r["stage"]: r for r in result.report["rows"]}


class TestHub:
    def test_record_before_run_errors(self):
        hub = TelemetryHub()
        with pytest.raises(NotRunning):
            hub.record("mel", "inference", 1.0)

    def test_mean_and_percentiles(self):
        hub = TelemetryHub()
        hub.run_active = True
        for i in range(100):
            hub.record("mel", "inference", float(i))
        assert hub.mean("mel", "inference") == pytest.approx(49.5)
        assert hub.percentile("mel", "inference", 50) == pytest.approx(50.0)
        assert hub.percentile("mel", "inference", 100) == 99.0

    def test_rejects_unknown_kind(self):
        hub = TelemetryHub()
        hub.run_active = True
        with pytest.raises(ValueError):
            hub.record("mel", "warp", 1.0)


class TestLedgerRows:
    def test_rows_ordered_capture_to_player(self, default_run):
        stages = [r["stage"] for r in default_run.report["rows"]]
        assert stages == ["mic", "mel", "asr", "llm-state", "llm", "tts",
                          "vocoder", "player"]

    def test_asr_wait_shows_160ms(self, default_run):
        rows = rows_by_stage(default_run)
        assert rows["asr"]["wait_ms"] == 160.0
        assert rows["asr"]["wait_label"] == "16 frames"

    def test_asr_cumulative_within_published_range(self, default_run):
        rows = rows_by_stage(default_run)
        assert 165.0 <= rows["asr"]["cumulative_ms"] <= 175.0

    def test_mel_row_matches_budget(self, default_run):
        rows = rows_by_stage(default_run)
        assert rows["mel"]["cumulative_ms"] == pytest.approx(11.0, abs=0.01)

    def test_cumulative_monotone_down_the_pipeline(self, default_run):
        values = [r["cumulative_ms"] for r in default_run.report["rows"]]
        assert all(a <= b + 1e-9 for a, b in zip(values, values[1:]))

    def test_inference_columns_echo_config(self, default_run):
        rows = rows_by_stage(default_run)
        assert rows["mel"]["inference_ms"] == 1.0
        assert rows["asr"]["inference_ms"] == 13.0
        assert rows["llm"]["inference_ms"] == 16.0
        assert rows["tts"]["inference_ms"] == 20.0
        assert rows["vocoder"]["inference_ms"] == 13.0
        assert rows["player"]["inference_ms"] == 0.2


class TestClosedForm:
    def test_zero_inference_cumulative_equals_wait_sum(self):
        cfg = PipelineConfig().zero_inference()
        cfg.asr.pause_ms = 0.0
        result = run_scenario(reference_trace(), config=cfg)
        expected = closed_form_cumulative(cfg)
        rows = rows_by_stage(result)
        for stage in ("mel", "asr", "llm-state", "llm", "tts", "vocoder",
                      "player"):
            assert rows[stage]["cumulative_ms"] == pytest.approx(
                expected[stage], abs=0.01), stage

    def test_default_config_post_boundary_rows_match_closed_form(self, default_run):
        expected = closed_form_cumulative(PipelineConfig())
        rows = rows_by_stage(default_run)
        for stage in ("llm-state", "llm", "tts", "vocoder", "player"):
            assert rows[stage]["cumulative_ms"] == pytest.approx(
                expected[stage], abs=0.01), stage

    def test_closed_form_default_values(self):
        cf = closed_form_cumulative(PipelineConfig())
        assert cf["mel"] == 11.0
        assert cf["asr"] == 173.0
        assert cf["llm-state"] == 560.0
        assert cf["llm"] == 576.0
        assert cf["player"] == pytest.approx(698.2)


class TestTurnMetrics:
    def test_time_to_first_audio_both_references(self, default_run):
        trace = reference_trace()
        from_word = time_to_first_audio(default_run.log, trace, 0,
                                        "last-user-word")
        from_tb = time_to_first_audio(default_run.log, trace, 0,
                                      "turn-boundary")
        assert from_word > from_tb  # boundary happens after the last word

    def test_no_audio_for_unknown_turn(self, default_run):
        with pytest.raises(NoAudioForTurn):
            time_to_first_audio(default_run.log, reference_trace(), 99)

    def test_unknown_reference_rejected(self, default_run):
        with pytest.raises(ValueError):
            time_to_first_audio(default_run.log, reference_trace(), 0, "whenever")

    def test_interrupted_turn_records_feedback(self, default_run):
        metrics = collect_turn_metrics(default_run.log, reference_trace())
        assert metrics[1].halted
        assert metrics[1].feedback_ngram == 7
        assert metrics[1].interruption_to_silence_ms is not None
        assert metrics[1].interruption_to_silence_ms <= 25.0 + 0.01

    def test_report_text_contains_turn_lines(self, default_run):
        assert "turn 0:" in default_run.report_text
        assert "halted; feedback ngram 7" in default_run.report_text
