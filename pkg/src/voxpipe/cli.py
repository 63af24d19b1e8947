"""Command-line entry points for running scenarios and serving the console."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import PipelineConfig, dump_config, load_config
from .harness import STAGE_SETS, diff_logs, run_scenario
from .runtime import EventLog, LogEntry
from .telemetry import report_to_json
from .trace import dump_trace, load_trace, reference_trace


@click.group()
def main() -> None:
    """Streaming voice-agent pipeline simulator."""


@main.command()
@click.option("--trace", "trace_path", type=click.Path(exists=True),
              help="Scenario YAML; the built-in reference scenario if omitted.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Config YAML; published-table defaults if omitted.")
@click.option("--mode", type=click.Choice(["sim", "realtime"]), default="sim",
              show_default=True)
@click.option("--stages", type=click.Choice(sorted(STAGE_SETS)), default="full",
              show_default=True, help="Pipeline subset to run.")
@click.option("--until-ms", type=float, default=None,
              help="Session horizon; derived from the trace if omitted.")
@click.option("--report", "report_path", type=click.Path(),
              help="Write the latency report here.")
@click.option("--report-json", "report_json_path", type=click.Path(),
              help="Write the machine-readable report here.")
@click.option("--log", "log_path", type=click.Path(),
              help="Write the serialized event log (JSON lines) here.")
@click.option("--pcm-dir", type=click.Path(),
              help="Write each agent turn's played audio as WAV files here.")
@click.option("--seed", type=int, default=None,
              help="Override the trace seed.")
def run(trace_path, config_path, mode, stages, until_ms, report_path,
        report_json_path, log_path, pcm_dir, seed) -> None:
    """Run a scenario and print the latency report."""
    trace = load_trace(trace_path) if trace_path else reference_trace()
    if seed is not None:
        trace.seed = seed
    config = load_config(config_path)
    result = run_scenario(trace, config=config, mode=mode, stages=stages,
                          until_ms=until_ms, pcm_dir=pcm_dir,
                          report_path=report_path)
    click.echo(result.report_text)
    if report_json_path:
        Path(report_json_path).write_text(report_to_json(result.report))
    if log_path:
        Path(log_path).write_text(result.log.serialize())
    click.echo(f"{len(result.log)} events; stages: {stages}; mode: {mode}")


@main.command()
@click.argument("log_a", type=click.Path(exists=True))
@click.argument("log_b", type=click.Path(exists=True))
def diff(log_a, log_b) -> None:
    """Structurally compare two serialized event logs."""
    a = _read_log(log_a)
    b = _read_log(log_b)
    diffs = diff_logs(a, b)
    if not diffs:
        click.echo("logs identical")
        return
    for line in diffs[:50]:
        click.echo(line)
    if len(diffs) > 50:
        click.echo(f"... {len(diffs) - 50} more differences")
    sys.exit(1)


def _read_log(path: str) -> EventLog:
    log = EventLog()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        log.append(LogEntry(
            time_ns=raw["t"], stage=raw["stage"], kind=raw["kind"],
            turn_id=raw["turn"], seq=raw["seq"],
            info=tuple(sorted(raw.get("info", {}).items())),
        ))
    return log


@main.command("show-trace")
@click.option("--out", type=click.Path(), help="Write instead of printing.")
def show_trace(out) -> None:
    """Emit the built-in reference scenario as YAML."""
    if out:
        dump_trace(reference_trace(), out)
        click.echo(f"wrote {out}")
    else:
        import yaml

        from .trace import trace_to_dict

        click.echo(yaml.safe_dump(trace_to_dict(reference_trace()),
                                  sort_keys=False))


@main.command("show-config")
def show_config() -> None:
    """Emit the default configuration as YAML."""
    click.echo(dump_config(PipelineConfig()))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
def serve(host, port, config_path) -> None:
    """Serve the interactive browser console (WebSocket gateway)."""
    import uvicorn

    from .gateway import create_app

    config = load_config(config_path)
    app = create_app(config)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
