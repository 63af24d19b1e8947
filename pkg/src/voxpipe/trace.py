"""Conversation scenario traces.

A trace stands in for live speech and model outputs: user word timings with
speaker labels drive the scripted recognizer, per-turn agent scripts drive
the dialog simulator, and interruption entries inject barge-in speech at
absolute times. The format is versioned YAML.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .messages import StateBlock

TRACE_VERSION = 1
SENTENCE_FINAL = (".", "!", "?")


class ParseError(ValueError):
    pass


class InvalidTimeline(ValueError):
    pass


@dataclass(frozen=True)
class WordSpan:
    text: str
    start_ms: float
    end_ms: float
    speaker: str = "user"

    def overlaps(self, a_ms: float, b_ms: float) -> bool:
        return self.start_ms < b_ms and self.end_ms > a_ms


@dataclass
class AgentScript:
    """Scripted response for one agent turn."""

    states: StateBlock = field(default_factory=StateBlock)
    ngrams: list[tuple[str, ...]] = field(default_factory=list)
    frames_per_ngram: dict[int, int] = field(default_factory=dict)

    @property
    def word_count(self) -> int:
        return sum(len(g) for g in self.ngrams)

    def ngram_sentence_final(self, index: int) -> bool:
        return self.ngrams[index][-1].endswith(SENTENCE_FINAL)


@dataclass
class ScenarioTrace:
    seed: int = 0
    sample_rate: int = 16000
    horizon_ms: float = 0.0
    system_prompt: str = "You are a helpful voice assistant."
    utterances: list[list[WordSpan]] = field(default_factory=list)
    agent_scripts: list[AgentScript] = field(default_factory=list)
    interruption_words: list[WordSpan] = field(default_factory=list)

    def all_words(self) -> list[WordSpan]:
        """Session-wide user word timeline, time ordered."""
        words = [w for utt in self.utterances for w in utt]
        words.extend(self.interruption_words)
        return sorted(words, key=lambda w: w.start_ms)

    def speech_spans_ms(self) -> list[tuple[float, float]]:
        return [(w.start_ms, w.end_ms) for w in self.all_words()]

    def script_for_turn(self, turn_id: int) -> AgentScript:
        if 0 <= turn_id < len(self.agent_scripts):
            return self.agent_scripts[turn_id]
        return AgentScript()

    def end_ms(self) -> float:
        words = self.all_words()
        last_word = max((w.end_ms for w in words), default=0.0)
        return max(self.horizon_ms, last_word)


def segment_response(text: str, ngram_words: int = 1) -> list[tuple[str, ...]]:
    """Default n-gram segmentation of a response string."""
    words = text.split()
    if ngram_words <= 1:
        return [(w,) for w in words]
    return [tuple(words[i:i + ngram_words]) for i in range(0, len(words), ngram_words)]


def _validate_utterance(words: list[WordSpan]) -> None:
    for w in words:
        if w.end_ms <= w.start_ms:
            raise InvalidTimeline(f"word {w.text!r} has non-positive span")
    for a, b in zip(words, words[1:]):
        if b.start_ms < a.end_ms:
            raise InvalidTimeline(
                f"word spans overlap: {a.text!r} ends {a.end_ms}, "
                f"{b.text!r} starts {b.start_ms}"
            )


def validate_trace(trace: ScenarioTrace) -> ScenarioTrace:
    for utt in trace.utterances:
        _validate_utterance(utt)
    _validate_utterance(sorted(trace.all_words(), key=lambda w: w.start_ms))
    for script in trace.agent_scripts:
        for g in script.ngrams:
            if not 1 <= len(g) <= 4:
                raise ParseError(f"ngram {g!r} must hold 1-4 words")
    return trace


def _parse_words(raw, default_speaker: str) -> list[WordSpan]:
    words = []
    for item in raw:
        try:
            words.append(
                WordSpan(
                    text=str(item["text"]),
                    start_ms=float(item["start_ms"]),
                    end_ms=float(item["end_ms"]),
                    speaker=str(item.get("speaker", default_speaker)),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad word entry {item!r}: {e}") from e
    return words


def _parse_script(raw) -> AgentScript:
    states = StateBlock(
        user_motivation=str(raw.get("states", {}).get("user_motivation", "")),
        user_emotion=str(raw.get("states", {}).get("user_emotion", "")),
        agent_motivation=str(raw.get("states", {}).get("agent_motivation", "")),
        agent_emotion=str(raw.get("states", {}).get("agent_emotion", "")),
    )
    if "ngrams" in raw:
        ngrams = [tuple(str(w) for w in g) for g in raw["ngrams"]]
    else:
        ngrams = segment_response(str(raw.get("response", "")))
    frames = {int(k): int(v) for k, v in raw.get("frames_per_ngram", {}).items()}
    return AgentScript(states=states, ngrams=ngrams, frames_per_ngram=frames)


def trace_from_dict(raw: dict) -> ScenarioTrace:
    if not isinstance(raw, dict):
        raise ParseError("trace root must be a mapping")
    version = raw.get("version")
    if version != TRACE_VERSION:
        raise ParseError(f"unsupported trace version {version!r}")
    trace = ScenarioTrace(
        seed=int(raw.get("seed", 0)),
        sample_rate=int(raw.get("sample_rate", 16000)),
        horizon_ms=float(raw.get("horizon_ms", 0.0)),
        system_prompt=str(raw.get("system_prompt", ScenarioTrace.system_prompt)),
    )
    for turn in raw.get("turns", []):
        user = turn.get("user", {})
        speaker = str(user.get("speaker", "user"))
        trace.utterances.append(_parse_words(user.get("words", []), speaker))
        trace.agent_scripts.append(_parse_script(turn.get("agent", {}) or {}))
    for entry in raw.get("interruptions", []):
        at_ms = float(entry["at_ms"])
        speaker = str(entry.get("speaker", "user"))
        word_ms = float(entry.get("word_ms", 200.0))
        gap_ms = float(entry.get("gap_ms", 50.0))
        words = entry.get("words", [])
        if words and isinstance(words[0], dict):
            trace.interruption_words.extend(_parse_words(words, speaker))
        else:
            t = at_ms
            for w in words:
                trace.interruption_words.append(
                    WordSpan(text=str(w), start_ms=t, end_ms=t + word_ms,
                             speaker=speaker)
                )
                t += word_ms + gap_ms
    return validate_trace(trace)


def load_trace(path: str | Path) -> ScenarioTrace:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ParseError(f"invalid YAML in {p}: {e}") from e
    return trace_from_dict(raw)


def trace_to_dict(trace: ScenarioTrace) -> dict:
    turns = []
    for i, utt in enumerate(trace.utterances):
        script = trace.script_for_turn(i)
        turns.append(
            {
                "user": {
                    "speaker": utt[0].speaker if utt else "user",
                    "words": [
                        {"text": w.text, "start_ms": w.start_ms, "end_ms": w.end_ms}
                        for w in utt
                    ],
                },
                "agent": {
                    "states": {
                        "user_motivation": script.states.user_motivation,
                        "user_emotion": script.states.user_emotion,
                        "agent_motivation": script.states.agent_motivation,
                        "agent_emotion": script.states.agent_emotion,
                    },
                    "ngrams": [list(g) for g in script.ngrams],
                    "frames_per_ngram": dict(script.frames_per_ngram),
                },
            }
        )
    return {
        "version": TRACE_VERSION,
        "seed": trace.seed,
        "sample_rate": trace.sample_rate,
        "horizon_ms": trace.horizon_ms,
        "system_prompt": trace.system_prompt,
        "turns": turns,
        "interruptions": [
            {
                "words": [
                    {"text": w.text, "start_ms": w.start_ms, "end_ms": w.end_ms}
                ],
                "at_ms": w.start_ms,
                "speaker": w.speaker,
            }
            for w in trace.interruption_words
        ],
    }


def dump_trace(trace: ScenarioTrace, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(trace_to_dict(trace), sort_keys=False))


def _words(speaker: str, spans: list[tuple[str, float, float]]) -> list[WordSpan]:
    return [WordSpan(text=t, start_ms=a, end_ms=b, speaker=speaker)
            for t, a, b in spans]


def reference_trace() -> ScenarioTrace:
    """Canonical 2-turn conversation with a scripted barge-in on turn two.

    Word placement is chosen so the first agent turn's time-to-first-audio
    lands near the 920 ms budget under default latencies, and the barge-in
    lands while the eighth response word (alignment index 7) is playing.
    """
    trace = ScenarioTrace(seed=42, horizon_ms=11_000.0)
    trace.utterances.append(
        _words("alice", [
            ("hello", 400, 650),
            ("there", 680, 900),
            ("how", 950, 1100),
            ("are", 1130, 1250),
            ("you", 1280, 1412),
        ])
    )
    trace.agent_scripts.append(
        AgentScript(
            states=StateBlock("greet", "friendly", "welcome", "warm"),
            ngrams=segment_response("It is lovely to hear from you."),
        )
    )
    trace.utterances.append(
        _words("alice", [
            ("can", 4800, 4950),
            ("you", 4980, 5100),
            ("tell", 5130, 5300),
            ("me", 5330, 5450),
            ("a", 5480, 5560),
            ("joke", 5590, 5900),
        ])
    )
    trace.agent_scripts.append(
        AgentScript(
            states=StateBlock("entertain", "curious", "amuse", "playful"),
            ngrams=segment_response(
                "Sure here is one why do programmers prefer dark mode. "
                "Because light attracts bugs."
            ),
        )
    )
    # barge-in while ngram 7 of the joke is being vocalized
    trace.interruption_words.append(
        WordSpan(text="wait", start_ms=8750, end_ms=8950, speaker="alice")
    )
    trace.agent_scripts.append(
        AgentScript(
            states=StateBlock("interject", "urgent", "yield", "attentive"),
            ngrams=segment_response("Of course."),
        )
    )
    trace.utterances.append([])  # turn 3 user speech comes from the interruption
    return validate_trace(trace)
