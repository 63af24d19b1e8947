"""State-then-response dialog generator with a rotating key-value cache.

The language model is simulated: the scenario scripts the motivation/emotion
states and the response n-grams, while this stage reproduces the real timing
and cache behavior. The conversation prompt is pre-encoded before the
session starts and pinned (never rotated out). User tokens are encoded the
moment they arrive. State scaffolding is charged as one batched pre-encode.
Response tokens stream at a fixed per-token latency and every token lands
in the cache tagged with its n-gram index, so playback feedback after an
interruption can truncate exactly the entries that were never vocalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .bus import TOPIC_CONTROL, TOPIC_LLM, TOPIC_TELEMETRY, TOPIC_TOKENS
from .config import DialogConfig
from .messages import (
    ControlSignal,
    SignalKind,
    StateBlock,
    TokenEvent,
    WordChunk,
    ms_to_ns,
)
from .runtime import Stage, StageContext, StageSpec, Step
from .trace import SENTENCE_FINAL, AgentScript, ScenarioTrace


class AlreadyStarted(RuntimeError):
    pass


class WrongPhase(RuntimeError):
    pass


class UnknownTurn(KeyError):
    pass


class FeedbackWithoutHalt(RuntimeError):
    pass


@dataclass(frozen=True)
class CacheEntry:
    kind: str  # prompt | user_token | state | response_token
    turn_id: int
    ngram_index: Optional[int] = None  # response tokens only


@dataclass
class TurnHistory:
    """What the conversation remembers about one exchange."""

    user_tokens: list[str] = field(default_factory=list)
    states: Optional[StateBlock] = None
    response_ngrams: list[tuple[str, ...]] = field(default_factory=list)


class DialogCache:
    """Bounded entry list: oldest non-pinned entries rotate out past capacity."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: list[CacheEntry] = []
        self.pinned = 0
        self.turns_since_reset = 0

    def pin_prompt(self, n_tokens: int) -> int:
        if self.entries:
            raise AlreadyStarted("prompt must be encoded before the conversation")
        self.entries = [CacheEntry("prompt", -1) for _ in range(n_tokens)]
        self.pinned = n_tokens
        return n_tokens

    def append(self, entry: CacheEntry) -> None:
        self.entries.append(entry)
        self._rotate()

    def _rotate(self) -> None:
        while len(self.entries) > self.capacity and len(self.entries) > self.pinned:
            del self.entries[self.pinned]

    def truncate_response(self, turn_id: int, ngram_index: int) -> int:
        """Drop response tokens of the turn with ngram index above the cut."""
        before = len(self.entries)
        self.entries = [
            e for e in self.entries
            if not (e.kind == "response_token" and e.turn_id == turn_id
                    and e.ngram_index is not None and e.ngram_index > ngram_index)
        ]
        return before - len(self.entries)

    def full_reset(self) -> None:
        self.entries = self.entries[:self.pinned]
        self.turns_since_reset = 0

    def snapshot(self) -> list[tuple[str, int, Optional[int]]]:
        return [(e.kind, e.turn_id, e.ngram_index) for e in self.entries]


class DialogStage(Stage):
    name = "llm"

    def __init__(self, trace: ScenarioTrace, config: DialogConfig):
        self.trace = trace
        self.cfg = config
        self.cache = DialogCache(config.cache_capacity)
        self.history: dict[int, TurnHistory] = {}
        self.started = False
        self.active_turn: Optional[int] = None  # turn currently generating
        self.halted: set[int] = set()
        self.feedback_applied: set[int] = set()
        self._closed_turns: set[int] = set()
        self._phase: str = "user"  # "user" while listening, "agent" while generating
        self._pending_tokens: list[TokenEvent] = []
        self._state_pending: Optional[int] = None
        self._stream: list[tuple[int, tuple[str, ...]]] = []  # (ngram_index, words)
        self._script: Optional[AgentScript] = None

    def spec(self) -> StageSpec:
        return StageSpec(
            name=self.name,
            input_topics=(TOPIC_TOKENS, TOPIC_CONTROL),
            output_topics=(TOPIC_LLM, TOPIC_TELEMETRY),
            wait_policy="end-of-turn pause",
            wait_ms=0.0,
            inference_ms=self.cfg.token_ms,
        )

    # -- contract-level operations --

    def preencode_prompt(self, prompt: str) -> int:
        """Pin the conversation prompt; charged before the session clock starts."""
        if self.started:
            raise AlreadyStarted("conversation already started")
        return self.cache.pin_prompt(len(prompt.split()))

    def ingest_user_token(self, tok: TokenEvent) -> int:
        """Encode one recognized token immediately; raises mid-generation."""
        if self._phase == "agent" and tok.turn_id == self.active_turn:
            raise WrongPhase(f"token for turn {tok.turn_id} during its generation")
        self.cache.append(CacheEntry("user_token", tok.turn_id))
        self.history.setdefault(tok.turn_id, TurnHistory()).user_tokens.append(tok.text)
        return 1

    def generate_states(self, turn_id: int) -> StateBlock:
        script = self.trace.script_for_turn(turn_id)
        states = script.states
        scaffold = self.cfg.state_scaffold_tokens
        for _ in range(scaffold):
            self.cache.append(CacheEntry("state", turn_id))
        for _ in range(4):
            self.cache.append(CacheEntry("state", turn_id))
        self.history.setdefault(turn_id, TurnHistory()).states = states
        return states

    def apply_feedback(self, turn_id: int, ngram_index: int) -> int:
        if turn_id not in self.history:
            raise UnknownTurn(turn_id)
        if turn_id not in self.halted:
            raise FeedbackWithoutHalt(f"no halt on record for turn {turn_id}")
        removed = self.cache.truncate_response(turn_id, ngram_index)
        hist = self.history[turn_id]
        hist.response_ngrams = hist.response_ngrams[:ngram_index + 1]
        self.feedback_applied.add(turn_id)
        return removed

    def maybe_full_reset(self) -> bool:
        self.cache.turns_since_reset += 1
        if self.cache.turns_since_reset >= self.cfg.reset_after_turns:
            self.cache.full_reset()
            return True
        return False

    # -- stage wiring --

    def on_start(self, ctx: StageContext) -> None:
        n = self.preencode_prompt(self.trace.system_prompt)
        self.started = True
        ctx.log("prompt_preencoded", -1, tokens=n)

    def on_data(self, env, ctx: StageContext) -> None:
        tok = env.payload
        if not isinstance(tok, TokenEvent):
            return
        try:
            self.ingest_user_token(tok)
            ctx.log("user_token_encoded", tok.turn_id, text=tok.text)
        except WrongPhase:
            # pre-halt race: requeue until the floor flips back to the user
            self._pending_tokens.append(tok)
            ctx.log("user_token_requeued", tok.turn_id, text=tok.text)

    def _drain_pending(self, ctx: StageContext) -> None:
        pending, self._pending_tokens = self._pending_tokens, []
        for tok in pending:
            self.on_data(_FakeEnv(tok), ctx)

    def on_control(self, sig: ControlSignal, ctx: StageContext) -> None:
        if sig.kind is SignalKind.TURN_BOUNDARY and sig.origin == "asr":
            self._begin_turn(sig.turn_id, ctx)
        elif sig.kind is SignalKind.HALT:
            self._halt(sig.turn_id, ctx)
        elif sig.kind is SignalKind.PLAYBACK_FEEDBACK:
            removed = self.apply_feedback(sig.turn_id, sig.ngram_index)
            ctx.log("feedback_applied", sig.turn_id,
                    ngram=sig.ngram_index, removed=removed)
            self._close_turn(sig.turn_id, ctx)

    def _begin_turn(self, turn_id: int, ctx: StageContext) -> None:
        self._phase = "agent"
        self.active_turn = turn_id
        self.history.setdefault(turn_id, TurnHistory())
        self._script = self.trace.script_for_turn(turn_id)
        self._state_pending = turn_id
        self._stream = list(enumerate(self._script.ngrams))

    def _halt(self, turn_id: int, ctx: StageContext) -> None:
        self.halted.add(turn_id)
        if self.active_turn == turn_id:
            dropped = len(self._stream) + (1 if self._state_pending is not None else 0)
            self._stream = []
            self._state_pending = None
            self._phase = "user"
            ctx.log("generation_halted", turn_id, dropped=dropped)
            self._drain_pending(ctx)

    def _close_turn(self, turn_id: int, ctx: StageContext) -> None:
        """Turn finished (streamed fully or truncated): count it, maybe reset."""
        if turn_id in self._closed_turns:
            return  # a halted turn closes at most once
        self._closed_turns.add(turn_id)
        if self.maybe_full_reset():
            ctx.publish(
                TOPIC_CONTROL,
                ControlSignal(kind=SignalKind.CACHE_RESET, origin=self.name,
                              turn_id=turn_id, scope=frozenset({self.name})),
                turn_id=-1,
            )
            ctx.log("dialog_cache_reset", turn_id,
                    kept_pinned=self.cache.pinned)

    def poll(self, ctx: StageContext) -> Optional[Step]:
        if self._state_pending is not None:
            turn = self._state_pending

            def commit_states(c: StageContext, turn=turn) -> None:
                self._state_pending = None
                states = self.generate_states(turn)
                c.publish(TOPIC_TELEMETRY, states, turn_id=turn)
                c.log("states_generated", turn)

            return Step(charge_ns=ms_to_ns(self.cfg.state_ms),
                        commit=commit_states, turn_id=turn, label="llm_states")
        if self._stream:
            ngram_index, words = self._stream[0]
            turn = self.active_turn
            charge = ms_to_ns(self.cfg.token_ms) * len(words)

            def commit_chunk(c: StageContext, turn=turn,
                             ngram_index=ngram_index, words=words) -> None:
                self._stream.pop(0)
                for _ in words:
                    self.cache.append(
                        CacheEntry("response_token", turn, ngram_index)
                    )
                hist = self.history.setdefault(turn, TurnHistory())
                hist.response_ngrams.append(words)
                script = self._script
                last = not self._stream
                c.publish(
                    TOPIC_LLM,
                    WordChunk(
                        words=words,
                        ngram_index=ngram_index,
                        turn_id=turn,
                        sentence_final=words[-1].endswith(SENTENCE_FINAL),
                        end_of_turn=last,
                        frames_per_word=script.frames_per_ngram.get(ngram_index)
                        if script else None,
                    ),
                    turn_id=turn,
                )
                if last:
                    self._finish_stream(turn, c)

            return Step(charge_ns=charge, commit=commit_chunk, turn_id=turn,
                        label="llm_token")
        if (self._phase == "agent" and self._state_pending is None
                and not self._stream and self.active_turn is not None
                and self.active_turn not in self.halted
                and self._script is not None and not self._script.ngrams):
            # empty scripted response: the turn ends immediately
            turn = self.active_turn

            def commit_empty(c: StageContext, turn=turn) -> None:
                self._finish_stream(turn, c)

            return Step(charge_ns=0, commit=commit_empty, turn_id=turn,
                        label="llm_empty")
        return None

    def _finish_stream(self, turn_id: int, ctx: StageContext) -> None:
        n = len(self.history.get(turn_id, TurnHistory()).response_ngrams)
        self._phase = "user"
        self._script = None
        ctx.telemetry("response_complete", value=n, turn_id=turn_id, ngrams=n)
        self._drain_pending(ctx)
        self._close_turn(turn_id, ctx)


class _FakeEnv:
    """Minimal envelope shim for requeued tokens."""

    def __init__(self, payload):
        self.payload = payload
