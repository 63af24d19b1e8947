"""Dialog core tests: cache bookkeeping, states, streaming, feedback truncation."""

import pytest

from conftest import FakeCtx
from voxpipe.config import DialogConfig
from voxpipe.dialog import (
    AlreadyStarted,
    CacheEntry,
    DialogCache,
    DialogStage,
    FeedbackWithoutHalt,
    TurnHistory,
    UnknownTurn,
    WrongPhase,
)
from voxpipe.messages import StateBlock, TokenEvent, WordChunk
from voxpipe.trace import AgentScript, ScenarioTrace, segment_response


def make_stage(responses=(), scaffold=8, capacity=4096, n_reset=4,
               prompt="one two three four five"):
    trace = ScenarioTrace(system_prompt=prompt)
    for text in responses:
        trace.utterances.append([])
        trace.agent_scripts.append(
            AgentScript(states=StateBlock("m", "e", "am", "ae"),
                        ngrams=segment_response(text))
        )
    cfg = DialogConfig(state_scaffold_tokens=scaffold, cache_capacity=capacity,
                       reset_after_turns=n_reset)
    return DialogStage(trace, cfg)


def replay_expected_entries(prompt_tokens, turns, scaffold=8):
    """Independent oracle: re-encode a conversation history from scratch.

    turns: ordered list of (turn_id, user_tokens, has_states, response_ngrams).
    """
    entries = [("prompt", -1, None)] * prompt_tokens
    for turn_id, user_tokens, has_states, ngrams in turns:
        entries.extend(("user_token", turn_id, None) for _ in user_tokens)
        if has_states:
            entries.extend(("state", turn_id, None) for _ in range(scaffold + 4))
        for i, words in enumerate(ngrams):
            entries.extend(("response_token", turn_id, i) for _ in words)
    return entries


def tok(text, turn):
    return TokenEvent(text=text, frame_index=0, emitted_at=0, is_blank=False,
                      turn_id=turn)


class TestPromptPreencode:
    def test_hundred_token_prompt_pins_hundred_entries(self):
        stage = make_stage(prompt=" ".join(["t"] * 100))
        assert stage.preencode_prompt(stage.trace.system_prompt) == 100
        assert stage.cache.pinned == 100
        assert all(e.kind == "prompt" for e in stage.cache.entries)

    def test_second_preencode_rejected(self):
        stage = make_stage()
        ctx = FakeCtx()
        stage.on_start(ctx)
        with pytest.raises(AlreadyStarted):
            stage.preencode_prompt("again")


class TestUserTokens:
    def test_token_appends_entry(self):
        stage = make_stage()
        before = len(stage.cache.entries)
        stage.ingest_user_token(tok("hello", 0))
        assert len(stage.cache.entries) == before + 1
        assert stage.history[0].user_tokens == ["hello"]

    def test_wrong_phase_during_own_turn_generation(self):
        stage = make_stage(responses=("Hi there you all five.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        stage._begin_turn(0, ctx)
        with pytest.raises(WrongPhase):
            stage.ingest_user_token(tok("early", 0))

    def test_requeued_token_ingested_after_halt(self):
        stage = make_stage(responses=("Hello world today.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        stage._begin_turn(0, ctx)
        # race: a token tagged with the generating turn arrives pre-halt
        stage.on_data(_Env(tok("racing", 0)), ctx)
        assert stage._pending_tokens
        stage._halt(0, ctx)
        assert not stage._pending_tokens
        assert "racing" in stage.history[0].user_tokens

    def test_rotation_evicts_oldest_non_pinned(self):
        stage = make_stage(capacity=7, prompt="a b c d e")
        ctx = FakeCtx()
        stage.on_start(ctx)  # 5 pinned
        for i in range(4):
            stage.ingest_user_token(tok(f"w{i}", 0))
        snap = stage.cache.snapshot()
        assert len(snap) == 7
        assert snap[:5] == [("prompt", -1, None)] * 5  # pinned survive
        assert snap[5:] == [("user_token", 0, None)] * 2  # oldest two evicted


class TestStatesAndStreaming:
    def drive_turn(self, stage, ctx, turn):
        stage._begin_turn(turn, ctx)
        while (step := stage.poll(ctx)) is not None:
            ctx.run_step(step)

    def test_states_precede_response_chunks(self):
        stage = make_stage(responses=("Good morning to you friend.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        stage.ingest_user_token(tok("hi", 0))
        self.drive_turn(stage, ctx, 0)
        kinds = [type(p).__name__ for (_, _, p, _) in ctx.published]
        assert kinds[0] == "StateBlock"
        assert all(k == "WordChunk" for k in kinds[1:])

    def test_state_phase_duration(self):
        stage = make_stage(responses=("Hi.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        stage._begin_turn(0, ctx)
        step = stage.poll(ctx)
        assert step.charge_ns == 560 * 10**6  # default state latency

    def test_token_cadence_16ms_per_word(self):
        stage = make_stage(responses=("one two three four five six.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.drive_turn(stage, ctx, 0)
        chunks = [(t, p) for (t, _, p, _) in ctx.published
                  if isinstance(p, WordChunk)]
        gaps = [b[0] - a[0] for a, b in zip(chunks, chunks[1:])]
        assert all(g == 16 * 10**6 for g in gaps)

    def test_empty_response_completes_immediately(self):
        stage = make_stage(responses=("",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        stage.ingest_user_token(tok("hi", 0))
        self.drive_turn(stage, ctx, 0)
        chunks = [p for (_, _, p, _) in ctx.published if isinstance(p, WordChunk)]
        assert chunks == []
        done = [s for s in ctx.samples if s[1] == "response_complete"]
        assert done and done[0][4]["ngrams"] == 0

    def test_sentence_final_and_end_flags(self):
        stage = make_stage(responses=("Hi there. Bye.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.drive_turn(stage, ctx, 0)
        chunks = [p for (_, _, p, _) in ctx.published if isinstance(p, WordChunk)]
        assert [c.sentence_final for c in chunks] == [False, True, True]
        assert [c.end_of_turn for c in chunks] == [False, False, True]


class TestFeedbackTruncation:
    def generate(self, stage, ctx, turn):
        stage.ingest_user_token(tok("question", turn))
        stage._begin_turn(turn, ctx)
        while (step := stage.poll(ctx)) is not None:
            ctx.run_step(step)

    def test_truncation_matches_replay_oracle(self):
        text = " ".join(f"w{i}" for i in range(20)) + "."
        stage = make_stage(responses=(text,), prompt="p q r")
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.generate(stage, ctx, 0)
        stage._halt(0, ctx)
        removed = stage.apply_feedback(0, 7)
        assert removed == 12  # ngrams 8..19, one word each

        expected = replay_expected_entries(
            3, [(0, ["question"], True, stage.history[0].response_ngrams)]
        )
        assert stage.cache.snapshot() == expected
        assert len(stage.history[0].response_ngrams) == 8

    def test_feedback_at_last_index_removes_nothing(self):
        stage = make_stage(responses=("alpha beta gamma.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.generate(stage, ctx, 0)
        stage._halt(0, ctx)
        assert stage.apply_feedback(0, 2) == 0

    def test_feedback_for_unknown_turn(self):
        stage = make_stage(responses=("x.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        with pytest.raises(UnknownTurn):
            stage.apply_feedback(9, 0)

    def test_feedback_without_halt(self):
        stage = make_stage(responses=("x y z.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.generate(stage, ctx, 0)
        with pytest.raises(FeedbackWithoutHalt):
            stage.apply_feedback(0, 0)

    def test_feedback_minus_one_drops_all_response_tokens(self):
        stage = make_stage(responses=("never spoken words here.",))
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.generate(stage, ctx, 0)
        stage._halt(0, ctx)
        stage.apply_feedback(0, -1)
        kinds = [k for (k, _, _) in stage.cache.snapshot()]
        assert "response_token" not in kinds
        assert stage.history[0].response_ngrams == []


class TestFullReset:
    def close_turns(self, stage, ctx, n):
        for turn in range(n):
            stage.ingest_user_token(tok("q", turn))
            stage._begin_turn(turn, ctx)
            while (step := stage.poll(ctx)) is not None:
                ctx.run_step(step)

    def test_reset_after_n_turns_preserves_prompt(self):
        stage = make_stage(responses=("A.", "B.", "C.", "D."), n_reset=4,
                           prompt="sys prompt here")
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.close_turns(stage, ctx, 3)
        assert stage.cache.turns_since_reset == 3
        assert len(stage.cache.entries) > 3
        self.close_turns_one_more(stage, ctx)
        assert stage.cache.turns_since_reset == 0
        assert stage.cache.snapshot() == [("prompt", -1, None)] * 3

    def close_turns_one_more(self, stage, ctx):
        turn = stage.cache.turns_since_reset
        stage.ingest_user_token(tok("q", turn))
        stage._begin_turn(turn, ctx)
        while (step := stage.poll(ctx)) is not None:
            ctx.run_step(step)

    def test_no_reset_before_n(self):
        stage = make_stage(responses=("A.", "B.", "C."), n_reset=4)
        ctx = FakeCtx()
        stage.on_start(ctx)
        self.close_turns(stage, ctx, 3)
        assert stage.cache.turns_since_reset == 3
        kinds = {k for (k, _, _) in stage.cache.snapshot()}
        assert "response_token" in kinds


class TestDialogCacheUnit:
    def test_capacity_invariant(self):
        cache = DialogCache(capacity=5)
        cache.pin_prompt(2)
        for i in range(10):
            cache.append(CacheEntry("user_token", 0))
        assert len(cache.entries) == 5

    def test_truncate_only_targets_matching_turn(self):
        cache = DialogCache(capacity=100)
        cache.append(CacheEntry("response_token", 0, 5))
        cache.append(CacheEntry("response_token", 1, 9))
        removed = cache.truncate_response(1, 4)
        assert removed == 1
        assert cache.snapshot() == [("response_token", 0, 5)]


class _Env:
    def __init__(self, payload):
        self.payload = payload
