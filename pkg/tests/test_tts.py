"""Synthesis stage tests: word buffering, frame streams, sentence chunking."""

import pytest

from conftest import FakeCtx
from voxpipe.config import TtsConfig
from voxpipe.messages import SpeechFrame, WordChunk
from voxpipe.tts import TtsStage, TtsState, buffer_word


def chunk(words, ngram, turn=0, final=False, end=False, frames=None):
    return WordChunk(words=tuple(words), ngram_index=ngram, turn_id=turn,
                     sentence_final=final, end_of_turn=end,
                     frames_per_word=frames)


def feed(stage, ctx, chunks):
    for c in chunks:
        stage.on_data(_Env(c), ctx)


def drain(stage, ctx, limit=10_000):
    frames = []
    for _ in range(limit):
        step = stage.poll(ctx)
        if step is None:
            break
        ctx.run_step(step)
    return [p for (_, _, p, _) in ctx.published if isinstance(p, SpeechFrame)]


class _Env:
    def __init__(self, payload):
        self.payload = payload


class TestBufferWord:
    def test_four_words_not_ready(self):
        st = TtsState(turn_id=0)
        for i in range(4):
            ready = buffer_word(chunk([f"w{i}"], i), st)
        assert not ready

    def test_fifth_word_ready(self):
        st = TtsState(turn_id=0)
        for i in range(4):
            buffer_word(chunk([f"w{i}"], i), st)
        assert buffer_word(chunk(["w4"], 4), st)

    def test_end_of_turn_flushes_short_buffer(self):
        st = TtsState(turn_id=0)
        buffer_word(chunk(["only"], 0), st)
        assert buffer_word(chunk(["two."], 1, final=True, end=True), st)

    def test_multiword_chunks_count_words(self):
        st = TtsState(turn_id=0)
        buffer_word(chunk(["a", "b", "c"], 0), st)
        assert not st.started
        assert buffer_word(chunk(["d", "e"], 1), st)  # 5 words total


class TestSynthesize:
    def test_five_words_sixty_frames_with_alignment(self):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        feed(stage, ctx, [chunk([f"w{i}"], i, end=(i == 4)) for i in range(5)])
        frames = drain(stage, ctx)
        assert len(frames) == 60
        # alignment oracle: 12 frames per word in order
        expected = [i // 12 for i in range(60)]
        assert [f.ngram_index for f in frames] == expected

    def test_single_word_flush_emits_twelve_frames(self):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        feed(stage, ctx, [chunk(["alone"], 0, end=True)])
        frames = drain(stage, ctx)
        assert len(frames) == 12
        assert {f.ngram_index for f in frames} == {0}

    def test_per_word_frame_override(self):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        feed(stage, ctx, [chunk(["long"], 0, end=True, frames=20)])
        assert len(drain(stage, ctx)) == 20

    def test_frame_cadence_is_inference_latency(self):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        feed(stage, ctx, [chunk(["a"], 0, end=True)])
        drain(stage, ctx)
        times = [t for (t, _, p, _) in ctx.published
                 if isinstance(p, SpeechFrame)]
        gaps = {b - a for a, b in zip(times, times[1:])}
        assert gaps == {20 * 10**6}

    def test_not_started_before_fifth_word(self):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        feed(stage, ctx, [chunk([f"w{i}"], i) for i in range(4)])
        assert stage.poll(ctx) is None

    def test_total_frames_conserved_across_sentences(self):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        words = ["One", "two", "three.", "Four", "five", "six", "seven."]
        chunks = [
            chunk([w], i, final=w.endswith("."), end=(i == len(words) - 1))
            for i, w in enumerate(words)
        ]
        feed(stage, ctx, chunks)
        frames = drain(stage, ctx)
        assert len(frames) == len(words) * 12  # no frame lost at the boundary

    def test_alignment_monotone(self):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        feed(stage, ctx, [chunk([f"w{i}"], i, end=(i == 7)) for i in range(8)])
        frames = drain(stage, ctx)
        indices = [f.ngram_index for f in frames]
        assert indices == sorted(indices)


class TestSentenceBoundary:
    def run_words(self, words):
        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        chunks = [
            chunk([w], i, final=w.endswith((".", "!", "?")),
                  end=(i == len(words) - 1))
            for i, w in enumerate(words)
        ]
        feed(stage, ctx, chunks)
        frames = drain(stage, ctx)
        return stage, ctx, frames

    def test_mid_turn_sentence_clears_cache_and_reencodes(self):
        stage, ctx, frames = self.run_words(
            ["Hello", "there.", "Next", "sentence", "here."])
        resets = [l for l in ctx.logs if l[1] == "tts_cache_reset"]
        assert len(resets) == 1
        assert stage.st.prefix_reencodes == 1

    def test_first_post_boundary_frame_is_phonetic_sentence_start(self):
        _, _, frames = self.run_words(["A", "b.", "C", "d."])
        starts = [f.sentence_start for f in frames]
        # first frame of the turn and first frame after the boundary
        assert starts[0] is True
        assert starts[24] is True
        assert sum(starts) == 2
        assert all(f.phonetic for f in frames)

    def test_mid_sentence_chunk_triggers_no_reset(self):
        stage, ctx, _ = self.run_words(["no", "boundary", "here"])
        assert not [l for l in ctx.logs if l[1] == "tts_cache_reset"]

    def test_boundary_adds_prefix_latency_between_sentences(self):
        _, ctx, _ = self.run_words(["a.", "b."])
        times = [t for (t, _, p, _) in ctx.published
                 if isinstance(p, SpeechFrame)]
        # 12 frames, a 10 ms re-encode pause, then 12 more
        gap = times[12] - times[11]
        assert gap == (20 + 10) * 10**6


class TestHalt:
    def test_halt_discards_unspoken_words(self):
        from voxpipe.messages import ControlSignal, SignalKind

        stage = TtsStage(TtsConfig())
        ctx = FakeCtx()
        feed(stage, ctx, [chunk([f"w{i}"], i, end=(i == 9)) for i in range(10)])
        # synthesize 7 frames, then halt arrives
        for _ in range(7):
            ctx.run_step(stage.poll(ctx))
        stage.on_control(
            ControlSignal(kind=SignalKind.HALT, origin="asr", turn_id=0), ctx)
        assert stage.poll(ctx) is None  # nothing further for the halted turn
        frames = [p for (_, _, p, _) in ctx.published
                  if isinstance(p, SpeechFrame)]
        assert len(frames) == 7
