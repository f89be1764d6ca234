import math
import time
from collections import defaultdict

import numpy as np
import pytest

from beamfuse.lm import (
    ArpaFormatError,
    LMError,
    PrefixCacheEntry,
    ScoreRequest,
    read_arpa,
    score_sequence,
    train_ngram,
    wrap_with_latency,
    write_arpa,
)
from beamfuse.tokenization import BOS_ID, EOS_ID

from conftest import make_vocab


def fresh_trigram(corpus_split, lm_tok):
    train, _ = corpus_split
    return train_ngram([lm_tok.encode(line) for line in train[:300]], lm_tok.vocab, 3, 0.4)


class TestTraining:
    def test_unigram_dominated_by_seen_token(self):
        vocab = make_vocab("▁a", "▁b")
        a, b = vocab.token_id("▁a"), vocab.token_id("▁b")
        model = train_ngram([[a]], vocab, order=1, discount=0.4)
        assert model.logprob((), a) > model.logprob((), b)
        assert math.exp(model.logprob((), b)) > 0.0

    def test_bigram_orders_continuations(self):
        vocab = make_vocab("▁a", "▁b", "▁c")
        a, b, c = (vocab.token_id(t) for t in ("▁a", "▁b", "▁c"))
        model = train_ngram([[a, b], [a, b], [c, a, b]], vocab, order=2, discount=0.4)
        assert model.logprob((a,), b) > model.logprob((), b)
        assert model.logprob((a,), b) > model.logprob((a,), c)

    def test_context_sums_to_one(self, corpus_split, lm_tok, trigram):
        rng = np.random.default_rng(3)
        vsize = trigram.vocab.size
        train, _ = corpus_split
        encoded = [lm_tok.encode(line) for line in train]
        contexts = []
        for _ in range(60):  # contexts that occurred in training
            seq = encoded[int(rng.integers(0, len(encoded)))]
            if len(seq) < 3:
                continue
            i = int(rng.integers(0, len(seq) - 2))
            contexts.append(tuple(seq[i : i + 2]))
        for _ in range(40):  # arbitrary (mostly unseen) contexts
            contexts.append(tuple(int(x) for x in rng.integers(4, vsize, size=2)))
        for ctx in contexts:
            total = sum(math.exp(trigram.logprob(ctx, t)) for t in range(vsize))
            assert abs(total - 1.0) < 1e-6

    def test_stored_probabilities_negative_and_finite(self, trigram):
        for logp in trigram._probs.values():
            assert math.isfinite(logp) and logp < 0.0

    def test_invalid_parameters(self, lm_tok):
        with pytest.raises(LMError):
            train_ngram([], lm_tok.vocab, 3, 0.4)
        with pytest.raises(LMError):
            train_ngram([[5]], lm_tok.vocab, 0, 0.4)
        with pytest.raises(LMError):
            train_ngram([[5]], lm_tok.vocab, 6, 0.4)
        with pytest.raises(LMError):
            train_ngram([[5]], lm_tok.vocab, 3, 0.0)
        with pytest.raises(LMError):
            train_ngram([[5]], lm_tok.vocab, 3, 1.0)


def _reference_conditional(counts, uni_total, uni_types, vsize, discount):
    """Linear-space absolute-discounting backoff, recomputed from raw counts."""

    def prob(ctx, token):
        if not ctx:
            c = counts[1].get((token,), 0)
            floor = discount * uni_types / (uni_total * vsize)
            return floor + (c - discount) / uni_total if c > 0 else floor
        order = len(ctx) + 1
        continuations = {
            g[-1]: c for g, c in counts[order].items() if g[:-1] == ctx
        }
        ctx_total = sum(continuations.values())
        if ctx_total == 0:
            return prob(ctx[1:], token)
        if token in continuations:
            return (continuations[token] - discount) / ctx_total
        released = discount * len(continuations) / ctx_total
        lower_seen = sum(prob(ctx[1:], u) for u in continuations)
        return released / (1.0 - lower_seen) * prob(ctx[1:], token)

    return prob


class TestScoring:
    def test_bos_alone_scores_zero(self, trigram):
        assert score_sequence(trigram, (BOS_ID,)) == 0.0

    def test_requires_bos(self, trigram):
        with pytest.raises(LMError):
            score_sequence(trigram, (5, 6))

    def test_chain_rule(self, trigram, lm_tok, corpus_split):
        _, eval_lines = corpus_split
        seq = tuple(lm_tok.encode(eval_lines[0])) + (EOS_ID,)
        total = score_sequence(trigram, (BOS_ID,) + seq)
        stepwise = 0.0
        ctx = trigram.fresh_cache().context
        for token in seq:
            stepwise += trigram.logprob(ctx, token)
            ctx = (ctx + (token,))[-2:]
        assert total == pytest.approx(stepwise, abs=1e-12)

    def test_matches_count_reference(self, corpus_split, lm_tok):
        train, _ = corpus_split
        lines = train[:120]
        encoded = [lm_tok.encode(line) for line in lines]
        model = train_ngram(encoded, lm_tok.vocab, 3, 0.4)

        counts = {1: defaultdict(int), 2: defaultdict(int), 3: defaultdict(int)}
        for seq in encoded:
            padded = (BOS_ID, *seq, EOS_ID)
            for i in range(1, len(padded)):
                for k in (1, 2, 3):
                    if i - k + 1 >= 0:
                        counts[k][padded[i - k + 1 : i + 1]] += 1
        ref = _reference_conditional(
            counts, sum(counts[1].values()), len(counts[1]), lm_tok.vocab.size, 0.4
        )

        rng = np.random.default_rng(7)
        for _ in range(20):
            seq = tuple(int(x) for x in rng.integers(4, lm_tok.vocab.size, size=12))
            expected = 0.0
            ctx = (BOS_ID,)
            for token in seq:
                expected += math.log(ref(ctx[-2:], token))
                ctx = ctx + (token,)
            got = score_sequence(model, (BOS_ID,) + seq)
            assert got == pytest.approx(expected, abs=1e-9)

    def test_monotone_nonincreasing(self, trigram, lm_tok, corpus_split):
        _, eval_lines = corpus_split
        seq = tuple(lm_tok.encode(eval_lines[1]))
        cache = trigram.fresh_cache()
        prev = 0.0
        for end in range(1, len(seq) + 1):
            res = trigram.score_batch_incremental([ScoreRequest(seq[:end], cache)])[0]
            assert res.cum_logprob < prev
            prev = res.cum_logprob
            cache = res.cache


class TestBatchIncremental:
    def test_nothing_new_scores_nothing(self, corpus_split, lm_tok):
        model = fresh_trigram(corpus_split, lm_tok)
        seq = (5, 6, 7)
        full = model.score_batch_incremental([ScoreRequest(seq, model.fresh_cache())])[0]
        before = model.counters.snapshot()
        again = model.score_batch_incremental([ScoreRequest(seq, full.cache)])[0]
        after = model.counters.snapshot()
        assert again.cum_logprob == full.cum_logprob
        assert after[0] == before[0] + 1  # one call
        assert after[1:] == before[1:]  # zero hypotheses, zero tokens

    def test_single_fresh_request_equals_from_scratch(self, trigram, lm_tok, corpus_split):
        _, eval_lines = corpus_split
        seq = tuple(lm_tok.encode(eval_lines[2])) + (EOS_ID,)
        res = trigram.score_batch_incremental([ScoreRequest(seq, trigram.fresh_cache())])[0]
        assert res.cum_logprob == score_sequence(trigram, (BOS_ID,) + seq)
        assert res.cache.scored_len == len(seq)

    def test_rounds_match_from_scratch(self, trigram, lm_tok, corpus_split):
        _, eval_lines = corpus_split
        rng = np.random.default_rng(13)
        for line in eval_lines[:6]:
            seq = tuple(lm_tok.encode(line)) + (EOS_ID,)
            cuts = sorted(set(int(x) for x in rng.integers(1, len(seq), size=2)))
            caches = [trigram.fresh_cache()]
            cum = None
            for end in cuts + [len(seq)]:
                res = trigram.score_batch_incremental(
                    [ScoreRequest(seq[:end], caches[-1])]
                )[0]
                caches.append(res.cache)
                cum = res.cum_logprob
            assert cum == pytest.approx(
                score_sequence(trigram, (BOS_ID,) + seq), abs=1e-9
            )

    def test_results_in_request_order(self, trigram, lm_tok, corpus_split):
        _, eval_lines = corpus_split
        seqs = [tuple(lm_tok.encode(line)) for line in eval_lines[:5]]
        requests = [ScoreRequest(s, trigram.fresh_cache()) for s in seqs]
        results = trigram.score_batch_incremental(requests)
        for seq, res in zip(seqs, results):
            assert res.cum_logprob == score_sequence(trigram, (BOS_ID,) + seq)

    def test_cache_sequence_mismatch_rejected(self, trigram):
        first = trigram.score_batch_incremental(
            [ScoreRequest((5, 6, 7), trigram.fresh_cache())]
        )[0]
        with pytest.raises(LMError):
            trigram.score_batch_incremental([ScoreRequest((5, 9, 7, 8), first.cache)])

    def test_cache_longer_than_sequence_rejected(self, trigram):
        bad = PrefixCacheEntry(5, -1.0, (6, 7))
        with pytest.raises(LMError):
            trigram.score_batch_incremental([ScoreRequest((5,), bad)])

    def test_counters_match_scored_lengths(self, corpus_split, lm_tok):
        model = fresh_trigram(corpus_split, lm_tok)
        _, eval_lines = corpus_split
        seq = tuple(lm_tok.encode(eval_lines[3]))
        cache = model.fresh_cache()
        for end in (2, 5, len(seq)):
            cache = model.score_batch_incremental([ScoreRequest(seq[:end], cache)])[0].cache
        assert model.counters.tokens == cache.scored_len == len(seq)
        assert model.counters.calls == 3
        model.reset()
        assert model.counters.snapshot() == (0, 0, 0)


class TestLatencyWrapper:
    def test_zero_cost_adds_nothing(self, corpus_split, lm_tok):
        model = fresh_trigram(corpus_split, lm_tok)
        wrapped = wrap_with_latency(model, 0.0, 0.0)
        wrapped.score_batch_incremental([ScoreRequest((5, 6), wrapped.fresh_cache())])
        assert wrapped.emulated_seconds == 0.0

    def test_per_call_cost_lower_bound(self, corpus_split, lm_tok):
        model = fresh_trigram(corpus_split, lm_tok)
        wrapped = wrap_with_latency(model, 10.0, 0.0)
        started = time.perf_counter()
        for _ in range(7):
            wrapped.score_batch_incremental([ScoreRequest((5,), wrapped.fresh_cache())])
        elapsed = time.perf_counter() - started
        assert elapsed >= 0.070
        assert wrapped.emulated_seconds == pytest.approx(0.070)

    def test_counters_live_on_inner(self, corpus_split, lm_tok):
        model = fresh_trigram(corpus_split, lm_tok)
        wrapped = wrap_with_latency(model, 0.0, 0.0)
        wrapped.score_batch_incremental([ScoreRequest((5, 6), wrapped.fresh_cache())])
        assert model.counters.calls == 1
        assert wrapped.counters is model.counters

    def test_negative_cost_rejected(self, trigram):
        with pytest.raises(LMError):
            wrap_with_latency(trigram, -1.0, 0.0)


class TestArpa:
    def test_round_trip_scoring(self, trigram, tmp_path):
        path = tmp_path / "model.arpa"
        write_arpa(trigram, str(path))
        loaded = read_arpa(str(path))
        assert loaded.vocab.tokens == trigram.vocab.tokens
        rng = np.random.default_rng(19)
        worst = 0.0
        for _ in range(100):
            seq = (BOS_ID,) + tuple(
                int(x) for x in rng.integers(4, trigram.vocab.size, size=12)
            ) + (EOS_ID,)
            worst = max(worst, abs(score_sequence(trigram, seq) - score_sequence(loaded, seq)))
        assert worst < 1e-9

    def test_empty_unigram_section(self, tmp_path):
        path = tmp_path / "bad.arpa"
        path.write_text("\\data\\\nngram 1=0\n\n\\1-grams:\n\n\\end\\\n")
        with pytest.raises(ArpaFormatError, match="1-grams"):
            read_arpa(str(path))

    def test_header_count_mismatch_names_order(self, trigram, tmp_path):
        path = tmp_path / "model.arpa"
        write_arpa(trigram, str(path))
        lines = path.read_text().splitlines()
        lines[2] = "ngram 2=1"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ArpaFormatError, match="order 2"):
            read_arpa(str(path))

    def test_missing_header(self, tmp_path):
        path = tmp_path / "junk.arpa"
        path.write_text("not an arpa file\n")
        with pytest.raises(ArpaFormatError):
            read_arpa(str(path))

    def test_entry_outside_section(self, tmp_path):
        path = tmp_path / "bad.arpa"
        path.write_text("\\data\\\nngram 1=1\n\n-1.0\t<s>\n\\end\\\n")
        with pytest.raises(ArpaFormatError):
            read_arpa(str(path))

    def test_unknown_token_in_higher_order(self, trigram, tmp_path):
        path = tmp_path / "model.arpa"
        write_arpa(trigram, str(path))
        text = path.read_text()
        marker = "\\2-grams:\n"
        at = text.index(marker) + len(marker)
        end = text.index("\n", at)
        fields = text[at:end].split("\t")
        fields[1] = "nonexistent-token"
        path.write_text(text[:at] + "\t".join(fields) + text[end:])
        with pytest.raises(ArpaFormatError, match="unknown token"):
            read_arpa(str(path))
