import numpy as np
import pytest

from beamfuse.harness import generate_corpus, split_corpus
from beamfuse.lm import train_ngram
from beamfuse.tokenization import SPECIAL_TOKENS, Tokenizer, Vocabulary, build_vocab


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(11, 800, 140)


@pytest.fixture(scope="session")
def corpus_split(corpus):
    return split_corpus(corpus)


@pytest.fixture(scope="session")
def asr_tok(corpus_split):
    return Tokenizer(build_vocab(corpus_split[0], 64))


@pytest.fixture(scope="session")
def lm_tok(corpus_split):
    return Tokenizer(build_vocab(corpus_split[0], 160))


@pytest.fixture(scope="session")
def trigram(corpus_split, lm_tok):
    train, _ = corpus_split
    return train_ngram([lm_tok.encode(line) for line in train], lm_tok.vocab, 3, 0.4)


@pytest.fixture(scope="session")
def asr_trigram(corpus_split, asr_tok):
    train, _ = corpus_split
    return train_ngram([asr_tok.encode(line) for line in train], asr_tok.vocab, 3, 0.4)


def make_vocab(*pieces: str) -> Vocabulary:
    """Vocabulary with the reserved ids followed by the given pieces."""
    return Vocabulary(SPECIAL_TOKENS + tuple(pieces))


def random_emissions(rng: np.random.Generator, frames: int, vocab: int) -> np.ndarray:
    """Normalized random log-probability rows."""
    logits = rng.normal(size=(frames, vocab))
    m = logits.max(axis=1, keepdims=True)
    return logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
