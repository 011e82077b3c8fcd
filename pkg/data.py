"""
Vocabulary management, synthetic corpus generation and on-disk formats.
"""
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

import utils
from utils import ConfigError, CorpusParseError

logger = logging.getLogger(__name__)

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, BLANK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>", "<blank>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, BLANK_TOKEN)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, BLANK_ID = range(len(SPECIAL_TOKENS))
FIRST_CONTENT_ID = len(SPECIAL_TOKENS)

TASKS = ("copy", "reverse", "toy-translation")

ZIPF_EXPONENT = 1.2
# Fixed-point resolution of the Zipf cumulative table
_ZIPF_SCALE = 1 << 40


class Vocabulary:
    """Bijection between token strings and integer ids; specials occupy ids 0-4."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:FIRST_CONTENT_ID]) != SPECIAL_TOKENS:
            raise ConfigError(f"Vocabulary must start with {' '.join(SPECIAL_TOKENS)}")
        if len(tokens) <= FIRST_CONTENT_ID:
            raise ConfigError("Vocabulary needs at least one content token")
        if len(set(tokens)) != len(tokens):
            duplicates = sorted(t for t, c in Counter(tokens).items() if c > 1)
            raise ConfigError(f"Duplicate vocabulary tokens: {duplicates[:5]}")
        self.tokens = tokens
        self.index = {token: i for i, token in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def content_ids(self):
        return range(FIRST_CONTENT_ID, len(self.tokens))

    @classmethod
    def synthetic(cls, size):
        """Vocabulary of `size` ids whose content tokens are w5, w6, ..."""
        if size <= FIRST_CONTENT_ID:
            raise ConfigError(f"Vocabulary size must be at least {FIRST_CONTENT_ID + 1}, got {size}")
        return cls(list(SPECIAL_TOKENS) + [f"w{i}" for i in range(FIRST_CONTENT_ID, size)])

    def encode_line(self, line):
        """Whitespace-tokenize `line`; unknown tokens map to the unk id."""
        return [self.index.get(token, UNK_ID) for token in line.split()]

    def decode_ids(self, ids):
        """Inverse of encode_line; pad/bos/eos are dropped."""
        skip = (PAD_ID, BOS_ID, EOS_ID)
        return " ".join(self.tokens[i] for i in ids if i not in skip)

    def encode_lines(self, lines):
        """
        Encode many lines, skipping empty ones.

        Returns:
            tuple: (list of id lists, number of skipped empty lines)
        """
        encoded = []
        skipped = 0
        for line in lines:
            if not line.strip():
                skipped += 1
                continue
            encoded.append(self.encode_line(line))
        if skipped:
            logger.warning(f"Skipped {skipped} empty line(s) while encoding")
        return encoded, skipped

    def save(self, path):
        """Write one token per line; line number is the id."""
        return utils.atomic_write_text(path, "".join(f"{token}\n" for token in self.tokens))

    @classmethod
    def load(cls, path):
        path = utils.require_readable(path)
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        for number, token in enumerate(tokens, start=1):
            if not token or any(ch.isspace() for ch in token):
                raise CorpusParseError(f"invalid vocabulary token {token!r}", number)
        try:
            vocab = cls(tokens)
        except ConfigError as e:
            raise CorpusParseError(f"{path}: {e}") from e
        logger.info(f"Loaded vocabulary of {len(vocab)} tokens from {path}")
        return vocab


def build_vocab(token_files):
    """
    Build a vocabulary from whitespace-tokenized text files.

    Content tokens are ordered by descending frequency, ties broken
    alphabetically, so the id assignment is deterministic.

    Args:
        token_files (list): Paths of text files, one sentence per line

    Returns:
        Vocabulary: The built vocabulary
    """
    counts = Counter()
    empty = 0
    for path in token_files:
        path = utils.require_readable(path)
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    empty += 1
                    continue
                counts.update(token for token in line.split() if token not in SPECIAL_TOKENS)
    if empty:
        logger.warning(f"Skipped {empty} empty line(s) while building vocabulary")
    ordered = sorted(counts, key=lambda token: (-counts[token], token))
    vocab = Vocabulary(list(SPECIAL_TOKENS) + ordered)
    logger.info(f"Built vocabulary of {len(vocab)} tokens from {len(token_files)} file(s)")
    return vocab


@dataclass(frozen=True)
class Sample:
    """Paired source/target id sequences, stored without bos/eos."""
    source: Tuple[int, ...]
    target: Tuple[int, ...]


@dataclass
class CorpusSpec:
    task: str = "copy"
    vocab_size: int = 50
    min_len: int = 4
    max_len: int = 12
    samples: int = 2000
    seed: int = 1
    max_positions: int = 400
    # Splits share the seed (and so the bijection) but draw different sentences
    split: str = "train"

    @classmethod
    def from_settings(cls, settings, samples=None, seed=None, split="train"):
        return cls(
            task=settings.get("corpus.task"),
            vocab_size=settings.get("corpus.vocab_size"),
            min_len=settings.get("corpus.min_len"),
            max_len=settings.get("corpus.max_len"),
            samples=settings.get("corpus.samples") if samples is None else samples,
            seed=settings.get("seed") if seed is None else seed,
            max_positions=settings.get("model.max_positions"),
            split=split,
        )

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"Unknown task {self.task!r}; expected one of {TASKS}")
        if self.vocab_size <= FIRST_CONTENT_ID:
            raise ConfigError(f"vocab_size must be at least {FIRST_CONTENT_ID + 1}, got {self.vocab_size}")
        if self.min_len < 1:
            raise ConfigError(f"min_len must be at least 1, got {self.min_len}")
        if self.max_len < self.min_len:
            raise ConfigError(f"max_len {self.max_len} is below min_len {self.min_len}")
        if self.max_len > self.max_positions - 2:
            raise ConfigError(
                f"max_len {self.max_len} leaves no room for bos/eos within {self.max_positions} positions"
            )
        if self.samples < 0:
            raise ConfigError(f"samples must be non-negative, got {self.samples}")


class ZipfSampler:
    """Draws content ids with P(rank r) proportional to r^-s, rank 1 = first content id."""

    def __init__(self, vocab_size, exponent=ZIPF_EXPONENT):
        ranks = np.arange(1, vocab_size - FIRST_CONTENT_ID + 1, dtype=np.float64)
        weights = ranks ** -exponent
        # Integer cumulative table keeps the id path free of float comparisons
        cumulative = np.round(np.cumsum(weights / weights.sum()) * _ZIPF_SCALE).astype(np.int64)
        cumulative[-1] = _ZIPF_SCALE
        self.cumulative = cumulative

    def draw(self, rng, count):
        ticks = rng.integers(0, _ZIPF_SCALE, size=count, dtype=np.int64)
        return np.searchsorted(self.cumulative, ticks, side="right") + FIRST_CONTENT_ID


def toy_translate(source, bijection):
    """Map ids through `bijection`, then swap each pair (2k, 2k+1)."""
    mapped = [int(bijection[token]) for token in source]
    for i in range(0, len(mapped) - 1, 2):
        mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
    return mapped


def make_bijection(vocab_size, seed):
    """Seeded random bijection over content ids; specials map to themselves."""
    rng = utils.make_rng(seed, "bijection")
    content = np.arange(FIRST_CONTENT_ID, vocab_size)
    table = np.arange(vocab_size)
    table[FIRST_CONTENT_ID:] = rng.permutation(content)
    return table


def gen_synthetic(spec):
    """
    Generate a deterministic synthetic seq2seq corpus.

    Args:
        spec (CorpusSpec): Task, vocabulary, length range, size and seed

    Returns:
        list[Sample]: Generated samples
    """
    spec.validate()
    rng = utils.make_rng(spec.seed, "corpus", spec.task, spec.split)
    sampler = ZipfSampler(spec.vocab_size)
    bijection = make_bijection(spec.vocab_size, spec.seed) if spec.task == "toy-translation" else None

    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=spec.samples)
    samples = []
    for length in lengths:
        source = [int(token) for token in sampler.draw(rng, int(length))]
        if spec.task == "copy":
            target = list(source)
        elif spec.task == "reverse":
            target = source[::-1]
        else:
            target = toy_translate(source, bijection)
        samples.append(Sample(tuple(source), tuple(target)))

    logger.info(f"Generated {len(samples)} {spec.task} {spec.split} samples (vocab {spec.vocab_size}, seed {spec.seed})")
    return samples


def format_ids(ids):
    return " ".join(str(i) for i in ids)


def parse_ids(field, line_number, what, min_id=FIRST_CONTENT_ID):
    tokens = field.split()
    if not tokens:
        raise CorpusParseError(f"empty {what} sequence", line_number)
    try:
        ids = [int(token) for token in tokens]
    except ValueError as e:
        raise CorpusParseError(f"non-integer {what} token ({e})", line_number) from e
    if min(ids) < min_id:
        raise CorpusParseError(f"{what} contains an id below {min_id}", line_number)
    return tuple(ids)


def save_corpus(path, samples):
    """Write `source ids<TAB>target ids`, one sample per line."""
    lines = [f"{format_ids(s.source)}\t{format_ids(s.target)}\n" for s in samples]
    utils.atomic_write_text(path, "".join(lines))
    logger.info(f"Saved {len(samples)} samples to {path}")
    return Path(path)


def load_corpus(path) -> List[Sample]:
    """Inverse of save_corpus; malformed lines raise CorpusParseError with the line number."""
    path = utils.require_readable(path)
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2:
                raise CorpusParseError(f"expected 2 tab-separated fields, got {len(fields)}", number)
            samples.append(Sample(parse_ids(fields[0], number, "source"), parse_ids(fields[1], number, "target")))
    logger.info(f"Loaded {len(samples)} samples from {path}")
    return samples


def write_text_side(path, sequences, vocab):
    """Write id sequences as whitespace-tokenized text, one per line."""
    return utils.atomic_write_text(path, "".join(f"{vocab.decode_ids(seq)}\n" for seq in sequences))


def encode_parallel(vocab, source_lines, target_lines):
    """
    Encode aligned source/target text lines into samples.

    Pairs with a blank side, an unknown token or a special token are dropped;
    the id corpus holds content ids only.

    Returns:
        tuple: (list[Sample], number of dropped pairs)
    """
    if len(source_lines) != len(target_lines):
        raise CorpusParseError(f"{len(source_lines)} source lines but {len(target_lines)} target lines")
    pairs = [(s, t) for s, t in zip(source_lines, target_lines) if s.strip() and t.strip()]
    sources, _ = vocab.encode_lines([s for s, _ in pairs])
    targets, _ = vocab.encode_lines([t for _, t in pairs])
    samples = [
        Sample(tuple(s), tuple(t))
        for s, t in zip(sources, targets)
        if min(s) >= FIRST_CONTENT_ID and min(t) >= FIRST_CONTENT_ID
    ]
    dropped = len(source_lines) - len(samples)
    if dropped:
        logger.warning(f"Dropped {dropped} of {len(source_lines)} sentence pairs (blank, unknown or special tokens)")
    return samples, dropped
