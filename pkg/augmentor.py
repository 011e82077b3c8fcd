"""
Smooth augmented-data generator.

Sentences pass through a shuffle function and a replace function in turn;
each function gates a sentence with probability gamma and perturbs a number
of tokens drawn from a truncated geometric distribution. The records it keeps
become the token/position self-supervision labels. Three baseline noise
modes (dropout, blank, shuffle) are provided for comparison.
"""
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Tuple

import numpy as np

import utils
from data import BLANK_ID, FIRST_CONTENT_ID, format_ids, parse_ids
from utils import ConfigError, CorpusParseError, DimensionError

logger = logging.getLogger(__name__)

MODES = ("none", "bliss", "dropout", "blank", "shuffle-baseline")

SHUFFLED = "shuffled"
REPLACED = "replaced"

BASELINE_DROP_RATE = 0.1
BASELINE_BLANK_RATE = 0.1
BASELINE_SHUFFLE_WINDOW = 3

# Draws per swap before shuffle_perturb gives up on it
MAX_SWAP_DRAWS = 10

# Per-task gamma / alpha_shu / alpha_rep
AUGMENT_PRESETS = {
    "wmt14-en-de": {"gamma": 0.3, "alpha_shu": 0.1, "alpha_rep": 0.1},
    "wmt16-en-ro": {"gamma": 0.4, "alpha_shu": 0.1, "alpha_rep": 0.1},
    "iwslt14-de-en": {"gamma": 0.3, "alpha_shu": 0.12, "alpha_rep": 0.15},
    "cnn-dm": {"gamma": 0.4, "alpha_shu": 0.08, "alpha_rep": 0.15},
    "conll": {"gamma": 0.3, "alpha_shu": 0.12, "alpha_rep": 0.1},
}


@dataclass
class AugmentConfig:
    gamma: float = 0.3
    alpha_shu: float = 0.1
    alpha_rep: float = 0.1
    p: float = 0.2
    window: int = 3
    mode: str = "bliss"
    no_smooth: bool = False
    no_aug: bool = False
    seed: int = 1

    @classmethod
    def from_settings(cls, settings):
        return cls(
            gamma=settings.get("augment.gamma"),
            alpha_shu=settings.get("augment.alpha_shu"),
            alpha_rep=settings.get("augment.alpha_rep"),
            p=settings.get("augment.p"),
            window=settings.get("augment.window"),
            mode=settings.get("augment.mode"),
            no_smooth=settings.get("train.no_smooth"),
            no_aug=settings.get("train.no_aug"),
            seed=settings.get("seed"),
        )

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"Unknown augmentation mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.p < 1.0:
            raise ConfigError(f"p must lie in (0, 1), got {self.p}")
        for name in ("alpha_shu", "alpha_rep"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.window < 2:
            raise ConfigError(f"window must be at least 2, got {self.window}")


class PerturbationRecord(NamedTuple):
    position: int
    kind: str
    original_token: int
    origin_position: int


@dataclass(frozen=True)
class PerturbationOutcome:
    perturbed: Tuple[int, ...]
    records: Tuple[PerturbationRecord, ...] = ()

    def positions(self, kind=None):
        return {r.position for r in self.records if kind is None or r.kind == kind}


@dataclass
class Supervision:
    """Per-position labels for the token and position heads (source positions, 0-based)."""
    token_labels: np.ndarray
    token_mask: np.ndarray
    pos_labels: np.ndarray
    pos_mask: np.ndarray

    @classmethod
    def empty(cls, length):
        zeros = np.zeros(length, dtype=np.int64)
        off = np.zeros(length, dtype=bool)
        return cls(zeros, off, zeros.copy(), off.copy())


def perturb_count_distribution(cap, p):
    """P(l) for l = 1..cap: geometric(p) renormalized over the truncated support."""
    support = np.arange(1, cap + 1)
    weights = p * (1.0 - p) ** (support - 1)
    return weights / weights.sum()


def sample_perturb_count(alpha, length, p, rng, no_smooth=False):
    """
    Sample how many tokens one perturbing function touches.

    Args:
        alpha (float): Max fraction of the sentence; cap = floor(alpha * length)
        length (int): Sentence length
        p (float): Geometric parameter
        rng (np.random.Generator): Random stream
        no_smooth (bool): Return the cap itself instead of sampling

    Returns:
        int: 0 if cap < 1, else a count in 1..cap
    """
    # Small epsilon so that e.g. 0.1 * 30 counts as 3, not 2.9999...
    cap = int(math.floor(alpha * length + 1e-9))
    if cap < 1:
        return 0
    if no_smooth or cap == 1:
        return cap
    cumulative = np.cumsum(perturb_count_distribution(cap, p))
    return int(min(np.searchsorted(cumulative, rng.random(), side="right"), cap - 1)) + 1


def gate_sentence(gamma, rng):
    """True with probability gamma."""
    return bool(rng.random() < gamma)


def shuffle_perturb(seq, count, window, rng):
    """
    Swap nearby tokens; ceil(count / 2) swaps, each within `window`.

    Positions take part in at most one swap. A swap is abandoned after
    MAX_SWAP_DRAWS draws that hit an already used partner.

    Returns:
        PerturbationOutcome: Records for every position whose token changed
    """
    tokens = list(seq)
    length = len(tokens)
    origin = list(range(length))
    touched = set()

    for _ in range(math.ceil(count / 2)):
        for _attempt in range(MAX_SWAP_DRAWS):
            free = [i for i in range(length) if i not in touched]
            if len(free) < 2:
                break
            i = free[int(rng.integers(len(free)))]
            neighbours = [j for j in range(max(0, i - window + 1), min(length, i + window)) if j != i]
            if not neighbours:
                continue
            j = neighbours[int(rng.integers(len(neighbours)))]
            if j in touched:
                continue
            tokens[i], tokens[j] = tokens[j], tokens[i]
            origin[i], origin[j] = origin[j], origin[i]
            touched.update((i, j))
            break

    records = tuple(
        PerturbationRecord(j, SHUFFLED, seq[j], origin[j])
        for j in range(length)
        if tokens[j] != seq[j]
    )
    return PerturbationOutcome(tuple(tokens), records)


def _draw_replacement(incumbent, vocab_size, rng):
    """Uniform content id different from `incumbent`."""
    if FIRST_CONTENT_ID <= incumbent < vocab_size:
        draw = int(rng.integers(FIRST_CONTENT_ID, vocab_size - 1))
        return draw + 1 if draw >= incumbent else draw
    return int(rng.integers(FIRST_CONTENT_ID, vocab_size))


def replace_perturb(seq, count, vocab_size, rng, excluded_positions=()):
    """
    Replace `count` distinct positions (outside `excluded_positions`) with other content ids.

    Asking for more positions than are eligible perturbs all eligible ones.
    """
    tokens = list(seq)
    excluded = set(excluded_positions)
    eligible = [j for j in range(len(tokens)) if j not in excluded]
    if vocab_size - FIRST_CONTENT_ID < 2:
        # A single content id leaves nothing to replace with
        return PerturbationOutcome(tuple(tokens))
    n = min(count, len(eligible))
    if n < count:
        logger.debug(f"Clamped replacement count {count} to {n} eligible positions")
    if n <= 0:
        return PerturbationOutcome(tuple(tokens))

    chosen = sorted(int(j) for j in rng.choice(eligible, size=n, replace=False))
    records = []
    for j in chosen:
        original = tokens[j]
        tokens[j] = _draw_replacement(original, vocab_size, rng)
        records.append(PerturbationRecord(j, REPLACED, original, j))
    return PerturbationOutcome(tuple(tokens), tuple(records))


def _dropout_baseline(seq, rng):
    keep = rng.random(len(seq)) >= BASELINE_DROP_RATE
    kept = [token for token, k in zip(seq, keep) if k]
    if not kept:
        kept = [seq[int(rng.integers(len(seq)))]]
    return tuple(kept)


def _blank_baseline(seq, rng):
    blank = rng.random(len(seq)) < BASELINE_BLANK_RATE
    return tuple(BLANK_ID if b else token for token, b in zip(seq, blank))


def augment_sentence(source, config, rng, vocab_size):
    """
    Perturb one source sentence according to `config.mode`.

    Args:
        source (Sequence[int]): Source ids without bos/eos
        config (AugmentConfig): Augmentation knobs
        rng (np.random.Generator): Per-sentence random stream
        vocab_size (int): Vocabulary size for replacement draws

    Returns:
        PerturbationOutcome: Perturbed sentence and its supervision records
    """
    source = tuple(int(t) for t in source)
    mode = "none" if config.no_aug else config.mode

    if mode == "none" or not source:
        return PerturbationOutcome(source)
    if mode == "dropout":
        return PerturbationOutcome(_dropout_baseline(source, rng))
    if mode == "blank":
        return PerturbationOutcome(_blank_baseline(source, rng))
    if mode == "shuffle-baseline":
        swapped = shuffle_perturb(source, len(source), BASELINE_SHUFFLE_WINDOW, rng)
        return PerturbationOutcome(swapped.perturbed)

    length = len(source)
    current = PerturbationOutcome(source)
    if gate_sentence(config.gamma, rng):
        count = sample_perturb_count(config.alpha_shu, length, config.p, rng, config.no_smooth)
        if count:
            current = shuffle_perturb(source, count, config.window, rng)

    if gate_sentence(config.gamma, rng):
        count = sample_perturb_count(config.alpha_rep, length, config.p, rng, config.no_smooth)
        if count:
            shuffled = current.positions(SHUFFLED)
            replaced = replace_perturb(current.perturbed, count, vocab_size, rng, shuffled)
            current = PerturbationOutcome(
                replaced.perturbed,
                tuple(sorted(current.records + replaced.records)),
            )
    return current


def build_supervision(outcome, length, max_positions, token_on_replaced_only=False):
    """
    Turn perturbation records into per-position labels and masks.

    Args:
        outcome (PerturbationOutcome): Result of augment_sentence
        length (int): Sentence length
        max_positions (int): Number of classes of the position head
        token_on_replaced_only (bool): Restrict the token loss to replaced positions

    Returns:
        Supervision: token labels/mask (recorded positions), position labels/mask (shuffled positions)
    """
    sup = Supervision.empty(length)
    for record in outcome.records:
        if record.origin_position >= max_positions:
            raise DimensionError(
                f"origin position {record.origin_position} exceeds position head size {max_positions}"
            )
        if record.kind == REPLACED or not token_on_replaced_only:
            sup.token_mask[record.position] = True
            sup.token_labels[record.position] = record.original_token
        if record.kind == SHUFFLED:
            sup.pos_mask[record.position] = True
            sup.pos_labels[record.position] = record.origin_position
    return sup


def sentence_rng(seed, index, epoch=0):
    """Random stream for one sentence in one epoch; independent of processing order."""
    return utils.make_rng(seed, "augment", epoch, index)


def augment_corpus(samples, config, vocab_size, epoch=0, threads=1, indices=None):
    """
    Augment many samples; each sentence draws from its own seeded stream.

    Args:
        samples (list[Sample]): Corpus
        config (AugmentConfig): Augmentation knobs
        vocab_size (int): Vocabulary size
        epoch (int): Epoch number, so that every epoch gets fresh perturbations
        threads (int): Worker threads; results are identical for any value
        indices (list[int] | None): Corpus indices of `samples` (defaults to 0..n-1)

    Returns:
        list[PerturbationOutcome]: One outcome per sample, in input order
    """
    if indices is None:
        indices = range(len(samples))

    def work(item):
        index, sample = item
        return augment_sentence(sample.source, config, sentence_rng(config.seed, index, epoch), vocab_size)

    items = list(zip(indices, samples))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, items))
    return [work(item) for item in items]


def format_records(records):
    return ",".join(f"{r.position}:{r.kind}:{r.original_token}:{r.origin_position}" for r in records)


def parse_records(field, line_number):
    records = []
    for quad in filter(None, field.split(",")):
        parts = quad.split(":")
        if len(parts) != 4 or parts[1] not in (SHUFFLED, REPLACED):
            raise CorpusParseError(f"malformed record {quad!r}", line_number)
        try:
            records.append(PerturbationRecord(int(parts[0]), parts[1], int(parts[2]), int(parts[3])))
        except ValueError as e:
            raise CorpusParseError(f"malformed record {quad!r}", line_number) from e
    return tuple(records)


def save_perturbed(path, samples, outcomes):
    """Write `perturbed<TAB>target<TAB>records` lines."""
    lines = [
        f"{format_ids(outcome.perturbed)}\t{format_ids(sample.target)}\t{format_records(outcome.records)}\n"
        for sample, outcome in zip(samples, outcomes)
    ]
    utils.atomic_write_text(path, "".join(lines))
    logger.info(f"Wrote {len(lines)} perturbed samples to {path}")
    return Path(path)


def load_perturbed(path):
    """Read a perturbed-dataset file back as (perturbed, target, records) triples."""
    path = utils.require_readable(path)
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise CorpusParseError(f"expected 3 tab-separated fields, got {len(fields)}", number)
            # Blank baseline output keeps <blank> in the source
            perturbed = parse_ids(fields[0], number, "perturbed", min_id=BLANK_ID)
            target = parse_ids(fields[1], number, "target")
            rows.append((perturbed, target, parse_records(fields[2], number)))
    return rows
