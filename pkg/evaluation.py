"""
Decoding, BLEU, the noise-injection robustness protocol and probing of
frozen encoder representations.
"""
import io
import csv
import math
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np

import tensor as T
import utils
from augmentor import replace_perturb
from data import BOS_ID, EOS_ID, PAD_ID
from model import Batch
from tensor import Tensor
from trainer import OptimizerState, adam_step
from utils import ConfigError, UsageError

logger = logging.getLogger(__name__)

NOISE_KINDS = ("shuffle-span", "replace")
DEFAULT_NOISE_RATIOS = (0.0, 0.02, 0.04, 0.08, 0.16)
REPORT_HEADER = ["model", "task", "noise_kind", "ratio", "score", "scaled_score"]
SELEN_BUCKETS = 6


@dataclass
class BeamConfig:
    size: int = 4
    length_penalty: float = 1.0
    max_len: int = 64

    @classmethod
    def from_settings(cls, settings):
        return cls(settings.get("beam.size"), settings.get("beam.length_penalty"), settings.get("beam.max_len"))

    def validate(self, max_positions=None):
        if self.size < 1:
            raise ConfigError(f"beam size must be at least 1, got {self.size}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be at least 1, got {self.max_len}")
        if max_positions is not None and self.max_len > max_positions - 1:
            raise ConfigError(f"max_len {self.max_len} does not fit in {max_positions} positions")


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float
    score: float
    finished: bool


@dataclass
class NoiseSpec:
    kind: str = "replace"
    ratio: float = 0.0
    seed: int = 1

    def validate(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"Unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"noise ratio must lie in [0, 1], got {self.ratio}")


# --- decoding ------------------------------------------------------------

def normalized_score(log_prob, length, length_penalty):
    """Cumulative log-prob divided by length ** lp."""
    return log_prob / (max(length, 1) ** length_penalty)


def beam_search(step_log_probs, config, eos_id=EOS_ID):
    """
    Fixed-width beam search over a next-token distribution.

    Finished hypotheses keep their slot and compete on cumulative log-prob
    with the extensions of the live ones.

    Args:
        step_log_probs (callable): Maps a list of prefixes (tuples of generated ids)
            to an [n, v] array of next-token log-probabilities
        config (BeamConfig): Beam size, length penalty and max output length
        eos_id (int): End-of-sequence id

    Returns:
        Hypothesis: Best finished hypothesis by normalized score, or the best
        unfinished one (finished=False) when nothing reached eos
    """
    beam = [Hypothesis((), 0.0, 0.0, False)]
    for _ in range(config.max_len):
        live = [h for h in beam if not h.finished]
        if not live:
            break
        log_probs = step_log_probs([h.tokens for h in live])
        candidates = [h for h in beam if h.finished]
        for hyp, row in zip(live, log_probs):
            for token in range(len(row)):
                log_prob = hyp.log_prob + float(row[token])
                if token == eos_id:
                    # eos is scored but not part of the output tokens
                    score = normalized_score(log_prob, len(hyp.tokens) + 1, config.length_penalty)
                    candidates.append(Hypothesis(hyp.tokens, log_prob, score, True))
                else:
                    tokens = hyp.tokens + (token,)
                    score = normalized_score(log_prob, len(tokens), config.length_penalty)
                    candidates.append(Hypothesis(tokens, log_prob, score, False))
        # Stable sort: on ties the lower token id wins, as with argmax
        candidates.sort(key=lambda h: -h.log_prob)
        beam = candidates[: config.size]

    finished = [h for h in beam if h.finished]
    if finished:
        return max(finished, key=lambda h: h.score)
    logger.warning(f"No hypothesis reached eos within {config.max_len} tokens")
    return max(beam, key=lambda h: h.score)


def _source_row(source):
    return np.array([[BOS_ID, *source, EOS_ID]], dtype=np.int64)


def _model_step_fn(model, source):
    src = _source_row(source)
    with T.no_grad():
        memory = model.encode(src)

    def step(prefixes):
        rows = np.array([[BOS_ID, *prefix] for prefix in prefixes], dtype=np.int64)
        return model.next_token_log_probs(memory, src, rows)

    return step


def greedy_decode(model, source, max_len=64):
    """Pick the most likely token at each step until eos."""
    step = _model_step_fn(model, source)
    prefix = ()
    log_prob = 0.0
    for _ in range(max_len):
        row = step([prefix])[0]
        token = int(np.argmax(row))
        log_prob += float(row[token])
        if token == EOS_ID:
            return Hypothesis(prefix, log_prob, log_prob, True)
        prefix = prefix + (token,)
    logger.warning(f"Greedy decode hit max_len {max_len} without eos")
    return Hypothesis(prefix, log_prob, log_prob, False)


def beam_decode(model, source, config):
    """Beam search with the model as the next-token distribution."""
    config.validate(model.config.max_positions)
    return beam_search(_model_step_fn(model, source), config)


def decode_corpus(model, sources, config, threads=1):
    """Decode many sources; a beam of size 1 is plain greedy decoding."""

    def work(source):
        if config.size == 1:
            return greedy_decode(model, source, config.max_len)
        return beam_decode(model, source, config)

    if threads > 1 and len(sources) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, sources))
    return [work(source) for source in sources]


# --- BLEU ----------------------------------------------------------------

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(hypothesis, reference, n):
    """(clipped n-gram matches, total hypothesis n-grams) for one pair."""
    counts = _ngrams(hypothesis, n)
    reference_counts = _ngrams(reference, n)
    clipped = sum(min(count, reference_counts[gram]) for gram, count in counts.items())
    return clipped, sum(counts.values())


def corpus_bleu(hypotheses, references, max_order=4):
    """
    Corpus BLEU in [0, 100] with one reference per hypothesis and no smoothing.

    Args:
        hypotheses (list): Token sequences
        references (list): Token sequences, aligned with hypotheses

    Returns:
        float: 100 * BP * exp(mean log clipped precision); 0 if any precision is 0
    """
    if not references:
        raise UsageError("corpus_bleu: empty reference corpus")
    if len(hypotheses) != len(references):
        raise UsageError(f"corpus_bleu: {len(hypotheses)} hypotheses for {len(references)} references")

    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            clipped, total = modified_precision(hyp, ref, n)
            matches[n - 1] += clipped
            totals[n - 1] += total

    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_precision = math.fsum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)


def sequence_accuracy(hypotheses, references):
    """Percentage of exact matches."""
    if not references:
        raise UsageError("sequence_accuracy: empty reference corpus")
    hits = sum(tuple(h) == tuple(r) for h, r in zip(hypotheses, references))
    return 100.0 * hits / len(references)


def task_score(task, hypotheses, references):
    """BLEU for toy-translation, exact-match accuracy for copy/reverse."""
    if task == "toy-translation":
        return corpus_bleu(hypotheses, references)
    return sequence_accuracy(hypotheses, references)


# --- noise injection -----------------------------------------------------

def noise_kinds(kind):
    """Expand a noise.kind setting; "all" means every kind."""
    if kind == "all":
        return NOISE_KINDS
    if kind not in NOISE_KINDS:
        raise ConfigError(f"Unknown noise kind {kind!r}; expected one of {NOISE_KINDS} or 'all'")
    return (kind,)


def noise_count(ratio, length):
    """round(ratio * length), halves rounded up."""
    return int(math.floor(ratio * length + 0.5))


def inject_noise(source, spec, rng, vocab_size):
    """
    Corrupt one source sentence for robustness evaluation.

    shuffle-span permutes one contiguous span of round(ratio * L) >= 2 tokens;
    replace swaps round(ratio * L) distinct positions for other content ids.
    """
    source = tuple(int(t) for t in source)
    count = noise_count(spec.ratio, len(source))
    if spec.kind == "replace":
        return replace_perturb(source, count, vocab_size, rng).perturbed
    if count < 2:
        return source
    count = min(count, len(source))
    start = int(rng.integers(0, len(source) - count + 1))
    while True:
        order = rng.permutation(count)
        if np.any(order != np.arange(count)):
            break
    span = [source[start + i] for i in order]
    return source[:start] + tuple(span) + source[start + count:]


def noise_corpus(samples, spec, vocab_size):
    """Noised copy of every source; sentence i uses its own (seed, kind, ratio, i) stream."""
    spec.validate()
    return [
        inject_noise(sample.source, spec, utils.make_rng(spec.seed, "noise", spec.kind, repr(spec.ratio), i), vocab_size)
        for i, sample in enumerate(samples)
    ]


def noise_eval(models, corpus, task, kinds=("replace",), ratios=DEFAULT_NOISE_RATIOS,
               beam_config=None, seed=1, threads=1):
    """
    Score every model on noised versions of the test corpus.

    Args:
        models (dict[str, Seq2SeqTransformer]): Named models
        corpus (list[Sample]): Test samples
        task (str): Task name, selects BLEU or sequence accuracy
        kinds (tuple): Noise kinds
        ratios (tuple): Noise ratios; ratio 0 is the clean score
        beam_config (BeamConfig | None): Decoding setup (greedy if None)
        seed (int): Noise seed, shared by all models
        threads (int): Decoding threads

    Returns:
        list[dict]: Rows with model, task, noise_kind, ratio, score, scaled_score
    """
    beam_config = beam_config or BeamConfig(size=1, length_penalty=0.0)
    references = [sample.target for sample in corpus]
    rows = []
    for name, model in models.items():
        vocab_size = model.config.vocab_size
        clean_hyps = decode_corpus(model, [s.source for s in corpus], beam_config, threads)
        clean = task_score(task, [h.tokens for h in clean_hyps], references)
        for kind in kinds:
            for ratio in ratios:
                if ratio == 0:
                    score = clean
                else:
                    noised = noise_corpus(corpus, NoiseSpec(kind, ratio, seed), vocab_size)
                    hyps = decode_corpus(model, noised, beam_config, threads)
                    score = task_score(task, [h.tokens for h in hyps], references)
                scaled = score / clean if clean else 0.0
                rows.append({"model": name, "task": task, "noise_kind": kind, "ratio": ratio,
                             "score": score, "scaled_score": scaled})
                logger.info(f"{name} {kind}@{ratio:g}: score {score:.2f} (scaled {scaled:.3f})")
    return rows


def write_report(path, rows, header=REPORT_HEADER):
    """Write dict rows as CSV (atomic)."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=header, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return utils.atomic_write_text(path, buffer.getvalue())


# --- probing -------------------------------------------------------------

def extract_representations(model, sources, batch_size=64):
    """
    Mean-pooled encoder outputs, one row per sentence.

    Pooling covers the source token positions only (not bos/eos/pad).

    Returns:
        np.ndarray: [len(sources), d_model]
    """
    rows = []
    for start in range(0, len(sources), batch_size):
        chunk = [tuple(s) for s in sources[start:start + batch_size]]
        batch = Batch.collate(chunk, [(EOS_ID,)] * len(chunk))
        with T.no_grad():
            states = model.encode(batch.src).data
        content = (batch.src != PAD_ID) & (batch.src != BOS_ID) & (batch.src != EOS_ID)
        weights = content / content.sum(axis=1, keepdims=True)
        rows.append(np.einsum("bl,ble->be", weights, states))
    if not rows:
        return np.zeros((0, model.config.d_model))
    return np.concatenate(rows, axis=0)


def selen_labels(samples, buckets=SELEN_BUCKETS):
    """Sentence-length classes from equal-mass length quantiles."""
    lengths = np.array([len(s.source) for s in samples])
    edges = np.quantile(lengths, np.linspace(0, 1, buckets + 1)[1:-1])
    return np.searchsorted(edges, lengths, side="right")


def bshift_dataset(samples, seed):
    """
    Sources where half the sentences have one adjacent pair swapped.

    Returns:
        tuple: (list of sources, np.ndarray of 0/1 labels)
    """
    rng = utils.make_rng(seed, "bshift")
    sources, labels = [], []
    for sample in samples:
        source = list(sample.source)
        pairs = [i for i in range(len(source) - 1) if source[i] != source[i + 1]]
        if pairs and rng.random() < 0.5:
            i = pairs[int(rng.integers(len(pairs)))]
            source[i], source[i + 1] = source[i + 1], source[i]
            labels.append(1)
        else:
            labels.append(0)
        sources.append(tuple(source))
    return sources, np.array(labels)


class ProbeClassifier:
    """One-hidden-layer ReLU classifier trained with Adam."""

    def __init__(self, in_dim, hidden, classes, seed):
        rng = utils.make_rng(seed, "probe-init")
        limit_in = math.sqrt(6.0 / (in_dim + hidden))
        limit_out = math.sqrt(6.0 / (hidden + classes))
        self.params = {
            "w1": Tensor(rng.uniform(-limit_in, limit_in, (in_dim, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.uniform(-limit_out, limit_out, (hidden, classes)), requires_grad=True),
            "b2": Tensor(np.zeros(classes), requires_grad=True),
        }

    def logits(self, features):
        hidden = T.relu(T.matmul(Tensor(features), self.params["w1"]) + self.params["b1"])
        return T.matmul(hidden, self.params["w2"]) + self.params["b2"]

    def predict(self, features):
        with T.no_grad():
            return self.logits(features).data.argmax(axis=1)


def probe(representations, labels, hidden=256, lr=0.001, epochs=10, batch_size=32,
          valid_fraction=0.2, seed=1):
    """
    Train an MLP probe on frozen representations and report validation accuracy.

    Args:
        representations (np.ndarray): [N, e] features
        labels (np.ndarray): N integer classes
        hidden (int): Hidden width
        lr (float): Adam learning rate
        epochs (int): Passes over the training split
        batch_size (int): Minibatch size
        valid_fraction (float): Share held out for validation
        seed (int): Split, init and shuffling seed

    Returns:
        float: Validation accuracy in [0, 1]
    """
    features = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise UsageError("probe: labels contain a single class")
    if len(labels) != len(features):
        raise UsageError(f"probe: {len(features)} representations for {len(labels)} labels")

    order = utils.make_rng(seed, "probe-split").permutation(len(labels))
    n_valid = max(1, int(round(valid_fraction * len(labels))))
    valid_idx, train_idx = order[:n_valid], order[n_valid:]
    if len(train_idx) == 0:
        raise UsageError("probe: no training examples after the split")

    classifier = ProbeClassifier(features.shape[1], hidden, int(labels.max()) + 1, seed)
    state = OptimizerState.for_parameters(classifier.params)
    shuffle_rng = utils.make_rng(seed, "probe-shuffle")
    for _ in range(epochs):
        epoch_order = train_idx[shuffle_rng.permutation(len(train_idx))]
        for start in range(0, len(epoch_order), batch_size):
            idx = epoch_order[start:start + batch_size]
            for param in classifier.params.values():
                param.zero_grad()
            loss = T.masked_cross_entropy(classifier.logits(features[idx]), labels[idx], np.ones(len(idx), bool))
            T.backward(loss)
            adam_step(classifier.params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8)

    accuracy = float(np.mean(classifier.predict(features[valid_idx]) == labels[valid_idx]))
    logger.info(f"Probe accuracy {accuracy:.4f} on {n_valid} validation examples")
    return accuracy


def probe_task(model, samples, task, seed=1, **probe_kwargs):
    """Build the selen/bshift probe data for `samples`, encode with `model`, run the probe."""
    if task == "selen":
        sources, labels = [s.source for s in samples], selen_labels(samples)
    elif task == "bshift":
        sources, labels = bshift_dataset(samples, seed)
    else:
        raise ConfigError(f"Unknown probe task {task!r}")
    representations = extract_representations(model, sources)
    return probe(representations, labels, seed=seed, **probe_kwargs)
