"""
Test decoding, BLEU, noise injection and probing.
"""
import os
import sys
import math
import itertools
import pytest
import numpy as np

# Add parent directory to sys.path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import evaluation
from data import BOS_ID, EOS_ID, FIRST_CONTENT_ID, Sample
from evaluation import BeamConfig, NoiseSpec
from model import ModelConfig, Seq2SeqTransformer
from utils import ConfigError, UsageError


def toy_step(seed, vocab_size=4):
    """Random but fixed next-token distribution per prefix; id 0 plays eos."""
    def step(prefixes):
        rows = []
        for prefix in prefixes:
            logits = 2.0 * np.random.default_rng([seed, *prefix]).normal(size=vocab_size)
            rows.append(logits - np.log(np.exp(logits).sum()))
        return np.array(rows)
    return step


def table_step(table, vocab_size=5):
    """Next-token distribution from a {prefix: {token: prob}} table; unlisted tokens get 1e-6."""
    def step(prefixes):
        rows = []
        for prefix in prefixes:
            probs = np.full(vocab_size, 1e-6)
            for token, prob in table.get(prefix, {}).items():
                probs[token] = prob
            rows.append(np.log(probs / probs.sum()))
        return np.array(rows)
    return step


def reference_greedy(step, max_len, eos_id=0):
    prefix, log_prob = (), 0.0
    for _ in range(max_len):
        row = step([prefix])[0]
        token = int(np.argmax(row))
        log_prob += row[token]
        if token == eos_id:
            return prefix, log_prob, True
        prefix += (token,)
    return prefix, log_prob, False


class CopyModel:
    """Stand-in model that copies its source with probability 0.9 per step."""

    def __init__(self, vocab_size=20):
        self.config = ModelConfig(vocab_size=vocab_size, max_positions=40)

    def encode(self, src):
        return src

    def next_token_log_probs(self, memory, src_ids, prefixes):
        sequence = src_ids[0]
        rows = np.full((len(prefixes), self.config.vocab_size), 0.1 / (self.config.vocab_size - 1))
        for i, prefix in enumerate(prefixes):
            # src is <bos> x <eos>; the next token after k outputs is src[k + 1]
            position = min(len(prefix) + 1, len(sequence) - 1)
            rows[i, sequence[position]] = 0.9
        return np.log(rows)


class TestBleu:
    """Tests for corpus_bleu and its parts."""

    def test_identity_is_100(self):
        refs = [(5, 6, 7, 8, 9), (10, 11, 12, 13)]
        assert evaluation.corpus_bleu(refs, refs) == pytest.approx(100.0)

    def test_clipped_unigram_precision(self):
        hyp = ["the"] * 7
        ref = "the cat is on the mat".split()
        assert evaluation.modified_precision(hyp, ref, 1) == (2, 7)

    def test_brevity_penalty(self):
        hyp = [list("abcd")]
        ref = [list("abcdefgh")]
        assert evaluation.corpus_bleu(hyp, ref) == pytest.approx(100.0 * math.exp(-1.0))

    def test_missing_order_scores_zero(self):
        assert evaluation.corpus_bleu([(5, 6, 7)], [(5, 6, 7)]) == 0.0

    def test_bad_inputs(self):
        with pytest.raises(UsageError):
            evaluation.corpus_bleu([], [])
        with pytest.raises(UsageError):
            evaluation.corpus_bleu([(5,)], [(5,), (6,)])

    def test_sequence_accuracy_and_task_score(self):
        hyps = [(5, 6), (7,), (8, 9), ()]
        refs = [(5, 6), (7, 7), (8, 9), (5,)]
        assert evaluation.sequence_accuracy(hyps, refs) == 50.0
        assert evaluation.task_score("reverse", hyps, refs) == 50.0
        assert evaluation.task_score("toy-translation", refs, refs) == evaluation.corpus_bleu(refs, refs)


class TestBeamSearch:
    """Tests for beam_search on toy distributions."""

    @pytest.mark.parametrize("seed", range(20))
    def test_width_one_is_greedy(self, seed):
        step = toy_step(seed)
        result = evaluation.beam_search(step, BeamConfig(size=1, length_penalty=1.0, max_len=6), eos_id=0)
        tokens, log_prob, finished = reference_greedy(step, 6)
        assert result.tokens == tokens
        assert result.finished == finished
        assert result.log_prob == pytest.approx(log_prob)

    def test_wider_beam_finds_better_sequence(self):
        table = {
            (): {1: 0.55, 2: 0.45},
            (1,): {0: 0.4, 3: 0.3, 4: 0.3},
            (2,): {0: 0.95, 3: 0.05},
        }
        step = table_step(table)
        config = BeamConfig(size=1, length_penalty=0.0, max_len=4)
        assert evaluation.beam_search(step, config, eos_id=0).tokens == (1,)
        config.size = 2
        best = evaluation.beam_search(step, config, eos_id=0)
        assert best.tokens == (2,)
        assert best.finished
        assert math.exp(best.log_prob) == pytest.approx(0.45 * 0.95, rel=1e-4)

    @pytest.mark.parametrize("length_penalty", [0.0, 1.0])
    def test_unbounded_beam_is_exhaustive(self, length_penalty):
        step = toy_step(3, vocab_size=3)
        max_len = 3
        best_score = -math.inf
        for length in range(max_len):
            for prefix in itertools.product((1, 2), repeat=length):
                log_prob = sum(step([prefix[:i]])[0][prefix[i]] for i in range(length))
                log_prob += step([prefix])[0][0]
                best_score = max(best_score, evaluation.normalized_score(log_prob, length + 1, length_penalty))

        result = evaluation.beam_search(step, BeamConfig(size=64, length_penalty=length_penalty, max_len=max_len),
                                        eos_id=0)
        assert result.finished
        assert result.score == pytest.approx(best_score)

    def test_unfinished_fallback(self):
        step = table_step({}, vocab_size=3)
        # Every token ties and lower ids are kept first, so eos (id 2) never enters the beam
        result = evaluation.beam_search(step, BeamConfig(size=2, length_penalty=0.0, max_len=3), eos_id=2)
        assert not result.finished
        assert len(result.tokens) == 3

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BeamConfig(size=0).validate()
        with pytest.raises(ConfigError):
            BeamConfig(max_len=12).validate(max_positions=12)
        BeamConfig(max_len=11).validate(max_positions=12)


class TestModelDecoding:
    """Decoding through a model's next-token distribution."""

    def test_copy_model_greedy_and_beam(self):
        model = CopyModel()
        source = (5, 9, 7)
        greedy = evaluation.greedy_decode(model, source, max_len=10)
        assert greedy.tokens == source
        assert greedy.finished
        beam = evaluation.beam_decode(model, source, BeamConfig(size=3, max_len=10))
        assert beam.tokens == source

    def test_corpus_decoding_threads_agree(self):
        model = Seq2SeqTransformer(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ffn=32, vocab_size=20,
                                               max_positions=12, dropout=0.0), seed=4)
        sources = [(5, 6, 7), (8, 9), (10, 11, 12, 13)]
        config = BeamConfig(size=1, length_penalty=0.0, max_len=5)
        single = evaluation.decode_corpus(model, sources, config)
        threaded = evaluation.decode_corpus(model, sources, config, threads=3)
        assert [h.tokens for h in single] == [h.tokens for h in threaded]
        assert single[0].tokens == evaluation.greedy_decode(model, sources[0], 5).tokens
        config.size = 2
        assert all(len(h.tokens) <= 5 for h in evaluation.decode_corpus(model, sources, config))


class TestNoise:
    """Tests for the noise-injection protocol."""

    @pytest.mark.parametrize("ratio, length, expected", [
        (0.1, 5, 1),
        (0.02, 10, 0),
        (0.08, 20, 2),
        (0.25, 10, 3),
    ])
    def test_noise_count_rounds_half_up(self, ratio, length, expected):
        assert evaluation.noise_count(ratio, length) == expected

    def test_noise_kinds(self):
        assert evaluation.noise_kinds("all") == evaluation.NOISE_KINDS
        assert evaluation.noise_kinds("replace") == ("replace",)
        with pytest.raises(ConfigError):
            evaluation.noise_kinds("deletion")

    def test_shuffle_span_permutes_one_span(self):
        source = tuple(range(5, 25))
        for i in range(50):
            noised = evaluation.inject_noise(source, NoiseSpec("shuffle-span", 0.25), np.random.default_rng(i), 30)
            assert noised != source
            assert sorted(noised) == sorted(source)
            changed = [j for j in range(len(source)) if noised[j] != source[j]]
            assert changed[-1] - changed[0] < 5

    def test_short_span_is_untouched(self):
        source = (5, 6, 7, 8)
        assert evaluation.inject_noise(source, NoiseSpec("shuffle-span", 0.1), np.random.default_rng(0), 30) == source

    def test_replace_changes_count_positions(self):
        source = tuple(range(5, 25))
        noised = evaluation.inject_noise(source, NoiseSpec("replace", 0.16), np.random.default_rng(1), 30)
        changed = [j for j in range(len(source)) if noised[j] != source[j]]
        assert len(changed) == 3
        assert all(FIRST_CONTENT_ID <= noised[j] < 30 for j in changed)

    def test_noise_corpus_is_seeded(self):
        samples = [Sample(tuple(range(5, 15)), tuple(range(5, 15)))] * 4
        spec = NoiseSpec("replace", 0.2, seed=3)
        assert evaluation.noise_corpus(samples, spec, 30) == evaluation.noise_corpus(samples, spec, 30)
        assert evaluation.noise_corpus(samples, NoiseSpec("replace", 0.2, seed=4), 30) != \
            evaluation.noise_corpus(samples, spec, 30)

    def test_noise_spec_validation(self):
        with pytest.raises(ConfigError):
            NoiseSpec("deletion", 0.1).validate()
        with pytest.raises(ConfigError):
            NoiseSpec("replace", 1.5).validate()

    def test_noise_eval_rows(self, tmp_path):
        corpus = [Sample((5, 6, 7), (5, 6, 7)), Sample((8, 9, 10, 11), (8, 9, 10, 11))]
        rows = evaluation.noise_eval({"copy": CopyModel()}, corpus, "copy", ("replace", "shuffle-span"),
                                     (0.0, 0.5), seed=2)
        assert len(rows) == 4
        clean = [row for row in rows if row["ratio"] == 0.0]
        assert all(row["score"] == 100.0 and row["scaled_score"] == 1.0 for row in clean)
        replaced = next(row for row in rows if row["noise_kind"] == "replace" and row["ratio"] == 0.5)
        assert replaced["score"] == 0.0
        assert replaced["scaled_score"] == 0.0

        path = evaluation.write_report(tmp_path / "noise.csv", rows)
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == ",".join(evaluation.REPORT_HEADER)
        assert lines[1].startswith("copy,copy,replace,0.0,100.0,1.0")


class TestProbing:
    """Tests for representation extraction and the probe classifier."""

    @pytest.fixture
    def model(self):
        yield Seq2SeqTransformer(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ffn=32, vocab_size=20,
                                             max_positions=12, dropout=0.0), seed=6)

    def test_mean_over_content_positions(self, model):
        sources = [(5, 6, 7), (8, 9)]
        reps = evaluation.extract_representations(model, sources)
        assert reps.shape == (2, 16)
        states = model.encode(np.array([[BOS_ID, 5, 6, 7, EOS_ID]])).data
        assert np.allclose(reps[0], states[0, 1:4].mean(axis=0))
        alone = evaluation.extract_representations(model, [(8, 9)])
        assert np.allclose(reps[1], alone[0])

    def test_selen_buckets(self):
        samples = [Sample(tuple([5] * n), (5,)) for n in range(1, 13)]
        labels = evaluation.selen_labels(samples)
        assert list(labels) == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]

    def test_bshift_swaps_one_adjacent_pair(self):
        samples = [Sample(tuple(range(5, 15)), (5,)) for _ in range(200)]
        sources, labels = evaluation.bshift_dataset(samples, seed=1)
        assert 60 < labels.sum() < 140
        for source, label in zip(sources, labels):
            changed = [j for j in range(10) if source[j] != 5 + j]
            if label:
                assert len(changed) == 2 and changed[1] == changed[0] + 1
            else:
                assert changed == []
        assert np.array_equal(evaluation.bshift_dataset(samples, seed=1)[1], labels)

    def test_probe_learns_separable_classes(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, 300)
        features = rng.normal(size=(300, 4)) + 3.0 * labels[:, None]
        accuracy = evaluation.probe(features, labels, hidden=16, lr=0.01, epochs=20, seed=2)
        assert accuracy >= 0.95

    def test_probe_on_random_features_is_chance(self):
        rng = np.random.default_rng(3)
        labels = rng.permutation(np.repeat([0, 1], 2000))
        features = rng.normal(size=(4000, 8))
        accuracy = evaluation.probe(features, labels, hidden=16, lr=0.01, epochs=3, valid_fraction=0.5, seed=4)
        assert abs(accuracy - 0.5) <= 0.05

    def test_probe_rejects_bad_labels(self):
        features = np.zeros((10, 3))
        with pytest.raises(UsageError):
            evaluation.probe(features, np.zeros(10, dtype=int))
        with pytest.raises(UsageError):
            evaluation.probe(features, np.array([0, 1] * 4))

    def test_unknown_probe_task(self, model):
        with pytest.raises(ConfigError):
            evaluation.probe_task(model, [Sample((5, 6), (5, 6))], "wc")
