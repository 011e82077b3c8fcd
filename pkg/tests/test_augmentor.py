"""
Test the perturbing functions, the smoothness controller and supervision labels.
"""
import os
import sys
import math
import pytest
import numpy as np

# Add parent directory to sys.path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import augmentor
import data
import utils
from augmentor import (
    REPLACED,
    SHUFFLED,
    AugmentConfig,
    PerturbationOutcome,
    PerturbationRecord,
)
from data import CorpusSpec
from utils import ConfigError, CorpusParseError, DimensionError

VOCAB_SIZE = 60


class TestSmoothnessController:
    """Tests for the truncated geometric count sampler."""

    def test_cap_three_probabilities(self):
        probs = augmentor.perturb_count_distribution(3, 0.2)
        assert probs == pytest.approx([0.40984, 0.32787, 0.26230], abs=1e-5)

    @pytest.mark.parametrize("cap", [1, 2, 3, 5, 10])
    def test_empirical_distribution(self, cap):
        rng = np.random.default_rng(cap)
        draws = [augmentor.sample_perturb_count(1.0, cap, 0.2, rng) for _ in range(100_000)]
        counts = np.bincount(draws, minlength=cap + 1)
        assert counts[0] == 0
        empirical = counts[1:] / len(draws)
        expected = augmentor.perturb_count_distribution(cap, 0.2)
        assert np.max(np.abs(empirical - expected)) < 0.005

    def test_cap_below_one_skips(self):
        rng = np.random.default_rng(0)
        assert augmentor.sample_perturb_count(0.1, 9, 0.2, rng) == 0

    def test_cap_uses_floor(self):
        rng = np.random.default_rng(0)
        draws = {augmentor.sample_perturb_count(0.1, 39, 0.2, rng) for _ in range(2000)}
        assert draws == {1, 2, 3}

    def test_no_smooth_returns_cap(self):
        rng = np.random.default_rng(0)
        assert augmentor.sample_perturb_count(0.1, 30, 0.2, rng, no_smooth=True) == 3
        assert augmentor.sample_perturb_count(0.1, 5, 0.2, rng, no_smooth=True) == 0

    def test_gate_rate_matches_gamma(self):
        rng = np.random.default_rng(11)
        gated = [augmentor.gate_sentence(0.3, rng) for _ in range(100_000)]
        assert abs(np.mean(gated) - 0.3) < 0.01


class TestPerturbingFunctions:
    """Tests for shuffle_perturb and replace_perturb."""

    def test_shuffle_is_local_permutation(self):
        rng = np.random.default_rng(1)
        seq = tuple(range(5, 25))
        for _ in range(200):
            outcome = augmentor.shuffle_perturb(seq, 6, 3, rng)
            assert sorted(outcome.perturbed) == sorted(seq)
            for record in outcome.records:
                assert record.kind == SHUFFLED
                assert abs(record.position - record.origin_position) < 3
                assert seq[record.origin_position] == outcome.perturbed[record.position]
                assert record.original_token == seq[record.position]

    def test_shuffle_swap_count(self):
        rng = np.random.default_rng(2)
        seq = tuple(range(5, 45))
        outcome = augmentor.shuffle_perturb(seq, 5, 3, rng)
        # ceil(5 / 2) = 3 disjoint swaps of distinct tokens
        assert len(outcome.records) == 6

    def test_replace_changes_every_chosen_position(self):
        rng = np.random.default_rng(3)
        seq = (5, 6, 7, 8, 9, 10, 11, 12)
        outcome = augmentor.replace_perturb(seq, 3, VOCAB_SIZE, rng)
        assert len(outcome.records) == 3
        for record in outcome.records:
            assert record.kind == REPLACED
            assert outcome.perturbed[record.position] != seq[record.position]
            assert data.FIRST_CONTENT_ID <= outcome.perturbed[record.position] < VOCAB_SIZE
            assert record.origin_position == record.position

    def test_replace_respects_exclusions_and_clamps(self):
        rng = np.random.default_rng(4)
        outcome = augmentor.replace_perturb((5, 6, 7, 8), 4, VOCAB_SIZE, rng, excluded_positions={0, 1})
        assert outcome.positions(REPLACED) == {2, 3}
        assert outcome.perturbed[:2] == (5, 6)

    def test_single_content_id_cannot_replace(self):
        outcome = augmentor.replace_perturb((5, 5), 1, 6, np.random.default_rng(0))
        assert outcome.perturbed == (5, 5)
        assert outcome.records == ()


class TestAugmentSentence:
    """Tests for the mode dispatch of augment_sentence."""

    @pytest.fixture
    def corpus(self):
        spec = CorpusSpec(task="copy", vocab_size=VOCAB_SIZE, min_len=10, max_len=40, samples=10_000, seed=11)
        yield data.gen_synthetic(spec)

    def test_bliss_invariants(self, corpus):
        config = AugmentConfig(gamma=0.3, alpha_shu=0.1, alpha_rep=0.1, p=0.2, window=3)
        for index, sample in enumerate(corpus):
            outcome = augmentor.augment_sentence(sample.source, config, augmentor.sentence_rng(1, index), VOCAB_SIZE)
            cap = math.floor(0.1 * len(sample.source) + 1e-9)
            shuffled = outcome.positions(SHUFFLED)
            replaced = outcome.positions(REPLACED)
            assert len(outcome.perturbed) == len(sample.source)
            assert not shuffled & replaced
            assert len(replaced) <= cap
            assert len(shuffled) <= 2 * math.ceil(cap / 2)
            for record in outcome.records:
                if record.kind == REPLACED:
                    assert outcome.perturbed[record.position] != record.original_token
                else:
                    assert abs(record.position - record.origin_position) < 3
            untouched = set(range(len(sample.source))) - shuffled - replaced
            assert all(outcome.perturbed[j] == sample.source[j] for j in untouched)

    def test_gamma_gates_sentences(self, corpus):
        config = AugmentConfig(gamma=0.3, alpha_shu=0.1, alpha_rep=0.1)
        touched = sum(
            bool(augmentor.augment_sentence(s.source, config, augmentor.sentence_rng(2, i), VOCAB_SIZE).records)
            for i, s in enumerate(corpus)
        )
        # Two independent gates: 1 - 0.7^2 = 0.51 of sentences, minus a few no-op shuffles
        assert 0.45 < touched / len(corpus) < 0.54

    def test_identical_seeds_reproduce(self, corpus):
        config = AugmentConfig(gamma=0.5)
        first = augmentor.augment_corpus(corpus[:500], config, VOCAB_SIZE, epoch=3)
        second = augmentor.augment_corpus(corpus[:500], config, VOCAB_SIZE, epoch=3, threads=4)
        assert first == second
        assert augmentor.augment_corpus(corpus[:500], config, VOCAB_SIZE, epoch=4) != first

    def test_no_aug_and_none_are_identity(self):
        source = (5, 6, 7, 8, 9, 10, 11, 12, 13, 14)
        rng = np.random.default_rng(0)
        for config in (AugmentConfig(gamma=1.0, mode="none"), AugmentConfig(gamma=1.0, no_aug=True)):
            outcome = augmentor.augment_sentence(source, config, rng, VOCAB_SIZE)
            assert outcome == PerturbationOutcome(source)

    def test_baseline_modes_carry_no_records(self):
        source = tuple(range(5, 35))
        for mode in ("dropout", "blank", "shuffle-baseline"):
            outcome = augmentor.augment_sentence(source, AugmentConfig(mode=mode), np.random.default_rng(5), VOCAB_SIZE)
            assert outcome.records == ()
        blanked = augmentor.augment_sentence(source, AugmentConfig(mode="blank"), np.random.default_rng(5), VOCAB_SIZE)
        assert all(t in (data.BLANK_ID,) + source for t in blanked.perturbed)
        shuffled = augmentor.augment_sentence(source, AugmentConfig(mode="shuffle-baseline"),
                                              np.random.default_rng(5), VOCAB_SIZE)
        assert sorted(shuffled.perturbed) == sorted(source)

    def test_dropout_never_empties(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            outcome = augmentor.augment_sentence((7,), AugmentConfig(mode="dropout"), rng, VOCAB_SIZE)
            assert outcome.perturbed == (7,)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AugmentConfig(mode="mixup").validate()
        with pytest.raises(ConfigError):
            AugmentConfig(p=1.0).validate()
        with pytest.raises(ConfigError):
            AugmentConfig(gamma=1.5).validate()
        with pytest.raises(ConfigError):
            AugmentConfig(window=1).validate()


class TestSupervision:
    """Tests for build_supervision and the perturbed-dataset file."""

    def test_labels_follow_records(self):
        outcome = PerturbationOutcome(
            (6, 5, 9, 8),
            (
                PerturbationRecord(0, SHUFFLED, 5, 1),
                PerturbationRecord(1, SHUFFLED, 6, 0),
                PerturbationRecord(2, REPLACED, 7, 2),
            ),
        )
        sup = augmentor.build_supervision(outcome, 4, 400)
        assert list(sup.token_mask) == [True, True, True, False]
        assert list(sup.token_labels[:3]) == [5, 6, 7]
        assert list(sup.pos_mask) == [True, True, False, False]
        assert list(sup.pos_labels[:2]) == [1, 0]

        replaced_only = augmentor.build_supervision(outcome, 4, 400, token_on_replaced_only=True)
        assert list(replaced_only.token_mask) == [False, False, True, False]

    def test_origin_beyond_position_head(self):
        outcome = PerturbationOutcome((6, 5), (PerturbationRecord(0, SHUFFLED, 5, 1),))
        with pytest.raises(DimensionError):
            augmentor.build_supervision(outcome, 2, 1)

    def test_perturbed_file_roundtrip(self, tmp_path):
        samples = [data.Sample((5, 6, 7), (5, 6, 7)), data.Sample((8, 9), (8, 9))]
        outcomes = [
            PerturbationOutcome((6, 5, 7), (PerturbationRecord(0, SHUFFLED, 5, 1), PerturbationRecord(1, SHUFFLED, 6, 0))),
            PerturbationOutcome((8, 9)),
        ]
        path = tmp_path / "perturbed.tsv"
        augmentor.save_perturbed(path, samples, outcomes)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "6 5 7\t5 6 7\t0:shuffled:5:1,1:shuffled:6:0"
        assert lines[1] == "8 9\t8 9\t"
        rows = augmentor.load_perturbed(path)
        assert rows[0] == ((6, 5, 7), (5, 6, 7), outcomes[0].records)
        assert rows[1][2] == ()

    def test_malformed_record(self, tmp_path):
        path = tmp_path / "perturbed.tsv"
        path.write_text("5 6\t5 6\t0:swapped:5:1\n", encoding="utf-8")
        with pytest.raises(CorpusParseError):
            augmentor.load_perturbed(path)

    def test_bad_perturbed_token_reports_line(self, tmp_path):
        path = tmp_path / "perturbed.tsv"
        path.write_text("5 6\t5 6\t\n5 x6\t5 6\t\n", encoding="utf-8")
        with pytest.raises(CorpusParseError) as excinfo:
            augmentor.load_perturbed(path)
        assert excinfo.value.line_number == 2

    def test_blank_tokens_survive_reload(self, tmp_path):
        path = tmp_path / "perturbed.tsv"
        path.write_text(f"5 {data.BLANK_ID} 7\t5 6 7\t\n", encoding="utf-8")
        assert augmentor.load_perturbed(path)[0][0] == (5, data.BLANK_ID, 7)

    def test_sentence_rng_is_order_independent(self):
        a = utils.make_rng(1, "augment", 0, 5).random(3)
        b = augmentor.sentence_rng(1, 5, 0).random(3)
        assert np.array_equal(a, b)
