"""
Test the command-line entry point end to end on tiny runs.
"""
import os
import sys
import pytest

# Add parent directory to sys.path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import data
import main
import trainer


MICRO_FLAGS = ["--corpus-vocab-size", "20", "--model-preset", "micro", "--model-max-positions", "16",
               "--train-batch-size", "4", "--train-log-every", "1"]


def read_csv_rows(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    return lines[0], lines[1:]


@pytest.fixture
def synth(tmp_path):
    """A small generated corpus directory."""
    out = tmp_path / "synth"
    code = main.dispatch(["gen-synth", "--out", str(out), "--corpus-samples", "24", "--corpus-test-samples", "6",
                          "--corpus-min-len", "3", "--corpus-max-len", "6", "--corpus-vocab-size", "20"])
    assert code == 0
    yield out


class TestParser:
    """Tests for argument parsing and flag mapping."""

    def test_flag_for(self):
        assert main.flag_for("augment.alpha_shu") == "--augment-alpha-shu"
        assert main.flag_for("train.no_aug") == "--train-no-aug"

    def test_keys_for_namespaces(self):
        keys = main.keys_for(("beam", "corpus.task"))
        assert keys == ["corpus.task", "beam.size", "beam.length_penalty", "beam.max_len"]
        assert "seed" not in main.keys_for(("corpus",))

    def test_bare_bool_flag(self):
        args = main.build_parser().parse_args(["train", "--input", "c.tsv", "--out", "run", "--train-no-aug"])
        assert main.resolve_settings(args).get("train.no_aug") is True

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main.dispatch(["gen-synth", "--out", "x", "--beam-size", "3"]) == 2
        assert main.dispatch(["frobnicate"]) == 2

    def test_checkpoint_names(self):
        assert main._checkpoint_arg("bliss=runs/a.ckpt")[0] == "bliss"
        assert main._checkpoint_arg("runs/vanilla.ckpt")[0] == "vanilla"


class TestCommands:
    """Subcommands run through dispatch."""

    def test_gen_synth_is_deterministic(self, synth, tmp_path):
        again = tmp_path / "again"
        main.dispatch(["gen-synth", "--out", str(again), "--corpus-samples", "24", "--corpus-test-samples", "6",
                       "--corpus-min-len", "3", "--corpus-max-len", "6", "--corpus-vocab-size", "20"])
        for name in ("train.tsv", "test.tsv", "vocab.txt"):
            assert (again / name).read_bytes() == (synth / name).read_bytes()
        assert len((synth / "test.tsv").read_text(encoding="utf-8").splitlines()) == 6

    def test_perturb_is_deterministic(self, synth, tmp_path):
        outputs = []
        for name in ("a.tsv", "b.tsv"):
            path = tmp_path / name
            code = main.dispatch(["perturb", "--input", str(synth / "train.tsv"), "--out", str(path),
                                  "--corpus-vocab-size", "20", "--augment-gamma", "0.8", "--threads", "2"])
            assert code == 0
            outputs.append(path.read_bytes())
        assert outputs[0] == outputs[1]
        assert len(outputs[0].decode("utf-8").splitlines()) == 24

    def test_train_decode_score(self, synth, tmp_path, capsys):
        run = tmp_path / "run"
        code = main.dispatch(["train", "--input", str(synth / "train.tsv"), "--out", str(run),
                              "--corpus-vocab-size", "20", "--model-preset", "micro", "--model-max-positions", "16",
                              "--train-max-steps", "3", "--train-batch-size", "4", "--train-log-every", "1"])
        assert code == 0
        assert (run / "checkpoint.ckpt").exists()
        assert (run / "config.txt").exists()
        assert [row["step"] for row in trainer.read_metrics(run / "metrics.csv")] == [1.0, 2.0, 3.0]

        hyp = tmp_path / "hyp.txt"
        code = main.dispatch(["decode", "--checkpoint", str(run / "checkpoint.ckpt"), "--input",
                              str(synth / "test.tsv"), "--out", str(hyp), "--beam-size", "2", "--beam-max-len", "8"])
        assert code == 0
        assert len(hyp.read_text(encoding="utf-8").splitlines()) == 6

        capsys.readouterr()
        assert main.dispatch(["score-bleu", "--hyp", str(synth / "test.tsv"), "--ref", str(synth / "test.tsv")]) == 0
        assert "BLEU = " in capsys.readouterr().out

    def test_runtime_failures_return_one(self, tmp_path, capsys):
        assert main.dispatch(["perturb", "--input", str(tmp_path / "absent.tsv"), "--out",
                              str(tmp_path / "p.tsv")]) == 1
        assert "error:" in capsys.readouterr().err
        assert main.dispatch(["gen-synth", "--out", str(tmp_path / "g"), "--corpus-vocab-size", "3"]) == 1

    def test_unexpected_errors_return_one(self, tmp_path, monkeypatch, capsys):
        def broken(args, settings):
            raise ValueError("malformed input")

        monkeypatch.setitem(main.HANDLERS, "gen-synth", broken)
        assert main.dispatch(["gen-synth", "--out", str(tmp_path / "g")]) == 1
        assert "error: malformed input" in capsys.readouterr().err

    def test_train_is_byte_reproducible(self, synth, tmp_path):
        runs = [tmp_path / "first", tmp_path / "second"]
        for run in runs:
            code = main.dispatch(["train", "--input", str(synth / "train.tsv"), "--out", str(run),
                                  "--train-max-steps", "3", *MICRO_FLAGS])
            assert code == 0
        for name in ("metrics.csv", "checkpoint.ckpt", "config.txt"):
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name


class TestVocabularyCommands:
    """Text corpora through build-vocab, encode, train --vocab and decode --text-out."""

    @pytest.fixture
    def text_corpus(self, tmp_path):
        source = tmp_path / "source.txt"
        target = tmp_path / "target.txt"
        source.write_text("a b c\n\nc a\nb b a c\n", encoding="utf-8")
        target.write_text("c b a\nb\na c\nc a b b\n", encoding="utf-8")
        vocab = tmp_path / "vocab.txt"
        assert main.dispatch(["build-vocab", str(source), str(target), "--out", str(vocab)]) == 0
        corpus = tmp_path / "corpus.tsv"
        assert main.dispatch(["encode", "--vocab", str(vocab), "--source", str(source), "--target", str(target),
                              "--out", str(corpus)]) == 0
        yield vocab, corpus

    def test_encode_drops_blank_pairs(self, text_corpus):
        vocab_path, corpus = text_corpus
        vocab = data.Vocabulary.load(vocab_path)
        samples = data.load_corpus(corpus)
        assert len(samples) == 3
        assert vocab.decode_ids(samples[0].source) == "a b c"
        assert vocab.decode_ids(samples[2].target) == "c a b b"

    def test_train_and_decode_with_vocab(self, text_corpus, tmp_path):
        vocab_path, corpus = text_corpus
        vocab = data.Vocabulary.load(vocab_path)
        run = tmp_path / "run"
        code = main.dispatch(["train", "--input", str(corpus), "--vocab", str(vocab_path), "--out", str(run),
                              "--model-preset", "micro", "--train-max-steps", "2", "--train-batch-size", "2"])
        assert code == 0
        assert f"corpus.vocab_size = {len(vocab)}\n" in (run / "config.txt").read_text(encoding="utf-8")

        ids_out, text_out = tmp_path / "hyp.ids", tmp_path / "hyp.txt"
        code = main.dispatch(["decode", "--checkpoint", str(run / "checkpoint.ckpt"), "--input", str(corpus),
                              "--out", str(ids_out), "--vocab", str(vocab_path), "--text-out", str(text_out),
                              "--beam-size", "1", "--beam-max-len", "6"])
        assert code == 0
        lines = text_out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 3
        assert all(token in vocab.tokens for line in lines for token in line.split())

    def test_vocab_conflicts_are_errors(self, text_corpus, tmp_path, capsys):
        vocab_path, corpus = text_corpus
        code = main.dispatch(["train", "--input", str(corpus), "--vocab", str(vocab_path), "--out",
                              str(tmp_path / "run"), "--corpus-vocab-size", "20"])
        assert code == 1
        code = main.dispatch(["decode", "--checkpoint", str(tmp_path / "absent.ckpt"), "--input", str(corpus),
                              "--out", str(tmp_path / "hyp.ids"), "--text-out", str(tmp_path / "hyp.txt")])
        assert code == 1
        assert "--text-out needs --vocab" in capsys.readouterr().err


class TestOfflinePerturbation:
    """train --perturbed reads the file written by perturb."""

    def test_train_on_perturbed_file(self, synth, tmp_path):
        perturbed = tmp_path / "perturbed.tsv"
        assert main.dispatch(["perturb", "--input", str(synth / "train.tsv"), "--out", str(perturbed),
                              "--corpus-vocab-size", "20", "--augment-gamma", "0.8"]) == 0
        run = tmp_path / "run"
        code = main.dispatch(["train", "--perturbed", str(perturbed), "--out", str(run),
                              "--train-max-steps", "2", *MICRO_FLAGS])
        assert code == 0
        assert [row["step"] for row in trainer.read_metrics(run / "metrics.csv")] == [1.0, 2.0]

    def test_train_needs_exactly_one_corpus(self, synth, tmp_path):
        args = ["train", "--out", str(tmp_path / "run"), "--train-max-steps", "1", *MICRO_FLAGS]
        assert main.dispatch(args) == 1
        both = ["--input", str(synth / "train.tsv"), "--perturbed", str(synth / "train.tsv")]
        assert main.dispatch(args + both) == 1


class TestEvaluationCommands:
    """noise-eval, probe, ablate and sweep on micro runs."""

    @pytest.fixture
    def checkpoint(self, synth, tmp_path):
        run = tmp_path / "run"
        assert main.dispatch(["train", "--input", str(synth / "train.tsv"), "--out", str(run),
                              "--train-max-steps", "2", *MICRO_FLAGS]) == 0
        yield run / "checkpoint.ckpt"

    def test_noise_eval(self, synth, checkpoint, tmp_path):
        report = tmp_path / "noise.csv"
        code = main.dispatch(["noise-eval", "--input", str(synth / "test.tsv"), "--out", str(report),
                              "--checkpoint", f"micro={checkpoint}", "--checkpoint", str(checkpoint),
                              "--noise-kind", "all", "--noise-ratios", "0,0.2",
                              "--beam-size", "1", "--beam-max-len", "8"])
        assert code == 0
        header, rows = read_csv_rows(report)
        assert header == "model,task,noise_kind,ratio,score,scaled_score"
        assert len(rows) == 2 * 2 * 2
        assert {row.split(",")[0] for row in rows} == {"micro", "checkpoint"}

    def test_probe(self, synth, checkpoint, tmp_path):
        report = tmp_path / "probe.csv"
        code = main.dispatch(["probe", "--checkpoint", str(checkpoint), "--input", str(synth / "train.tsv"),
                              "--out", str(report), "--probe-task", "selen", "--probe-epochs", "2",
                              "--probe-hidden", "8", "--probe-valid-fraction", "0.25"])
        assert code == 0
        header, rows = read_csv_rows(report)
        assert header == "task,accuracy"
        assert len(rows) == 1
        assert rows[0].startswith("selen,")
        assert 0.0 <= float(rows[0].split(",")[1]) <= 1.0

    def test_ablate(self, synth, tmp_path):
        out = tmp_path / "ablation"
        code = main.dispatch(["ablate", "--input", str(synth / "train.tsv"), "--test", str(synth / "test.tsv"),
                              "--out", str(out), "--train-max-steps", "2", *MICRO_FLAGS,
                              "--experiment-variants", "vanilla,-aug-smooth", "--experiment-seeds", "1",
                              "--noise-ratios", "0,0.2", "--beam-size", "1", "--beam-max-len", "8"])
        assert code == 0
        header, rows = read_csv_rows(out / "ablation.csv")
        assert header == "variant,seed,noise_kind,ratio,score,scaled_score"
        assert len(rows) == 2 * 2
        header, summary = read_csv_rows(out / "ablation_summary.csv")
        assert header == "variant,noise_kind,ratio,score,scaled_score"
        assert len(summary) == 2 * 2
        assert len(list(out.glob("*/seed1/checkpoint.ckpt"))) == 2

    def test_sweep(self, synth, tmp_path):
        out = tmp_path / "sweep"
        code = main.dispatch(["sweep", "--input", str(synth / "train.tsv"), "--test", str(synth / "test.tsv"),
                              "--out", str(out), "--train-max-steps", "2", *MICRO_FLAGS,
                              "--experiment-sweep-params", "gamma", "--experiment-seeds", "1",
                              "--beam-size", "1", "--beam-max-len", "8"])
        assert code == 0
        header, rows = read_csv_rows(out / "sweep.csv")
        assert header == "parameter,value,seed,score"
        assert len(rows) == 1 + 5
        assert rows[0].startswith("vanilla,,")
        assert [float(row.split(",")[1]) for row in rows[1:]] == pytest.approx([0.15, 0.225, 0.3, 0.375, 0.45])
