"""
BLISS - robust sequence-to-sequence training with self-supervised input representations.
Main entry point for the command-line tool.
"""
import sys
import argparse
import logging
from pathlib import Path

import augmentor
import data
import evaluation
import experiments
import utils
import version
from model import load_checkpoint
from settings import Settings
from trainer import TrainConfig, train
from utils import BlissError, ConfigError, UsageError, setup_logging

logger = logging.getLogger(__name__)

# Config namespaces whose keys become flags of each subcommand, and whether --out names a directory
COMMANDS = {
    "gen-synth": {"namespaces": ("corpus", "model.max_positions"), "out_dir": True,
                  "help": "Generate synthetic train/test corpora and their vocabulary"},
    "build-vocab": {"namespaces": (), "out_dir": False,
                    "help": "Build a vocabulary from whitespace-tokenized text files"},
    "encode": {"namespaces": (), "out_dir": False,
               "help": "Encode parallel text files into an id corpus"},
    "perturb": {"namespaces": ("corpus.vocab_size", "augment", "train.no_aug", "train.no_smooth"), "out_dir": False,
                "help": "Write an offline perturbed copy of a corpus"},
    "train": {"namespaces": ("corpus.vocab_size", "augment", "model", "train"), "out_dir": True,
              "help": "Train a model with online augmentation"},
    "decode": {"namespaces": ("beam",), "out_dir": False,
               "help": "Decode source sentences with a trained model"},
    "score-bleu": {"namespaces": (), "out_dir": False,
                   "help": "Corpus BLEU of a hypothesis file against a reference file"},
    "noise-eval": {"namespaces": ("corpus.task", "beam", "noise"), "out_dir": False,
                   "help": "Score models on clean and noise-injected test data"},
    "probe": {"namespaces": ("probe",), "out_dir": False,
              "help": "Probe frozen encoder representations with an MLP classifier"},
    "ablate": {"namespaces": ("corpus", "augment", "model", "train", "beam", "noise", "experiment"), "out_dir": True,
               "help": "Run the ablation grid and write a comparison table"},
    "sweep": {"namespaces": ("corpus", "augment", "model", "train", "beam", "experiment"), "out_dir": True,
              "help": "Run the gamma/alpha sensitivity sweep"},
}

SHARED_KEYS = ("seed", "threads")


def flag_for(key):
    """Command-line flag mirroring a config key, e.g. augment.alpha_shu -> --augment-alpha-shu."""
    return "--" + key.replace(".", "-").replace("_", "-")


def keys_for(namespaces):
    """Config keys covered by a list of namespaces or exact keys."""
    keys = []
    for key in Settings.DEFAULT_SETTINGS:
        if key in SHARED_KEYS:
            continue
        if any(key == ns or key.startswith(ns + ".") for ns in namespaces):
            keys.append(key)
    return keys


def _add_config_flags(parser, keys):
    group = parser.add_argument_group("config overrides")
    for key in keys:
        default = Settings.DEFAULT_SETTINGS[key]
        if isinstance(default, bool):
            # Bare flag means true; an explicit value is also accepted
            group.add_argument(flag_for(key), dest=key, nargs="?", const="true", metavar="BOOL",
                               help=f"{key} (default {str(default).lower()})")
        else:
            group.add_argument(flag_for(key), dest=key, metavar="VALUE", help=f"{key} (default {default!r})")


def build_parser():
    """Argument parser with one subcommand per pipeline stage."""
    parser = argparse.ArgumentParser(prog="bliss", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {version.get_version()} ({version.get_build_date()})")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, spec in COMMANDS.items():
        sub = subparsers.add_parser(name, help=spec["help"], description=spec["help"])
        sub.add_argument("--config", help="key = value config file")
        sub.add_argument("--seed", dest="seed", metavar="N", help="Base seed for every random stream")
        sub.add_argument("--threads", dest="threads", metavar="N", help="Worker threads (1 is reproducible)")
        sub.add_argument("--out", required=name != "score-bleu",
                         help="Output directory" if spec["out_dir"] else "Output file")
        _add_config_flags(sub, keys_for(spec["namespaces"]))

        if name == "build-vocab":
            sub.add_argument("inputs", nargs="+", help="Tokenized text files")
        if name in ("perturb", "train", "decode", "noise-eval", "probe", "ablate", "sweep"):
            sub.add_argument("--input", required=name != "train", help="Corpus file (source<TAB>target ids)")
        if name in ("encode", "train", "decode"):
            sub.add_argument("--vocab", required=name == "encode", help="Vocabulary file (sets the vocab size)")
        if name == "encode":
            sub.add_argument("--source", required=True, help="Source text file, one sentence per line")
            sub.add_argument("--target", required=True, help="Target text file, aligned with --source")
        if name in ("ablate", "sweep"):
            sub.add_argument("--test", required=True, help="Test corpus file")
        if name == "train":
            sub.add_argument("--resume", help="Checkpoint to continue training from")
            sub.add_argument("--perturbed", help="Offline perturbed corpus to train on instead of --input")
        if name in ("decode", "probe"):
            sub.add_argument("--checkpoint", required=True, help="Model checkpoint")
        if name == "decode":
            sub.add_argument("--text-out", help="Also write hypotheses as text (needs --vocab)")
        if name == "noise-eval":
            sub.add_argument("--checkpoint", required=True, action="append",
                             help="NAME=PATH or PATH; repeat to compare several models")
        if name == "score-bleu":
            sub.add_argument("--hyp", required=True, help="Hypothesis file, one sentence per line")
            sub.add_argument("--ref", required=True, help="Reference file, or a corpus file (target side is used)")
    return parser


def resolve_settings(args):
    """Defaults < presets < config file < command-line flags."""
    settings = Settings(args.config) if args.config else Settings()
    overrides = {
        key: value
        for key, value in vars(args).items()
        if value is not None and key in Settings.DEFAULT_SETTINGS
    }
    settings.update(overrides)
    return settings


def _log_path(args):
    out = Path(args.out) if args.out else Path.cwd()
    if not args.out or COMMANDS[args.command]["out_dir"]:
        return out / "bliss.log"
    return out.parent / "bliss.log"


def _read_sequences(path, column):
    """Whitespace token sequences from a plain file, or from one column of a tab-separated corpus."""
    sequences = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            fields = line.rstrip("\n").split("\t")
            sequences.append(tuple(fields[column if len(fields) > 1 else 0].split()))
    return sequences


def _read_lines(path):
    with open(utils.require_readable(path), "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def _apply_vocab(args, settings):
    """Make corpus.vocab_size agree with --vocab, if given."""
    if not getattr(args, "vocab", None):
        return
    vocab = data.Vocabulary.load(args.vocab)
    if "corpus.vocab_size" in settings.explicit and settings.get("corpus.vocab_size") != len(vocab):
        raise UsageError(f"--corpus-vocab-size {settings.get('corpus.vocab_size')} disagrees with "
                         f"{args.vocab} ({len(vocab)} tokens)")
    if not settings.set("corpus.vocab_size", len(vocab)):
        raise ConfigError(f"vocabulary size {len(vocab)} out of range")


def _checkpoint_arg(value):
    name, sep, path = value.partition("=")
    if not sep:
        return Path(value).stem, Path(value)
    return name, Path(path)


# --- subcommands ---------------------------------------------------------

def cmd_gen_synth(args, settings):
    out = Path(args.out)
    train_spec = data.CorpusSpec.from_settings(settings)
    test_spec = data.CorpusSpec.from_settings(settings, samples=settings.get("corpus.test_samples"), split="test")
    data.save_corpus(out / "train.tsv", data.gen_synthetic(train_spec))
    data.save_corpus(out / "test.tsv", data.gen_synthetic(test_spec))
    data.Vocabulary.synthetic(train_spec.vocab_size).save(out / "vocab.txt")
    return {"success": True, "message": f"Wrote train.tsv, test.tsv and vocab.txt to {out}"}


def cmd_build_vocab(args, settings):
    vocab = data.build_vocab(args.inputs)
    vocab.save(args.out)
    return {"success": True, "message": f"Wrote {len(vocab)} tokens to {args.out}"}


def cmd_perturb(args, settings):
    samples = data.load_corpus(args.input)
    config = augmentor.AugmentConfig.from_settings(settings)
    config.validate()
    outcomes = augmentor.augment_corpus(samples, config, settings.get("corpus.vocab_size"),
                                        threads=settings.get("threads"))
    augmentor.save_perturbed(args.out, samples, outcomes)
    changed = sum(bool(o.records) or o.perturbed != s.source for s, o in zip(samples, outcomes))
    return {"success": True, "message": f"Perturbed {changed} of {len(samples)} sentences into {args.out}"}


def cmd_encode(args, settings):
    vocab = data.Vocabulary.load(args.vocab)
    samples, dropped = data.encode_parallel(vocab, _read_lines(args.source), _read_lines(args.target))
    data.save_corpus(args.out, samples)
    return {"success": True, "message": f"Encoded {len(samples)} sentence pairs ({dropped} dropped) to {args.out}"}


def cmd_train(args, settings):
    out = Path(args.out)
    if bool(args.input) == bool(args.perturbed):
        raise UsageError("train needs exactly one of --input and --perturbed")
    outcomes = None
    if args.perturbed:
        rows = augmentor.load_perturbed(args.perturbed)
        samples = [data.Sample(perturbed, target) for perturbed, target, _ in rows]
        outcomes = [augmentor.PerturbationOutcome(perturbed, records) for perturbed, _, records in rows]
    else:
        samples = data.load_corpus(args.input)
    config = TrainConfig.from_settings(settings, settings.get("corpus.vocab_size"), out)
    settings.save(out / "config.txt")
    _, result = train(config, samples, settings.get("corpus.vocab_size"), callback=_progress,
                      resume_from=args.resume, outcomes=outcomes)
    result["message"] = f"Trained {result['steps']} steps; checkpoint {result['checkpoint']}"
    return result


def cmd_decode(args, settings):
    if args.text_out and not args.vocab:
        raise UsageError("--text-out needs --vocab")
    model, _, _ = load_checkpoint(args.checkpoint)
    vocab = data.Vocabulary.load(args.vocab) if args.vocab else None
    if vocab is not None and len(vocab) != model.config.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens, model expects {model.config.vocab_size}")
    sources = [data.parse_ids(" ".join(seq), number, "source")
               for number, seq in enumerate(_read_sequences(args.input, 0), start=1)]
    config = evaluation.BeamConfig.from_settings(settings)
    hypotheses = evaluation.decode_corpus(model, sources, config, settings.get("threads"))
    unfinished = sum(not h.finished for h in hypotheses)
    text = "".join(data.format_ids(h.tokens) + "\n" for h in hypotheses)
    utils.atomic_write_text(args.out, text)
    if args.text_out:
        data.write_text_side(args.text_out, [h.tokens for h in hypotheses], vocab)
    return {"success": True, "message": f"Decoded {len(hypotheses)} sentences ({unfinished} unfinished) to {args.out}"}


def cmd_score_bleu(args, settings):
    hypotheses = _read_sequences(args.hyp, 0)
    references = _read_sequences(args.ref, 1)
    score = evaluation.corpus_bleu(hypotheses, references)
    print(f"BLEU = {score:.2f}")
    if args.out:
        utils.atomic_write_text(args.out, f"{score!r}\n")
    return {"success": True, "message": f"BLEU {score:.2f} over {len(references)} sentences"}


def cmd_noise_eval(args, settings):
    models = {}
    for value in args.checkpoint:
        name, path = _checkpoint_arg(value)
        if name in models:
            raise UsageError(f"duplicate model name {name!r}")
        models[name], _, _ = load_checkpoint(path)
    samples = data.load_corpus(args.input)
    rows = evaluation.noise_eval(
        models,
        samples,
        settings.get("corpus.task"),
        kinds=evaluation.noise_kinds(settings.get("noise.kind")),
        ratios=settings.get_list("noise.ratios", float),
        beam_config=evaluation.BeamConfig.from_settings(settings),
        seed=settings.get("seed"),
        threads=settings.get("threads"),
    )
    evaluation.write_report(args.out, rows)
    return {"success": True, "message": f"Wrote {len(rows)} rows to {args.out}"}


def cmd_probe(args, settings):
    model, _, _ = load_checkpoint(args.checkpoint)
    samples = data.load_corpus(args.input)
    accuracy = evaluation.probe_task(
        model,
        samples,
        settings.get("probe.task"),
        seed=settings.get("seed"),
        hidden=settings.get("probe.hidden"),
        lr=settings.get("probe.lr"),
        epochs=settings.get("probe.epochs"),
        batch_size=settings.get("probe.batch_size"),
        valid_fraction=settings.get("probe.valid_fraction"),
    )
    row = {"task": settings.get("probe.task"), "accuracy": accuracy}
    evaluation.write_report(args.out, [row], ["task", "accuracy"])
    return {"success": True, "message": f"{row['task']} probe accuracy {accuracy:.4f}"}


def cmd_ablate(args, settings):
    out = Path(args.out)
    settings.save(out / "config.txt")
    _, summary = experiments.run_ablation(
        settings,
        data.load_corpus(args.input),
        data.load_corpus(args.test),
        settings.get("corpus.vocab_size"),
        out,
        callback=_progress,
    )
    for row in summary:
        print(f"{row['variant']:>12}  {row['noise_kind']:<12} {row['ratio']:<5g} "
              f"{row['score']:7.2f}  {row['scaled_score']:.3f}")
    return {"success": True, "message": f"Wrote ablation.csv and ablation_summary.csv to {out}"}


def cmd_sweep(args, settings):
    out = Path(args.out)
    settings.save(out / "config.txt")
    rows = experiments.run_sweep(
        settings,
        data.load_corpus(args.input),
        data.load_corpus(args.test),
        settings.get("corpus.vocab_size"),
        out,
        callback=_progress,
    )
    return {"success": True, "message": f"Wrote {len(rows)} sweep rows to {out / 'sweep.csv'}"}


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "build-vocab": cmd_build_vocab,
    "encode": cmd_encode,
    "perturb": cmd_perturb,
    "train": cmd_train,
    "decode": cmd_decode,
    "score-bleu": cmd_score_bleu,
    "noise-eval": cmd_noise_eval,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def _progress(status, progress, message):
    logger.info(f"[{status} {progress:3d}%] {message}")


def dispatch(argv):
    """
    Run one subcommand.

    Args:
        argv (list): Arguments without the program name

    Returns:
        int: 0 on success, 1 on a runtime failure, 2 on a usage error
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        setup_logging(_log_path(args))
        logger.info(f"Starting bliss v{version.get_version()} {args.command}")
        settings = resolve_settings(args)
        _apply_vocab(args, settings)
        print(f"# bliss {version.get_version()} {args.command}")
        print(settings.dump(), end="", flush=True)
        result = HANDLERS[args.command](args, settings)
    except (BlissError, OSError, ValueError) as e:
        logger.exception(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1

    logger.info(result["message"])
    return 0 if result["success"] else 1


def main():
    """Main entry point."""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
