"""
Multi-run experiments: the ablation grid and the hyper-parameter
sensitivity sweep. Every run is trained from scratch with its own seed and
scored with the noise-injection protocol in evaluation.py.
"""
import logging
from pathlib import Path

import numpy as np

import utils
from evaluation import BeamConfig, noise_eval, noise_kinds, write_report
from trainer import TrainConfig, train
from utils import ConfigError

logger = logging.getLogger(__name__)

# Settings overrides per ablation variant; "vanilla" is the reference row
ABLATIONS = {
    "vanilla": {"train.no_aug": True},
    "full": {},
    "-aug-smooth": {"train.clean_nll": True, "train.no_smooth": True},
    "-smooth": {"train.no_smooth": True},
    "-token": {"train.no_token": True},
    "-pos": {"train.no_pos": True},
}

ABLATION_HEADER = ["variant", "seed", "noise_kind", "ratio", "score", "scaled_score"]
SUMMARY_HEADER = ["variant", "noise_kind", "ratio", "score", "scaled_score"]
SWEEP_HEADER = ["parameter", "value", "seed", "score"]
SWEEP_PARAMS = ("gamma", "alpha_shu", "alpha_rep")
SWEEP_STEPS = 5


def run_seeds(settings):
    """Seeds of a multi-seed experiment: seed, seed + 1, ..."""
    base = settings.get("seed")
    return [base + k for k in range(settings.get("experiment.seeds"))]


def variant_settings(settings, variant):
    """Copy of `settings` with the ablation switches of `variant` applied."""
    if variant not in ABLATIONS:
        raise ConfigError(f"Unknown ablation variant {variant!r}; expected one of {tuple(ABLATIONS)}")
    variant_config = settings.copy()
    variant_config.update(ABLATIONS[variant])
    return variant_config


def train_run(settings, corpus, vocab_size, seed, out_dir=None, callback=None):
    """Train one model from `settings` with the run seed replaced by `seed`."""
    run_config = settings.copy()
    run_config.set("seed", seed)
    config = TrainConfig.from_settings(run_config, vocab_size, out_dir)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        run_config.save(Path(out_dir) / "config.txt")
    model, _ = train(config, corpus, vocab_size, callback=callback)
    return model


def run_ablation(settings, train_corpus, test_corpus, vocab_size, out_dir=None, callback=None):
    """
    Train every configured variant for every seed and score it on clean and noised test data.

    Args:
        settings (Settings): Base run settings (experiment.*, noise.*, beam.* are read here)
        train_corpus (list[Sample]): Training samples
        test_corpus (list[Sample]): Test samples
        vocab_size (int): Vocabulary size
        out_dir (str | Path | None): Where per-run checkpoints and the CSV tables go
        callback (callable): Optional progress callback(status, progress, message)

    Returns:
        tuple: (per-seed rows, per-variant mean rows)
    """
    variants = settings.get_list("experiment.variants")
    seeds = run_seeds(settings)
    kinds = noise_kinds(settings.get("noise.kind"))
    ratios = settings.get_list("noise.ratios", float)
    beam = BeamConfig.from_settings(settings)
    task = settings.get("corpus.task")

    rows = []
    total = len(variants) * len(seeds)
    for number, (variant, seed) in enumerate(((v, s) for v in variants for s in seeds), start=1):
        if callback:
            callback("ablation", int(100 * (number - 1) / total), f"Training {variant} (seed {seed})")
        run_dir = Path(out_dir) / utils.sanitize_filename(variant) / f"seed{seed}" if out_dir is not None else None
        model = train_run(variant_settings(settings, variant), train_corpus, vocab_size, seed, run_dir)
        for row in noise_eval({variant: model}, test_corpus, task, kinds, ratios, beam,
                              seed=seed, threads=settings.get("threads")):
            rows.append({"variant": variant, "seed": seed, **row})

    summary = summarize(rows, ["variant", "noise_kind", "ratio"])
    if out_dir is not None:
        write_report(Path(out_dir) / "ablation.csv", rows, ABLATION_HEADER)
        write_report(Path(out_dir) / "ablation_summary.csv", summary, SUMMARY_HEADER)
    if callback:
        callback("complete", 100, f"Ablation grid finished ({total} runs)")
    return rows, summary


def summarize(rows, keys, values=("score", "scaled_score")):
    """Mean of `values` over rows that share `keys`, in first-seen order."""
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[key] for key in keys), []).append(row)
    summary = []
    for group_key, members in groups.items():
        entry = dict(zip(keys, group_key))
        for value in values:
            entry[value] = float(np.mean([member[value] for member in members]))
        summary.append(entry)
    return summary


def sweep_values(optimum, steps=SWEEP_STEPS):
    """`steps` evenly spaced values from half to one and a half times `optimum`."""
    return [float(v) for v in np.linspace(0.5 * optimum, 1.5 * optimum, steps)]


def run_sweep(settings, train_corpus, test_corpus, vocab_size, out_dir=None, callback=None):
    """
    Vary gamma / alpha_shu / alpha_rep one at a time around the configured values.

    Every run is scored on the clean test set; a vanilla run per seed is
    added as the baseline (parameter "vanilla", empty value).

    Returns:
        list[dict]: Rows with parameter, value, seed, score
    """
    params = settings.get_list("experiment.sweep_params")
    unknown = [name for name in params if name not in SWEEP_PARAMS]
    if unknown:
        raise ConfigError(f"Cannot sweep {unknown}; expected a subset of {SWEEP_PARAMS}")
    seeds = run_seeds(settings)
    beam = BeamConfig.from_settings(settings)
    task = settings.get("corpus.task")

    def clean_score(run_settings, seed):
        model = train_run(run_settings, train_corpus, vocab_size, seed)
        row = noise_eval({"sweep": model}, test_corpus, task, ("replace",), (0.0,), beam,
                         seed=seed, threads=settings.get("threads"))[0]
        return row["score"]

    total = len(seeds) * (1 + SWEEP_STEPS * len(params))
    rows = []
    for seed in seeds:
        rows.append({"parameter": "vanilla", "value": "", "seed": seed,
                     "score": clean_score(variant_settings(settings, "vanilla"), seed)})
    for name in params:
        key = f"augment.{name}"
        for value in sweep_values(settings.get(key)):
            run_settings = settings.copy()
            if not run_settings.set(key, value):
                raise ConfigError(f"sweep value {value:g} for {key} is out of range")
            for seed in seeds:
                score = clean_score(run_settings, seed)
                rows.append({"parameter": name, "value": value, "seed": seed, "score": score})
                logger.info(f"sweep {name}={value:g} seed {seed}: score {score:.2f}")
                if callback:
                    callback("sweep", int(100 * len(rows) / total), f"{name}={value:g} seed {seed}: {score:.2f}")

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_report(Path(out_dir) / "sweep.csv", rows, SWEEP_HEADER)
    return rows
