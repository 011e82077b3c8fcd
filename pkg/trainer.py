"""
Optimization loop: online augmentation, Adam with inverse-square-root warmup,
gradient clipping, metrics logging, checkpointing and ablation switches.
"""
import io
import csv
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

import tensor as T
import utils
from augmentor import AugmentConfig, augment_sentence, build_supervision, sentence_rng
from model import Batch, ModelConfig, Seq2SeqTransformer, load_checkpoint, save_checkpoint
from utils import ConfigError, DivergenceError, UsageError

logger = logging.getLogger(__name__)

METRICS_HEADER = ["step", "lr", "loss_total", "loss_nll", "loss_token", "loss_pos", "token_head_acc", "pos_head_acc"]


@dataclass
class TrainConfig:
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    max_steps: int = 2000
    batch_size: int = 32
    warmup: int = 400
    lr_factor: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 1
    log_every: int = 50
    checkpoint_every: int = 500
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None
    no_aug: bool = False
    no_smooth: bool = False
    no_token: bool = False
    no_pos: bool = False
    token_on_replaced_only: bool = False
    clean_nll: bool = False
    threads: int = 1

    @classmethod
    def from_settings(cls, settings, vocab_size, out_dir=None):
        out_dir = Path(out_dir) if out_dir is not None else None
        return cls(
            augment=AugmentConfig.from_settings(settings),
            model=ModelConfig.from_settings(settings, vocab_size),
            max_steps=settings.get("train.max_steps"),
            batch_size=settings.get("train.batch_size"),
            warmup=settings.get("train.warmup"),
            lr_factor=settings.get("train.lr_factor"),
            beta1=settings.get("train.beta1"),
            beta2=settings.get("train.beta2"),
            adam_eps=settings.get("train.adam_eps"),
            clip_norm=settings.get("train.clip_norm"),
            seed=settings.get("seed"),
            log_every=settings.get("train.log_every"),
            checkpoint_every=settings.get("train.checkpoint_every"),
            checkpoint_path=out_dir / "checkpoint.ckpt" if out_dir else None,
            metrics_path=out_dir / "metrics.csv" if out_dir else None,
            no_aug=settings.get("train.no_aug"),
            no_smooth=settings.get("train.no_smooth"),
            no_token=settings.get("train.no_token"),
            no_pos=settings.get("train.no_pos"),
            token_on_replaced_only=settings.get("train.token_on_replaced_only"),
            clean_nll=settings.get("train.clean_nll"),
            threads=settings.get("threads"),
        )

    def validate(self):
        self.augment.validate()
        self.model.validate()
        if self.warmup < 1:
            raise ConfigError(f"warmup must be at least 1, got {self.warmup}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be non-negative, got {self.max_steps}")

    def effective_augment(self):
        """Augmentation config with the ablation switches and run seed folded in."""
        return replace(
            self.augment,
            no_aug=self.no_aug or self.augment.no_aug,
            no_smooth=self.no_smooth or self.augment.no_smooth,
            seed=self.seed,
        )

    def effective_lambdas(self):
        """(lambda_token, lambda_pos) after -token / -pos / -aug ablations."""
        lambda_token = 0.0 if (self.no_token or self.no_aug) else self.model.lambda_token
        lambda_pos = 0.0 if (self.no_pos or self.no_aug) else self.model.lambda_pos
        return lambda_token, lambda_pos


def lr_at(step, d_model, warmup, factor):
    """factor * e^-0.5 * min(step^-0.5, step * warmup^-1.5); steps count from 1."""
    if step < 1:
        raise UsageError(f"lr_at: step counts from 1, got {step}")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_parameters(cls, params):
        return cls(
            {name: np.zeros_like(p.data) for name, p in params.items()},
            {name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def to_tensors(self):
        tensors = {f"adam.m.{name}": m for name, m in self.first_moment.items()}
        tensors.update({f"adam.v.{name}": v for name, v in self.second_moment.items()})
        return tensors

    @classmethod
    def from_tensors(cls, tensors, params, step):
        state = cls(step=step)
        for name in params:
            state.first_moment[name] = tensors[f"adam.m.{name}"].copy()
            state.second_moment[name] = tensors[f"adam.v.{name}"].copy()
        return state


def clip_gradients(grads, clip_norm):
    """
    Scale all gradients together so their global L2 norm is at most `clip_norm`.

    Returns:
        tuple: (clipped grads dict, norm before clipping)
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if clip_norm and norm > clip_norm:
        factor = clip_norm / norm
        return {name: g * factor for name, g in grads.items()}, norm
    return grads, norm


def adam_step(params, state, lr, beta1=0.9, beta2=0.98, eps=1e-9, clip_norm=None):
    """
    Clip, then apply one bias-corrected Adam update in place.

    Args:
        params (dict[str, Tensor]): Parameters; missing grads count as zero
        state (OptimizerState): Moments and step counter, updated in place
        lr (float): Learning rate for this step
        clip_norm (float | None): Global gradient-norm cap

    Returns:
        float: Gradient norm before clipping
    """
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    grads, norm = clip_gradients(grads, clip_norm)

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(param.data))
        v = state.second_moment.setdefault(name, np.zeros_like(param.data))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param.data = param.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return norm


class Trainer:
    """Trains a Seq2SeqTransformer on a corpus with online augmentation."""

    def __init__(self, config, corpus, vocab_size, outcomes=None):
        """
        Initialize the trainer.

        Args:
            config (TrainConfig): Training configuration
            corpus (list[Sample]): Training samples
            vocab_size (int): Vocabulary size (must match config.model.vocab_size)
            outcomes (list[PerturbationOutcome] | None): Fixed offline perturbations, one per
                sample; replaces online augmentation when given
        """
        config.validate()
        if not corpus:
            raise ConfigError("training corpus is empty")
        if outcomes is not None:
            if len(outcomes) != len(corpus):
                raise ConfigError(f"{len(outcomes)} perturbations for {len(corpus)} samples")
            if config.clean_nll:
                raise ConfigError("clean_nll needs the clean sources of online augmentation")
        if vocab_size != config.model.vocab_size:
            raise ConfigError(f"vocab size {vocab_size} does not match model config {config.model.vocab_size}")
        self.config = config
        self.corpus = corpus
        self.outcomes = outcomes
        self.vocab_size = vocab_size
        self.logger = logging.getLogger(__name__)
        self.augment_config = config.effective_augment()
        self.lambda_token, self.lambda_pos = config.effective_lambdas()
        self.model = Seq2SeqTransformer(config.model, seed=config.seed)
        self.state = OptimizerState.for_parameters(self.model.params)
        self._orders = {}

    def _epoch_order(self, epoch):
        if epoch not in self._orders:
            self._orders = {epoch: utils.make_rng(self.config.seed, "order", epoch).permutation(len(self.corpus))}
        return self._orders[epoch]

    def batch_items(self, step):
        """(epoch, corpus index) pairs of the sentences seen at `step`."""
        size = len(self.corpus)
        items = []
        for k in range(self.config.batch_size):
            position = (step - 1) * self.config.batch_size + k
            epoch = position // size
            items.append((epoch, int(self._epoch_order(epoch)[position % size])))
        return items

    def _augment(self, item):
        epoch, index = item
        if self.outcomes is not None:
            return self.outcomes[index]
        rng = sentence_rng(self.augment_config.seed, index, epoch)
        return augment_sentence(self.corpus[index].source, self.augment_config, rng, self.vocab_size)

    def make_batch(self, step):
        """Freshly augmented batch for `step`, with its supervision labels."""
        items = self.batch_items(step)
        if self.config.threads > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                outcomes = list(pool.map(self._augment, items))
        else:
            outcomes = [self._augment(item) for item in items]
        supervisions = [
            build_supervision(
                outcome,
                len(outcome.perturbed),
                self.config.model.max_positions,
                self.config.token_on_replaced_only,
            )
            for outcome in outcomes
        ]
        targets = [self.corpus[index].target for _, index in items]
        return Batch.collate([o.perturbed for o in outcomes], targets, supervisions), outcomes

    def clean_batch(self, step):
        """Unperturbed batch for `step`, same sentences as make_batch."""
        items = self.batch_items(step)
        return Batch.collate([self.corpus[i].source for _, i in items], [self.corpus[i].target for _, i in items])

    def train_step(self, step):
        """One forward/backward/update; returns (lr, loss components)."""
        batch, _ = self.make_batch(step)
        self.model.zero_grad()
        dropout_rng = utils.make_rng(self.config.seed, "dropout", step)
        clean_src = self.clean_batch(step).src if self.config.clean_nll else None
        total, components = self.model.bliss_loss(batch, dropout_rng, self.lambda_token, self.lambda_pos, clean_src)
        T.backward(total)
        lr = lr_at(step, self.config.model.d_model, self.config.warmup, self.config.lr_factor)
        adam_step(
            self.model.params,
            self.state,
            lr,
            self.config.beta1,
            self.config.beta2,
            self.config.adam_eps,
            self.config.clip_norm,
        )
        return lr, components

    def save(self, path, step):
        save_checkpoint(
            path,
            self.model,
            extra_tensors=self.state.to_tensors(),
            metadata={"step": step, "seed": self.config.seed},
        )

    def resume(self, path):
        """Restore parameters, optimizer moments and the step counter from a checkpoint."""
        model, extra, metadata = load_checkpoint(path)
        if model.config != self.config.model:
            raise ConfigError(f"checkpoint model config {model.config} differs from run config")
        self.model = model
        step = int(metadata.get("step", 0))
        self.state = OptimizerState.from_tensors(extra, model.params, step)
        self.logger.info(f"Resumed from {path} at step {step}")
        return step

    def train(self, callback=None, resume_from=None):
        """
        Run the optimization loop.

        Args:
            callback (callable): Optional progress callback(status, progress, message)
            resume_from (str | Path | None): Checkpoint to continue from

        Returns:
            dict: Run results with step count, artifact paths and the last metrics row
        """
        cfg = self.config
        start = self.resume(resume_from) if resume_from else 0
        metrics_file = None
        writer = None
        if cfg.metrics_path is not None:
            cfg.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            appending = bool(resume_from) and cfg.metrics_path.exists()
            if appending:
                truncate_metrics(cfg.metrics_path, start)
            metrics_file = open(cfg.metrics_path, "a" if appending else "w", encoding="utf-8", newline="")
            writer = csv.writer(metrics_file, lineterminator="\n")
            if not appending:
                writer.writerow(METRICS_HEADER)

        result = {"success": False, "steps": start, "checkpoint": None, "metrics": None, "last_row": None}
        window = self._empty_window()
        try:
            for step in range(start + 1, cfg.max_steps + 1):
                try:
                    lr, components = self.train_step(step)
                except DivergenceError:
                    self.logger.error(f"Training diverged at step {step}; last checkpoint kept")
                    raise
                self._accumulate(window, components)

                if step % cfg.log_every == 0 or step == cfg.max_steps:
                    row = self._metrics_row(step, lr, window)
                    window = self._empty_window()
                    result["last_row"] = row
                    if writer is not None:
                        writer.writerow(row)
                        metrics_file.flush()
                    self.logger.info(
                        f"step {step}: loss {row[2]:.4f} (nll {row[3]:.4f}, token {row[4]:.4f}, "
                        f"pos {row[5]:.4f}) token acc {row[6]:.3f} pos acc {row[7]:.3f}"
                    )
                    if callback:
                        callback("training", int(100 * step / cfg.max_steps), f"Step {step} of {cfg.max_steps}")

                if cfg.checkpoint_path is not None and step % cfg.checkpoint_every == 0 and step != cfg.max_steps:
                    self.save(cfg.checkpoint_path, step)
                result["steps"] = step

            if cfg.checkpoint_path is not None:
                self.save(cfg.checkpoint_path, result["steps"])
                result["checkpoint"] = str(cfg.checkpoint_path)
        finally:
            if metrics_file is not None:
                metrics_file.close()
                result["metrics"] = str(cfg.metrics_path)

        result["success"] = True
        if callback:
            callback("complete", 100, f"Trained {result['steps']} steps")
        return result

    @staticmethod
    def _empty_window():
        return {"count": 0, "total": 0.0, "nll": 0.0, "token": 0.0, "pos": 0.0,
                "token_correct": 0, "token_total": 0, "pos_correct": 0, "pos_total": 0}

    @staticmethod
    def _accumulate(window, components):
        window["count"] += 1
        for key in ("total", "nll", "token", "pos"):
            window[key] += components[key]
        for key in ("token_correct", "token_total", "pos_correct", "pos_total"):
            window[key] += components[key]

    @staticmethod
    def _metrics_row(step, lr, window):
        count = max(window["count"], 1)
        token_acc = window["token_correct"] / window["token_total"] if window["token_total"] else 0.0
        pos_acc = window["pos_correct"] / window["pos_total"] if window["pos_total"] else 0.0
        return [step, lr, window["total"] / count, window["nll"] / count, window["token"] / count,
                window["pos"] / count, token_acc, pos_acc]


def train(config, corpus, vocab_size, callback=None, resume_from=None, outcomes=None):
    """Train a model and return (model, result dict)."""
    trainer = Trainer(config, corpus, vocab_size, outcomes)
    result = trainer.train(callback=callback, resume_from=resume_from)
    return trainer.model, result


def read_metrics(path):
    """Parse a metrics CSV into a list of dicts with float values."""
    with open(utils.require_readable(path), "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{key: float(value) for key, value in row.items()} for row in reader]


def truncate_metrics(path, last_step):
    """Rewrite a metrics CSV without the rows logged after `last_step`; returns the rows dropped."""
    read_metrics(path)  # header check
    with open(path, "r", encoding="utf-8", newline="") as f:
        header, *rows = list(csv.reader(f))
    kept = [row for row in rows if float(row[0]) <= last_step]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(kept)
    utils.atomic_write_text(path, buffer.getvalue())
    dropped = len(rows) - len(kept)
    if dropped:
        logger.info(f"Dropped {dropped} metrics rows after step {last_step} from {path}")
    return dropped
