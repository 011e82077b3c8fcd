"""
Encoder-decoder transformer with token/position reconstruction heads.

The encoder reads `<bos> x~ <eos>`; two softmax classifiers on its outputs
predict, at perturbed positions, the original token and (for shuffled
positions) the original absolute position of the token now in the slot.
The combined objective is L_nll + lambda_token * L_token + lambda_pos * L_pos.
"""
import io
import math
import struct
import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict

import numpy as np

import tensor as T
import utils
import version
from data import BOS_ID, EOS_ID, PAD_ID
from tensor import Tensor
from utils import CheckpointError, ConfigError, DimensionError, DivergenceError

logger = logging.getLogger(__name__)

MODEL_PRESETS = {
    "micro": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ffn": 32},
    "desk": {"d_model": 64, "n_layers": 2, "n_heads": 2, "d_ffn": 128},
    "base": {"d_model": 512, "n_layers": 6, "n_heads": 8, "d_ffn": 2048},
}


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ffn: int = 128
    vocab_size: int = 50
    max_positions: int = 400
    dropout: float = 0.1
    label_smoothing: float = 0.1
    lambda_token: float = 0.005
    lambda_pos: float = 0.005

    @classmethod
    def from_settings(cls, settings, vocab_size):
        return cls(
            d_model=settings.get("model.d_model"),
            n_layers=settings.get("model.n_layers"),
            n_heads=settings.get("model.n_heads"),
            d_ffn=settings.get("model.d_ffn"),
            vocab_size=vocab_size,
            max_positions=settings.get("model.max_positions"),
            dropout=settings.get("model.dropout"),
            label_smoothing=settings.get("model.label_smoothing"),
            lambda_token=settings.get("model.lambda_token"),
            lambda_pos=settings.get("model.lambda_pos"),
        )

    @classmethod
    def preset(cls, name, **overrides):
        if name not in MODEL_PRESETS:
            raise ConfigError(f"Unknown model preset {name!r}; expected one of {tuple(MODEL_PRESETS)}")
        return cls(**{**MODEL_PRESETS[name], **overrides})

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ffn) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.vocab_size < 6:
            raise ConfigError(f"vocab_size must be at least 6, got {self.vocab_size}")
        if self.max_positions < 3:
            raise ConfigError(f"max_positions must be at least 3, got {self.max_positions}")
        if self.lambda_token < 0 or self.lambda_pos < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def sinusoidal_positions(length, d_model):
    """Fixed sine/cosine position encodings, shape [length, d_model]."""
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table


@dataclass
class Batch:
    """Padded model inputs; supervision arrays are aligned to encoder positions."""
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    token_labels: np.ndarray
    token_mask: np.ndarray
    pos_labels: np.ndarray
    pos_mask: np.ndarray

    @classmethod
    def collate(cls, sources, targets, supervisions=None):
        """
        Build a batch from raw id sequences.

        Args:
            sources (list): Source ids (possibly perturbed), no bos/eos
            targets (list): Target ids, no bos/eos
            supervisions (list[Supervision] | None): Per-source labels at source positions

        Returns:
            Batch: `<bos> x <eos>` sources, `<bos> y` decoder inputs, `y <eos>` outputs
        """
        size = len(sources)
        src_len = max(len(s) for s in sources) + 2
        tgt_len = max(len(t) for t in targets) + 1

        src = np.full((size, src_len), PAD_ID, dtype=np.int64)
        tgt_in = np.full((size, tgt_len), PAD_ID, dtype=np.int64)
        tgt_out = np.full((size, tgt_len), PAD_ID, dtype=np.int64)
        token_labels = np.zeros((size, src_len), dtype=np.int64)
        token_mask = np.zeros((size, src_len), dtype=bool)
        pos_labels = np.zeros((size, src_len), dtype=np.int64)
        pos_mask = np.zeros((size, src_len), dtype=bool)

        for b, (source, target) in enumerate(zip(sources, targets)):
            src[b, : len(source) + 2] = [BOS_ID, *source, EOS_ID]
            tgt_in[b, : len(target) + 1] = [BOS_ID, *target]
            tgt_out[b, : len(target) + 1] = [*target, EOS_ID]
            if supervisions is not None:
                sup = supervisions[b]
                # Source position j lives at encoder position j + 1 (after <bos>)
                span = slice(1, len(sup.token_mask) + 1)
                token_labels[b, span] = sup.token_labels
                token_mask[b, span] = sup.token_mask
                pos_labels[b, span] = sup.pos_labels
                pos_mask[b, span] = sup.pos_mask

        return cls(src, tgt_in, tgt_out, token_labels, token_mask, pos_labels, pos_mask)


def combine_losses(nll, token, pos, lambda_token, lambda_pos):
    """L_nll + lambda_token * L_token + lambda_pos * L_pos; zero weights drop their term."""
    total = nll
    if lambda_token:
        total = total + lambda_token * token
    if lambda_pos:
        total = total + lambda_pos * pos
    return total


class Seq2SeqTransformer:
    """Post-norm transformer encoder-decoder with tied embeddings and two self-supervision heads."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.params: Dict[str, Tensor] = {}
        self._init_parameters(utils.make_rng(seed, "init"))
        self._positions = sinusoidal_positions(config.max_positions, config.d_model)

    # --- parameters ------------------------------------------------------

    def _add(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _xavier(self, rng, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    def _add_attention(self, rng, prefix):
        e = self.config.d_model
        for part in ("q", "k", "v", "o"):
            self._add(f"{prefix}.w{part}", self._xavier(rng, e, e))
            self._add(f"{prefix}.b{part}", np.zeros(e))

    def _add_ffn(self, rng, prefix):
        e, f = self.config.d_model, self.config.d_ffn
        self._add(f"{prefix}.w1", self._xavier(rng, e, f))
        self._add(f"{prefix}.b1", np.zeros(f))
        self._add(f"{prefix}.w2", self._xavier(rng, f, e))
        self._add(f"{prefix}.b2", np.zeros(e))

    def _add_layer_norm(self, prefix):
        e = self.config.d_model
        self._add(f"{prefix}.gain", np.ones(e))
        self._add(f"{prefix}.bias", np.zeros(e))

    def _init_parameters(self, rng):
        cfg = self.config
        e = cfg.d_model
        self._add("embed", rng.normal(0.0, e ** -0.5, size=(cfg.vocab_size, e)))
        for i in range(cfg.n_layers):
            self._add_attention(rng, f"enc.{i}.self")
            self._add_layer_norm(f"enc.{i}.ln1")
            self._add_ffn(rng, f"enc.{i}.ffn")
            self._add_layer_norm(f"enc.{i}.ln2")
        for i in range(cfg.n_layers):
            self._add_attention(rng, f"dec.{i}.self")
            self._add_layer_norm(f"dec.{i}.ln1")
            self._add_attention(rng, f"dec.{i}.cross")
            self._add_layer_norm(f"dec.{i}.ln2")
            self._add_ffn(rng, f"dec.{i}.ffn")
            self._add_layer_norm(f"dec.{i}.ln3")
        # Small heads so the untrained classifiers start close to uniform
        self._add("head.token", rng.normal(0.0, 0.5 * e ** -0.5, size=(e, cfg.vocab_size)))
        self._add("head.pos", rng.normal(0.0, 0.5 * e ** -0.5, size=(e, cfg.max_positions)))

    def parameters(self):
        return self.params

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    # --- building blocks -------------------------------------------------

    def _linear(self, x, weight, bias):
        return T.matmul(x, self.params[weight]) + self.params[bias]

    def _attention(self, query_x, key_x, prefix, allowed, rng):
        heads = self.config.n_heads
        head_dim = self.config.d_model // heads

        def split(x, part):
            batch, length, _ = x.shape
            projected = self._linear(x, f"{prefix}.w{part}", f"{prefix}.b{part}")
            return T.transpose(T.reshape(projected, (batch, length, heads, head_dim)), (0, 2, 1, 3))

        q = split(query_x, "q")
        k = split(key_x, "k")
        v = split(key_x, "v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
        weights = T.softmax(T.apply_attention_mask(scores, allowed), axis=-1)
        weights = T.dropout(weights, self.config.dropout, rng)
        context = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        batch, length = context.shape[0], context.shape[1]
        context = T.reshape(context, (batch, length, self.config.d_model))
        return self._linear(context, f"{prefix}.wo", f"{prefix}.bo")

    def _ffn(self, x, prefix):
        hidden = T.relu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._linear(hidden, f"{prefix}.w2", f"{prefix}.b2")

    def _sublayer(self, x, output, norm, rng):
        residual = x + T.dropout(output, self.config.dropout, rng)
        return T.layer_norm(residual, self.params[f"{norm}.gain"], self.params[f"{norm}.bias"])

    def _embed(self, ids, rng):
        length = ids.shape[1]
        if length > self.config.max_positions:
            raise DimensionError(f"sequence length {length} exceeds max_positions {self.config.max_positions}")
        tokens = T.scale(T.embedding_lookup(self.params["embed"], ids), math.sqrt(self.config.d_model))
        return T.dropout(tokens + Tensor(self._positions[:length]), self.config.dropout, rng)

    # --- forward ---------------------------------------------------------

    def encode(self, src_ids, pad_mask=None, rng=None):
        """
        Encode `<bos> x <eos>` id rows.

        Args:
            src_ids (np.ndarray): [B, L] ids (a 1-D row is treated as B=1)
            pad_mask (np.ndarray | None): [B, L] True at padding; defaults to ids == pad
            rng (np.random.Generator | None): Dropout stream; None disables dropout

        Returns:
            Tensor: Encoder states h~ of shape [B, L, e]
        """
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        if pad_mask is None:
            pad_mask = src_ids == PAD_ID
        allowed = ~np.atleast_2d(pad_mask)[:, None, None, :]
        x = self._embed(src_ids, rng)
        for i in range(self.config.n_layers):
            x = self._sublayer(x, self._attention(x, x, f"enc.{i}.self", allowed, rng), f"enc.{i}.ln1", rng)
            x = self._sublayer(x, self._ffn(x, f"enc.{i}.ffn"), f"enc.{i}.ln2", rng)
        return x

    def decode_teacher_forced(self, memory, src_ids, tgt_in, src_pad_mask=None, rng=None):
        """
        Decoder logits for every prefix of `tgt_in` (which starts with bos).

        Args:
            memory (Tensor): [B, Ls, e] encoder states (B may be 1 and broadcast)
            src_ids (np.ndarray): [B, Ls] source ids, used for the cross-attention pad mask
            tgt_in (np.ndarray): [Bt, T] decoder inputs
            src_pad_mask (np.ndarray | None): Overrides src_ids == pad
            rng (np.random.Generator | None): Dropout stream

        Returns:
            Tensor: [Bt, T, v] logits; row t only sees tgt_in[:, :t + 1]
        """
        tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
        if src_pad_mask is None:
            src_pad_mask = np.atleast_2d(np.asarray(src_ids)) == PAD_ID
        length = tgt_in.shape[1]
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None, :, :]
        cross_allowed = ~np.atleast_2d(src_pad_mask)[:, None, None, :]

        x = self._embed(tgt_in, rng)
        for i in range(self.config.n_layers):
            x = self._sublayer(x, self._attention(x, x, f"dec.{i}.self", causal, rng), f"dec.{i}.ln1", rng)
            x = self._sublayer(x, self._attention(x, memory, f"dec.{i}.cross", cross_allowed, rng), f"dec.{i}.ln2", rng)
            x = self._sublayer(x, self._ffn(x, f"dec.{i}.ffn"), f"dec.{i}.ln3", rng)
        return T.matmul(x, T.transpose(self.params["embed"]))

    def self_supervision_losses(self, memory, token_labels, token_mask, pos_labels, pos_mask):
        """
        Token and position reconstruction losses on encoder states.

        Labels and masks are aligned to encoder positions (see Batch.collate).

        Returns:
            tuple: (L_token, L_pos, stats) where stats holds head accuracy counts
        """
        batch, length, width = memory.shape
        flat = T.reshape(memory, (batch * length, width))
        token_logits = T.matmul(flat, self.params["head.token"])
        pos_logits = T.matmul(flat, self.params["head.pos"])
        token_mask = np.asarray(token_mask, dtype=bool).reshape(-1)
        pos_mask = np.asarray(pos_mask, dtype=bool).reshape(-1)
        token_labels = np.asarray(token_labels).reshape(-1)
        pos_labels = np.asarray(pos_labels).reshape(-1)

        loss_token = T.masked_cross_entropy(token_logits, token_labels, token_mask, 0.0)
        loss_pos = T.masked_cross_entropy(pos_logits, pos_labels, pos_mask, 0.0)

        stats = {
            "token_correct": int((token_logits.data.argmax(axis=1) == token_labels)[token_mask].sum()),
            "token_total": int(token_mask.sum()),
            "pos_correct": int((pos_logits.data.argmax(axis=1) == pos_labels)[pos_mask].sum()),
            "pos_total": int(pos_mask.sum()),
        }
        return loss_token, loss_pos, stats

    def bliss_loss(self, batch, rng=None, lambda_token=None, lambda_pos=None, clean_src=None):
        """
        Combined objective on one batch.

        Args:
            batch (Batch): Perturbed sources, targets and supervision
            rng (np.random.Generator | None): Dropout stream (None = deterministic)
            lambda_token (float | None): Overrides config.lambda_token
            lambda_pos (float | None): Overrides config.lambda_pos
            clean_src (np.ndarray | None): Unperturbed sources; when given the NLL is
                conditioned on them and only the heads see batch.src

        Returns:
            tuple: (total loss Tensor, components dict of floats and head counts)
        """
        cfg = self.config
        lambda_token = cfg.lambda_token if lambda_token is None else lambda_token
        lambda_pos = cfg.lambda_pos if lambda_pos is None else lambda_pos

        memory = self.encode(batch.src, rng=rng)
        if clean_src is None:
            logits = self.decode_teacher_forced(memory, batch.src, batch.tgt_in, rng=rng)
        else:
            clean_memory = self.encode(clean_src, rng=rng)
            logits = self.decode_teacher_forced(clean_memory, clean_src, batch.tgt_in, rng=rng)
        batch_size, length, vocab = logits.shape
        loss_nll = T.masked_cross_entropy(
            T.reshape(logits, (batch_size * length, vocab)),
            batch.tgt_out.reshape(-1),
            batch.tgt_out.reshape(-1) != PAD_ID,
            cfg.label_smoothing,
        )
        loss_token, loss_pos, stats = self.self_supervision_losses(
            memory, batch.token_labels, batch.token_mask, batch.pos_labels, batch.pos_mask
        )
        total = combine_losses(loss_nll, loss_token, loss_pos, lambda_token, lambda_pos)

        components = {
            "total": total.item(),
            "nll": loss_nll.item(),
            "token": loss_token.item(),
            "pos": loss_pos.item(),
            **stats,
        }
        if not all(math.isfinite(components[key]) for key in ("total", "nll", "token", "pos")):
            raise DivergenceError(
                "non-finite loss: "
                + ", ".join(f"{key}={components[key]}" for key in ("total", "nll", "token", "pos"))
            )
        return total, components

    def next_token_log_probs(self, memory, src_ids, prefixes):
        """Log-probabilities of the next token after each prefix row; shape [n, v]."""
        with T.no_grad():
            logits = self.decode_teacher_forced(memory, src_ids, prefixes).data[:, -1, :]
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# --- checkpoints ---------------------------------------------------------

def _config_lines(config):
    return [f"config.{key}={value!r}" for key, value in asdict(config).items()]


def _parse_config(entries):
    kwargs = {}
    for field_info in fields(ModelConfig):
        key = f"config.{field_info.name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint lacks {key}")
        cast = int if field_info.type in (int, "int") else float
        kwargs[field_info.name] = cast(entries[key])
    return ModelConfig(**kwargs)


def save_checkpoint(path, model, extra_tensors=None, metadata=None):
    """
    Write a checkpoint: header, key=value lines, then length-prefixed float64 tensors.

    Args:
        path (str | Path): Destination (written atomically)
        model (Seq2SeqTransformer): Model whose config and parameters are stored
        extra_tensors (dict[str, np.ndarray] | None): e.g. optimizer moments
        metadata (dict | None): Extra key=value entries stored as meta.<key>
    """
    tensors = {name: p.data for name, p in model.params.items()}
    tensors.update(extra_tensors or {})

    out = io.BytesIO()
    lines = [version.checkpoint_header(), *_config_lines(model.config)]
    lines += [f"meta.{key}={value}" for key, value in (metadata or {}).items()]
    lines.append(f"tensors={len(tensors)}")
    out.write(("\n".join(lines) + "\n").encode("utf-8"))
    for name, array in tensors.items():
        shape = ",".join(str(d) for d in array.shape)
        payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
        out.write(f"{name}\t{shape}\n".encode("utf-8"))
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    utils.atomic_write_bytes(path, out.getvalue())
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        tuple: (Seq2SeqTransformer, extra tensors dict, metadata dict of strings)
    """
    path = utils.require_readable(path)
    with open(path, "rb") as f:
        header = f.readline().decode("utf-8").rstrip("\n")
        if header != version.checkpoint_header():
            raise CheckpointError(f"{path}: unexpected header {header!r}")
        entries = {}
        while True:
            line = f.readline().decode("utf-8").rstrip("\n")
            if not line:
                raise CheckpointError(f"{path}: truncated before tensor section")
            key, _, value = line.partition("=")
            if key == "tensors":
                count = int(value)
                break
            entries[key] = value

        tensors = {}
        for _ in range(count):
            name_line = f.readline().decode("utf-8").rstrip("\n")
            name, _, shape_text = name_line.partition("\t")
            shape = tuple(int(d) for d in shape_text.split(",") if d)
            size_bytes = f.read(8)
            if len(size_bytes) != 8:
                raise CheckpointError(f"{path}: truncated at tensor {name!r}")
            (length,) = struct.unpack("<Q", size_bytes)
            payload = f.read(length)
            if len(payload) != length or length != 8 * int(np.prod(shape)):
                raise CheckpointError(f"{path}: bad payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)

    model = Seq2SeqTransformer(_parse_config(entries))
    for name, param in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if tensors[name].shape != param.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {tensors[name].shape}, expected {param.shape}")
        param.data = tensors.pop(name)
    metadata = {key[len("meta."):]: value for key, value in entries.items() if key.startswith("meta.")}
    logger.info(f"Loaded checkpoint from {path}")
    return model, tensors, metadata
