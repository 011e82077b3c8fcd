"""
Dense float64 tensors with reverse-mode automatic differentiation.

Each op records its inputs and a backward closure on the tensor it returns;
`backward(root)` walks the recorded graph once in reverse topological order.
The graph is rebuilt on every forward pass.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

from utils import DimensionError, TokenIndexError, UsageError

logger = logging.getLogger(__name__)

# Added to disallowed attention logits; exp() of it underflows to exactly 0
ATTENTION_MASK_VALUE = -1e9

LAYER_NORM_EPS = 1e-5

_grad_mode = threading.local()


def is_grad_enabled():
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread (evaluation, decoding)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """A value in the computation graph.

    Leaves created with requires_grad=True are parameters; their `grad`
    accumulates across backward calls until `zero_grad()`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, op, backward_fn):
    """Wrap an op's output, recording the graph edge only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs_grad
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad, shape):
    """Sum `grad` over the axes numpy broadcast to reach it from `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# --- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward_fn(grad):
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward_fn)


def neg(a):
    return _result(-a.data, (a,), "neg", lambda grad: (-grad,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward_fn(grad):
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward_fn)


def scale(a, factor):
    """Multiply by a Python scalar that is not part of the graph."""
    factor = float(factor)
    return _result(a.data * factor, (a,), "scale", lambda grad: (grad * factor,))


def relu(a):
    positive = a.data > 0

    def backward_fn(grad):
        return (grad * positive,)

    return _result(np.where(positive, a.data, 0.0), (a,), "relu", backward_fn)


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate is 0 or no rng is given."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), "dropout", lambda grad: (grad * keep,))


# --- reductions and shape ------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False):
    def backward_fn(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", backward_fn)


def tensor_mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from e
    return _result(data, (a,), "reshape", lambda grad: (grad.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), "transpose", lambda grad: (grad.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(grad):
        return tuple(np.split(grad, bounds, axis=axis))

    return _result(data, tuple(tensors), "concat", backward_fn)


# --- linear algebra ------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward_fn(grad):
        grad_a = grad @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ grad
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return _result(a.data @ b.data, (a, b), "matmul", backward_fn)


# --- normalization -------------------------------------------------------

def _stable_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    probs = _stable_softmax(a.data, axis)

    def backward_fn(grad):
        return (probs * (grad - (grad * probs).sum(axis=axis, keepdims=True)),)

    return _result(probs, (a,), "softmax", backward_fn)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward_fn(grad):
        return (grad - probs * grad.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), "log_softmax", backward_fn)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then gain and bias."""
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm: last axis is empty")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    width = x.shape[-1]

    def backward_fn(grad):
        d_normed = grad * gain.data
        d_x = inv_std / width * (
            width * d_normed
            - d_normed.sum(axis=-1, keepdims=True)
            - normed * (d_normed * normed).sum(axis=-1, keepdims=True)
        )
        return d_x, unbroadcast(grad * normed, gain.shape), unbroadcast(grad, bias.shape)

    return _result(normed * gain.data + bias.data, (x, gain, bias), "layer_norm", backward_fn)


# --- indexing ------------------------------------------------------------

def embedding_lookup(table, ids):
    """Gather rows of a 2-D table; the result has shape ids.shape + (e,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TokenIndexError(
            f"embedding_lookup: ids must lie in [0, {table.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )

    def backward_fn(grad):
        grad_table = np.zeros_like(table.data)
        np.add.at(grad_table, ids.reshape(-1), grad.reshape(-1, table.shape[1]))
        return (grad_table,)

    return _result(table.data[ids], (table,), "embedding", backward_fn)


def apply_attention_mask(scores, allowed):
    """Add ATTENTION_MASK_VALUE to every logit where `allowed` is False."""
    allowed = np.asarray(allowed, dtype=bool)
    try:
        penalty = np.where(allowed, 0.0, ATTENTION_MASK_VALUE)
        data = scores.data + penalty
    except ValueError as e:
        raise DimensionError(
            f"apply_attention_mask: mask {allowed.shape} does not fit scores {scores.shape}"
        ) from e
    return _result(data, (scores,), "attention_mask", lambda grad: (grad,))


# --- losses --------------------------------------------------------------

def masked_cross_entropy(logits, labels, mask, smoothing=0.0):
    """
    Mean label-smoothed negative log-likelihood over masked rows.

    Args:
        logits (Tensor): [N, C] unnormalized scores
        labels (array-like): N integer class ids
        mask (array-like): N booleans; rows with False are ignored
        smoothing (float): Mass spread uniformly over the C classes

    Returns:
        Tensor: Scalar loss; exactly 0 with zero gradient when no row is masked
    """
    if logits.ndim != 2:
        raise DimensionError(f"masked_cross_entropy: logits must be [N, C], got {logits.shape}")
    n_rows, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if labels.shape[0] != n_rows or mask.shape[0] != n_rows:
        raise DimensionError(
            f"masked_cross_entropy: {n_rows} rows but {labels.shape[0]} labels / {mask.shape[0]} mask bits"
        )
    count = int(mask.sum())
    if count == 0:
        return _result(np.array(0.0), (logits,), "cross_entropy", lambda grad: (np.zeros_like(logits.data),))

    chosen = labels[mask]
    if chosen.min() < 0 or chosen.max() >= n_classes:
        raise TokenIndexError(f"masked_cross_entropy: labels must lie in [0, {n_classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    safe_labels = np.where(mask, labels, 0)

    target = np.full((n_rows, n_classes), smoothing / n_classes)
    target[np.arange(n_rows), safe_labels] += 1.0 - smoothing
    row_loss = -(target * log_probs).sum(axis=1)
    loss = row_loss[mask].sum() / count

    def backward_fn(grad):
        weights = (mask / count)[:, None]
        return ((np.exp(log_probs) - target) * weights * grad,)

    return _result(np.array(loss), (logits,), "cross_entropy", backward_fn)


# --- backward ------------------------------------------------------------

def _topological_order(root):
    """Nodes reachable from `root`, parents before children."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root):
    """
    Accumulate d(root)/d(leaf) into `.grad` of every leaf that requires grad.

    Args:
        root (Tensor): Scalar result of a recorded computation

    Returns:
        list[Tensor]: The leaves that received gradients
    """
    if root.size != 1:
        raise UsageError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return []

    order = _topological_order(root)
    pending = {id(root): np.ones_like(root.data)}
    leaves = []
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            leaves.append(node)
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad
    return leaves


def gradient_check(loss_fn, params, h=1e-5, max_entries=None, rng=None, atol=1e-8):
    """
    Compare backward() against central finite differences.

    Args:
        loss_fn (callable): Builds and returns the scalar loss Tensor
        params (dict[str, Tensor]): Leaves to check
        h (float): Finite-difference step
        max_entries (int | None): Check at most this many entries per parameter
        rng (np.random.Generator | None): Picks entries when max_entries is set
        atol (float): Differences below this count as exact; gradients that are
            zero analytically (e.g. attention key biases) only show rounding noise

    Returns:
        dict[str, float]: Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
    """
    for param in params.values():
        param.zero_grad()
    backward(loss_fn())
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    errors = {}
    for name, param in params.items():
        flat = param.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.zeros(len(indices))
        with no_grad():
            for k, index in enumerate(indices):
                original = flat[index]
                flat[index] = original + h
                plus = loss_fn().item()
                flat[index] = original - h
                minus = loss_fn().item()
                flat[index] = original
                numeric[k] = (plus - minus) / (2.0 * h)
        exact = analytic[name].reshape(-1)[indices]
        denom = max(np.linalg.norm(exact), np.linalg.norm(numeric))
        diff = np.linalg.norm(exact - numeric)
        errors[name] = 0.0 if diff <= atol else float(diff / denom)
    return errors
