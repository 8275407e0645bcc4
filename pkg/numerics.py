"""
Dense tensor arithmetic with reverse-mode differentiation.

Everything the vision transformer is built from lives here: the Tensor type
and its differentiable operations, the small Module/Parameter system used to
name and freeze weights, the standard layers (Linear, LayerNorm, attention,
MLP, pre-norm block), the seeded Rng, and the AdamW optimizer.

Storage is 32-bit by default; reductions accumulate in 64-bit. Wrap gradient
checks in ``precision(np.float64)`` to build models and inputs in 64-bit.
"""

import hashlib
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    InvalidValueError,
    ShapeError,
    ShapeMismatchError,
    UnknownParameterError,
)

logger = logging.getLogger(__name__)

_dtype = np.float32
_grad_enabled = True

GELU_COEFF = math.sqrt(2.0 / math.pi)


@contextmanager
def precision(dtype):
    """Build tensors in ``dtype`` inside the block (64-bit for gradient checks)."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


@contextmanager
def inference():
    """Skip graph recording; used for evaluation passes."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def default_dtype():
    return _dtype


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def derive_seed(seed, name):
    """Stable 64-bit child seed for a named sub-stream."""
    digest = hashlib.blake2b(f"{int(seed)}:{name}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Counter-based (Philox) generator; ``split(name)`` gives independent child streams."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def split(self, name):
        return Rng(derive_seed(self.seed, name))

    def random(self, shape=None):
        return self.generator.random(shape)

    def normal(self, shape=None, std=1.0):
        return self.generator.normal(0.0, std, shape)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, shape)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, options):
        return options[int(self.generator.integers(len(options)))]


# ---------------------------------------------------------------------------
# Tensor and graph
# ---------------------------------------------------------------------------

class Tensor:
    """An n-dimensional array participating in the differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, trainable=False):
        data = np.asarray(data, dtype=_dtype)
        if any(extent <= 0 for extent in data.shape):
            raise ShapeError(f"tensor extents must be positive, got {data.shape}")
        self.data = data
        self.trainable = bool(trainable)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._requires = False

    @property
    def requires_grad(self):
        if self._backward is not None:
            return self._requires
        return self.trainable

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __float__(self):
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named, learnable leaf tensor."""

    def __init__(self, data, trainable=True):
        super().__init__(data, trainable=trainable)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.trainable = False
    out.grad = None
    if _grad_enabled and any(parent.requires_grad for parent in parents):
        out._parents = parents
        out._backward = backward
        out._requires = True
    else:
        out._parents = ()
        out._backward = None
        out._requires = False
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topological_order(root):
    order, visited = [], set()
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(param) into ``grad`` of every trainable ancestor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            if node.trainable:
                grad = np.asarray(grad, dtype=node.data.dtype).reshape(node.data.shape)
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), grad_fn)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data ** exponent, (a,), grad_fn)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _result(out, (a,), grad_fn)


def log(a):
    a = as_tensor(a)

    def grad_fn(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), grad_fn)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), grad_fn)


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data).astype(a.data.dtype)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), grad_fn)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(a.data @ b.data, (a, b), grad_fn)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``; weight is (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects last dimension {weight.shape[0]}, got {x.shape}")
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), flat.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0, dtype=np.float64).astype(g.dtype))
        return tuple(grads)

    return _result(out, parents, grad_fn)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.data.dtype)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), grad_fn)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tensor_sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), grad_fn)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), grad_fn)


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    out = a.data[index]
    return _result(np.array(out) if basic else out, (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def broadcast_to(a, shape):
    a = as_tensor(a)

    def grad_fn(g):
        return (_unbroadcast(g, a.shape),)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), grad_fn)


def take_rows(x, indices):
    """Per-sample row gather: x (B, T, D), indices (B, K) -> (B, K, D)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    batch = np.arange(x.shape[0])[:, None]

    def grad_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (batch, indices), g)
        return (grad,)

    return _result(x.data[batch, indices], (x,), grad_fn)


# ---------------------------------------------------------------------------
# Neural network primitives
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    """Max-shifted softmax; non-finite inputs raise InvalidValueError."""
    x = as_tensor(x)
    if x.size == 0:
        raise InvalidValueError("softmax of an empty vector")
    if not np.all(np.isfinite(x.data)):
        raise InvalidValueError("softmax input contains non-finite values")
    shifted = x.data.astype(np.float64) - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.data.dtype)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (out * (g - inner),)

    return _result(out, (x,), grad_fn)


def layer_norm(x, gain, bias, eps=1e-6):
    """gain * (x - mean) / sqrt(var + eps) + bias over the last axis (population variance)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {x.shape[-1]}"
        )
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    dtype = x.data.dtype
    x64 = x.data.astype(np.float64)
    centered = x64 - x64.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = (normed * gain.data + bias.data).astype(dtype)

    def grad_fn(g):
        g64 = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        grad_gain = (g64 * normed).sum(axis=lead).astype(dtype)
        grad_bias = g64.sum(axis=lead).astype(dtype)
        d_normed = g64 * gain.data
        grad_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x.astype(dtype), grad_gain, grad_bias

    return _result(out, (x, gain, bias), grad_fn)


def gelu(x):
    """x * Phi(x) with the tanh approximation."""
    x = as_tensor(x)
    cube = 0.044715 * x.data ** 3
    t = np.tanh(GELU_COEFF * (x.data + cube))
    out = 0.5 * x.data * (1.0 + t)

    def grad_fn(g):
        d_inner = GELU_COEFF * (1.0 + 3.0 * 0.044715 * x.data * x.data)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), grad_fn)


def dropout(x, rate, training, rng=None):
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an Rng")
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.data.dtype)

    def grad_fn(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), grad_fn)


def bce_with_logit(logit, label):
    """Stable binary cross-entropy of a single logit against a 0/1 label."""
    z = float(logit)
    if not math.isfinite(z):
        raise InvalidValueError(f"non-finite logit {logit}")
    return max(z, 0.0) - z * float(label) + math.log1p(math.exp(-abs(z)))


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy over a batch of logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    z = logits.data.astype(np.float64)
    losses = np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        return ((g * (expit(z) - labels) / z.size).astype(logits.data.dtype),)

    return _result(out, (logits,), grad_fn)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy; logits (B, C), integer targets (B,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    out = np.asarray((log_norm - z[rows, targets]).mean(), dtype=logits.data.dtype)

    def grad_fn(g):
        probs = np.exp(z - log_norm[:, None])
        probs[rows, targets] -= 1.0
        return ((g * probs / z.shape[0]).astype(logits.data.dtype),)

    return _result(out, (logits,), grad_fn)


def mse(prediction, target):
    prediction = as_tensor(prediction)
    diff = prediction - np.asarray(target, dtype=prediction.data.dtype)
    return tensor_mean(diff * diff)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Module:
    """Container that names its parameters by attribute path, blocks 1-based."""

    training = False

    def _children(self):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(item, Module) for item in value
            ):
                for i, item in enumerate(value, 1):
                    yield f"{attr}.{i:02d}", item

    def _walk(self, prefix):
        for attr, value in vars(self).items():
            if not attr.startswith("_") and isinstance(value, Parameter):
                yield prefix + attr, value
        for name, child in self._children():
            yield from child._walk(f"{prefix}{name}.")

    def named_parameters(self):
        """(name, Parameter) pairs in lexicographic name order."""
        return sorted(self._walk(""), key=lambda item: item[0])

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    def modules(self):
        found = [self]
        for _, child in self._children():
            found.extend(child.modules())
        return found

    def train(self, mode=True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def freeze(self):
        for param in self.parameters():
            param.trainable = False
        return self

    def state_dict(self):
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        """Copy arrays into parameters; unknown names and shape changes raise."""
        own = dict(self.named_parameters())
        for name, value in state.items():
            if name not in own:
                if strict:
                    raise UnknownParameterError(name)
                continue
            if tuple(np.shape(value)) != own[name].shape:
                raise ShapeMismatchError(name, own[name].shape, np.shape(value))
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise CheckpointError(f"checkpoint lacks parameter '{missing[0]}'")
        for name, value in state.items():
            if name in own:
                own[name].data = np.array(value, dtype=own[name].data.dtype)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Parameter(rng.uniform(-limit, limit, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    @classmethod
    def identity(cls, dim):
        layer = cls.__new__(cls)
        layer.weight = Parameter(np.eye(dim))
        layer.bias = Parameter(np.zeros(dim))
        return layer

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class Attention(Module):
    """Multi-head self-attention; returns the output and post-softmax weights."""

    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ConfigurationError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x):
        batch, tokens, dim = x.shape
        head_dim = dim // self.heads
        qkv = self.qkv(x).reshape(batch, tokens, 3, self.heads, head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        weights = softmax(scores, axis=-1)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, dim)
        return self.proj(mixed), weights.data


class Mlp(Module):
    def __init__(self, dim, hidden, rng, dropout_rate=0.0):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.dropout_rate = dropout_rate

    def __call__(self, x, rng=None):
        hidden = dropout(gelu(self.fc1(x)), self.dropout_rate, self.training, rng)
        return self.fc2(hidden)


class Block(Module):
    """Pre-norm transformer block: norm, attention, residual, norm, MLP, residual."""

    def __init__(self, dim, heads, mlp_ratio, rng, dropout_rate=0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)), rng, dropout_rate)
        self.dropout_rate = dropout_rate

    def __call__(self, x, rng=None):
        attended, weights = self.attn(self.norm1(x))
        x = x + dropout(attended, self.dropout_rate, self.training, rng)
        x = x + dropout(self.mlp(self.norm2(x), rng), self.dropout_rate, self.training, rng)
        return x, weights


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

OPTIMIZER_METHODS = ("adamw", "sgd")


@dataclass
class OptimizerState:
    """AdamW state; ``method="sgd"`` gives plain descent with the same decoupled decay."""

    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    method: str = "adamw"
    step_count: int = 0
    first_moments: dict = field(default_factory=dict)
    second_moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.method not in OPTIMIZER_METHODS:
            raise ConfigurationError(f"unknown optimizer method '{self.method}'")


def optimizer_step(named_params, state):
    """Update every trainable parameter in place of its data; frozen ones are skipped."""
    trainable = [(name, param) for name, param in named_params if param.trainable]
    for name, param in trainable:
        if param.grad is None:
            raise ContractError(f"no gradient for trainable parameter '{name}'")
    state.step_count += 1
    lr, decay = state.learning_rate, state.weight_decay
    beta1, beta2 = state.betas
    for name, param in trainable:
        value = param.data.astype(np.float64)
        grad = param.grad.astype(np.float64)
        if state.method == "sgd":
            update = grad
        else:
            m = beta1 * state.first_moments.get(name, 0.0) + (1.0 - beta1) * grad
            v = beta2 * state.second_moments.get(name, 0.0) + (1.0 - beta2) * grad * grad
            state.first_moments[name] = m.astype(param.data.dtype)
            state.second_moments[name] = v.astype(param.data.dtype)
            m_hat = m / (1.0 - beta1 ** state.step_count)
            v_hat = v / (1.0 - beta2 ** state.step_count)
            update = m_hat / (np.sqrt(v_hat) + state.eps)
        param.data = (value - lr * decay * value - lr * update).astype(param.data.dtype)
    return state


def finite_difference(loss_fn, param, index, step=1e-6):
    """Central difference of ``loss_fn()`` with respect to one entry of ``param``."""
    original = param.data
    bumped = original.copy()
    bumped[index] = original[index] + step
    param.data = bumped
    upper = float(loss_fn())
    bumped = original.copy()
    bumped[index] = original[index] - step
    param.data = bumped
    lower = float(loss_fn())
    param.data = original
    return (upper - lower) / (2.0 * step)
