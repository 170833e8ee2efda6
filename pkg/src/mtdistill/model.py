"""Shared-trunk multitask MLP with AU, expression and valence-arousal heads.

All parameters live in one flat float64 buffer (``net.params``) with a
same-shaped gradient buffer (``net.grads``); the per-layer weight and bias
arrays are views into those buffers. The three heads share one combined
weight matrix so a single matmul evaluates all of them; each head's block is
exposed as a column-slice view.

Weights are stored ``(fan_in, fan_out)`` and applied as ``x @ W + b``.
"""
import hashlib
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

HEAD_DIMS = (8, 7, 40)
AU_DIM, EXPR_DIM, VA_DIM = HEAD_DIMS
VA_HALF = VA_DIM // 2
_HEAD_SLICES = (slice(0, 8), slice(8, 15), slice(15, 55))

MAGIC = b"\x89MTNET\r\n"
FORMAT_VERSION = 1
_ACTIVATIONS = {"relu": 0}


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    def __init__(self, found, expected=FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 32
    hidden_dims: tuple = (64, 64)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if len(self.hidden_dims) < 1 or min(self.hidden_dims) < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0 <= self.seed < 2**63:
            raise ValueError("seed must be a non-negative 64-bit integer")

    @property
    def head_dims(self):
        return HEAD_DIMS

    def layer_shapes(self):
        """Weight shapes in storage order: trunk layers, then the combined head."""
        dims = (self.input_dim, *self.hidden_dims)
        shapes = [(dims[k], dims[k + 1]) for k in range(len(self.hidden_dims))]
        shapes.append((dims[-1], sum(HEAD_DIMS)))
        return shapes

    def num_params(self):
        return sum(a * b + b for a, b in self.layer_shapes())


class ModelOutput(NamedTuple):
    """Raw logits of the three heads; leading axis indexes instances."""

    au: np.ndarray
    expr: np.ndarray
    va: np.ndarray

    @property
    def valence(self):
        return self.va[..., :VA_HALF]

    @property
    def arousal(self):
        return self.va[..., VA_HALF:]

    def stacked(self):
        return np.concatenate([self.au, self.expr, self.va], axis=-1)

    @classmethod
    def zeros_like(cls, other):
        return cls(np.zeros_like(other.au), np.zeros_like(other.expr), np.zeros_like(other.va))


def _views(buf, config):
    layers = []
    offset = 0
    for fan_in, fan_out in config.layer_shapes():
        w = buf[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = buf[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


class MultitaskNet:
    """Parameters and gradient buffers of one multitask network."""

    def __init__(self, config, params=None):
        self.config = config
        n = config.num_params()
        if params is None:
            params = np.zeros(n)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self.grads = np.zeros(n)
        self._layers = _views(self.params, config)
        self._grad_layers = _views(self.grads, config)

    @property
    def trunk(self):
        return self._layers[:-1]

    @property
    def heads(self):
        w, b = self._layers[-1]
        return [(w[:, s], b[s]) for s in _HEAD_SLICES]

    @property
    def trunk_grads(self):
        return self._grad_layers[:-1]

    @property
    def head_grads(self):
        w, b = self._grad_layers[-1]
        return [(w[:, s], b[s]) for s in _HEAD_SLICES]

    def zero_grad(self):
        self.grads.fill(0.0)

    def copy(self):
        return MultitaskNet(self.config, self.params.copy())

    def param_hash(self):
        return hashlib.sha256(self.params.tobytes()).hexdigest()


def init(config):
    """Glorot-uniform weights, zero biases; deterministic in ``config.seed``."""
    net = MultitaskNet(config)
    rng = np.random.default_rng(config.seed)
    for w, _ in net.trunk:
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    for w, _ in net.heads:
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return net


class ForwardCache(NamedTuple):
    activations: list  # input followed by each trunk layer's post-ReLU output
    single: bool


def forward(net, x):
    """Evaluate all three heads on ``x`` (one vector or a row-per-instance matrix).

    Returns ``(ModelOutput, cache)``. The cache is owned by the caller, so a
    read-only net can serve concurrent forward passes.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != net.config.input_dim:
        raise ValueError(f"expected input dim {net.config.input_dim}, got {h.shape[-1]}")
    acts = [h]
    for w, b in net.trunk:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    w, b = net._layers[-1]
    out = h @ w + b
    heads = [out[:, s] for s in _HEAD_SLICES]
    if single:
        heads = [o[0] for o in heads]
    return ModelOutput(*heads), ForwardCache(acts, single)


def backward(net, cache, output_grads):
    """Accumulate parameter gradients into ``net.grads`` given d(loss)/d(logits)."""
    if cache is None:
        raise ValueError("backward requires the cache returned by forward")
    g = np.concatenate([np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in output_grads], axis=1)
    acts = cache.activations
    if g.shape != (acts[0].shape[0], sum(HEAD_DIMS)):
        raise ValueError(f"output gradient shape {g.shape} does not match the cached batch")
    gw, gb = net._grad_layers[-1]
    gw += acts[-1].T @ g
    gb += g.sum(axis=0)
    dh = g @ net._layers[-1][0].T
    for k in range(len(net.trunk) - 1, -1, -1):
        da = dh * (acts[k + 1] > 0.0)
        gw, gb = net._grad_layers[k]
        gw += acts[k].T @ da
        gb += da.sum(axis=0)
        if k:
            dh = da @ net._layers[k][0].T


def serialize(net):
    cfg = net.config
    header = MAGIC + struct.pack("<I", FORMAT_VERSION)
    body = struct.pack("<II", cfg.input_dim, len(cfg.hidden_dims))
    body += struct.pack(f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims)
    body += struct.pack("<qIQ", cfg.seed, _ACTIVATIONS[cfg.activation], net.params.size)
    return header + body + net.params.astype("<f8").tobytes()


def deserialize(data):
    data = bytes(data)

    def take(offset, fmt):
        size = struct.calcsize(fmt)
        if len(data) < offset + size:
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(data)}")
        return struct.unpack_from(fmt, data, offset), offset + size

    if len(data) < len(MAGIC):
        raise TruncatedCheckpointError("checkpoint shorter than its magic header")
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a .mtnet checkpoint (bad magic header)")
    (version,), off = take(len(MAGIC), "<I")
    if version != FORMAT_VERSION:
        raise VersionError(version)
    (input_dim, n_hidden), off = take(off, "<II")
    hidden, off = take(off, f"<{n_hidden}I")
    (seed, act_code, n_params), off = take(off, "<qIQ")
    names = {v: k for k, v in _ACTIVATIONS.items()}
    if act_code not in names:
        raise CheckpointError(f"unknown activation code {act_code}")
    cfg = NetConfig(input_dim=input_dim, hidden_dims=hidden, activation=names[act_code], seed=seed)
    if n_params != cfg.num_params():
        raise CheckpointError(f"parameter count {n_params} does not match the recorded shapes")
    end = off + 8 * n_params
    if len(data) < end:
        raise TruncatedCheckpointError(f"checkpoint truncated: {len(data)} of {end} bytes")
    if len(data) > end:
        raise CheckpointError(f"{len(data) - end} trailing bytes after parameters")
    params = np.frombuffer(data, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    return MultitaskNet(cfg, params)


def save(net, path):
    with open(path, "wb") as fh:
        fh.write(serialize(net))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
