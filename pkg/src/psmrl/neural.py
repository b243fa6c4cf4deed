"""Small numpy MLPs with hand-written backprop, Adam and Polyak averaging.

Parameters of one network live in a single flat float64 vector; per-layer
weight ``(fan_in, fan_out)`` and bias views index into it in declaration order
``W1, b1, W2, b2, ...``. Gradients use the same layout, so the optimizer and
target updates are single vector operations.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("identity", "tanh")


class MlpParameters:
    def __init__(self, layer_sizes, output: str = "identity", flat: np.ndarray | None = None, rng=None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if output not in ACTIVATIONS:
            raise ValueError(f"output activation must be one of {ACTIVATIONS}")
        self.layer_sizes = sizes
        self.output = output
        total = sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))
        if flat is None:
            self.flat = np.zeros(total)
            if rng is not None:
                self._init_uniform(rng)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (total,):
                raise ValueError(f"expected {total} parameters, got {flat.shape}")
            self.flat = flat.copy()
        self.weights, self.biases = self.views(self.flat)

    def views(self, flat: np.ndarray):
        weights, biases, off = [], [], 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights.append(flat[off : off + i * o].reshape(i, o))
            off += i * o
            biases.append(flat[off : off + o])
            off += o
        return weights, biases

    def _init_uniform(self, rng: np.random.Generator) -> None:
        for W, b in zip(*self.views(self.flat)):
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, W.shape)
            b[...] = rng.uniform(-bound, bound, b.shape)

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> MlpParameters:
        return MlpParameters(self.layer_sizes, self.output, self.flat)

    def same_shape(self, other: MlpParameters) -> bool:
        return self.layer_sizes == other.layer_sizes

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self, x)[0]


def make_mlp(n_in: int, hidden, n_out: int, output: str, rng: np.random.Generator) -> MlpParameters:
    return MlpParameters([n_in, *hidden, n_out], output=output, rng=rng)


@dataclass
class ForwardCache:
    inputs: list  # input of each layer (post-activation of the previous one)
    output: np.ndarray
    squeeze: bool
    pre_output: np.ndarray  # last layer before the output activation


def mlp_forward(params: MlpParameters, x):
    """ReLU hidden layers, then the output activation. Accepts (n_in,) or (batch, n_in)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != params.layer_sizes[0]:
        raise ValueError(f"input dim {h.shape[-1]} != {params.layer_sizes[0]}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite network input")
    inputs = []
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
    pre = h
    if params.output == "tanh":
        h = np.tanh(h)
    cache = ForwardCache(inputs, h, squeeze, pre)
    return (h[0] if squeeze else h), cache


def mlp_backward(
    params: MlpParameters,
    cache: ForwardCache,
    output_gradient,
    input_gradient: bool = True,
    param_gradient: bool = True,
    pre_output_gradient=None,
):
    """Reverse-mode gradients; returns (flat parameter gradient, gradient wrt input).

    ``pre_output_gradient`` is added below the output activation (for losses on
    the pre-activation). Either result can be skipped (returned as None).
    """
    g = np.asarray(output_gradient, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ValueError(f"output gradient shape {g.shape} != {cache.output.shape}")
    if params.output == "tanh":
        g = g * (1.0 - cache.output**2)
    if pre_output_gradient is not None:
        extra = np.asarray(pre_output_gradient, dtype=np.float64)
        g = g + (extra[None, :] if cache.squeeze else extra)
    grad = np.empty_like(params.flat) if param_gradient else None
    if param_gradient:
        dWs, dbs = params.views(grad)
    grad_x = None
    for k in range(len(params.weights) - 1, -1, -1):
        a = cache.inputs[k]
        if param_gradient:
            np.matmul(a.T, g, out=dWs[k])
            np.sum(g, axis=0, out=dbs[k])
        if k > 0:
            g = (g @ params.weights[k].T) * (a > 0.0)
        elif input_gradient:
            grad_x = g @ params.weights[0].T
    if grad_x is not None and cache.squeeze:
        grad_x = grad_x[0]
    return grad, grad_x


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: MlpParameters, grad: np.ndarray) -> None:
        adam_step(self, params, grad)


def adam_step(opt: Adam, params: MlpParameters, grad: np.ndarray) -> MlpParameters:
    if grad.shape != params.flat.shape or opt.m.shape != grad.shape:
        raise ValueError("gradient / optimizer shape mismatch")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    opt.t += 1
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * grad
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * grad * grad
    m_hat = opt.m / (1.0 - opt.beta1**opt.t)
    v_hat = opt.v / (1.0 - opt.beta2**opt.t)
    params.flat -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params


def polyak_update(target: MlpParameters, source: MlpParameters, tau: float) -> MlpParameters:
    """target <- tau * target + (1 - tau) * source, in place."""
    if not target.same_shape(source):
        raise ValueError("polyak_update: shape mismatch")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    target.flat *= tau
    target.flat += (1.0 - tau) * source.flat
    return target


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"DVRL-CKPT"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    env_config: dict
    actor: MlpParameters
    critic: MlpParameters
    target_actor: MlpParameters
    target_critic: MlpParameters


def _pack_sizes(sizes) -> bytes:
    return struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """magic | u32 version | u32 len + JSON env config | actor sizes | critic sizes |
    actor, critic, target actor, target critic (little-endian f64, W row-major then b
    per layer) | 8-byte BLAKE2b digest of everything before it."""
    cfg = json.dumps(ckpt.env_config, sort_keys=True).encode()
    parts = [
        CKPT_MAGIC,
        struct.pack("<II", CKPT_VERSION, len(cfg)),
        cfg,
        _pack_sizes(ckpt.actor.layer_sizes),
        _pack_sizes(ckpt.critic.layer_sizes),
    ]
    for net in (ckpt.actor, ckpt.critic, ckpt.target_actor, ckpt.target_critic):
        parts.append(net.flat.astype("<f8").tobytes())
    body = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + hashlib.blake2b(body, digest_size=8).digest())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) + 8 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    body, digest = data[:-8], data[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = len(CKPT_MAGIC)
    version, clen = struct.unpack_from("<II", body, off)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += 8
    env_config = json.loads(body[off : off + clen])
    off += clen
    sizes = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", body, off)
        sizes.append(list(struct.unpack_from(f"<{n}I", body, off + 4)))
        off += 4 + 4 * n
    nets = []
    for layer_sizes, output in zip(sizes * 2, ("tanh", "identity") * 2):
        shell = MlpParameters(layer_sizes, output)
        flat = np.frombuffer(body, dtype="<f8", count=shell.size, offset=off).astype(np.float64)
        off += 8 * shell.size
        nets.append(MlpParameters(layer_sizes, output, flat))
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(env_config, *nets)
