"""Feed-forward encoder with a normalized projection head and a softmax classifier.

Shapes: inputs are ``(B, d)``; every trainable tensor is 2-D (biases are
``(1, width)``) so checkpoints can store each one as a matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _random

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Architecture:
    d_in: int
    n_classes: int
    widths: tuple = (64, 64)
    d_embed: int = 128
    proj_hidden: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("need at least one encoder layer")

    @property
    def proj_width(self) -> int:
        return self.proj_hidden or self.widths[-1]

    def shapes(self) -> dict:
        shapes = {}
        fan_in = self.d_in
        for i, w in enumerate(self.widths):
            shapes[f"enc{i}.W"] = (fan_in, w)
            shapes[f"enc{i}.b"] = (1, w)
            fan_in = w
        shapes["proj0.W"] = (fan_in, self.proj_width)
        shapes["proj0.b"] = (1, self.proj_width)
        shapes["proj1.W"] = (self.proj_width, self.d_embed)
        shapes["proj1.b"] = (1, self.d_embed)
        shapes["cls.W"] = (fan_in, self.n_classes)
        shapes["cls.b"] = (1, self.n_classes)
        return shapes


@dataclass
class Network:
    arch: Architecture
    params: dict

    @classmethod
    def init(cls, arch: Architecture, seed: int = 0, zero_classifier: bool = False) -> "Network":
        """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.shapes().items():
            fan_in = arch.shapes()[name.split(".")[0] + ".W"][0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        if zero_classifier:
            params["cls.W"][:] = 0.0
            params["cls.b"][:] = 0.0
        return cls(arch, params)

    def copy(self) -> "Network":
        return Network(self.arch, {k: v.copy() for k, v in self.params.items()})

    def snapshot(self) -> dict:
        """Read-only copies of the parameters."""
        out = {}
        for k, v in self.params.items():
            a = v.copy()
            a.setflags(write=False)
            out[k] = a
        return out


@dataclass
class Forward:
    logits: np.ndarray
    probs: np.ndarray
    embedding: np.ndarray
    cache: dict = field(repr=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l2_normalize(v: np.ndarray):
    norm = np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), NORM_FLOOR)
    return v / norm, norm


def forward(net: Network, x: np.ndarray) -> Forward:
    """Run the encoder once and both heads on its output."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.arch.d_in:
        raise ValueError(f"expected {net.arch.d_in} input features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    p = net.params
    hs = [x]
    h = x
    for i in range(len(net.arch.widths)):
        h = np.maximum(h @ p[f"enc{i}.W"] + p[f"enc{i}.b"], 0.0)
        hs.append(h)
    ph = np.maximum(h @ p["proj0.W"] + p["proj0.b"], 0.0)
    e = ph @ p["proj1.W"] + p["proj1.b"]
    u, norm = l2_normalize(e)
    logits = h @ p["cls.W"] + p["cls.b"]
    cache = {"hs": hs, "ph": ph, "u": u, "norm": norm}
    return Forward(logits, softmax(logits), u, cache)


def backward(net: Network, fwd: Forward, grad_logits: np.ndarray, grad_embedding: np.ndarray | None = None) -> dict:
    """Parameter gradients given upstream gradients on logits and embeddings.

    The upstream arrays are the gradients of a scalar loss with respect to
    each row's outputs; parameter gradients are summed over rows.
    """
    p = net.params
    hs = fwd.cache["hs"]
    h = hs[-1]
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != fwd.logits.shape:
        raise ValueError(f"grad_logits shape {grad_logits.shape} != {fwd.logits.shape}")
    grads = {
        "cls.W": h.T @ grad_logits,
        "cls.b": grad_logits.sum(axis=0, keepdims=True),
    }
    gh = grad_logits @ p["cls.W"].T

    if grad_embedding is None:
        grad_embedding = np.zeros_like(fwd.embedding)
    if grad_embedding.shape != fwd.embedding.shape:
        raise ValueError(f"grad_embedding shape {grad_embedding.shape} != {fwd.embedding.shape}")
    u, norm = fwd.cache["u"], fwd.cache["norm"]
    radial = (u * grad_embedding).sum(axis=1, keepdims=True)
    floored = norm <= NORM_FLOOR
    ge = np.where(floored, grad_embedding, grad_embedding - u * radial) / norm
    ph = fwd.cache["ph"]
    grads["proj1.W"] = ph.T @ ge
    grads["proj1.b"] = ge.sum(axis=0, keepdims=True)
    gph = (ge @ p["proj1.W"].T) * (ph > 0)
    grads["proj0.W"] = h.T @ gph
    grads["proj0.b"] = gph.sum(axis=0, keepdims=True)
    gh = gh + gph @ p["proj0.W"].T

    for i in reversed(range(len(net.arch.widths))):
        ga = gh * (hs[i + 1] > 0)
        grads[f"enc{i}.W"] = hs[i].T @ ga
        grads[f"enc{i}.b"] = ga.sum(axis=0, keepdims=True)
        if i:
            gh = ga @ p[f"enc{i}.W"].T
    return grads


@dataclass
class SGD:
    """SGD with momentum, L2 weight decay and a per-epoch cosine schedule."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    total_epochs: int = 300
    velocity: dict = field(default_factory=dict, repr=False)

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.total_epochs))


def sgd_step(opt: SGD, net: Network, grads: dict, epoch: int) -> Network:
    lr = opt.lr_at(epoch)
    for name, param in net.params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {param.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(param)
        v = opt.momentum * v + g + opt.weight_decay * param
        opt.velocity[name] = v
        param -= lr * v
    return net


def ema_update(key: Network, query: Network, m: float) -> Network:
    """``key <- m * key + (1 - m) * query`` for every parameter, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA coefficient must lie in [0, 1]")
    for name, kp in key.params.items():
        kp *= m
        kp += (1.0 - m) * query.params[name]
    return key


@dataclass(frozen=True)
class AugmentationSpec:
    noise_std: float = 0.3
    mask_prob: float = 0.1

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in [0, 1)")


_TAGS = {"q": 0, "k": 1}


def augment(x, spec: AugmentationSpec, seed: int, tag: str, index=None, step: int = 0) -> np.ndarray:
    """Gaussian jitter then independent coordinate masking.

    Draws are keyed by ``(seed, tag, step, instance index, coordinate)``;
    the two tags give independent views of the same instance.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    index = np.arange(n) if index is None else np.asarray(index)
    t = _TAGS[tag]
    keys = (t, step, index[:, None], np.arange(d)[None, :])
    out = x
    if spec.noise_std > 0:
        out = out + spec.noise_std * _random.normal(seed, _random.AUG_NOISE, _random.AUG_NOISE_AUX, *keys)
    if spec.mask_prob > 0:
        keep = _random.uniform(seed, _random.AUG_MASK, *keys) >= spec.mask_prob
        out = np.where(keep, out, 0.0)
    return out


def save_arrays(path, arrays: dict):
    """Each array as a ``name,rows,cols`` line followed by its rows."""
    lines = []
    for name, a in arrays.items():
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.ndim != 2:
            raise ValueError(f"{name}: only 2-D arrays are stored")
        lines.append(f"{name},{a.shape[0]},{a.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def load_arrays(path) -> dict:
    lines = Path(path).read_text().splitlines()
    out, i = {}, 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            name, rows, cols = lines[i].split(",")
            rows, cols = int(rows), int(cols)
        except ValueError:
            raise ValueError(f"{path}:{i + 1}: expected 'name,rows,cols'") from None
        block = lines[i + 1:i + 1 + rows]
        if len(block) != rows:
            raise ValueError(f"{path}: truncated block {name}")
        a = np.array([[float(t) for t in ln.split()] for ln in block]).reshape(rows, cols)
        out[name] = a
        i += 1 + rows
    return out


def save_network(path, net: Network, extra: dict | None = None):
    arrays = dict(net.params)
    arrays.update(extra or {})
    save_arrays(path, arrays)


def load_network(path, arch: Architecture):
    """Load a checkpoint, validating every layer against ``arch``.

    Returns ``(network, extra_arrays)``.
    """
    arrays = load_arrays(path)
    params = {}
    for name, shape in arch.shapes().items():
        if name not in arrays:
            raise ValueError(f"checkpoint lacks layer {name}")
        if arrays[name].shape != shape:
            raise ValueError(f"layer {name} has shape {arrays[name].shape}, architecture expects {shape}")
        params[name] = arrays.pop(name)
    return Network(arch, params), arrays
