"""Small numpy MLPs with hand-written reverse mode, Adam, and checkpoints.

Parameters are a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` shaped
``(fan_in, fan_out)``; inputs are row-major batches ``(B, input_dim)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NonFiniteActivation, NonFiniteGradient, ShapeMismatch

ACTIVATIONS = ("relu", "tanh")
HEADS = ("linear", "normalize_to_sphere", "gaussian_mean_logstd")
SPHERE_NORM_FLOOR = 1e-8
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: tuple = (64, 64)
    output_dim: int = 1
    hidden_activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        dims = (self.input_dim, self.output_dim, *self.hidden_layers)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.output_head == "normalize_to_sphere" and self.output_dim < 2:
            raise ValueError("normalize_to_sphere needs output_dim >= 2")

    @property
    def layer_sizes(self):
        # The gaussian head emits a mean and a log-std per output dimension.
        final = 2 * self.output_dim if self.output_head == "gaussian_mean_logstd" else self.output_dim
        return (self.input_dim, *self.hidden_layers, final)

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "hidden_layers": tuple(d["hidden_layers"])})


def param_shapes(spec):
    sizes = spec.layer_sizes
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    return shapes


def _orthogonal(rng, fan_in, fan_out, gain):
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_params(spec, rng, final_scale=1.0, final_bias=None):
    """Orthogonal init; hidden gain sqrt(2) for relu and 5/3 for tanh.

    ``final_bias`` optionally overrides the last bias vector (e.g. an initial
    log-std for the gaussian head).
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    gain = math.sqrt(2.0) if spec.hidden_activation == "relu" else 5.0 / 3.0
    sizes = spec.layer_sizes
    params = []
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == n_layers - 1
        params.append(_orthogonal(rng, fan_in, fan_out, final_scale if last else gain))
        params.append(np.zeros(fan_out))
    if final_bias is not None:
        params[-1] = np.asarray(final_bias, dtype=float) * np.ones(sizes[-1])
    return params


def copy_params(params):
    return [p.copy() for p in params]


def flatten(params):
    return np.concatenate([p.ravel() for p in params]) if params else np.zeros(0)


def unflatten(vector, spec):
    out, i = [], 0
    for shape in param_shapes(spec):
        n = int(np.prod(shape))
        out.append(np.array(vector[i : i + n], dtype=float).reshape(shape))
        i += n
    if i != len(vector):
        raise ShapeMismatch(f"expected {i} values, got {len(vector)}")
    return out


def check_params(params, spec):
    shapes = param_shapes(spec)
    if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
        raise ShapeMismatch(f"parameter shapes {[p.shape for p in params]} do not match {shapes}")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _act(name, x):
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_grad(name, post):
    return (post > 0.0).astype(float) if name == "relu" else 1.0 - post * post


def _as_batch(spec, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != spec.input_dim:
        raise DimensionMismatch(f"input dim {x.shape[-1]} != {spec.input_dim}")
    return x, single


def forward_with_cache(params, spec, x):
    """Batched forward pass returning the output and what backward() needs."""
    x, single = _as_batch(spec, x)
    n_layers = len(params) // 2
    posts = [x]
    h = x
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = _act(spec.hidden_activation, h)
        if not np.all(np.isfinite(h)):
            raise NonFiniteActivation(f"non-finite activation in layer {i}")
        posts.append(h)
    out = h
    if spec.output_head == "normalize_to_sphere":
        norm = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), SPHERE_NORM_FLOOR)
        out = h / norm
    elif spec.output_head == "gaussian_mean_logstd":
        k = spec.output_dim
        out = np.concatenate([h[:, :k], np.clip(h[:, k:], LOG_STD_MIN, LOG_STD_MAX)], axis=1)
    cache = {"posts": posts, "out": out, "single": single}
    return (out[0] if single else out), cache


def forward(params, spec, x):
    return forward_with_cache(params, spec, x)[0]


def backward(params, spec, cache, grad_out):
    """Reverse-mode pass: gradient of a scalar loss w.r.t. every parameter."""
    grad_out = np.asarray(grad_out, dtype=float)
    if cache["single"] and grad_out.ndim == 1:
        grad_out = grad_out[None, :]
    posts, out = cache["posts"], cache["out"]
    pre_head = posts[-1]
    if spec.output_head == "normalize_to_sphere":
        norm = np.linalg.norm(pre_head, axis=1, keepdims=True)
        above = norm > SPHERE_NORM_FLOOR
        radial = np.sum(out * grad_out, axis=1, keepdims=True)
        g = np.where(above, (grad_out - out * radial) / np.maximum(norm, SPHERE_NORM_FLOOR),
                     grad_out / SPHERE_NORM_FLOOR)
    elif spec.output_head == "gaussian_mean_logstd":
        k = spec.output_dim
        raw = pre_head[:, k:]
        inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        g = np.concatenate([grad_out[:, :k], grad_out[:, k:] * inside], axis=1)
    else:
        g = grad_out
    n_layers = len(params) // 2
    grads = [None] * len(params)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * _act_grad(spec.hidden_activation, posts[i + 1])
        grads[2 * i] = posts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ params[2 * i].T
    if not all(np.all(np.isfinite(gr)) for gr in grads):
        raise NonFiniteGradient("non-finite gradient")
    return grads


def gradient(params, spec, inputs, loss_fn):
    """Value and parameter gradient of ``loss_fn(outputs) -> (value, d value/d outputs)``."""
    out, cache = forward_with_cache(params, spec, inputs)
    value, grad_out = loss_fn(out)
    return value, backward(params, spec, cache, grad_out)


def add_grads(a, b):
    return [x + y for x, y in zip(a, b)]


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        """Return updated parameters; moments and the step counter advance in place."""
        if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
            raise ShapeMismatch("gradient shapes do not match parameters")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if self.max_grad_norm is not None:
            norm = global_norm(grads)
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        new = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            new.append(p - self.learning_rate * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return new


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + flat little-endian float64 blob
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, spec, seed=0, step=0, extra=None):
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    check_params(params, spec)
    blob = flatten(params).astype("<f8").tobytes()
    manifest = {
        "format": "skillforge-mlp-1",
        "spec": spec.to_dict(),
        "shapes": [list(s) for s in param_shapes(spec)],
        "seed": int(seed),
        "step": int(step),
        "n_values": len(blob) // 8,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(path):
    """Return ``(params, spec, manifest)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ShapeMismatch(f"checksum mismatch for {path}")
    spec = MlpSpec.from_dict(manifest["spec"])
    params = unflatten(np.frombuffer(blob, dtype="<f8"), spec)
    return params, spec, manifest


@dataclass
class Mlp:
    """A spec bundled with its parameters."""

    spec: MlpSpec
    params: list

    @classmethod
    def create(cls, spec, rng, **init_kwargs):
        return cls(spec, init_params(spec, rng, **init_kwargs))

    def __call__(self, x):
        return forward(self.params, self.spec, x)

    def copy(self):
        return Mlp(self.spec, copy_params(self.params))

    def save(self, path, seed=0, step=0, extra=None):
        return save_checkpoint(path, self.params, self.spec, seed, step, extra)

    @classmethod
    def load(cls, path):
        params, spec, _ = load_checkpoint(path)
        return cls(spec, params)
