"""Dense NN core: linear layers, MLPs, losses, AdamW-style optimizer.

Backprop is written by hand with cached intermediates; there is no
general autodiff. Every architecture in the repo is shallow enough that
this stays simple, and everything is checked against central finite
differences (see :func:`numerical_gradient` and the test suite).

All math is float64. Forward passes in training mode take an explicit
``rng`` so dropout masks, and therefore whole parameter trajectories,
are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def rng_stream(seed: int, *key) -> np.random.Generator:
    """Independent generator derived from (seed, key...).

    Key parts may be ints or strings; strings are hashed so that streams
    for e.g. ("expert", 0) and ("walks",) never collide. The derivation
    is platform-stable.
    """
    parts = []
    for part in key:
        if isinstance(part, (int, np.integer)):
            parts.append(int(part))
        else:
            digest = hashlib.sha256(str(part).encode()).digest()
            parts.append(int.from_bytes(digest[:8], "little"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(parts))))


def derive_seed(base: int, *key) -> int:
    """Deterministic integer seed derived from (base, key...)."""
    rng = rng_stream(base, *key)
    return int(rng.integers(0, 2**63 - 1))


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax_rows(logits: Array) -> Array:
    """Row-wise softmax with max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


_BCE_EPS = 1e-12


def bce_loss(predictions: Array, targets: Array) -> float:
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps]."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(
            f"shape mismatch: predictions {predictions.shape} vs targets {targets.shape}"
        )
    p = np.clip(predictions, _BCE_EPS, 1.0 - _BCE_EPS)
    return float(-np.mean(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p)))


def softmax_cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean cross-entropy over rows plus the gradient w.r.t. logits.

    Gradient rows are (softmax - onehot) / num_rows.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    probs = softmax_rows(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.clip(picked, 1e-300, None))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


class Linear:
    """Affine layer caching its input for the backward pass."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            self.W = np.zeros((in_dim, out_dim))
        else:
            bound = np.sqrt(6.0 / in_dim)
            self.W = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.b = np.zeros(out_dim)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x: Array | None = None

    def forward(self, x: Array) -> Array:
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(
                f"input has {x.shape[-1]} features, layer expects {self.W.shape[0]}"
            )
        self._x = x
        return x @ self.W + self.b

    def backward(self, grad_out: Array) -> Array:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.dW += self._x.T @ grad_out
        self.db += grad_out.sum(axis=0)
        return grad_out @ self.W.T

    def zero_grads(self) -> None:
        self.dW[:] = 0.0
        self.db[:] = 0.0


class Dropout:
    """Inverted dropout; identity when rate is 0 or in evaluation mode."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask: Array | None = None

    def forward(self, x: Array, training: bool, rng: np.random.Generator | None) -> Array:
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout requires an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad_out: Array) -> Array:
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


class Mlp:
    """Plain MLP: dropout on each layer input, ReLU between layers.

    The final layer emits raw outputs (logits / embeddings); callers add
    their own link function.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", dropout: float = 0.0,
                 zero_init_last: bool = False):
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation: {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.layers = [
            Linear(a, b, rng, zero_init=zero_init_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.dropouts = [Dropout(dropout) for _ in self.layers]
        self._acts: list[Array] | None = None

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: Array, training: bool = False,
                rng: np.random.Generator | None = None) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if not np.isfinite(x).all():
            raise ValueError("non-finite values in MLP input")
        acts = []
        h = x
        last = len(self.layers) - 1
        for i, (drop, layer) in enumerate(zip(self.dropouts, self.layers)):
            h = drop.forward(h, training, rng)
            h = layer.forward(h)
            if i < last and self.activation == "relu":
                acts.append(h)
                h = np.maximum(h, 0.0)
        self._acts = acts
        return h

    def backward(self, grad_out: Array) -> Array:
        if self._acts is None:
            raise RuntimeError("backward called before forward")
        g = grad_out
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            if i < last and self.activation == "relu":
                g = g * (self._acts[i] > 0)
            g = self.layers[i].backward(g)
            g = self.dropouts[i].backward(g)
        return g

    def parameters(self) -> dict[str, Array]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}/W"] = layer.W
            out[f"layer{i}/b"] = layer.b
        return out

    def gradients(self) -> dict[str, Array]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}/W"] = layer.dW
            out[f"layer{i}/b"] = layer.db
        return out

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()


def forward_mlp(model: Mlp, x: Array, training: bool = False,
                rng: np.random.Generator | None = None) -> Array:
    """Functional alias for :meth:`Mlp.forward`."""
    return model.forward(x, training=training, rng=rng)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Parameters are updated in place; moment buffers live per named
    parameter. Non-finite gradients abort, naming the parameter.
    """

    def __init__(self, params: dict[str, Array], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: dict[str, Array]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            if not np.isfinite(p).all():
                raise FloatingPointError(f"non-finite parameter after update: {name!r}")


def optimizer_step(state: AdamW, grads: dict[str, Array]) -> None:
    """Functional alias for :meth:`AdamW.step`."""
    state.step(grads)


def numerical_gradient(loss_fn: Callable[[], float], params: dict[str, Array],
                       h: float = 1e-5) -> dict[str, Array]:
    """Central finite differences of a scalar loss w.r.t. named arrays.

    ``loss_fn`` must re-run the forward pass from scratch, reading the
    live arrays in ``params``.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict[str, Array], numeric: dict[str, Array],
                       floor: float = 1e-6) -> float:
    """Worst-case elementwise relative error between two gradient dicts.

    The denominator is floored so that near-zero entries are compared at
    absolute scale; central differences carry ~1e-11 roundoff noise that
    would otherwise dominate the ratio.
    """
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def config_hash(config_dict: dict) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(config_dict, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_params(path, params: dict[str, Array], meta: dict | None = None) -> None:
    """Write a flat checkpoint: named float64 arrays plus JSON metadata."""
    payload = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_params(path) -> tuple[dict[str, Array], dict]:
    """Read a checkpoint written by :func:`save_params`."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        params = {k: np.array(data[k]) for k in data.files if k != "__meta__"}
    return params, meta


def load_params_into(params: dict[str, Array], saved: dict[str, Array]) -> None:
    """Copy saved arrays into live parameter arrays, in place."""
    missing = set(params) ^ set(saved)
    if missing:
        raise ValueError(f"checkpoint parameter names do not match: {sorted(missing)}")
    for name, p in params.items():
        if saved[name].shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}")
        p[:] = saved[name]
