"""The expert node predictors: low-pass, high-pass, residual variants, MLP.

Every expert maps (graph, features) to per-node class logits through a
fixed number of propagate-then-transform layers. Low-pass experts use
the symmetrically normalized self-looped filter; high-pass experts use
its complement; the MLP ignores the graph. Residual variants re-inject
a learned projection of the raw input features at every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graphmoe.graph import Graph, HIGH_PASS, SYM_NORMALIZED
from graphmoe.nn import Array, Linear

GCN = "gcn"
GCN_RESIDUAL = "gcn_residual"
HIGHPASS = "highpass"
HIGHPASS_RESIDUAL = "highpass_residual"
MLP = "mlp"

EXPERT_KINDS = (GCN, GCN_RESIDUAL, HIGHPASS, HIGHPASS_RESIDUAL, MLP)

# Fixed roster order used by the full mixture.
DEFAULT_ROSTER = EXPERT_KINDS

_LAYER_CHOICES = (2, 3, 4)
_HIDDEN_CHOICES = (32, 64, 128, 256)

_LOW_PASS_KINDS = (GCN, GCN_RESIDUAL)

_OPERATOR_FOR_KIND = {
    GCN: SYM_NORMALIZED,
    GCN_RESIDUAL: SYM_NORMALIZED,
    HIGHPASS: HIGH_PASS,
    HIGHPASS_RESIDUAL: HIGH_PASS,
    MLP: None,
}


@dataclass(frozen=True)
class ExpertSpec:
    kind: str
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind: {self.kind!r}")
        if self.layers not in _LAYER_CHOICES:
            raise ValueError(f"layers must be one of {_LAYER_CHOICES}")
        if self.hidden not in _HIDDEN_CHOICES:
            raise ValueError(f"hidden must be one of {_HIDDEN_CHOICES}")
        if not 0.0 <= self.dropout <= 0.9:
            raise ValueError("dropout must lie in [0, 0.9]")

    @property
    def residual(self) -> bool:
        return self.kind in (GCN_RESIDUAL, HIGHPASS_RESIDUAL)

    @property
    def low_pass(self) -> bool:
        return self.kind in _LOW_PASS_KINDS

    def to_dict(self) -> dict:
        return {"kind": self.kind, "layers": self.layers,
                "hidden": self.hidden, "dropout": self.dropout}


class Expert:
    """One node predictor with hand-written backprop."""

    def __init__(self, spec: ExpertSpec, in_dim: int, num_classes: int,
                 rng: np.random.Generator):
        self.spec = spec
        self.in_dim = in_dim
        self.num_classes = num_classes
        sizes = [in_dim] + [spec.hidden] * (spec.layers - 1) + [num_classes]
        self.linears = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        if spec.residual:
            bound = np.sqrt(6.0 / in_dim)
            self.res_W = [rng.uniform(-bound, bound, size=(in_dim, out))
                          for out in sizes[1:]]
            self.res_dW = [np.zeros_like(w) for w in self.res_W]
        else:
            self.res_W = []
            self.res_dW = []
        self._cache = None

    def forward(self, graph: Graph, features: Array, training: bool = False,
                rng: np.random.Generator | None = None) -> Array:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != graph.num_nodes:
            raise ValueError("feature row count must equal num_nodes")
        if features.shape[1] != self.in_dim:
            raise ValueError(
                f"expert expects {self.in_dim} input features, got {features.shape[1]}"
            )
        op_kind = _OPERATOR_FOR_KIND[self.spec.kind]
        prop = graph.operator_matrix(op_kind) if op_kind is not None else None

        rate = self.spec.dropout
        h = features
        masks, inputs, preacts = [], [], []
        last = len(self.linears) - 1
        for i, lin in enumerate(self.linears):
            if training and rate > 0.0:
                if rng is None:
                    raise ValueError("training-mode dropout requires an rng")
                mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
                h = h * mask
            else:
                mask = None
            masks.append(mask)
            u = prop @ h if prop is not None else h
            inputs.append(u)
            z = u @ lin.W + lin.b
            if self.spec.residual:
                z = z + features @ self.res_W[i]
            if i < last:
                preacts.append(z)
                h = np.maximum(z, 0.0)
            else:
                preacts.append(None)
                h = z
        self._cache = (features, prop, masks, inputs, preacts)
        return h

    def backward(self, grad_logits: Array) -> None:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        features, prop, masks, inputs, preacts = self._cache
        g = grad_logits
        last = len(self.linears) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * (preacts[i] > 0)
            lin = self.linears[i]
            lin.dW += inputs[i].T @ g
            lin.db += g.sum(axis=0)
            if self.spec.residual:
                self.res_dW[i] += features.T @ g
            g = g @ lin.W.T
            if prop is not None:
                g = prop.T @ g
            if masks[i] is not None:
                g = g * masks[i]

    def parameters(self) -> dict[str, Array]:
        out = {}
        for i, lin in enumerate(self.linears):
            out[f"layer{i}/W"] = lin.W
            out[f"layer{i}/b"] = lin.b
        for i, w in enumerate(self.res_W):
            out[f"layer{i}/res_W"] = w
        return out

    def gradients(self) -> dict[str, Array]:
        out = {}
        for i, lin in enumerate(self.linears):
            out[f"layer{i}/W"] = lin.dW
            out[f"layer{i}/b"] = lin.db
        for i, dw in enumerate(self.res_dW):
            out[f"layer{i}/res_W"] = dw
        return out

    def zero_grads(self) -> None:
        for lin in self.linears:
            lin.zero_grads()
        for dw in self.res_dW:
            dw[:] = 0.0


def expert_forward(expert: Expert, graph: Graph, features: Array,
                   training: bool = False,
                   rng: np.random.Generator | None = None) -> Array:
    """Functional alias for :meth:`Expert.forward`."""
    return expert.forward(graph, features, training=training, rng=rng)


class ExpertEnsemble:
    """Fixed-order collection of experts sharing input/output dimensions."""

    def __init__(self, experts: list[Expert]):
        if not experts:
            raise ValueError("ensemble needs at least one expert")
        in_dims = {e.in_dim for e in experts}
        out_dims = {e.num_classes for e in experts}
        if len(in_dims) != 1 or len(out_dims) != 1:
            raise ValueError("experts must share input and output dimensions")
        self.experts = list(experts)

    @property
    def size(self) -> int:
        return len(self.experts)

    @property
    def specs(self) -> list[ExpertSpec]:
        return [e.spec for e in self.experts]

    def forward(self, graph: Graph, features: Array, training: bool = False,
                rngs: list[np.random.Generator] | None = None) -> list[Array]:
        if rngs is None:
            rngs = [None] * self.size
        if len(rngs) != self.size:
            raise ValueError("need one rng per expert")
        return [e.forward(graph, features, training=training, rng=r)
                for e, r in zip(self.experts, rngs)]

    def backward(self, grad_list: list[Array]) -> None:
        for e, g in zip(self.experts, grad_list):
            e.backward(g)

    def parameters(self) -> dict[str, Array]:
        out = {}
        for j, e in enumerate(self.experts):
            for k, v in e.parameters().items():
                out[f"expert{j}/{k}"] = v
        return out

    def gradients(self) -> dict[str, Array]:
        out = {}
        for j, e in enumerate(self.experts):
            for k, v in e.gradients().items():
                out[f"expert{j}/{k}"] = v
        return out

    def zero_grads(self) -> None:
        for e in self.experts:
            e.zero_grads()


def ensemble_forward(ensemble: ExpertEnsemble, graph: Graph, features: Array,
                     training: bool = False,
                     rngs: list[np.random.Generator] | None = None) -> list[Array]:
    """Functional alias for :meth:`ExpertEnsemble.forward`."""
    return ensemble.forward(graph, features, training=training, rngs=rngs)


def build_ensemble(specs: list[ExpertSpec], in_dim: int, num_classes: int,
                   seed: int) -> ExpertEnsemble:
    """Instantiate experts with independent per-expert init streams."""
    from graphmoe.nn import rng_stream

    experts = [Expert(spec, in_dim, num_classes, rng_stream(seed, "expert-init", j))
               for j, spec in enumerate(specs)]
    return ExpertEnsemble(experts)
