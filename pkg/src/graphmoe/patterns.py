"""Node pattern extraction and the expert gating network.

A node's local pattern is built from random-walk context sampling: an
edge discriminator (MLP over [target || context || target*context]
feature triples) scores each sampled context node, the scores are
summarized into fixed-size statistics, and the node degree is appended
as a log channel. The graph-level global pattern is the mean local
pattern. A gating network embeds local and global patterns separately,
concatenates them, and emits softmax weights over the experts.

Everything here participates in end-to-end training, so each stage
carries a hand-written backward pass, including the summary statistics
(mean/std exact, min/max via their attaining slot, the threshold
fraction has zero gradient almost everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graphmoe.graph import Graph
from graphmoe.nn import Array, Mlp, sigmoid, softmax_rows

SENTINEL = -1

# pattern layout: score mean, std, min, max, fraction > 0.5, log1p(degree)
PATTERN_DIM = 6
_STD_TOL = 1e-12


@dataclass(frozen=True)
class WalkConfig:
    walk_length: int = 10
    num_walks: int = 4

    def __post_init__(self):
        if self.walk_length not in (5, 10, 20, 40):
            raise ValueError("walk_length must be one of {5, 10, 20, 40}")
        if self.num_walks < 1:
            raise ValueError("num_walks must be >= 1")


@dataclass(frozen=True)
class WalkContext:
    target: int
    context: np.ndarray  # (K,) node indices, SENTINEL-padded
    walk_length: int


def _walk_visits(graph: Graph, starts: np.ndarray, walk_length: int,
                 num_walks: int, rng: np.random.Generator) -> np.ndarray:
    """Lockstep uniform-neighbor walks; (len(starts)*num_walks, walk_length)."""
    adj = graph.adjacency
    deg = graph.degrees
    cur = np.repeat(starts, num_walks)
    alive = deg[cur] > 0
    visits = np.full((cur.shape[0], walk_length), SENTINEL, dtype=np.int64)
    if not alive.any():
        return visits
    for step in range(walk_length):
        high = np.maximum(deg[cur], 1)
        roll = rng.integers(0, high)
        gather = np.where(alive, adj.indptr[cur] + roll, 0)
        nxt = np.where(alive, adj.indices[gather], SENTINEL)
        visits[:, step] = nxt
        cur = np.where(alive, nxt, cur)
    return visits


def _dedup_contexts(targets: np.ndarray, visits: np.ndarray, num_walks: int,
                    walk_length: int) -> np.ndarray:
    """First-visit dedup per target, truncated to K = walk_length.

    Visits are consumed in step-major order (every walk's first step,
    then every second step, ...), so the context prefers near neighbors
    when it overflows.
    """
    n = targets.shape[0]
    flat = visits.reshape(n, num_walks, walk_length) \
        .transpose(0, 2, 1).reshape(n, num_walks * walk_length)
    contexts = np.full((n, walk_length), SENTINEL, dtype=np.int64)
    for row in range(n):
        target = targets[row]
        seen: set[int] = set()
        fill = 0
        for v in flat[row]:
            if v == SENTINEL or v == target or v in seen:
                continue
            seen.add(int(v))
            contexts[row, fill] = v
            fill += 1
            if fill == walk_length:
                break
    return contexts


def sample_walks(graph: Graph, node: int, walk_length: int, num_walks: int,
                 seed) -> WalkContext:
    """Walk-sampled context for a single node; deterministic per seed."""
    if not 0 <= node < graph.num_nodes:
        raise ValueError(f"node {node} out of range")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    starts = np.array([node], dtype=np.int64)
    visits = _walk_visits(graph, starts, walk_length, num_walks, rng)
    context = _dedup_contexts(starts, visits, num_walks, walk_length)[0]
    return WalkContext(target=node, context=context, walk_length=walk_length)


def sample_walk_contexts(graph: Graph, config: WalkConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """Contexts for every node at once; (n, walk_length), SENTINEL-padded."""
    starts = np.arange(graph.num_nodes, dtype=np.int64)
    visits = _walk_visits(graph, starts, config.walk_length, config.num_walks, rng)
    return _dedup_contexts(starts, visits, config.num_walks, config.walk_length)


class PairFeatureLayer:
    """First discriminator layer over [x_t || x_c || x_t * x_c] triples.

    The concatenated input is never materialized for all pairs at once:
    the weight matrix is kept in three d x h blocks, and forward/backward
    stream over pair chunks. Keeps memory flat for wide feature matrices.
    """

    def __init__(self, feat_dim: int, hidden: int, rng: np.random.Generator,
                 chunk: int = 8192):
        bound = np.sqrt(6.0 / (3 * feat_dim))
        self.Wt = rng.uniform(-bound, bound, size=(feat_dim, hidden))
        self.Wc = rng.uniform(-bound, bound, size=(feat_dim, hidden))
        self.Wp = rng.uniform(-bound, bound, size=(feat_dim, hidden))
        self.b = np.zeros(hidden)
        self.dWt = np.zeros_like(self.Wt)
        self.dWc = np.zeros_like(self.Wc)
        self.dWp = np.zeros_like(self.Wp)
        self.db = np.zeros_like(self.b)
        self.chunk = chunk
        self._pairs: tuple[Array, Array] | None = None
        self._features: Array | None = None

    def forward(self, features: Array, t_idx: Array, c_idx: Array) -> Array:
        out = np.empty((t_idx.shape[0], self.b.shape[0]))
        for lo in range(0, t_idx.shape[0], self.chunk):
            hi = lo + self.chunk
            xt = features[t_idx[lo:hi]]
            xc = features[c_idx[lo:hi]]
            out[lo:hi] = xt @ self.Wt + xc @ self.Wc + (xt * xc) @ self.Wp
        out += self.b
        self._pairs = (t_idx, c_idx)
        self._features = features
        return out

    def backward(self, grad_out: Array) -> None:
        if self._pairs is None:
            raise RuntimeError("backward called before forward")
        t_idx, c_idx = self._pairs
        features = self._features
        for lo in range(0, t_idx.shape[0], self.chunk):
            hi = lo + self.chunk
            xt = features[t_idx[lo:hi]]
            xc = features[c_idx[lo:hi]]
            g = grad_out[lo:hi]
            self.dWt += xt.T @ g
            self.dWc += xc.T @ g
            self.dWp += (xt * xc).T @ g
        self.db += grad_out.sum(axis=0)

    def zero_grads(self) -> None:
        for g in (self.dWt, self.dWc, self.dWp, self.db):
            g[:] = 0.0


class EdgeDiscriminator:
    """MLP scoring target/context feature pairs into (0, 1)."""

    def __init__(self, feat_dim: int, hidden: tuple[int, ...] = (32,),
                 dropout: float = 0.0, rng: np.random.Generator | None = None):
        if not hidden:
            raise ValueError("discriminator needs at least one hidden width")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feat_dim = feat_dim
        self.pair_layer = PairFeatureLayer(feat_dim, hidden[0], rng)
        self.tail = Mlp([hidden[0], *hidden[1:], 1], rng, dropout=dropout)
        self._pre: Array | None = None
        self._scores: Array | None = None

    def score_pairs(self, features: Array, t_idx: Array, c_idx: Array,
                    training: bool = False,
                    rng: np.random.Generator | None = None) -> Array:
        """Scores for explicit (target, context) index pairs; (m,)."""
        z = self.pair_layer.forward(features, t_idx, c_idx)
        self._pre = z
        h = np.maximum(z, 0.0)
        logit = self.tail.forward(h, training=training, rng=rng)[:, 0]
        scores = sigmoid(logit)
        self._scores = scores
        return scores

    def backward(self, grad_scores: Array) -> None:
        if self._scores is None:
            raise RuntimeError("backward called before forward")
        s = self._scores
        glogit = grad_scores * s * (1.0 - s)
        gh = self.tail.backward(glogit[:, None])
        gz = gh * (self._pre > 0)
        self.pair_layer.backward(gz)

    def parameters(self) -> dict[str, Array]:
        out = {"pair/Wt": self.pair_layer.Wt, "pair/Wc": self.pair_layer.Wc,
               "pair/Wp": self.pair_layer.Wp, "pair/b": self.pair_layer.b}
        for k, v in self.tail.parameters().items():
            out[f"tail/{k}"] = v
        return out

    def gradients(self) -> dict[str, Array]:
        out = {"pair/Wt": self.pair_layer.dWt, "pair/Wc": self.pair_layer.dWc,
               "pair/Wp": self.pair_layer.dWp, "pair/b": self.pair_layer.db}
        for k, v in self.tail.gradients().items():
            out[f"tail/{k}"] = v
        return out

    def zero_grads(self) -> None:
        self.pair_layer.zero_grads()
        self.tail.zero_grads()


def edge_discriminator(disc: EdgeDiscriminator, target_features: Array,
                       context_features: Array) -> Array:
    """Scores of one target against a stack of context feature rows."""
    target_features = np.atleast_2d(np.asarray(target_features, dtype=np.float64))
    context_features = np.asarray(context_features, dtype=np.float64)
    if context_features.ndim != 2 or context_features.shape[1] != disc.feat_dim:
        raise ValueError("context features must be (k, feat_dim)")
    k = context_features.shape[0]
    feats = np.vstack([target_features[0][None, :], context_features])
    t_idx = np.zeros(k, dtype=np.int64)
    c_idx = np.arange(1, k + 1, dtype=np.int64)
    return disc.score_pairs(feats, t_idx, c_idx)


_NEUTRAL_STATS = np.array([0.5, 0.0, 0.5, 0.5, 0.0])


def _context_pairs(contexts: Array) -> tuple[Array, Array, Array]:
    """Flatten valid (target, context) pairs; returns (t_idx, c_idx, flat_pos)."""
    n, k = contexts.shape
    valid = contexts != SENTINEL
    rows, cols = np.nonzero(valid)
    t_idx = rows.astype(np.int64)
    c_idx = contexts[rows, cols]
    flat_pos = rows * k + cols
    return t_idx, c_idx, flat_pos


def score_matrix(disc: EdgeDiscriminator, features: Array, contexts: Array,
                 training: bool = False,
                 rng: np.random.Generator | None = None) -> Array:
    """(n, K) score matrix; sentinel slots hold the neutral score 0.5."""
    n, k = contexts.shape
    t_idx, c_idx, flat_pos = _context_pairs(contexts)
    scores = np.full(n * k, 0.5)
    if t_idx.size:
        scores[flat_pos] = disc.score_pairs(features, t_idx, c_idx,
                                            training=training, rng=rng)
    return scores.reshape(n, k)


def summarize_scores(scores: Array, contexts: Array, degrees: Array) -> Array:
    """Per-node pattern rows: score stats plus the log-degree channel."""
    n, k = scores.shape
    valid = contexts != SENTINEL
    counts = valid.sum(axis=1)
    patterns = np.empty((n, PATTERN_DIM))
    safe = np.where(valid, scores, 0.0)
    cnt = np.maximum(counts, 1)
    mean = safe.sum(axis=1) / cnt
    var = (np.where(valid, (scores - mean[:, None]) ** 2, 0.0)).sum(axis=1) / cnt
    std = np.sqrt(var)
    mn = np.where(valid, scores, np.inf).min(axis=1)
    mx = np.where(valid, scores, -np.inf).max(axis=1)
    frac = np.where(valid, scores > 0.5, False).sum(axis=1) / cnt
    patterns[:, 0] = mean
    patterns[:, 1] = std
    patterns[:, 2] = mn
    patterns[:, 3] = mx
    patterns[:, 4] = frac
    empty = counts == 0
    patterns[empty, :5] = _NEUTRAL_STATS
    patterns[:, 5] = np.log1p(degrees)
    return patterns


def summarize_scores_backward(grad_patterns: Array, scores: Array,
                              contexts: Array) -> Array:
    """Gradient of the summary statistics w.r.t. the score matrix."""
    n, k = scores.shape
    valid = contexts != SENTINEL
    counts = valid.sum(axis=1)
    cnt = np.maximum(counts, 1)
    safe = np.where(valid, scores, 0.0)
    mean = safe.sum(axis=1) / cnt
    centered = np.where(valid, scores - mean[:, None], 0.0)
    var = (centered**2).sum(axis=1) / cnt
    std = np.sqrt(var)

    grad = np.zeros_like(scores)
    # mean: 1/k per valid slot
    grad += np.where(valid, (grad_patterns[:, 0] / cnt)[:, None], 0.0)
    # std: (s - mean) / (k * std); zero at the degenerate all-equal point
    std_safe = np.where(std > _STD_TOL, std, 1.0)
    coef = np.where(std > _STD_TOL, grad_patterns[:, 1] / (cnt * std_safe), 0.0)
    grad += coef[:, None] * centered
    # min / max: routed to the first attaining valid slot
    has = counts > 0
    rows = np.flatnonzero(has)
    mn_pos = np.where(valid, scores, np.inf).argmin(axis=1)
    mx_pos = np.where(valid, scores, -np.inf).argmax(axis=1)
    grad[rows, mn_pos[rows]] += grad_patterns[rows, 2]
    grad[rows, mx_pos[rows]] += grad_patterns[rows, 3]
    # fraction > 0.5 is piecewise constant: zero gradient a.e.
    return np.where(valid, grad, 0.0)


def local_pattern(graph: Graph, features: Array, node: int,
                  disc: EdgeDiscriminator, walk_config: WalkConfig,
                  seed) -> Array:
    """Pattern vector for a single node (spec surface; batch path below)."""
    ctx = sample_walks(graph, node, walk_config.walk_length,
                       walk_config.num_walks, seed)
    contexts = ctx.context[None, :]
    scores = score_matrix(disc, features, contexts)
    return summarize_scores(scores, contexts, graph.degrees[[node]])[0]


def global_pattern(local_patterns: Array) -> Array:
    """Componentwise mean of the per-node patterns."""
    local_patterns = np.asarray(local_patterns, dtype=np.float64)
    if local_patterns.ndim != 2 or local_patterns.shape[0] == 0:
        raise ValueError("need a nonempty (n, pattern_dim) matrix")
    return local_patterns.mean(axis=0)


class GatingNetwork:
    """Local/global pattern embedders plus the softmax gate over experts."""

    def __init__(self, num_experts: int, hidden: int = 64, gate_layers: int = 2,
                 dropout: float = 0.0, rng: np.random.Generator | None = None,
                 use_local: bool = True, use_global: bool = True,
                 pattern_dim: int = PATTERN_DIM):
        if gate_layers not in (1, 2, 3, 4):
            raise ValueError("gate_layers must be in {1, 2, 3, 4}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_experts = num_experts
        self.embed_dim = hidden
        self.use_local = use_local
        self.use_global = use_global
        self.embed_local = Mlp([pattern_dim, hidden], rng, dropout=dropout)
        self.embed_global = Mlp([pattern_dim, hidden], rng, dropout=dropout)
        gate_sizes = [2 * hidden] + [hidden] * (gate_layers - 1) + [num_experts]
        # zero-init the last gate layer: training starts from uniform mixing
        self.gate = Mlp(gate_sizes, rng, dropout=dropout, zero_init_last=True)
        self._cache = None

    def forward(self, local_patterns: Array, global_pat: Array,
                training: bool = False,
                rng: np.random.Generator | None = None) -> Array:
        n = local_patterns.shape[0]
        e = self.embed_dim
        if self.use_local:
            el = np.maximum(self.embed_local.forward(local_patterns,
                                                     training=training, rng=rng), 0.0)
        else:
            el = np.zeros((n, e))
        if self.use_global:
            eg = np.maximum(self.embed_global.forward(global_pat[None, :],
                                                      training=training, rng=rng), 0.0)
        else:
            eg = np.zeros((1, e))
        cat = np.concatenate([el, np.broadcast_to(eg, (n, e))], axis=1)
        logits = self.gate.forward(cat, training=training, rng=rng)
        weights = softmax_rows(logits)
        self._cache = (el, eg, weights)
        return weights

    def backward(self, grad_weights: Array) -> tuple[Array, Array]:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        el, eg, weights = self._cache
        n = weights.shape[0]
        e = self.embed_dim
        inner = (grad_weights * weights).sum(axis=1, keepdims=True)
        dlogits = (grad_weights - inner) * weights
        dcat = self.gate.backward(dlogits)
        dlocal = np.zeros((n, PATTERN_DIM))
        dglobal = np.zeros(PATTERN_DIM)
        if self.use_local:
            dl = dcat[:, :e] * (el > 0)
            dlocal = self.embed_local.backward(dl)
        if self.use_global:
            dg = dcat[:, e:].sum(axis=0, keepdims=True) * (eg > 0)
            dglobal = self.embed_global.backward(dg)[0]
        return dlocal, dglobal

    def parameters(self) -> dict[str, Array]:
        out = {}
        for k, v in self.embed_local.parameters().items():
            out[f"embed_local/{k}"] = v
        for k, v in self.embed_global.parameters().items():
            out[f"embed_global/{k}"] = v
        for k, v in self.gate.parameters().items():
            out[f"gate/{k}"] = v
        return out

    def gradients(self) -> dict[str, Array]:
        out = {}
        for k, v in self.embed_local.gradients().items():
            out[f"embed_local/{k}"] = v
        for k, v in self.embed_global.gradients().items():
            out[f"embed_global/{k}"] = v
        for k, v in self.gate.gradients().items():
            out[f"gate/{k}"] = v
        return out

    def zero_grads(self) -> None:
        self.embed_local.zero_grads()
        self.embed_global.zero_grads()
        self.gate.zero_grads()


def gate_forward(local_patterns: Array, global_pat: Array,
                 gating: GatingNetwork, training: bool = False,
                 rng: np.random.Generator | None = None) -> Array:
    """Functional alias for :meth:`GatingNetwork.forward`."""
    return gating.forward(local_patterns, global_pat, training=training, rng=rng)


class PatternGate:
    """Full pattern pipeline: contexts -> scores -> stats -> gate weights."""

    def __init__(self, disc: EdgeDiscriminator, gating: GatingNetwork):
        self.disc = disc
        self.gating = gating
        self._cache = None

    def forward(self, graph: Graph, features: Array, contexts: Array,
                training: bool = False,
                rng: np.random.Generator | None = None) -> Array:
        scores = score_matrix(self.disc, features, contexts,
                              training=training, rng=rng)
        patterns = summarize_scores(scores, contexts, graph.degrees)
        global_pat = patterns.mean(axis=0)
        weights = self.gating.forward(patterns, global_pat,
                                      training=training, rng=rng)
        self._cache = (scores, contexts)
        return weights

    def backward(self, grad_weights: Array) -> None:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        scores, contexts = self._cache
        dlocal, dglobal = self.gating.backward(grad_weights)
        dpatterns = dlocal + dglobal[None, :] / scores.shape[0]
        dscores = summarize_scores_backward(dpatterns, scores, contexts)
        _, _, flat_pos = _context_pairs(contexts)
        if flat_pos.size:
            self.disc.backward(dscores.reshape(-1)[flat_pos])

    def parameters(self) -> dict[str, Array]:
        out = {f"disc/{k}": v for k, v in self.disc.parameters().items()}
        out.update({f"gating/{k}": v for k, v in self.gating.parameters().items()})
        return out

    def gradients(self) -> dict[str, Array]:
        out = {f"disc/{k}": v for k, v in self.disc.gradients().items()}
        out.update({f"gating/{k}": v for k, v in self.gating.gradients().items()})
        return out

    def zero_grads(self) -> None:
        self.disc.zero_grads()
        self.gating.zero_grads()
