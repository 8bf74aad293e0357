"""Contextual stochastic block model lab.

Synthetic graph generator plus the theory bench: the one-hop
row-normalized embedding, the closed-form optimal linear classifier,
the projected class-mean margin, and Monte-Carlo checks of the two
generalization-loss lower bounds (opposite-sign connectivity and
degree-shift regimes).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from graphmoe import nn
from graphmoe.graph import (
    Graph,
    PropagationOperator,
    ROW_NORMALIZED,
    build_graph,
    propagate,
)

log = logging.getLogger(__name__)

THEOREM_OPPOSITE_SIGN = "theorem1"
THEOREM_DEGREE_SHIFT = "theorem2"


@dataclass(frozen=True)
class CsbmParams:
    """Generative parameters: intra/inter edge probabilities and feature model."""

    n: int
    p: float
    q: float
    mu: np.ndarray
    nu: np.ndarray
    sigma: float
    class_balance: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=np.float64))
        if self.n < 2:
            raise ValueError("n must be >= 2")
        for name, prob in (("p", self.p), ("q", self.q)):
            if not 0.0 <= prob <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {prob}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must lie in (0, 1)")
        if np.linalg.norm(self.mu) > 1.0 + 1e-12 or np.linalg.norm(self.nu) > 1.0 + 1e-12:
            raise ValueError("class means must have norm <= 1")
        if self.mu.shape != self.nu.shape or self.mu.ndim != 1:
            raise ValueError("mu and nu must be 1-d vectors of equal dimension")
        sparse_floor = math.log(self.n) ** 2 / self.n
        if min(self.p, self.q) < sparse_floor:
            log.warning(
                "CSBM(n=%d) is in the sparse regime: min(p, q)=%.4g < log^2(n)/n=%.4g; "
                "asymptotic bounds may be loose",
                self.n, min(self.p, self.q), sparse_floor,
            )

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def mean_separation(self) -> float:
        return float(np.linalg.norm(self.mu - self.nu))

    def to_dict(self) -> dict:
        return {
            "n": self.n, "p": self.p, "q": self.q,
            "mu": self.mu.tolist(), "nu": self.nu.tolist(),
            "sigma": self.sigma, "class_balance": self.class_balance,
        }


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _balanced_labels(n: int, balance: float, rng: np.random.Generator) -> np.ndarray:
    n_zero = int(math.floor(n * balance))
    labels = np.concatenate([np.zeros(n_zero, dtype=np.int64),
                             np.ones(n - n_zero, dtype=np.int64)])
    return labels[rng.permutation(n)]


def sample_csbm(params: CsbmParams, seed) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Draw (graph, features, labels) from the block model.

    Each unordered node pair is connected independently with probability
    p (same label) or q (different); features are Gaussian around the
    class mean with isotropic noise sigma.
    """
    rng = _as_rng(seed)
    n = params.n
    labels = _balanced_labels(n, params.class_balance, rng)

    same = labels[:, None] == labels[None, :]
    prob = np.where(same, params.p, params.q)
    draws = rng.random((n, n))
    upper = np.triu(draws < prob, k=1)
    edges = np.argwhere(upper)
    graph = build_graph(edges, n)

    means = np.stack([params.mu, params.nu])
    features = means[labels] + params.sigma * rng.standard_normal((n, params.dim))
    return graph, features, labels


def sample_blended_csbm(
    n: int,
    homo: tuple[float, float],
    hetero: tuple[float, float],
    mu: np.ndarray,
    nu: np.ndarray,
    sigma: float,
    seed,
    cross: tuple[float, float] = (0.0, 0.0),
) -> tuple[Graph, np.ndarray, np.ndarray, np.ndarray]:
    """Two-block synthetic: half the nodes homophilic, half heterophilic.

    Both halves share the same label space and feature model, so the
    only way to tell them apart is through neighborhood structure.
    ``cross`` gives (same-label, different-label) edge probabilities
    between the blocks; the default keeps them disjoint. Returns
    (graph, features, labels, block) where block[i] is 0 for the
    homophilic half, 1 for the heterophilic.
    """
    rng = _as_rng(seed)
    half = n // 2
    sizes = (half, n - half)
    pqs = (homo, hetero)
    edges_all = []
    labels = np.empty(n, dtype=np.int64)
    block = np.concatenate([np.zeros(sizes[0], dtype=np.int64),
                            np.ones(sizes[1], dtype=np.int64)])
    offset = 0
    for size, (p, q) in zip(sizes, pqs):
        sub = _balanced_labels(size, 0.5, rng)
        labels[offset:offset + size] = sub
        same = sub[:, None] == sub[None, :]
        prob = np.where(same, p, q)
        upper = np.triu(rng.random((size, size)) < prob, k=1)
        edges = np.argwhere(upper) + offset
        edges_all.append(edges)
        offset += size
    if max(cross) > 0.0:
        same = labels[:sizes[0], None] == labels[None, sizes[0]:]
        prob = np.where(same, cross[0], cross[1])
        hits = np.argwhere(rng.random((sizes[0], sizes[1])) < prob)
        hits[:, 1] += sizes[0]
        edges_all.append(hits)
    graph = build_graph(np.concatenate(edges_all), n)
    means = np.stack([np.asarray(mu, dtype=np.float64), np.asarray(nu, dtype=np.float64)])
    features = means[labels] + sigma * rng.standard_normal((n, means.shape[1]))
    return graph, features, labels, block


def sgc_embed(graph: Graph, features: np.ndarray) -> np.ndarray:
    """One hop of row-normalized propagation (no self-loops).

    Isolated nodes come out as zero rows; callers evaluating losses drop
    them (see :func:`evaluate_classifier`).
    """
    op = PropagationOperator(ROW_NORMALIZED, graph)
    return propagate(op, features)


@dataclass(frozen=True)
class LinearClassifier:
    """Sigmoid-linear node classifier with a norm budget on the weights."""

    w: np.ndarray
    b: float
    R: float

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64))
        if np.linalg.norm(self.w) > self.R + 1e-9:
            raise ValueError("weight norm exceeds the budget R")

    def predict_proba(self, embedded: np.ndarray) -> np.ndarray:
        return nn.sigmoid(embedded @ self.w + self.b)


def optimal_classifier(params: CsbmParams, R: float) -> LinearClassifier:
    """Closed-form training-optimal classifier for the block model.

    w* points from mu to nu scaled to norm R; b* centers the decision
    boundary on the midpoint of the class means.
    """
    diff = params.nu - params.mu
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        raise ValueError("mu == nu: classes are not separable")
    w = R * diff / norm
    b = -0.5 * float(np.dot(params.nu + params.mu, w))
    return LinearClassifier(w=w, b=b, R=R)


def evaluate_classifier(clf: LinearClassifier, graph: Graph,
                        features: np.ndarray, labels: np.ndarray) -> float:
    """Binary cross-entropy of the classifier on one-hop embeddings.

    Degree-0 nodes are excluded (their row-normalized embedding is
    undefined); the count is logged.
    """
    loss, _ = evaluate_classifier_detailed(clf, graph, features, labels)
    return loss


def evaluate_classifier_detailed(clf: LinearClassifier, graph: Graph,
                                 features: np.ndarray, labels: np.ndarray
                                 ) -> tuple[float, int]:
    labels = np.asarray(labels)
    if features.shape[0] != graph.num_nodes or labels.shape[0] != graph.num_nodes:
        raise ValueError("features/labels row count must equal num_nodes")
    embedded = sgc_embed(graph, features)
    keep = graph.degrees > 0
    dropped = int(np.count_nonzero(~keep))
    if dropped:
        log.debug("dropping %d isolated nodes from loss evaluation", dropped)
    if not keep.any():
        raise ValueError("all nodes are isolated; loss undefined")
    probs = clf.predict_proba(embedded[keep])
    return nn.bce_loss(probs, labels[keep].astype(np.float64)), dropped


def margin(params: CsbmParams, clf: LinearClassifier) -> float:
    """Projected separation of the class-conditional embedding means."""
    total = params.p + params.q
    if total == 0.0:
        raise ValueError("p + q must be positive")
    gap = (params.p - params.q) / total * (params.nu - params.mu)
    return float(np.dot(clf.w, gap))


@dataclass
class BoundReport:
    """Outcome of one Monte-Carlo bound check."""

    regime: str
    train_params: CsbmParams
    test_params: CsbmParams
    R: float
    trials: int
    measured_loss: float
    std_error: float
    theoretical_bound: float
    slack: float
    satisfied: bool
    per_trial_losses: list[float] = field(default_factory=list)
    dropped_nodes_mean: float = 0.0

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "train_params": self.train_params.to_dict(),
            "test_params": self.test_params.to_dict(),
            "R": self.R,
            "trials": self.trials,
            "measured_loss": self.measured_loss,
            "std_error": self.std_error,
            "theoretical_bound": self.theoretical_bound,
            "slack": self.slack,
            "satisfied": self.satisfied,
            "per_trial_losses": self.per_trial_losses,
            "dropped_nodes_mean": self.dropped_nodes_mean,
        }


def _check_shared_feature_model(train: CsbmParams, test: CsbmParams) -> None:
    if not (np.allclose(train.mu, test.mu) and np.allclose(train.nu, test.nu)):
        raise ValueError("train and test must share the class means mu, nu")


def _monte_carlo_loss(clf: LinearClassifier, test: CsbmParams, trials: int,
                      seed) -> tuple[np.ndarray, float]:
    rng = _as_rng(seed)
    child_seeds = rng.bit_generator.seed_seq.spawn(trials)
    losses = np.empty(trials)
    dropped_total = 0
    for i, child in enumerate(child_seeds):
        trial_rng = np.random.Generator(np.random.PCG64(child))
        graph, feats, labels = sample_csbm(test, trial_rng)
        losses[i], dropped = evaluate_classifier_detailed(clf, graph, feats, labels)
        dropped_total += dropped
    return losses, dropped_total / trials


def _finish_report(regime: str, train: CsbmParams, test: CsbmParams, R: float,
                   trials: int, losses: np.ndarray, bound: float,
                   dropped_mean: float) -> BoundReport:
    mean = float(losses.mean())
    se = float(losses.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    slack = 2.0 * se
    return BoundReport(
        regime=regime,
        train_params=train,
        test_params=test,
        R=R,
        trials=trials,
        measured_loss=mean,
        std_error=se,
        theoretical_bound=bound,
        slack=slack,
        satisfied=bool(mean >= bound - slack),
        per_trial_losses=[float(x) for x in losses],
        dropped_nodes_mean=dropped_mean,
    )


def theorem1_bound(test: CsbmParams, R: float, separation: float) -> float:
    """Loss lower bound in the opposite-sign connectivity regime."""
    return R * (test.q - test.p) * separation / (2.0 * (test.p + test.q))


def theorem2_bound(test: CsbmParams, R: float, separation: float) -> float:
    """Loss lower bound in the same-sign, degree-shifted regime (clamped at 0)."""
    shrink = R * separation * abs(test.p - test.q) / (
        math.sqrt(8.0) * test.sigma * (test.p + test.q)
    )
    return max(0.0, math.log(2.0) * (1.0 - shrink))


def theorem1_check(train: CsbmParams, test: CsbmParams, R: float,
                   trials: int, seed: int = 0) -> BoundReport:
    """Monte-Carlo check of the opposite-sign generalization bound."""
    _check_shared_feature_model(train, test)
    if (train.p - train.q) * (test.p - test.q) > 0:
        raise ValueError(
            "(p-q) and (p'-q') share a sign; this is the degree-shift regime, "
            "use theorem2_check"
        )
    clf = optimal_classifier(train, R)
    losses, dropped = _monte_carlo_loss(clf, test, trials, seed)
    bound = theorem1_bound(test, R, train.mean_separation())
    return _finish_report(THEOREM_OPPOSITE_SIGN, train, test, R, trials,
                          losses, bound, dropped)


def default_theorem_grids(n: int = 2000, d: int = 4, sigma: float = 0.3
                          ) -> dict[str, list[tuple[CsbmParams, CsbmParams]]]:
    """Canonical (train, test) grids for both bound regimes.

    12 opposite-sign cells and 12 same-sign degree-shifted cells, all at
    unit mean separation.
    """
    mu = np.zeros(d)
    nu = np.zeros(d)
    mu[0], nu[0] = -0.5, 0.5

    def make(p, q):
        return CsbmParams(n=n, p=p, q=q, mu=mu, nu=nu, sigma=sigma)

    trains = [(0.05, 0.01), (0.04, 0.02), (0.10, 0.02)]
    opposite_tests = [(0.01, 0.05), (0.02, 0.04), (0.02, 0.10), (0.01, 0.09)]
    shifted_tests = [(0.20, 0.04), (0.16, 0.04), (0.15, 0.03), (0.025, 0.005)]
    grids = {
        THEOREM_OPPOSITE_SIGN: [(make(*tr), make(*te))
                                for tr in trains for te in opposite_tests],
        THEOREM_DEGREE_SHIFT: [(make(*tr), make(*te))
                               for tr in trains for te in shifted_tests],
    }
    return grids


def theorem2_check(train: CsbmParams, test: CsbmParams, R: float,
                   trials: int, seed: int = 0) -> BoundReport:
    """Monte-Carlo check of the degree-shift generalization bound."""
    _check_shared_feature_model(train, test)
    if (train.p - train.q) * (test.p - test.q) < 0:
        raise ValueError(
            "(p-q) and (p'-q') have opposite signs; use theorem1_check"
        )
    if math.isclose(train.p + train.q, test.p + test.q):
        raise ValueError("degree-shift regime requires p + q != p' + q'")
    if not (math.isclose(train.class_balance, 0.5) and math.isclose(test.class_balance, 0.5)):
        raise ValueError("degree-shift bound assumes equal class sizes")
    clf = optimal_classifier(train, R)
    losses, dropped = _monte_carlo_loss(clf, test, trials, seed)
    bound = theorem2_bound(test, R, train.mean_separation())
    return _finish_report(THEOREM_DEGREE_SHIFT, train, test, R, trials,
                          losses, bound, dropped)
