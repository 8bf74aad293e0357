"""Split generation, the mixture objective, and two-stage training.

Stage one trains each expert alone on a subsample of the training
nodes; stage two resumes those experts inside the full mixture and
optimizes experts, edge discriminator, and gating network end to end
with separate learning rates. Early stopping tracks validation
accuracy and the best-validation snapshot is restored before test
evaluation.

Runs are deterministic: every stochastic component draws from its own
named stream derived from the run seed, so e.g. a single-expert
mixture follows the exact same trajectory as training that expert
alone.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from graphmoe import nn
from graphmoe.experts import (
    DEFAULT_ROSTER,
    Expert,
    ExpertEnsemble,
    ExpertSpec,
    build_ensemble,
)
from graphmoe.graph import Graph
from graphmoe.nn import AdamW, Array, rng_stream
from graphmoe.patterns import (
    EdgeDiscriminator,
    GatingNetwork,
    PatternGate,
    WalkConfig,
    sample_walk_contexts,
)

_PRETRAIN_LR_CHOICES = (0.0005, 0.001)
_PRETRAIN_WD_CHOICES = (1e-5, 5e-5, 1e-4)
_GATING_LR_CHOICES = (0.0005, 0.001)
_GATING_WD_CHOICES = (1e-5, 5e-5, 1e-4)
_EXPERT_LR_CHOICES = (0.001, 0.01, 0.1, 0.5)
_EXPERT_WD_CHOICES = (0.0, 5e-5, 5e-3, 5e-2)
_HIDDEN_CHOICES = (32, 64, 128, 256)


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    split_index: int = 0
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if not math.isclose(sum(self.fractions), 1.0):
            raise ValueError("split fractions must sum to 1")
        if not 0 <= self.split_index < 10:
            raise ValueError("split_index must lie in [0, 10)")


@dataclass
class Masks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        total = self.train.astype(int) + self.val.astype(int) + self.test.astype(int)
        if not (total == 1).all():
            raise ValueError("masks must be disjoint and cover all nodes")


def make_splits(num_nodes: int, spec: SplitSpec) -> Masks:
    """Seeded 60/20/20 permutation split (floor/floor/remainder)."""
    if num_nodes < 5:
        raise ValueError("need at least 5 nodes to split")
    rng = rng_stream(spec.seed, "split", spec.split_index)
    order = rng.permutation(num_nodes)
    n_train = int(math.floor(spec.fractions[0] * num_nodes))
    n_val = int(math.floor(spec.fractions[1] * num_nodes))
    train = np.zeros(num_nodes, dtype=bool)
    val = np.zeros(num_nodes, dtype=bool)
    test = np.zeros(num_nodes, dtype=bool)
    train[order[:n_train]] = True
    val[order[n_train:n_train + n_val]] = True
    test[order[n_train + n_val:]] = True
    return Masks(train=train, val=val, test=test)


def default_expert_specs(hidden: int = 64, layers: int = 2,
                         dropout: float = 0.0) -> list[ExpertSpec]:
    return [ExpertSpec(kind=k, layers=layers, hidden=hidden, dropout=dropout)
            for k in DEFAULT_ROSTER]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both training stages.

    Enumerated fields are validated against the documented search space;
    epoch counts, patience, and num_walks are free.
    """

    expert_specs: tuple[ExpertSpec, ...] = tuple(default_expert_specs())
    gating_hidden: int = 64
    gating_layers: int = 2
    gating_dropout: float = 0.0
    disc_hidden: tuple[int, ...] = (32,)
    disc_dropout: float = 0.0
    walk: WalkConfig = WalkConfig()
    pretrain_lr: float = 0.001
    pretrain_weight_decay: float = 5e-5
    pretrain_fraction: float = 0.5
    pretrain_epochs: int = 300
    gating_lr: float = 0.001
    gating_weight_decay: float = 5e-5
    expert_lr: float = 0.01
    expert_weight_decay: float = 5e-5
    joint_epochs: int = 300
    patience: int = 100
    two_stage: bool = True
    freeze_experts: bool = False
    uniform_gate: bool = False
    use_local: bool = True
    use_global: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "expert_specs", tuple(self.expert_specs))
        object.__setattr__(self, "disc_hidden", tuple(self.disc_hidden))
        if not self.expert_specs:
            raise ValueError("need at least one expert spec")
        if self.gating_hidden not in _HIDDEN_CHOICES:
            raise ValueError(f"gating_hidden must be one of {_HIDDEN_CHOICES}")
        if self.gating_layers not in (1, 2, 3, 4):
            raise ValueError("gating_layers must be in {1, 2, 3, 4}")
        for name, value, choices in (
            ("pretrain_lr", self.pretrain_lr, _PRETRAIN_LR_CHOICES),
            ("pretrain_weight_decay", self.pretrain_weight_decay, _PRETRAIN_WD_CHOICES),
            ("gating_lr", self.gating_lr, _GATING_LR_CHOICES),
            ("gating_weight_decay", self.gating_weight_decay, _GATING_WD_CHOICES),
            ("expert_lr", self.expert_lr, _EXPERT_LR_CHOICES),
            ("expert_weight_decay", self.expert_weight_decay, _EXPERT_WD_CHOICES),
        ):
            if not any(math.isclose(value, c, abs_tol=1e-15) for c in choices):
                raise ValueError(f"{name}={value} outside the search space {choices}")
        for name, rate in (("gating_dropout", self.gating_dropout),
                           ("disc_dropout", self.disc_dropout)):
            if not 0.0 <= rate <= 0.9:
                raise ValueError(f"{name} must lie in [0, 0.9]")
        for h in self.disc_hidden:
            if h not in _HIDDEN_CHOICES:
                raise ValueError(f"disc_hidden entries must be in {_HIDDEN_CHOICES}")
        if not 0.0 < self.pretrain_fraction <= 1.0:
            raise ValueError("pretrain_fraction must lie in (0, 1]")
        if self.pretrain_epochs < 0 or self.joint_epochs < 1 or self.patience < 1:
            raise ValueError("bad epoch/patience values")

    def to_dict(self) -> dict:
        return {
            "expert_specs": [s.to_dict() for s in self.expert_specs],
            "gating_hidden": self.gating_hidden,
            "gating_layers": self.gating_layers,
            "gating_dropout": self.gating_dropout,
            "disc_hidden": list(self.disc_hidden),
            "disc_dropout": self.disc_dropout,
            "walk": {"walk_length": self.walk.walk_length,
                     "num_walks": self.walk.num_walks},
            "pretrain_lr": self.pretrain_lr,
            "pretrain_weight_decay": self.pretrain_weight_decay,
            "pretrain_fraction": self.pretrain_fraction,
            "pretrain_epochs": self.pretrain_epochs,
            "gating_lr": self.gating_lr,
            "gating_weight_decay": self.gating_weight_decay,
            "expert_lr": self.expert_lr,
            "expert_weight_decay": self.expert_weight_decay,
            "joint_epochs": self.joint_epochs,
            "patience": self.patience,
            "two_stage": self.two_stage,
            "freeze_experts": self.freeze_experts,
            "uniform_gate": self.uniform_gate,
            "use_local": self.use_local,
            "use_global": self.use_global,
            "seed": self.seed,
        }

    def hash(self) -> str:
        return nn.config_hash(self.to_dict())


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    if "expert_specs" in data:
        data["expert_specs"] = tuple(ExpertSpec(**s) for s in data["expert_specs"])
    if "walk" in data and isinstance(data["walk"], dict):
        data["walk"] = WalkConfig(**data["walk"])
    if "disc_hidden" in data:
        data["disc_hidden"] = tuple(data["disc_hidden"])
    return TrainConfig(**data)


def accuracy(logits: Array, labels: Array, mask: np.ndarray) -> float:
    """Argmax accuracy over a node mask; ties go to the lowest class index."""
    if not mask.any():
        raise ValueError("empty evaluation mask")
    pred = np.argmax(logits[mask], axis=1)
    return float(np.mean(pred == labels[mask]))


def moe_loss(expert_logits: list[Array], gate_weights: Array, labels: Array,
             train_mask: np.ndarray) -> tuple[float, list[Array], Array]:
    """Mixture objective: cross-entropy on gate-mixed logits.

    Mixed logits are sum_j w_j * logits_j per node. With two classes
    this is exactly the logistic loss on the mixed logit difference;
    with more classes it is the softmax cross-entropy generalization.
    Returns (loss, gradients w.r.t. each expert's logits, gradient
    w.r.t. the gate weights); the loss averages over the training mask.
    """
    if not train_mask.any():
        raise ValueError("empty training mask")
    n, c = expert_logits[0].shape
    mixed = np.zeros((n, c))
    for j, logits in enumerate(expert_logits):
        mixed += gate_weights[:, j:j + 1] * logits
    idx = np.flatnonzero(train_mask)
    loss, grad_masked = nn.softmax_cross_entropy(mixed[idx], labels[idx])
    dmixed = np.zeros_like(mixed)
    dmixed[idx] = grad_masked
    grad_logits = [gate_weights[:, j:j + 1] * dmixed
                   for j in range(len(expert_logits))]
    grad_gate = np.stack([(dmixed * logits).sum(axis=1)
                          for logits in expert_logits], axis=1)
    return loss, grad_logits, grad_gate


class _EarlyStopper:
    """Best-validation tracking with patience; ties do not count as progress."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_acc = -np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, acc: float, epoch: int) -> bool:
        if acc > self.best_acc:
            self.best_acc = acc
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _snapshot(params: dict[str, Array]) -> dict[str, Array]:
    return {k: v.copy() for k, v in params.items()}


def train_single_expert(expert: Expert, graph: Graph, features: Array,
                        labels: Array, train_mask: np.ndarray,
                        val_mask: np.ndarray, *, lr: float, weight_decay: float,
                        epochs: int, patience: int,
                        rng: np.random.Generator) -> dict:
    """Softmax cross-entropy training with val-accuracy early stopping.

    Restores the best-validation parameters in place before returning.
    """
    params = expert.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    stopper = _EarlyStopper(patience)
    best = _snapshot(params)
    idx = np.flatnonzero(train_mask)
    for epoch in range(epochs):
        logits = expert.forward(graph, features, training=True, rng=rng)
        _, grad_masked = nn.softmax_cross_entropy(logits[idx], labels[idx])
        dlogits = np.zeros_like(logits)
        dlogits[idx] = grad_masked
        expert.zero_grads()
        expert.backward(dlogits)
        opt.step(expert.gradients())

        val_logits = expert.forward(graph, features, training=False)
        val_acc = accuracy(val_logits, labels, val_mask)
        if stopper.update(val_acc, epoch):
            best = _snapshot(params)
        if stopper.should_stop:
            break
    nn.load_params_into(params, best)
    return {"best_val_acc": stopper.best_acc, "best_epoch": stopper.best_epoch,
            "epochs_run": epoch + 1 if epochs else 0}


def pretrain_experts(config: TrainConfig, graph: Graph, features: Array,
                     labels: Array, masks: Masks, run_seed: int,
                     num_classes: int | None = None,
                     checkpoint_dir: str | None = None) -> tuple[ExpertEnsemble, list[dict]]:
    """Stage one: train each expert alone on a training-node subsample.

    With a checkpoint_dir whose manifest matches this config, saved
    experts are loaded instead of retrained (load-or-train).
    """
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    ensemble = build_ensemble(list(config.expert_specs), features.shape[1],
                              num_classes, run_seed)
    if checkpoint_dir is not None:
        loaded = _try_load_ensemble(ensemble, config, checkpoint_dir)
        if loaded is not None:
            return ensemble, loaded

    train_idx = np.flatnonzero(masks.train)
    sub_size = int(math.floor(config.pretrain_fraction * train_idx.size))
    if sub_size < num_classes:
        raise ValueError(
            f"pretraining subsample of {sub_size} nodes is smaller than the "
            f"class count {num_classes}"
        )
    sub_rng = rng_stream(run_seed, "pretrain-subsample")
    chosen = sub_rng.choice(train_idx, size=sub_size, replace=False)
    sub_mask = np.zeros_like(masks.train)
    sub_mask[chosen] = True

    histories = []
    for j, expert in enumerate(ensemble.experts):
        hist = train_single_expert(
            expert, graph, features, labels, sub_mask, masks.val,
            lr=config.pretrain_lr, weight_decay=config.pretrain_weight_decay,
            epochs=config.pretrain_epochs, patience=config.patience,
            rng=rng_stream(run_seed, "expert", j),
        )
        histories.append(hist)
    if checkpoint_dir is not None:
        _save_ensemble(ensemble, config, checkpoint_dir, histories)
    return ensemble, histories


def _ensemble_manifest(ensemble: ExpertEnsemble, config: TrainConfig) -> dict:
    return {"config_hash": config.hash(),
            "specs": [s.to_dict() for s in ensemble.specs]}


def _save_ensemble(ensemble: ExpertEnsemble, config: TrainConfig,
                   directory: str, histories: list[dict]) -> None:
    os.makedirs(directory, exist_ok=True)
    for j, expert in enumerate(ensemble.experts):
        nn.save_params(os.path.join(directory, f"expert_{j}.npz"),
                       expert.parameters(),
                       meta={"spec": expert.spec.to_dict(),
                             "history": histories[j],
                             "config_hash": config.hash()})
    manifest = _ensemble_manifest(ensemble, config)
    manifest["histories"] = histories
    with open(os.path.join(directory, "ensemble.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _try_load_ensemble(ensemble: ExpertEnsemble, config: TrainConfig,
                       directory: str) -> list[dict] | None:
    manifest_path = os.path.join(directory, "ensemble.json")
    if not os.path.exists(manifest_path):
        return None
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != config.hash():
        return None
    for j, expert in enumerate(ensemble.experts):
        saved, _ = nn.load_params(os.path.join(directory, f"expert_{j}.npz"))
        nn.load_params_into(expert.parameters(), saved)
    return manifest.get("histories", [{} for _ in ensemble.experts])


class MixtureModel:
    """Trained mixture: experts plus pattern gate, ready for evaluation."""

    def __init__(self, ensemble: ExpertEnsemble, pattern_gate: PatternGate | None,
                 config: TrainConfig, run_seed: int, context_epoch: int):
        self.ensemble = ensemble
        self.pattern_gate = pattern_gate
        self.config = config
        self.run_seed = run_seed
        self.context_epoch = context_epoch

    def contexts_for_eval(self, graph: Graph) -> np.ndarray | None:
        if self.config.uniform_gate:
            return None
        rng = rng_stream(self.run_seed, "walks", self.context_epoch)
        return sample_walk_contexts(graph, self.config.walk, rng)

    def gate_weights(self, graph: Graph, features: Array,
                     contexts: np.ndarray | None = None) -> Array:
        n = graph.num_nodes
        t = self.ensemble.size
        if self.config.uniform_gate or self.pattern_gate is None:
            return np.full((n, t), 1.0 / t)
        if contexts is None:
            contexts = self.contexts_for_eval(graph)
        return self.pattern_gate.forward(graph, features, contexts,
                                         training=False)

    def mixed_logits(self, graph: Graph, features: Array,
                     contexts: np.ndarray | None = None) -> Array:
        weights = self.gate_weights(graph, features, contexts)
        logits_list = self.ensemble.forward(graph, features, training=False)
        mixed = np.zeros_like(logits_list[0])
        for j, logits in enumerate(logits_list):
            mixed += weights[:, j:j + 1] * logits
        return mixed

    def evaluate(self, graph: Graph, features: Array, labels: Array,
                 mask: np.ndarray, contexts: np.ndarray | None = None) -> float:
        return accuracy(self.mixed_logits(graph, features, contexts),
                        labels, mask)

    def parameters(self) -> dict[str, Array]:
        out = {f"ensemble/{k}": v for k, v in self.ensemble.parameters().items()}
        if self.pattern_gate is not None:
            out.update({f"pattern_gate/{k}": v
                        for k, v in self.pattern_gate.parameters().items()})
        return out

    def save(self, path: str) -> None:
        meta = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "run_seed": self.run_seed,
            "context_epoch": self.context_epoch,
            "in_dim": self.ensemble.experts[0].in_dim,
            "num_classes": self.ensemble.experts[0].num_classes,
        }
        nn.save_params(path, self.parameters(), meta=meta)


def load_mixture(path: str) -> MixtureModel:
    saved, meta = nn.load_params(path)
    config = config_from_dict(meta["config"])
    model = build_mixture(config, meta["in_dim"], meta["num_classes"],
                          meta["run_seed"])
    model.context_epoch = meta["context_epoch"]
    nn.load_params_into(model.parameters(), saved)
    return model


def build_mixture(config: TrainConfig, in_dim: int, num_classes: int,
                  run_seed: int) -> MixtureModel:
    ensemble = build_ensemble(list(config.expert_specs), in_dim, num_classes,
                              run_seed)
    gate = None
    if not config.uniform_gate:
        disc = EdgeDiscriminator(in_dim, hidden=config.disc_hidden,
                                 dropout=config.disc_dropout,
                                 rng=rng_stream(run_seed, "disc-init"))
        gating = GatingNetwork(len(config.expert_specs),
                               hidden=config.gating_hidden,
                               gate_layers=config.gating_layers,
                               dropout=config.gating_dropout,
                               rng=rng_stream(run_seed, "gate-init"),
                               use_local=config.use_local,
                               use_global=config.use_global)
        gate = PatternGate(disc, gating)
    return MixtureModel(ensemble, gate, config, run_seed, context_epoch=0)


def joint_train(config: TrainConfig, ensemble: ExpertEnsemble, graph: Graph,
                features: Array, labels: Array, masks: Masks,
                run_seed: int) -> tuple[MixtureModel, dict]:
    """Stage two: end-to-end training of experts, discriminator, and gate.

    The passed ensemble resumes from its current parameters. Returns the
    model restored to its best-validation snapshot plus a run record.
    """
    in_dim = features.shape[1]
    for expert in ensemble.experts:
        if expert.in_dim != in_dim:
            raise ValueError("pretrained ensemble does not match the feature dim")
    t = ensemble.size
    n = graph.num_nodes

    model = build_mixture(config, in_dim, ensemble.experts[0].num_classes,
                          run_seed)
    model.ensemble = ensemble
    pattern_gate = model.pattern_gate

    expert_params = ensemble.parameters()
    expert_opt = None
    if not config.freeze_experts:
        expert_opt = AdamW(expert_params, lr=config.expert_lr,
                           weight_decay=config.expert_weight_decay)
    gate_opt = None
    if pattern_gate is not None:
        gate_opt = AdamW(pattern_gate.parameters(), lr=config.gating_lr,
                         weight_decay=config.gating_weight_decay)

    expert_rngs = [rng_stream(run_seed, "expert", j) for j in range(t)]
    gate_rng = rng_stream(run_seed, "gate")

    all_params = model.parameters()
    stopper = _EarlyStopper(config.patience)
    best = _snapshot(all_params)
    best_contexts_epoch = 0
    losses = []
    expert_training = not config.freeze_experts

    for epoch in range(config.joint_epochs):
        contexts = None
        if pattern_gate is not None:
            walk_rng = rng_stream(run_seed, "walks", epoch)
            contexts = sample_walk_contexts(graph, config.walk, walk_rng)
            weights = pattern_gate.forward(graph, features, contexts,
                                           training=True, rng=gate_rng)
            row_sums = weights.sum(axis=1)
            if (weights < 0).any() or np.abs(row_sums - 1.0).max() > 1e-9:
                raise FloatingPointError(
                    f"gate left the simplex at epoch {epoch}")
        else:
            weights = np.full((n, t), 1.0 / t)

        logits_list = ensemble.forward(
            graph, features, training=expert_training,
            rngs=expert_rngs if expert_training else None)
        loss, grad_logits, grad_gate = moe_loss(logits_list, weights, labels,
                                                masks.train)
        losses.append(loss)

        if expert_opt is not None:
            ensemble.zero_grads()
            ensemble.backward(grad_logits)
            expert_opt.step(ensemble.gradients())
        if gate_opt is not None:
            pattern_gate.zero_grads()
            pattern_gate.backward(grad_gate)
            gate_opt.step(pattern_gate.gradients())

        val_acc = model.evaluate(graph, features, labels, masks.val,
                                 contexts=contexts)
        if stopper.update(val_acc, epoch):
            best = _snapshot(all_params)
            best_contexts_epoch = epoch
        if stopper.should_stop:
            break

    nn.load_params_into(all_params, best)
    model.context_epoch = best_contexts_epoch
    test_acc = model.evaluate(graph, features, labels, masks.test,
                              contexts=model.contexts_for_eval(graph))
    record = {
        "val_acc": stopper.best_acc,
        "test_acc": test_acc,
        "best_epoch": stopper.best_epoch,
        "epochs_run": len(losses),
        "final_loss": losses[-1] if losses else None,
    }
    return model, record


@dataclass
class RunResult:
    """Aggregate over (split, seed) runs; std is the population std."""

    entries: list[dict] = field(default_factory=list)
    config_hash: str = ""
    checkpoints: list[str] = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([e["test_acc"] for e in self.entries])

    @property
    def mean_acc(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_acc(self) -> float:
        return float(self.accuracies.std())

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "mean_test_acc": self.mean_acc,
            "std_test_acc": self.std_acc,
            "entries": self.entries,
            "checkpoints": self.checkpoints,
        }


def run_one(config: TrainConfig, graph: Graph, features: Array, labels: Array,
            split_index: int, seed_value: int,
            out_dir: str | None = None) -> dict:
    """One (split, seed) protocol run; returns the record dict."""
    masks = make_splits(graph.num_nodes, SplitSpec(seed=config.seed,
                                                   split_index=split_index))
    run_seed = nn.derive_seed(config.seed, "run", split_index, seed_value)
    if config.two_stage and config.pretrain_epochs > 0:
        ensemble, _ = pretrain_experts(config, graph, features, labels, masks,
                                       run_seed)
    else:
        ensemble = build_ensemble(list(config.expert_specs), features.shape[1],
                                  int(labels.max()) + 1, run_seed)
    model, record = joint_train(config, ensemble, graph, features, labels,
                                masks, run_seed)
    record.update({"split": split_index, "seed": seed_value})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"mixture_s{split_index}_r{seed_value}.npz")
        model.save(path)
        record["checkpoint"] = path
    return record


def run_experiment(config: TrainConfig, graph: Graph, features: Array,
                   labels: Array, split_indices=range(10), seeds=(0, 1, 2),
                   out_dir: str | None = None, jobs: int = 1) -> RunResult:
    """Full protocol: every split x seed, mean and std test accuracy."""
    tasks = [(s, r) for s in split_indices for r in seeds]
    result = RunResult(config_hash=config.hash())
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_one, config, graph, features, labels,
                                   s, r, out_dir) for s, r in tasks]
            for fut in futures:
                result.entries.append(fut.result())
    else:
        for s, r in tasks:
            result.entries.append(run_one(config, graph, features, labels,
                                          s, r, out_dir))
    result.checkpoints = [e["checkpoint"] for e in result.entries
                          if "checkpoint" in e]
    return result
