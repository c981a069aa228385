"""Alternating training driver and its ablation variants.

One outer epoch = a continuous phase that refits student/exercise
parameters under the current tree, followed by a discrete phase that
searches for a better tree under the fixed parameters. The ``wo_gp``
variant keeps the initial tree forever; ``wo_adam`` swaps the gradient
phase for a derivative-free evolutionary strategy over parameter
populations. All randomness flows through per-(epoch, phase) substreams
of the master seed, so runs are reproducible bit-for-bit regardless of
thread count.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import (
    ModelParams,
    PoConfig,
    fit_params,
    load_params,
    loss_value,
    predict_dataset,
    save_params,
    _init_params_rng,
)
from .dataset import ResponseDataset
from .errors import DataError, TrainingError
from .exprtree import (
    ExprTree,
    Op,
    OperatorNode,
    TerminalKind,
    TerminalNode,
    parse,
    serialize,
    validate,
)
from .gp import GpConfig, evolve, tournament_select
from .metrics import accuracy

__all__ = [
    "TrainConfig",
    "EsConfig",
    "TrainedModel",
    "make_initial_tree",
    "run_training",
    "run_full",
    "run_wo_gp",
    "run_wo_adam",
]

VARIANTS = ("full", "wo_gp", "wo_adam")

# Substream labels for per-phase RNG derivation.
_PHASE_INIT, _PHASE_PO, _PHASE_GP, _PHASE_ES = 0, 1, 2, 3

CONVENTIONS = {
    "split": "per-student stratified, floor(count * fraction) to test",
    "probability_clamp": "predictions clamped to [1e-7, 1 - 1e-7] before logs",
    "loss": "cross entropy summed (not averaged) over the batch",
    "adam_state": "fresh per continuous phase; the tree changed in between",
    "fitness_tie_break": "larger node count wins fitness ties",
    "rng": "per-(epoch, phase) substreams of the master seed",
}


@dataclass
class EsConfig:
    """Evolutionary-strategy settings for the gradient-free variant."""

    learning_rate: float = 0.1
    population_size: int = 100
    generations: int = 50
    mutation_rate: float = 0.5
    tournament_k: int = 3

    def __post_init__(self):
        if min(self.learning_rate, self.population_size, self.generations) <= 0:
            raise ValueError("learning_rate, population_size, generations must be positive")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must be in [0, 1]")
        if self.tournament_k < 1:
            raise ValueError("tournament_k must be >= 1")


@dataclass
class TrainConfig:
    outer_epochs: int = 10
    variant: str = "full"
    seed: int = 0
    po: PoConfig = field(default_factory=PoConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    es: EsConfig = field(default_factory=EsConfig)

    def __post_init__(self):
        if self.outer_epochs < 1:
            raise ValueError("outer_epochs must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    train_loss: float
    train_accuracy: float
    best_gp_fitness: float | None


@dataclass
class TrainedModel:
    params: ModelParams
    tree: ExprTree
    history: list[HistoryEntry]
    config: TrainConfig
    seed: int
    attribute_labels: list[str] | None = None

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_params(self.params, out / "params.txt")
        (out / "tree.txt").write_text(serialize(self.tree) + "\n", encoding="utf-8")
        rows = ["epoch,train_loss,train_accuracy,best_gp_fitness"]
        for h in self.history:
            gp_part = "" if h.best_gp_fitness is None else repr(h.best_gp_fitness)
            rows.append(f"{h.epoch},{h.train_loss!r},{h.train_accuracy!r},{gp_part}")
        (out / "history.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        snapshot = asdict(self.config)
        snapshot["seed"] = self.seed
        snapshot["conventions"] = CONVENTIONS
        if self.attribute_labels is not None:
            snapshot["attribute_labels"] = self.attribute_labels
        (out / "config.json").write_text(
            json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, model_dir: str | Path) -> "TrainedModel":
        d = Path(model_dir)
        for name in ("params.txt", "tree.txt", "history.csv", "config.json"):
            if not (d / name).exists():
                raise DataError(f"model directory incomplete: missing {d / name}")
        params = load_params(d / "params.txt")
        tree = parse((d / "tree.txt").read_text(encoding="utf-8").strip())
        history = []
        lines = (d / "history.csv").read_text(encoding="utf-8").splitlines()
        for line in lines[1:]:
            epoch, loss, acc, gp_fit = line.split(",")
            history.append(
                HistoryEntry(
                    int(epoch), float(loss), float(acc), float(gp_fit) if gp_fit else None
                )
            )
        snapshot = json.loads((d / "config.json").read_text(encoding="utf-8"))
        labels = snapshot.pop("attribute_labels", None)
        seed = snapshot.pop("seed")
        snapshot.pop("conventions", None)
        config = TrainConfig(
            outer_epochs=snapshot["outer_epochs"],
            variant=snapshot["variant"],
            seed=seed,
            po=PoConfig(**snapshot["po"]),
            gp=GpConfig(**snapshot["gp"]),
            es=EsConfig(**snapshot["es"]),
        )
        return cls(params, tree, history, config, seed, labels)


def make_initial_tree() -> ExprTree:
    """The hand-designed starting interaction function: the relevance-
    weighted proficiency-difficulty gap scaled by discrimination,
    ``((rele ∘ (P − diff)) × disc)``. Length-generic over attributes."""
    gap = OperatorNode(
        Op.SUB,
        (TerminalNode(TerminalKind.PROFICIENCY), TerminalNode(TerminalKind.DIFFICULTY)),
    )
    inner = OperatorNode(Op.INNER, (TerminalNode(TerminalKind.RELEVANCE), gap))
    root = OperatorNode(Op.MUL, (inner, TerminalNode(TerminalKind.DISCRIMINATION)))
    tree = ExprTree(root)
    assert not validate(tree)
    return tree


def _phase_rng(master_seed: int, epoch: int, phase: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed, epoch, phase)))


def _params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for arr in (params.raw_p, params.raw_diff, params.raw_disc):
        h.update(arr.tobytes())
    return h.hexdigest()


def _es_phase(
    tree: ExprTree,
    train: ResponseDataset,
    shape: tuple[int, int, int],
    cfg: EsConfig,
    rng: np.random.Generator,
    log: Callable[[str], None] | None = None,
) -> ModelParams:
    """Derivative-free parameter search: a population of random parameter
    sets, Gaussian raw-space perturbations scaled by the learning rate,
    and loss-based tournament selection (smaller loss is fitter). Returns
    the fittest member of the final population."""
    n, m, l = shape
    pop = [_init_params_rng(n, m, l, rng) for _ in range(cfg.population_size)]

    def loss_of(candidate: ModelParams) -> float:
        return loss_value(tree, candidate, train)

    losses = [loss_of(c) for c in pop]
    for gen in range(1, cfg.generations + 1):
        changed = []
        for i, candidate in enumerate(pop):
            if rng.random() < cfg.mutation_rate:
                candidate.raw_p += cfg.learning_rate * rng.standard_normal(candidate.raw_p.shape)
                candidate.raw_diff += cfg.learning_rate * rng.standard_normal(
                    candidate.raw_diff.shape
                )
                candidate.raw_disc += cfg.learning_rate * rng.standard_normal(
                    candidate.raw_disc.shape
                )
                changed.append(i)
        for i in changed:
            losses[i] = loss_of(pop[i])
        ranked = tournament_select(
            list(range(len(pop))),
            times=cfg.population_size,
            k=cfg.tournament_k,
            rng=rng,
            mode="tournament",
            fitness_of=lambda i: -losses[i],
            size_of=lambda i: 0,
        )
        # Copy on selection: with replacement, later mutations must not
        # leak between clones of one ancestor.
        pop = [pop[i].copy() for i in ranked]
        losses = [losses[i] for i in ranked]
        if log:
            log(f"es gen {gen} best_loss {min(losses):.6f} mean_loss {float(np.mean(losses)):.6f}")
    best = int(np.argmin(losses))
    return pop[best].copy()


def run_training(
    ds: ResponseDataset,
    cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
    threads: int = 1,
    attribute_labels: list[str] | None = None,
) -> TrainedModel:
    """Train on ``ds`` according to ``cfg.variant`` and return the model."""
    n, m, l = ds.n_students, ds.qmatrix.n_exercises, ds.qmatrix.n_attributes
    init_rng = _phase_rng(cfg.seed, 0, _PHASE_INIT)
    params = _init_params_rng(n, m, l, init_rng)
    tree = make_initial_tree()
    history: list[HistoryEntry] = []

    for epoch in range(1, cfg.outer_epochs + 1):
        tree_before = serialize(tree)
        try:
            if cfg.variant == "wo_adam":
                params = _es_phase(
                    tree, ds, (n, m, l), cfg.es, _phase_rng(cfg.seed, epoch, _PHASE_ES), log
                )
            else:
                params = fit_params(
                    tree, params, ds, cfg.po, rng=_phase_rng(cfg.seed, epoch, _PHASE_PO)
                )
        except Exception as exc:
            raise TrainingError(f"epoch {epoch}, continuous phase: {exc}") from exc
        if serialize(tree) != tree_before:
            raise TrainingError(f"epoch {epoch}: continuous phase mutated the tree")

        best_fitness: float | None = None
        if cfg.variant != "wo_gp":
            params_before = _params_digest(params)
            try:
                tree = evolve(
                    params,
                    ds,
                    cfg.gp,
                    _phase_rng(cfg.seed, epoch, _PHASE_GP),
                    log=log,
                    threads=threads,
                )
            except Exception as exc:
                raise TrainingError(f"epoch {epoch}, tree-search phase: {exc}") from exc
            if _params_digest(params) != params_before:
                raise TrainingError(f"epoch {epoch}: tree search mutated the parameters")

        probs = predict_dataset(tree, params, ds)
        train_acc = accuracy(probs, ds.scores)
        train_loss = loss_value(tree, params, ds)
        if cfg.variant != "wo_gp":
            best_fitness = train_acc
        history.append(HistoryEntry(epoch, train_loss, train_acc, best_fitness))
        if log:
            log(
                f"epoch {epoch} variant {cfg.variant} train_loss {train_loss:.6f} "
                f"train_acc {train_acc:.6f}"
            )

    return TrainedModel(params, tree, history, cfg, cfg.seed, attribute_labels)


def run_full(ds: ResponseDataset, cfg: TrainConfig, **kwargs) -> TrainedModel:
    if cfg.variant != "full":
        raise ValueError(f"run_full requires variant 'full', got {cfg.variant!r}")
    return run_training(ds, cfg, **kwargs)


def run_wo_gp(ds: ResponseDataset, cfg: TrainConfig, **kwargs) -> TrainedModel:
    if cfg.variant != "wo_gp":
        raise ValueError(f"run_wo_gp requires variant 'wo_gp', got {cfg.variant!r}")
    return run_training(ds, cfg, **kwargs)


def run_wo_adam(ds: ResponseDataset, cfg: TrainConfig, **kwargs) -> TrainedModel:
    if cfg.variant != "wo_adam":
        raise ValueError(f"run_wo_adam requires variant 'wo_adam', got {cfg.variant!r}")
    return run_training(ds, cfg, **kwargs)
