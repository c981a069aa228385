"""Genetic-programming search for the fittest interaction tree.

Parameters stay fixed while the population of trees evolves through
subtree crossover, insert/prune mutation, and tournament (or truncation)
selection. Fitness is training-set accuracy only; the engine never sees
test logs. Every tree in every generation is valid and below the height
cap: offspring that fail validation are retried a bounded number of times
and then fall back to their parents.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ModelParams, _gather_bindings, _sigmoid
from .dataset import ResponseDataset
from .exprtree import (
    ExprTree,
    OperatorNode,
    _grow,
    evaluate_batch,
    random_tree,
    replace_subtree,
    subtree_nodes,
    to_infix,
    validate,
)

__all__ = [
    "Individual",
    "GpConfig",
    "crossover",
    "mutate",
    "evaluate_fitness",
    "tournament_select",
    "evolve",
]

# Offspring validation retries before an operator falls back to identity.
OP_RETRIES = 20


@dataclass
class Individual:
    tree: ExprTree
    fitness: float | None = None


@dataclass
class GpConfig:
    population_size: int = 200
    generations: int = 10
    crossover_rate: float = 0.5
    mutation_rate: float = 0.1
    init_depth: int = 5
    tournament_k: int = 3
    selection_mode: str = "tournament"  # or "truncation"
    max_height: int = 12
    prefer_larger_on_tie: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2 or self.population_size % 2 != 0:
            raise ValueError("population_size must be even and >= 2")
        for name in ("crossover_rate", "mutation_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")
        if self.selection_mode not in ("tournament", "truncation"):
            raise ValueError(f"unknown selection_mode {self.selection_mode!r}")
        if self.generations < 0 or self.init_depth < 2 or self.tournament_k < 1:
            raise ValueError("generations >= 0, init_depth >= 2, tournament_k >= 1 required")
        if self.max_height < self.init_depth:
            raise ValueError("max_height must be >= init_depth")


def crossover(
    f1: ExprTree,
    f2: ExprTree,
    rng: np.random.Generator,
    max_height: int = 12,
) -> tuple[ExprTree, ExprTree]:
    """Swap uniformly chosen subtrees between copies of the parents.

    Parents of height < 2 are returned unchanged. Offspring must both
    validate and respect the height cap; after OP_RETRIES failed point
    choices the parents are returned unchanged.
    """
    if f1.height < 2 or f2.height < 2:
        return f1, f2
    for _ in range(OP_RETRIES):
        i1 = int(rng.integers(f1.node_count))
        i2 = int(rng.integers(f2.node_count))
        sub1 = subtree_nodes(f1.root)[i1]
        sub2 = subtree_nodes(f2.root)[i2]
        root1 = replace_subtree(f1.root, i1, sub2)
        root2 = replace_subtree(f2.root, i2, sub1)
        if validate(root1) or validate(root2):
            continue
        c1, c2 = ExprTree(root1), ExprTree(root2)
        if c1.height <= max_height and c2.height <= max_height:
            return c1, c2
    return f1, f2


def mutate(
    f: ExprTree,
    rng: np.random.Generator,
    max_height: int = 12,
) -> ExprTree:
    """Insert (grow a branch above a random subtree) or prune (replace a
    random subtree with one of its own descendants), a fair coin between
    the two. Prune is skipped for trees of height < 5; invalid results
    retry then fall back to the input.
    """
    if rng.random() < 0.5:
        return _mutate_insert(f, rng, max_height)
    return _mutate_prune(f, rng)


def _mutate_insert(f: ExprTree, rng: np.random.Generator, max_height: int) -> ExprTree:
    for _ in range(OP_RETRIES):
        idx = int(rng.integers(f.node_count))
        old_sub = subtree_nodes(f.root)[idx]
        branch = _grow(rng, depth_left=2, force_operator=True)
        assert isinstance(branch, OperatorNode)
        # The displaced subtree becomes the first child of the new branch.
        grafted = OperatorNode(branch.op, (old_sub,) + branch.children[1:])
        root = replace_subtree(f.root, idx, grafted)
        if validate(root):
            continue
        tree = ExprTree(root)
        if tree.height <= max_height:
            return tree
    return f


def _mutate_prune(f: ExprTree, rng: np.random.Generator) -> ExprTree:
    if f.height < 5:
        return f
    for _ in range(OP_RETRIES):
        idx = int(rng.integers(f.node_count))
        sub = subtree_nodes(f.root)[idx]
        inner_nodes = subtree_nodes(sub)
        keep = inner_nodes[int(rng.integers(len(inner_nodes)))]
        root = replace_subtree(f.root, idx, keep)
        if not validate(root):
            return ExprTree(root)  # pruning cannot raise height
    return f


def evaluate_fitness(
    pop: Sequence[Individual],
    params: ModelParams,
    train: ResponseDataset,
    threads: int = 1,
) -> list[Individual]:
    """Fill missing fitnesses with training accuracy (threshold 0.5).

    Params are read-only here; fitness is a pure function of the tree, so
    cached values survive and thread count cannot change any result.
    """
    p, rele, diff, disc = _gather_bindings(
        params, train.qmatrix, train.students, train.exercises
    )
    labels = train.scores

    def fitness_of(ind: Individual) -> float:
        z = evaluate_batch(ind.tree, p, rele, diff, disc)
        z = np.where(np.isfinite(z), z, 0.0)
        preds = (_sigmoid(z) >= 0.5).astype(int)
        return float(np.mean(preds == labels))

    todo = [ind for ind in pop if ind.fitness is None]
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fitness_of, todo))
        for ind, fit in zip(todo, results):
            ind.fitness = fit
    else:
        for ind in todo:
            ind.fitness = fitness_of(ind)
    return list(pop)


def _selection_key(fitness: float, size: int, index: int, prefer_larger: bool):
    # Maximize fitness, break ties toward more complex candidates (search
    # favors expressive functions), then toward the earlier index.
    size_term = size if prefer_larger else 0
    return (fitness, size_term, -index)


def tournament_select(
    pop: Sequence,
    times: int,
    k: int,
    rng: np.random.Generator,
    mode: str = "tournament",
    fitness_of: Callable = lambda ind: ind.fitness,
    size_of: Callable = lambda ind: ind.tree.node_count,
    prefer_larger_on_tie: bool = True,
) -> list:
    """Select ``times`` individuals.

    tournament: each pick samples k contestants uniformly with replacement
    and keeps the best. truncation: repeatedly remove the global best, so
    the output is the top ``times`` by fitness (requires times <= |pop|).
    Ties break toward larger size then lower index in both modes.
    """
    if not pop:
        raise ValueError("population is empty")
    keys = [
        _selection_key(fitness_of(ind), size_of(ind), i, prefer_larger_on_tie)
        for i, ind in enumerate(pop)
    ]
    if mode == "tournament":
        chosen = []
        for _ in range(times):
            contenders = rng.integers(len(pop), size=k)
            best = max(contenders, key=lambda i: keys[i])
            chosen.append(pop[int(best)])
        return chosen
    if mode == "truncation":
        if times > len(pop):
            raise ValueError(f"truncation cannot select {times} from {len(pop)}")
        order = sorted(range(len(pop)), key=lambda i: keys[i], reverse=True)
        return [pop[i] for i in order[:times]]
    raise ValueError(f"unknown selection mode {mode!r}")


def evolve(
    params: ModelParams,
    train: ResponseDataset,
    cfg: GpConfig,
    rng: np.random.Generator,
    log: Callable[[str], None] | None = None,
    threads: int = 1,
) -> ExprTree:
    """Run the full search and return the fittest tree ever evaluated.

    Each generation walks the population in index order: every even-odd
    pair may cross over (probability crossover_rate, one draw per pair)
    and every slot may mutate (probability mutation_rate); then everyone
    is evaluated and the next generation of the same size is selected.
    Elitist bookkeeping is global, so generations == 0 degenerates to the
    best of the initial random population.
    """
    pop = [
        Individual(random_tree(cfg.init_depth, rng))
        for _ in range(cfg.population_size)
    ]
    evaluate_fitness(pop, params, train, threads=threads)
    best = _best_of(pop, cfg.prefer_larger_on_tie)
    if log:
        log(
            f"gp gen 0 best {best.fitness:.6f} mean {_mean_fitness(pop):.6f} "
            f"tree {to_infix(best.tree)}"
        )

    for gen in range(1, cfg.generations + 1):
        for i in range(cfg.population_size):
            if i % 2 == 0 and rng.random() < cfg.crossover_rate:
                t1, t2 = crossover(pop[i].tree, pop[i + 1].tree, rng, cfg.max_height)
                if t1 is not pop[i].tree or t2 is not pop[i + 1].tree:
                    pop[i] = Individual(t1)
                    pop[i + 1] = Individual(t2)
            if rng.random() < cfg.mutation_rate:
                mutated = mutate(pop[i].tree, rng, cfg.max_height)
                if mutated is not pop[i].tree:
                    pop[i] = Individual(mutated)
        evaluate_fitness(pop, params, train, threads=threads)
        gen_best = _best_of(pop, cfg.prefer_larger_on_tie)
        if _selection_key(gen_best.fitness, gen_best.tree.node_count, 0, cfg.prefer_larger_on_tie)[
            :2
        ] > _selection_key(best.fitness, best.tree.node_count, 0, cfg.prefer_larger_on_tie)[:2]:
            best = gen_best
        if log:
            log(
                f"gp gen {gen} best {gen_best.fitness:.6f} "
                f"mean {_mean_fitness(pop):.6f} tree {to_infix(gen_best.tree)}"
            )
        selected = tournament_select(
            pop,
            times=cfg.population_size,
            k=cfg.tournament_k,
            rng=rng,
            mode=cfg.selection_mode,
            prefer_larger_on_tie=cfg.prefer_larger_on_tie,
        )
        # Fresh wrappers: selection with replacement may alias individuals.
        pop = [Individual(ind.tree, ind.fitness) for ind in selected]

    return best.tree


def _best_of(pop: Sequence[Individual], prefer_larger: bool) -> Individual:
    return max(
        enumerate(pop),
        key=lambda pair: _selection_key(
            pair[1].fitness, pair[1].tree.node_count, pair[0], prefer_larger
        ),
    )[1]


def _mean_fitness(pop: Sequence[Individual]) -> float:
    return float(np.mean([ind.fitness for ind in pop]))
