"""Genetic-programming search over loss expressions.

One generation: every parent produces one child (crossover, then subtree
mutation, then one-point mutation, each gated by its rate), children are
evaluated, parents and children are pooled and the ``n`` best survive.
Individuals that do not survive may enter a bounded external archive from
which crossover mates are drawn.

All randomness for a child comes from its own stream derived from the
master seed, so evaluating children in parallel does not change results.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import expr as ex
from .expr import Expr, TreeConstraints
from .fitness import CandidateRejected, FitnessValue, Scalar, compare, fitness_to_dict

MapFn = Callable[..., Iterable]


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpConfig:
    population_size: int = 16
    generations: int = 100
    subtree_mutation_rate: float = 0.3
    point_mutation_rate: float = 0.1
    crossover_rate: float = 0.7
    archive_save_prob: float = 0.5
    archive_use_prob: float = 0.5
    archive_capacity: int | None = None
    constraints: TreeConstraints = TreeConstraints()
    mutation_max_height: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("subtree_mutation_rate", "point_mutation_rate", "crossover_rate",
                     "archive_save_prob", "archive_use_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.archive_capacity is None:
            object.__setattr__(self, "archive_capacity", self.population_size)
        if self.archive_capacity < 0:
            raise ValueError("archive_capacity must be >= 0")
        if self.mutation_max_height < 1:
            raise ValueError("mutation_max_height must be >= 1")


@dataclass(frozen=True)
class Individual:
    expr: Expr
    fitness: FitnessValue | None = None
    id: int = -1
    parent_ids: tuple[int | None, int | None] = (None, None)

    @property
    def size(self) -> int:
        return ex.size(self.expr)

    @property
    def height(self) -> int:
        return ex.height(self.expr)

    @property
    def formula(self) -> str:
        return ex.format_expr(self.expr)


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_fitness: FitnessValue
    mean_fitness: dict
    best_formula: str
    best_id: int
    rejections: int
    archive_size: int

    def to_dict(self) -> dict:
        return {
            "generation": self.generation,
            "best_fitness": fitness_to_dict(self.best_fitness),
            "mean_fitness": self.mean_fitness,
            "best_formula": self.best_formula,
            "best_id": self.best_id,
            "rejections": self.rejections,
            "archive_size": self.archive_size,
        }


@dataclass
class SearchHistory:
    records: list[GenerationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: GenerationRecord) -> None:
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


@dataclass(frozen=True)
class SearchState:
    population: tuple[Individual, ...]
    archive: tuple[Individual, ...]
    generation: int
    next_id: int


# --------------------------------------------------------------------------
# selection


def _selection_cmp(a: Individual, b: Individual) -> int:
    c = compare(a.fitness, b.fitness)
    if c:
        return c
    if a.size != b.size:
        return -1 if a.size < b.size else 1
    return (a.id > b.id) - (a.id < b.id)


selection_key = functools.cmp_to_key(_selection_cmp)


def rank(individuals: Iterable[Individual]) -> list[Individual]:
    """Best first: fitness, then smaller tree, then lower id."""
    return sorted(individuals, key=selection_key)


def _mean_fitness(pop: Sequence[Individual]) -> dict:
    fits = [i.fitness for i in pop]
    if isinstance(fits[0], Scalar):
        return {"error": float(np.mean([f.error for f in fits]))}
    return {"wins": float(np.mean([f.wins for f in fits])),
            "mean_improvement_pct": float(np.mean([f.mean_improvement_pct for f in fits]))}


def _record(state: SearchState, rejections: int) -> GenerationRecord:
    best = rank(state.population)[0]
    return GenerationRecord(state.generation, best.fitness, _mean_fitness(state.population),
                            best.formula, best.id, rejections, len(state.archive))


# --------------------------------------------------------------------------
# variation operators


def exchange(a: Expr, i: int, b: Expr, j: int) -> Expr:
    """Copy of ``a`` with its node ``i`` replaced by the subtree of ``b`` at ``j``
    (pre-order indices)."""
    return ex.replace_at(a, i, ex.subtree_at(b, j))


def _crossover(parent: Individual, population: Sequence[Individual],
               archive: Sequence[Individual], config: GpConfig,
               rng: np.random.Generator) -> tuple[Expr, int | None]:
    if rng.random() >= config.crossover_rate:
        return parent.expr, None
    if archive and rng.random() < config.archive_use_prob:
        pool = list(archive)
    else:
        pool = [ind for ind in population if ind.id != parent.id] or list(population)
    mate = pool[rng.integers(len(pool))]
    c = config.constraints
    for _ in range(c.max_retries + 1):
        child = exchange(parent.expr, int(rng.integers(ex.size(parent.expr))),
                         mate.expr, int(rng.integers(ex.size(mate.expr))))
        if ex.validate(child, c).ok:
            return child, mate.id
    return parent.expr, None


def crossover(parent: Individual, population: Sequence[Individual],
              archive: Sequence[Individual], config: GpConfig,
              rng: np.random.Generator) -> Expr:
    """Subtree exchange with a mate from the archive (probability
    ``archive_use_prob`` when non-empty) or the rest of the population.
    Without crossover (probability ``1 - crossover_rate``) the parent is
    returned unchanged."""
    return _crossover(parent, population, archive, config, rng)[0]


def mutate_subtree(e: Expr, config: GpConfig, rng: np.random.Generator) -> Expr:
    if rng.random() >= config.subtree_mutation_rate:
        return e
    c = config.constraints
    for _ in range(c.max_retries + 1):
        i = int(rng.integers(ex.size(e)))
        budget = c.max_size - ex.size(e) + ex.size(ex.subtree_at(e, i))
        max_h = int(rng.integers(1, config.mutation_max_height + 1))
        new = ex.random_subtree(rng, max_h, budget, constant_range=c.constant_range)
        child = ex.replace_at(e, i, new)
        if ex.validate(child, c).ok:
            return child
    return e


def _point_replacement(node: Expr, rng: np.random.Generator, constant_range) -> Expr:
    if isinstance(node, ex.Unary):
        ops = [op for op in ex.GP_UNARY if op != node.op]
        return ex.Unary(ops[rng.integers(len(ops))], node.child)
    if isinstance(node, ex.Binary):
        ops = [op for op in ex.GP_BINARY if op != node.op]
        return ex.Binary(ops[rng.integers(len(ops))], node.left, node.right)
    while True:
        leaf = ex._random_leaf(rng, constant_range)
        if leaf != node:
            return leaf


def mutate_point(e: Expr, config: GpConfig, rng: np.random.Generator) -> Expr:
    """Replace one node by a random node of the same arity."""
    if rng.random() >= config.point_mutation_rate:
        return e
    c = config.constraints
    for _ in range(c.max_retries + 1):
        i = int(rng.integers(ex.size(e)))
        child = ex.replace_at(e, i, _point_replacement(ex.subtree_at(e, i), rng,
                                                       c.constant_range))
        if ex.validate(child, c).ok:
            return child
    return e


# --------------------------------------------------------------------------
# the loop


def _stream(config: GpConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=key))


_INIT, _CHILD, _ARCHIVE = 0, 1, 2


def _init_slot(args):
    config, fitness, slot = args
    rng = _stream(config, _INIT, slot)
    limit = max(1, config.constraints.max_retries * config.population_size)
    for attempt in range(limit):
        e = ex.random_tree(config.constraints, rng)
        try:
            return e, fitness(e), attempt
        except CandidateRejected:
            continue
    return None, None, limit


def initialize(config: GpConfig, fitness, map_fn: MapFn = map
               ) -> tuple[SearchState, SearchHistory]:
    """Random generation 0; rejected trees are replaced by fresh ones."""
    n = config.population_size
    results = list(map_fn(_init_slot, [(config, fitness, k) for k in range(n)]))
    if any(e is None for e, _, _ in results):
        raise InitializationError(
            "range check rejected every generated tree for some population slot")
    pop = tuple(Individual(e, f, k) for k, (e, f, _) in enumerate(results))
    state = SearchState(pop, (), 0, n)
    history = SearchHistory()
    history.append(_record(state, sum(r for _, _, r in results)))
    return state, history


def _child_task(args):
    parent, population, archive, config, fitness, generation, slot = args
    rng = _stream(config, _CHILD, generation, slot)
    rejections = 0
    for _ in range(config.constraints.max_retries + 1):
        child, mate = _crossover(parent, population, archive, config, rng)
        child = mutate_subtree(child, config, rng)
        child = mutate_point(child, config, rng)
        if child == parent.expr:
            # same tree, same (deterministic) fitness
            return child, parent.fitness, (parent.id, None), rejections
        try:
            return child, fitness(child), (parent.id, mate), rejections
        except CandidateRejected:
            rejections += 1
    return parent.expr, parent.fitness, (parent.id, None), rejections


def step(state: SearchState, config: GpConfig, fitness, history: SearchHistory | None = None,
         map_fn: MapFn = map) -> SearchState:
    """One generation.  Returns a new state; ``history`` gets one record."""
    gen = state.generation + 1
    tasks = [(p, state.population, state.archive, config, fitness, gen, k)
             for k, p in enumerate(state.population)]
    results = list(map_fn(_child_task, tasks))
    children = tuple(Individual(e, f, state.next_id + k, pid)
                     for k, (e, f, pid, _) in enumerate(results))
    ranked = rank(state.population + children)
    n = config.population_size
    survivors, losers = tuple(ranked[:n]), ranked[n:]

    rng = _stream(config, _ARCHIVE, gen)
    archive = list(state.archive)
    for ind in losers:
        if rng.random() < config.archive_save_prob:
            if len(archive) < config.archive_capacity:
                archive.append(ind)
            elif config.archive_capacity:
                archive[rng.integers(len(archive))] = ind
    new = SearchState(survivors, tuple(archive), gen, state.next_id + len(children))
    if history is not None:
        history.append(_record(new, sum(r[3] for r in results)))
    return new


def run(config: GpConfig, fitness, map_fn: MapFn = map,
        on_record: Callable[[GenerationRecord], None] | None = None
        ) -> tuple[Individual, SearchHistory]:
    """Initialize and evolve for ``config.generations`` generations."""
    state, history = initialize(config, fitness, map_fn)
    if on_record:
        on_record(history.records[-1])
    for _ in range(config.generations):
        state = step(state, config, fitness, history, map_fn)
        if on_record:
            on_record(history.records[-1])
    return rank(state.population)[0], history
