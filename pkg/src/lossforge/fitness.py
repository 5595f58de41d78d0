"""Fitness values, candidate rejection, and training-based fitness oracles."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from . import expr as ex
from .data import Dataset, split
from .expr import EvaluationError, Expr
from .losses import LossFn, builtin, from_tree
from .nn import ClassifierModel, TrainConfig, train


class CandidateRejected(Exception):
    """The candidate is unusable; the search generates a replacement."""


# --------------------------------------------------------------------------
# fitness values and their ordering


@dataclass(frozen=True)
class Scalar:
    """Classification error (lower is better)."""

    error: float

    def __post_init__(self):
        if not math.isfinite(self.error):
            raise ValueError("error must be finite")


@dataclass(frozen=True)
class VsBaseline:
    """Wins against CE over several datasets.

    With ``wins > 0`` the second value is the mean improvement (%) over the
    winning datasets; with ``wins == 0`` it is the mean degradation (%) over
    all datasets.
    """

    wins: int
    mean_improvement_pct: float

    def __post_init__(self):
        if self.wins < 0:
            raise ValueError("wins must be >= 0")
        if not math.isfinite(self.mean_improvement_pct):
            raise ValueError("mean_improvement_pct must be finite")


FitnessValue = Union[Scalar, VsBaseline]


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def compare(a: FitnessValue, b: FitnessValue) -> int:
    """Negative if ``a`` is better, positive if ``b`` is better, 0 on a tie."""
    if type(a) is not type(b):
        raise TypeError(f"cannot compare {type(a).__name__} with {type(b).__name__}")
    if isinstance(a, Scalar):
        return _sign(a.error - b.error)
    if a.wins and not b.wins:
        return -1
    if b.wins and not a.wins:
        return 1
    if a.wins == 0:
        # both lost everywhere: smaller mean degradation wins
        return _sign(a.mean_improvement_pct - b.mean_improvement_pct)
    if a.wins != b.wins:
        return -1 if a.wins > b.wins else 1
    return _sign(b.mean_improvement_pct - a.mean_improvement_pct)


fitness_key = functools.cmp_to_key(compare)


def fitness_to_dict(f: FitnessValue) -> dict:
    if isinstance(f, Scalar):
        return {"error": f.error}
    return {"wins": f.wins, "mean_improvement_pct": f.mean_improvement_pct}


def improvement_pct(ce_error: float, error: float) -> float:
    """Relative improvement over CE in percent; absolute points if CE is perfect."""
    if ce_error == 0:
        return -100.0 * error
    return 100.0 * (ce_error - error) / ce_error


def vs_baseline(ce_errors: Sequence[float], errors: Sequence[float]) -> VsBaseline:
    impr = [improvement_pct(c, e) for c, e in zip(ce_errors, errors, strict=True)]
    won = [i for i, (c, e) in zip(impr, zip(ce_errors, errors)) if e < c]
    if won:
        return VsBaseline(len(won), float(np.mean(won)))
    return VsBaseline(0, float(-np.mean(impr)))


# --------------------------------------------------------------------------
# range check


@dataclass(frozen=True)
class RangeCheckSpec:
    """Probe grid and accepted magnitude range for loss values.

    Probes lie on the edges of the probability simplex (``points_per_edge``
    per edge), at its centroid and halfway between centroid and each vertex,
    for every class count and every one-hot label.  All probes are pulled
    toward the centroid by ``margin`` because softmax never emits exact 0/1.
    """

    lower: float = 1e-5
    upper: float = 1e5
    points_per_edge: int = 21
    class_counts: tuple[int, ...] = (2, 3, 10)
    margin: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.lower < self.upper:
            raise ValueError("need 0 <= lower < upper")
        if self.points_per_edge < 2:
            raise ValueError("points_per_edge must be >= 2")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must be in [0, 1)")


@functools.lru_cache(maxsize=16)
def probe_grid(spec: RangeCheckSpec) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """``(y_pred, y_real)`` arrays of shape (probes, N), one pair per class count."""
    out = []
    t = np.linspace(0.0, 1.0, spec.points_per_edge)
    for n in spec.class_counts:
        eye = np.eye(n)
        pts = [np.outer(t, eye[i]) + np.outer(1 - t, eye[j])
               for i, j in combinations(range(n), 2)]
        centroid = np.full((1, n), 1.0 / n)
        pts += [centroid, 0.5 * (eye + centroid)]
        p = np.unique(np.round(np.concatenate(pts), 12), axis=0)
        p = (1.0 - spec.margin) * p + spec.margin / n
        y_pred = np.repeat(p, n, axis=0)
        y_real = np.tile(eye, (len(p), 1))
        y_pred.setflags(write=False)
        y_real.setflags(write=False)
        out.append((y_pred, y_real))
    return tuple(out)


@dataclass(frozen=True)
class RangeCheckResult:
    passed: bool
    reason: str | None = None
    y_pred: tuple[float, ...] | None = None
    y_real: tuple[float, ...] | None = None
    value: float | None = None

    def __bool__(self):
        return self.passed


def _fail(reason, p, r, value=None) -> RangeCheckResult:
    return RangeCheckResult(False, reason, tuple(map(float, p)), tuple(map(float, r)),
                            None if value is None else float(value))


@functools.lru_cache(maxsize=16)
def _probe_pairs(spec: RangeCheckSpec):
    # trees act per class, so each probe value only needs the distinct
    # (y_pred_i, y_real_i) pairs; evaluate those once and gather
    out = []
    for y_pred, y_real in probe_grid(spec):
        pairs, inverse = np.unique(np.stack([y_pred.ravel(), y_real.ravel()], axis=1),
                                   axis=0, return_inverse=True)
        out.append((y_pred, y_real, pairs[:, 0], pairs[:, 1],
                    inverse.reshape(y_pred.shape)))
    return tuple(out)


@functools.lru_cache(maxsize=8192)
def range_check(e: Expr, spec: RangeCheckSpec = RangeCheckSpec()) -> RangeCheckResult:
    """Pass iff every probe value is finite with magnitude in
    ``[lower, upper]`` and the symbolic gradient is finite at every probe."""
    f = ex.compile_expr(e)
    df = ex.compile_expr(ex.differentiate(e))
    for y_pred, y_real, p, r, inverse in _probe_pairs(spec):
        with np.errstate(all="ignore"):
            values = np.broadcast_to(f(p, r), p.shape)[inverse].mean(axis=-1)
            grads = np.broadcast_to(df(p, r), p.shape)[inverse]
        bad = np.flatnonzero(~np.isfinite(values))
        if len(bad):
            k = bad[0]
            return _fail("non-finite value (overflow)", y_pred[k], y_real[k], values[k])
        mag = np.abs(values)
        low = np.flatnonzero(mag < spec.lower)
        if len(low):
            k = low[0]
            return _fail(f"value below {spec.lower:g}", y_pred[k], y_real[k], values[k])
        high = np.flatnonzero(mag > spec.upper)
        if len(high):
            k = high[0]
            return _fail(f"value above {spec.upper:g}", y_pred[k], y_real[k], values[k])
        bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=-1))
        if len(bad):
            k = bad[0]
            return _fail("non-finite gradient", y_pred[k], y_real[k])
    return RangeCheckResult(True)


# --------------------------------------------------------------------------
# experiments

MODES = ("single-dataset-single-run", "single-dataset-multi-run",
         "multi-dataset-vs-baseline")


@dataclass(frozen=True)
class ExperimentSpec:
    mode: str = "single-dataset-single-run"
    datasets: tuple[str, ...] = ("blobs",)
    runs_per_dataset: int = 1
    trainer: TrainConfig = TrainConfig()
    baseline_errors: Mapping[str, float] | None = None
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}")
        if self.runs_per_dataset < 1:
            raise ValueError("runs_per_dataset must be >= 1")
        if not self.datasets:
            raise ValueError("datasets must not be empty")
        if self.mode.startswith("single-dataset") and len(self.datasets) != 1:
            raise ValueError(f"mode {self.mode} takes exactly one dataset")
        if self.mode == "single-dataset-single-run" and self.runs_per_dataset != 1:
            raise ValueError("runs_per_dataset must be 1 in single-run mode")

    @property
    def vs_baseline(self) -> bool:
        return self.mode == "multi-dataset-vs-baseline"


def run_seed(spec: ExperimentSpec, dataset_index: int, run: int) -> int:
    """Seed shared by every candidate (and CE) for one dataset/run."""
    ss = np.random.SeedSequence([spec.seed, dataset_index, run])
    return int(ss.generate_state(1)[0])


# trainer(loss, dataset_index, run) -> error in [0, 1]
Trainer = Callable[[LossFn, int, int], float]


@dataclass(frozen=True, eq=False)
class ClassifierTrainer:
    """Fresh split and fresh model per (dataset, run), both seeded so that
    every loss sees identical data and initial weights."""

    spec: ExperimentSpec
    datasets: Mapping[str, Dataset]
    partition: str = "val"

    def report(self, loss: LossFn, dataset_index: int, run: int):
        data = self.datasets[self.spec.datasets[dataset_index]]
        seed = run_seed(self.spec, dataset_index, run)
        parts = split(data, self.spec.fractions, seed)
        cfg = replace(self.spec.trainer, seed=seed)
        model = ClassifierModel(data.dims, data.class_count, cfg.hidden, seed=seed)
        return train(model, data, parts, loss, cfg)

    def __call__(self, loss: LossFn, dataset_index: int, run: int) -> float:
        rep = self.report(loss, dataset_index, run)
        return rep.final_val_error if self.partition == "val" else rep.test_error


def run_errors(loss: LossFn, spec: ExperimentSpec, trainer: Trainer) -> list[float]:
    """Run-averaged error per dataset."""
    return [float(np.mean([trainer(loss, d, k) for k in range(spec.runs_per_dataset)]))
            for d in range(len(spec.datasets))]


def with_baseline(spec: ExperimentSpec, trainer: Trainer) -> ExperimentSpec:
    """Attach CE reference errors computed under the experiment's seeds."""
    errs = run_errors(builtin("ce"), spec, trainer)
    return replace(spec, baseline_errors=dict(zip(spec.datasets, errs)))


def evaluate_fitness(candidate: Expr | LossFn, spec: ExperimentSpec,
                     trainer: Trainer) -> FitnessValue:
    loss = candidate if isinstance(candidate, LossFn) else from_tree(candidate)
    if spec.vs_baseline:
        if spec.baseline_errors is None or set(spec.datasets) - set(spec.baseline_errors):
            raise ValueError("vs-baseline mode needs a CE error for every dataset")
    errors = run_errors(loss, spec, trainer)
    if not spec.vs_baseline:
        return Scalar(errors[0])
    return vs_baseline([spec.baseline_errors[d] for d in spec.datasets], errors)


# --------------------------------------------------------------------------
# oracles used by the search


class FitnessOracle:
    """Callable ``expr -> FitnessValue`` that first applies the range check.

    Raises :class:`CandidateRejected` for candidates the search should
    replace; any other exception is a genuine failure.
    """

    range_spec: RangeCheckSpec | None = RangeCheckSpec()

    def score(self, e: Expr) -> FitnessValue:
        raise NotImplementedError

    def __call__(self, e: Expr) -> FitnessValue:
        if self.range_spec is not None:
            res = range_check(e, self.range_spec)
            if not res.passed:
                raise CandidateRejected(res.reason)
        try:
            return self.score(e)
        except EvaluationError as err:
            raise CandidateRejected(str(err)) from err


class ClassifierFitness(FitnessOracle):
    """Train the classifier with the candidate loss and report its fitness."""

    def __init__(self, spec: ExperimentSpec, datasets: Mapping[str, Dataset],
                 range_spec: RangeCheckSpec | None = RangeCheckSpec()):
        self.trainer = ClassifierTrainer(spec, datasets)
        if spec.vs_baseline and spec.baseline_errors is None:
            spec = with_baseline(spec, self.trainer)
            self.trainer = ClassifierTrainer(spec, datasets)
        self.spec = spec
        self.range_spec = range_spec

    def score(self, e: Expr) -> FitnessValue:
        return evaluate_fitness(e, self.spec, self.trainer)


def binary_landscape(e: Expr, grid: np.ndarray, y_real0: int = 1) -> np.ndarray:
    """Loss of ``e`` at y_pred = (p, 1-p), y_real = (r, 1-r) over ``grid``."""
    p = np.stack([grid, 1.0 - grid], axis=-1)
    r = np.broadcast_to(np.array([y_real0, 1 - y_real0], dtype=float), p.shape)
    return np.asarray(ex.evaluate(e, p, r))


@dataclass(eq=False)
class LandscapeDistance(FitnessOracle):
    """Cheap surrogate: RMS distance between the candidate's binary landscape
    (y_real = 1) and a target curve on a fixed grid."""

    target: np.ndarray = field(default_factory=lambda: binary_landscape(
        builtin("ngl").tree, np.linspace(0.0, 1.0, 51)))
    grid: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 51))
    range_spec: RangeCheckSpec | None = RangeCheckSpec()

    def score(self, e: Expr) -> Scalar:
        values = binary_landscape(e, self.grid)
        return Scalar(float(np.sqrt(np.mean((values - self.target) ** 2))))
