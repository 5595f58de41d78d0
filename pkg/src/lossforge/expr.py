"""Symbolic loss expressions.

A loss expression is an immutable tree over the two per-class terminals
``y_pred`` and ``y_real``, finite constants, and a small operator set with
protected division, square root and logarithm.  The tree is evaluated
class-wise and reduced with the arithmetic mean over classes.

Trees are plain frozen dataclasses, so equality is structural and every
"mutation" returns a new tree.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Union

import numpy as np

EPS = 1e-8

# name -> numpy implementation
UNARY_OPS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "negate": np.negative,
    "sqrt_protected": lambda x: np.sqrt(np.abs(x) + EPS),
    "log_protected": lambda x: np.log(np.abs(x) + EPS),
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    # only produced by differentiate(); sign(0) == 0
    "sign": np.sign,
}
BINARY_OPS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div_protected": lambda x, y: x / (y + EPS),
}

# operator set available to the search
GP_UNARY = ("negate", "sqrt_protected", "log_protected", "exp", "sin", "cos")
GP_BINARY = ("add", "sub", "mul", "div_protected")

PRED = "y_pred"
REAL = "y_real"


class ConstructionError(ValueError):
    """Tree constraints cannot be met."""


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class EvaluationError(ArithmeticError):
    """A loss produced a non-finite value; ``class_index`` names the class."""

    def __init__(self, message: str, class_index: int | None = None):
        super().__init__(message)
        self.class_index = class_index


@dataclass(frozen=True)
class Var:
    name: str

    def __post_init__(self):
        if self.name not in (PRED, REAL):
            raise ValueError(f"unknown terminal {self.name!r}")


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expr"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op!r}")


Expr = Union[Var, Const, Unary, Binary]
LossExpr = Expr

Y_PRED = Var(PRED)
Y_REAL = Var(REAL)


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Unary):
        return (e.child,)
    if isinstance(e, Binary):
        return (e.left, e.right)
    return ()


def with_children(e: Expr, kids: tuple[Expr, ...]) -> Expr:
    if isinstance(e, Unary):
        return Unary(e.op, kids[0])
    if isinstance(e, Binary):
        return Binary(e.op, kids[0], kids[1])
    return e


@lru_cache(maxsize=65536)
def size(e: Expr) -> int:
    return 1 + sum(size(c) for c in children(e))


@lru_cache(maxsize=65536)
def height(e: Expr) -> int:
    """Number of levels; a lone leaf has height 1."""
    return 1 + max((height(c) for c in children(e)), default=0)


def iter_nodes(e: Expr) -> Iterator[Expr]:
    """Pre-order traversal; the position in this order is the node index."""
    yield e
    for c in children(e):
        yield from iter_nodes(c)


def subtree_at(e: Expr, index: int) -> Expr:
    if not 0 <= index < size(e):
        raise IndexError(index)
    if index == 0:
        return e
    index -= 1
    for c in children(e):
        n = size(c)
        if index < n:
            return subtree_at(c, index)
        index -= n
    raise AssertionError("unreachable")


def replace_at(e: Expr, index: int, new: Expr) -> Expr:
    """Return a copy of ``e`` with the subtree at pre-order ``index`` replaced."""
    if not 0 <= index < size(e):
        raise IndexError(index)
    if index == 0:
        return new
    index -= 1
    kids = list(children(e))
    for k, c in enumerate(kids):
        n = size(c)
        if index < n:
            kids[k] = replace_at(c, index, new)
            return with_children(e, tuple(kids))
        index -= n
    raise AssertionError("unreachable")


def terminal_counts(e: Expr) -> dict[str, int]:
    counts = {PRED: 0, REAL: 0}
    for node in iter_nodes(e):
        if isinstance(node, Var):
            counts[node.name] += 1
    return counts


def contains_op(e: Expr, op: str) -> bool:
    return any(getattr(n, "op", None) == op for n in iter_nodes(e))


# --------------------------------------------------------------------------
# constraints and validation


@dataclass(frozen=True)
class TreeConstraints:
    min_height: int = 2
    max_size: int = 100
    constant_range: tuple[float, float] = (-5.0, 5.0)
    max_retries: int = 5

    def __post_init__(self):
        if self.min_height < 1:
            raise ValueError("min_height must be >= 1")
        if self.max_size < 2**self.min_height - 1:
            raise ValueError("max_size must be >= 2**min_height - 1")
        lo, hi = self.constant_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ValueError("constant_range must be a finite, non-empty interval")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class ValidityReport:
    has_pred: bool
    has_real: bool
    height_ok: bool
    size_ok: bool
    constants_finite: bool

    @property
    def ok(self) -> bool:
        return all((self.has_pred, self.has_real, self.height_ok, self.size_ok,
                    self.constants_finite))

    @property
    def failures(self) -> list[str]:
        out = []
        if not self.has_pred:
            out.append("missing y_pred")
        if not self.has_real:
            out.append("missing y_real")
        if not self.height_ok:
            out.append("height")
        if not self.size_ok:
            out.append("size")
        if not self.constants_finite:
            out.append("non-finite constant")
        return out


def validate(e: Expr, constraints: TreeConstraints = TreeConstraints()) -> ValidityReport:
    counts = terminal_counts(e)
    return ValidityReport(
        has_pred=counts[PRED] > 0,
        has_real=counts[REAL] > 0,
        height_ok=height(e) >= constraints.min_height,
        size_ok=size(e) <= constraints.max_size,
        constants_finite=all(math.isfinite(n.value) for n in iter_nodes(e)
                             if isinstance(n, Const)),
    )


# --------------------------------------------------------------------------
# random generation


def _random_leaf(rng: np.random.Generator, constant_range) -> Expr:
    k = rng.integers(3)
    if k == 0:
        return Y_PRED
    if k == 1:
        return Y_REAL
    lo, hi = constant_range
    return Const(rng.uniform(lo, hi))


def random_subtree(rng: np.random.Generator, max_height: int, budget: int, *,
                   min_height: int = 1, leaf_prob: float = 0.3,
                   constant_range=(-5.0, 5.0)) -> Expr:
    """Grow a random subtree with ``min_height <= height <= max_height`` and
    at most ``budget`` nodes.

    Operators are drawn uniformly from the feasible part of the search
    operator set; a node becomes a leaf with probability ``leaf_prob`` once
    the height requirement is met (``leaf_prob=0`` gives the "full" method).
    """
    min_height = max(1, min_height)
    if max_height < min_height or budget < min_height:
        raise ConstructionError("subtree bounds are infeasible")
    can_leaf = min_height <= 1
    can_unary = max_height >= 2 and budget >= max(2, min_height)
    can_binary = max_height >= 2 and budget >= 2 + max(min_height - 1, 1)
    if can_leaf and (not (can_unary or can_binary) or rng.random() < leaf_prob):
        return _random_leaf(rng, constant_range)

    ops = (GP_UNARY if can_unary else ()) + (GP_BINARY if can_binary else ())
    op = ops[rng.integers(len(ops))]
    need = max(min_height - 1, 1)
    kw = dict(leaf_prob=leaf_prob, constant_range=constant_range)
    if op in UNARY_OPS:
        child = random_subtree(rng, max_height - 1, budget - 1, min_height=need, **kw)
        return Unary(op, child)
    carry_left = rng.random() < 0.5
    left_min, right_min = (need, 1) if carry_left else (1, need)
    left = random_subtree(rng, max_height - 1, budget - 1 - right_min,
                          min_height=left_min, **kw)
    right = random_subtree(rng, max_height - 1, budget - 1 - size(left),
                           min_height=right_min, **kw)
    return Binary(op, left, right)


def _minimal_tree(rng: np.random.Generator, min_height: int) -> Expr:
    """Smallest kind of tree holding both terminals at the required height."""
    leaves = (Y_PRED, Y_REAL) if rng.random() < 0.5 else (Y_REAL, Y_PRED)
    e: Expr = Binary(GP_BINARY[rng.integers(len(GP_BINARY))], *leaves)
    while height(e) < min_height:
        e = Unary(GP_UNARY[rng.integers(len(GP_UNARY))], e)
    return e


def _graft_terminals(rng: np.random.Generator, e: Expr, c: TreeConstraints) -> Expr:
    for kind in (PRED, REAL):
        counts = terminal_counts(e)
        if counts[kind]:
            continue
        spare = [i for i, n in enumerate(iter_nodes(e))
                 if isinstance(n, Const) or (isinstance(n, Var) and counts[n.name] > 1)]
        if spare:
            e = replace_at(e, spare[rng.integers(len(spare))], Var(kind))
            continue
        leaves = [i for i, n in enumerate(iter_nodes(e)) if not children(n)]
        if size(e) + 2 > c.max_size:
            return _minimal_tree(rng, c.min_height)
        i = leaves[rng.integers(len(leaves))]
        op = GP_BINARY[rng.integers(len(GP_BINARY))]
        e = replace_at(e, i, Binary(op, subtree_at(e, i), Var(kind)))
    return e


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_tree(constraints: TreeConstraints = TreeConstraints(), rng_seed=None) -> Expr:
    """Ramped half-and-half random tree satisfying every ``validate`` rule.

    ``rng_seed`` is an int seed or a ``numpy.random.Generator``.
    """
    c = constraints
    if c.max_size < max(3, c.min_height + 1):
        raise ConstructionError(
            f"max_size={c.max_size} cannot hold both terminals at height >= {c.min_height}")
    rng = _as_rng(rng_seed)
    for _ in range(c.max_retries + 1):
        max_h = int(rng.integers(c.min_height, c.min_height + 5))
        leaf_prob = 0.0 if rng.random() < 0.5 else 0.3
        e = random_subtree(rng, max_h, c.max_size, min_height=c.min_height,
                           leaf_prob=leaf_prob, constant_range=c.constant_range)
        counts = terminal_counts(e)
        if counts[PRED] and counts[REAL]:
            return e
    return _graft_terminals(rng, e, c)


# --------------------------------------------------------------------------
# evaluation


@lru_cache(maxsize=4096)
def compile_expr(e: Expr) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Compile to an element-wise numpy function ``f(y_pred, y_real)``."""
    if isinstance(e, Var):
        return (lambda p, r: p) if e.name == PRED else (lambda p, r: r)
    if isinstance(e, Const):
        v = e.value
        return lambda p, r: np.full(np.broadcast(p, r).shape, v)
    if isinstance(e, Unary):
        f, g = UNARY_OPS[e.op], compile_expr(e.child)
        return lambda p, r: f(g(p, r))
    f, a, b = BINARY_OPS[e.op], compile_expr(e.left), compile_expr(e.right)
    return lambda p, r: f(a(p, r), b(p, r))


def _raise_nonfinite(values: np.ndarray, what: str):
    bad = np.argwhere(~np.isfinite(values))[0]
    cls = int(bad[-1]) if values.ndim else None
    raise EvaluationError(f"non-finite {what} for class {cls}", class_index=cls)


def classwise(e: Expr, y_pred, y_real) -> np.ndarray:
    """Per-class tree values; non-finite results raise :class:`EvaluationError`."""
    p = np.asarray(y_pred, dtype=float)
    r = np.asarray(y_real, dtype=float)
    with np.errstate(all="ignore"):
        v = np.asarray(compile_expr(e)(p, r), dtype=float)
    if not np.all(np.isfinite(v)):
        _raise_nonfinite(v, "loss value")
    return v


def evaluate(e: Expr, y_pred, y_real=None):
    """Mean over classes (last axis) of the tree value.

    Takes an :class:`EvalPoint` or ``(y_pred, y_real)`` arrays.  Returns a
    float for a single point, an array for a batch of points.
    """
    if isinstance(y_pred, EvalPoint):
        y_pred, y_real = y_pred.y_pred, y_pred.y_real
    v = classwise(e, y_pred, y_real).mean(axis=-1)
    return float(v) if np.ndim(v) == 0 else v


@dataclass(frozen=True)
class EvalPoint:
    """A single validated (prediction, one-hot label) pair."""

    y_pred: np.ndarray = field(compare=False)
    y_real: np.ndarray = field(compare=False)

    def __post_init__(self):
        p = np.asarray(self.y_pred, dtype=float)
        r = np.asarray(self.y_real, dtype=float)
        if p.ndim != 1 or p.shape != r.shape:
            raise ValueError("y_pred and y_real must be vectors of equal length")
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("y_pred must be a probability vector")
        if not (np.all((r == 0) | (r == 1)) and r.sum() == 1):
            raise ValueError("y_real must be one-hot")
        object.__setattr__(self, "y_pred", p)
        object.__setattr__(self, "y_real", r)


# --------------------------------------------------------------------------
# symbolic differentiation


def _is_const(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def _fold(e: Expr) -> Expr:
    if all(_is_const(c) for c in children(e)) and children(e):
        with np.errstate(all="ignore"):
            v = float(compile_expr(e)(np.float64(0.0), np.float64(0.0)))
        if math.isfinite(v):
            return Const(v)
    return e


def _neg(a: Expr) -> Expr:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "negate":
        return a.child
    return Unary("negate", a)


def _add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return _fold(Binary("add", a, b))


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return _fold(Binary("sub", a, b))


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return _neg(b)
    if _is_const(b, -1.0):
        return _neg(a)
    return _fold(Binary("mul", a, b))


def _div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return Const(0.0)
    return _fold(Binary("div_protected", a, b))


def _un(op: str, a: Expr) -> Expr:
    return _fold(Unary(op, a))


@lru_cache(maxsize=4096)
def differentiate(e: Expr) -> Expr:
    """Partial derivative with respect to ``y_pred``.

    Protected operators are differentiated through their protected form;
    |x| contributes sign(x) with sign(0) = 0.  Results are constant-folded
    but not otherwise simplified.
    """
    if isinstance(e, Var):
        return Const(1.0 if e.name == PRED else 0.0)
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Unary):
        u = e.child
        du = differentiate(u)
        if _is_const(du, 0.0) or e.op == "sign":
            return Const(0.0)
        if e.op == "negate":
            return _neg(du)
        if e.op == "exp":
            return _mul(e, du)
        if e.op == "sin":
            return _mul(_un("cos", u), du)
        if e.op == "cos":
            return _mul(_neg(_un("sin", u)), du)
        s = _un("sign", u)
        abs_u = _mul(s, u)
        if e.op == "log_protected":
            # sign(u) u' / (|u| + eps)
            return _div(_mul(s, du), abs_u)
        if e.op == "sqrt_protected":
            # sign(u) u' / (2 sqrt(|u| + eps)), written as sqrt(.)/(|u| + eps)
            return _mul(_mul(Const(0.5), _mul(s, du)), _div(e, abs_u))
        raise AssertionError(e.op)
    a, b = e.left, e.right
    da, db = differentiate(a), differentiate(b)
    if e.op == "add":
        return _add(da, db)
    if e.op == "sub":
        return _sub(da, db)
    if e.op == "mul":
        return _add(_mul(da, b), _mul(a, db))
    # d/dx a/(b+eps) = (a' - a b'/(b+eps)) / (b+eps)
    return _div(_sub(da, _div(_mul(a, db), b)), b)


# --------------------------------------------------------------------------
# prefix text format


def format_expr(e: Expr) -> str:
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Const):
        return repr(e.value)
    return "(" + " ".join([e.op, *(format_expr(c) for c in children(e))]) + ")"


_TOKEN = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            break
        if m.lastindex is None:
            break
        start = m.start(m.lastindex)
        tokens.append((m.group(m.lastindex), start))
        pos = m.end()
    return tokens


def parse_expr(text: str) -> Expr:
    """Parse prefix notation, e.g. ``(mul (sin y_pred) 2.5)``."""
    tokens = _tokenize(text)
    end = len(text)
    pos = 0

    def peek_pos():
        return tokens[pos][1] if pos < len(tokens) else end

    def node() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of input", end)
        tok, at = tokens[pos]
        pos += 1
        if tok == ")":
            raise ParseError("unexpected ')'", at)
        if tok != "(":
            return _atom(tok, at)
        if pos >= len(tokens):
            raise ParseError("expected operator", end)
        op, op_at = tokens[pos]
        pos += 1
        if op in UNARY_OPS:
            arity = 1
        elif op in BINARY_OPS:
            arity = 2
        else:
            raise ParseError(f"unknown operator {op!r}", op_at)
        args = [node() for _ in range(arity)]
        if pos >= len(tokens):
            raise ParseError("expected ')'", end)
        if tokens[pos][0] != ")":
            raise ParseError(f"operator {op!r} takes {arity} argument(s)", tokens[pos][1])
        pos += 1
        return Unary(op, args[0]) if arity == 1 else Binary(op, *args)

    e = node()
    if pos != len(tokens):
        raise ParseError("trailing input", peek_pos())
    return e


def _atom(tok: str, at: int) -> Expr:
    if tok in (PRED, REAL):
        return Var(tok)
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"unknown symbol {tok!r}", at) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite constant {tok!r}", at)
    return Const(v)
