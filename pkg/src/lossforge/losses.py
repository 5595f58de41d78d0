"""Built-in classification losses.

Every loss takes ``y_pred`` (softmax probabilities) and ``y_real`` (one-hot
labels) with classes on the last axis and returns one value per sample.
``grad`` returns the partials with respect to each ``y_pred`` component,
holding the other components fixed; the softmax coupling is applied by the
trainer.

The five discovered losses f1..f5 carry both a closed form and an
expression tree.  ``ngl`` and ``f5`` are the same object.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import expr as ex
from .expr import EPS, Binary, Const, Expr, Unary, Y_PRED, Y_REAL

ALPHA = 2.4092
BETA = 1.5494
GAMMA = 3.8235
DELTA = 3.1868
ZETA = 2.4428
ETA = 2.6085

FOCAL_GAMMA = 2.0
SCE_WEIGHTS = (1.0, 1.0)
# log(0) replacement in the reverse cross-entropy term of SCE
SCE_LOG_ZERO = -4.0

Array = np.ndarray
ClasswiseFn = Callable[[Array, Array], Array]


def _check_finite(values: Array, what: str) -> Array:
    if not np.all(np.isfinite(values)):
        ex._raise_nonfinite(values, what)
    return values


@dataclass(frozen=True, eq=False)
class LossFn:
    """A named loss with value and gradient.

    ``value_fn``/``grad_fn`` map ``(y_pred, y_real)`` arrays of shape
    ``(..., N)`` to per-sample values ``(...)`` and per-class partials
    ``(..., N)``.
    """

    name: str
    value_fn: Callable[[Array, Array], Array]
    grad_fn: Callable[[Array, Array], Array]
    tree: Optional[Expr] = None

    def value(self, y_pred, y_real=None):
        p, r = _arrays(y_pred, y_real)
        with np.errstate(all="ignore"):
            v = np.asarray(self.value_fn(p, r), dtype=float)
        if not np.all(np.isfinite(v)):
            # re-run class-wise to name the offending class when possible
            raise ex.EvaluationError(f"non-finite value of loss {self.name!r}",
                                     class_index=_first_bad_class(self, p, r))
        return float(v) if v.ndim == 0 else v

    def grad(self, y_pred, y_real=None) -> Array:
        p, r = _arrays(y_pred, y_real)
        with np.errstate(all="ignore"):
            g = np.asarray(self.grad_fn(p, r), dtype=float)
        return _check_finite(g, f"gradient of loss {self.name!r}")

    def __repr__(self):
        return f"LossFn({self.name!r})"


def _arrays(y_pred, y_real) -> tuple[Array, Array]:
    if isinstance(y_pred, ex.EvalPoint):
        return y_pred.y_pred, y_pred.y_real
    p = np.asarray(y_pred, dtype=float)
    r = np.asarray(y_real, dtype=float)
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: y_pred {p.shape} vs y_real {r.shape}")
    return p, r


def _first_bad_class(loss: LossFn, p: Array, r: Array) -> int | None:
    if loss.tree is None:
        return None
    with np.errstate(all="ignore"):
        v = ex.compile_expr(loss.tree)(p, r)
    bad = np.argwhere(~np.isfinite(v))
    return int(bad[0][-1]) if len(bad) else None


def classwise_loss(name: str, h: ClasswiseFn, dh: ClasswiseFn,
                   tree: Expr | None = None) -> LossFn:
    """Build a loss ``1/N sum_i h(p_i, r_i)`` from its per-class term."""
    return LossFn(
        name,
        lambda p, r: h(p, r).mean(axis=-1),
        lambda p, r: dh(p, r) / p.shape[-1],
        tree,
    )


def from_tree(tree: Expr, name: str | None = None) -> LossFn:
    """Wrap an expression tree as a trainable loss."""
    f = ex.compile_expr(tree)
    df = ex.compile_expr(ex.differentiate(tree))
    bcast = lambda g: lambda p, r: np.broadcast_to(g(p, r), np.broadcast(p, r).shape)
    return classwise_loss(name or ex.format_expr(tree), bcast(f), bcast(df), tree)


# --------------------------------------------------------------------------
# closed forms of the discovered losses (per-class term and derivative)


def _f1(p, r):
    return np.exp(np.sin(p) ** 2) / (2.0 * (np.abs((BETA - r) * p) + EPS))


def _df1(p, r):
    u = np.exp(np.sin(p) ** 2)
    du = u * np.sin(2.0 * p)
    w = 2.0 * (np.abs((BETA - r) * p) + EPS)
    dw = 2.0 * np.sign((BETA - r) * p) * (BETA - r)
    return (du * w - u * dw) / w**2


def _f2(p, r):
    s = np.sqrt(np.abs(p) + EPS)
    return (np.cos(-r) / (s + EPS) * (p - GAMMA) + p**4
            + np.sqrt(np.abs(r + p) + EPS))


def _df2(p, r):
    s = np.sqrt(np.abs(p) + EPS)
    ds = np.sign(p) / (2.0 * s)
    a = np.cos(-r) / (s + EPS)
    da = -np.cos(-r) * ds / (s + EPS) ** 2
    t = np.sqrt(np.abs(r + p) + EPS)
    return da * (p - GAMMA) + a + 4.0 * p**3 + np.sign(r + p) / (2.0 * t)


def _f3_inner(p, r):
    return r / (np.sin(r) + EPS) + (p - np.exp(DELTA)) / ZETA


def _f3(p, r):
    return np.sqrt(np.abs(_f3_inner(p, r)) + EPS)


def _df3(p, r):
    q = _f3_inner(p, r)
    return np.sign(q) / (2.0 * np.sqrt(np.abs(q) + EPS) * ZETA)


def _f4(p, r):
    return np.sin(np.sin(p - ETA) + r**3)


def _df4(p, r):
    return np.cos(np.sin(p - ETA) + r**3) * np.cos(p - ETA)


def _ngl(p, r):
    return np.exp(ALPHA - p - p * r) - np.cos(np.cos(np.sin(p)))


def _dngl(p, r):
    return (-(1.0 + r) * np.exp(ALPHA - p - p * r)
            - np.sin(np.cos(np.sin(p))) * np.sin(np.sin(p)) * np.cos(p))


# expression-tree forms; built from nodes so no constant goes through text
def _b(op, a, b):
    return Binary(op, a, b)


def _u(op, a):
    return Unary(op, a)


P, R = Y_PRED, Y_REAL

# (beta - r) * p >= 0 on the valid domain, so |.| is dropped from the tree
F1_TREE = _b("div_protected",
             _b("mul", Const(0.5), _u("exp", _b("mul", _u("sin", P), _u("sin", P)))),
             _b("mul", _b("sub", Const(BETA), R), P))
F2_TREE = _b("add",
             _b("add",
                _b("mul", _b("div_protected", _u("cos", _u("negate", R)),
                             _u("sqrt_protected", P)),
                   _b("sub", P, Const(GAMMA))),
                _b("mul", _b("mul", P, P), _b("mul", P, P))),
             _u("sqrt_protected", _b("add", R, P)))
F3_TREE = _u("sqrt_protected",
             _b("add",
                _b("div_protected", R, _u("sin", R)),
                _b("mul", _b("sub", P, _u("exp", Const(DELTA))), Const(1.0 / ZETA))))
F4_TREE = _u("sin", _b("add", _u("sin", _b("sub", P, Const(ETA))),
                       _b("mul", _b("mul", R, R), R)))
NGL_TREE = _b("sub",
              _u("exp", _b("sub", _b("sub", Const(ALPHA), P), _b("mul", P, R))),
              _u("cos", _u("cos", _u("sin", P))))


# --------------------------------------------------------------------------
# baselines


def _ce_value(p, r):
    return -(r * np.log(p + EPS)).mean(axis=-1)


def _ce_grad(p, r):
    return -r / (p + EPS) / p.shape[-1]


def _focal_value(p, r):
    return -(r * (1.0 - p) ** FOCAL_GAMMA * np.log(p + EPS)).mean(axis=-1)


def _focal_grad(p, r):
    g = FOCAL_GAMMA
    d = r * (g * (1.0 - p) ** (g - 1.0) * np.log(p + EPS) - (1.0 - p) ** g / (p + EPS))
    return d / p.shape[-1]


def _rce_log(r):
    return np.log(np.clip(r, np.exp(SCE_LOG_ZERO), 1.0))


def _sce_value(p, r):
    w_ce, w_rce = SCE_WEIGHTS
    return w_ce * _ce_value(p, r) - w_rce * (p * _rce_log(r)).mean(axis=-1)


def _sce_grad(p, r):
    w_ce, w_rce = SCE_WEIGHTS
    return w_ce * _ce_grad(p, r) - w_rce * _rce_log(r) / p.shape[-1]


def _dice_value(p, r):
    inter = (p * r).sum(axis=-1)
    denom = p.sum(axis=-1) + r.sum(axis=-1) + EPS
    return 1.0 - 2.0 * inter / denom


def _dice_grad(p, r):
    inter = (p * r).sum(axis=-1, keepdims=True)
    denom = p.sum(axis=-1, keepdims=True) + r.sum(axis=-1, keepdims=True) + EPS
    return -(2.0 * r * denom - 2.0 * inter) / denom**2


def _build_catalog() -> dict[str, LossFn]:
    ngl = classwise_loss("ngl", _ngl, _dngl, NGL_TREE)
    cat = {
        "ce": LossFn("ce", _ce_value, _ce_grad),
        "sce": LossFn("sce", _sce_value, _sce_grad),
        "focal": LossFn("focal", _focal_value, _focal_grad),
        "dice": LossFn("dice", _dice_value, _dice_grad),
        "f1": classwise_loss("f1", _f1, _df1, F1_TREE),
        "f2": classwise_loss("f2", _f2, _df2, F2_TREE),
        "f3": classwise_loss("f3", _f3, _df3, F3_TREE),
        "f4": classwise_loss("f4", _f4, _df4, F4_TREE),
        "f5": ngl,
        "ngl": ngl,
    }
    return cat


CATALOG = _build_catalog()
NAMES = tuple(CATALOG)


def builtin(name: str) -> LossFn:
    try:
        return CATALOG[name.lower()]
    except KeyError:
        raise KeyError(f"unknown loss {name!r}; expected one of {', '.join(NAMES)}") from None


def grad(loss: LossFn, y_pred, y_real=None) -> Array:
    return loss.grad(y_pred, y_real)
