"""Evolutionary search for classification loss functions.

Losses are expression trees over ``y_pred`` and ``y_real``; a genetic
programming loop scores them by training a small softmax classifier.
"""
from .expr import (Binary, Const, ConstructionError, EvaluationError, ParseError,
                   TreeConstraints, Unary, Var, Y_PRED, Y_REAL, differentiate, evaluate,
                   format_expr, parse_expr, random_tree, validate)
from .losses import CATALOG, LossFn, builtin, from_tree

__version__ = "0.1.0"

__all__ = [
    "Binary", "Const", "ConstructionError", "EvaluationError", "ParseError",
    "TreeConstraints", "Unary", "Var", "Y_PRED", "Y_REAL", "differentiate", "evaluate",
    "format_expr", "parse_expr", "random_tree", "validate",
    "CATALOG", "LossFn", "builtin", "from_tree",
]
