import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossforge import expr as ex
from lossforge.expr import (Binary, Const, ConstructionError, EvalPoint, EvaluationError,
                            ParseError, TreeConstraints, Unary, Y_PRED, Y_REAL)
from lossforge.losses import CATALOG, NGL_TREE

from oracles import gradient_check, mp_eval, ngl_scalar, random_points

leaves = st.one_of(st.just(Y_PRED), st.just(Y_REAL),
                   st.floats(-5, 5, allow_nan=False).map(Const))
trees = st.recursive(
    leaves,
    lambda kids: st.one_of(
        st.builds(Unary, st.sampled_from(ex.GP_UNARY), kids),
        st.builds(Binary, st.sampled_from(ex.GP_BINARY), kids, kids)),
    max_leaves=20)


def test_nodes_reject_bad_ops():
    with pytest.raises(ValueError):
        Unary("tan", Y_PRED)
    with pytest.raises(ValueError):
        Binary("pow", Y_PRED, Y_REAL)
    with pytest.raises(ValueError):
        ex.Var("x")


def test_non_finite_constant_is_invalid():
    rep = ex.validate(Binary("add", Binary("mul", Y_PRED, Y_REAL), Const(math.inf)))
    assert rep.failures == ["non-finite constant"]


def test_size_height_and_indexing():
    e = ex.parse_expr("(add (sin y_pred) (mul y_real 2.0))")
    assert ex.size(e) == 6
    assert ex.height(e) == 3
    assert [ex.format_expr(n) for n in ex.iter_nodes(e)][:3] == [
        ex.format_expr(e), "(sin y_pred)", "y_pred"]
    assert ex.subtree_at(e, 3) == ex.parse_expr("(mul y_real 2.0)")
    assert ex.replace_at(e, 2, Y_REAL) == ex.parse_expr("(add (sin y_real) (mul y_real 2.0))")
    with pytest.raises(IndexError):
        ex.subtree_at(e, 6)


class TestConstraints:
    def test_defaults(self):
        c = TreeConstraints()
        assert (c.min_height, c.max_size, c.constant_range) == (2, 100, (-5.0, 5.0))

    @pytest.mark.parametrize("kw", [dict(min_height=0), dict(min_height=3, max_size=6),
                                    dict(constant_range=(1.0, -1.0)),
                                    dict(max_retries=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TreeConstraints(**kw)


class TestRandomTree:
    def test_seed_7(self):
        e = ex.random_tree(TreeConstraints(min_height=2, max_size=100), 7)
        assert ex.height(e) >= 2 and ex.size(e) <= 100
        counts = ex.terminal_counts(e)
        assert counts["y_pred"] and counts["y_real"]

    def test_infeasible(self):
        with pytest.raises(ConstructionError):
            ex.random_tree(TreeConstraints(min_height=1, max_size=1), 0)

    def test_seed_sweep_all_valid(self):
        c = TreeConstraints()
        assert all(ex.validate(ex.random_tree(c, s), c).ok for s in range(1000))

    @pytest.mark.parametrize("c", [TreeConstraints(min_height=1, max_size=3),
                                   TreeConstraints(min_height=4, max_size=15),
                                   TreeConstraints(min_height=2, max_size=5),
                                   TreeConstraints(min_height=6, max_size=100)])
    def test_tight_constraints(self, c):
        for s in range(200):
            assert ex.validate(ex.random_tree(c, s), c).ok

    def test_deterministic(self):
        assert ex.random_tree(rng_seed=3) == ex.random_tree(rng_seed=3)

    def test_constants_in_range(self):
        c = TreeConstraints(constant_range=(1.0, 2.0))
        consts = [n.value for s in range(100) for n in ex.iter_nodes(ex.random_tree(c, s))
                  if isinstance(n, Const)]
        assert consts and all(1.0 <= v <= 2.0 for v in consts)


class TestEvaluate:
    def test_protected_division_by_zero_label(self):
        e = ex.parse_expr("(div_protected y_pred y_real)")
        v = ex.evaluate(e, EvalPoint([0.3, 0.7], [1.0, 0.0]))
        assert v == pytest.approx((0.3 / (1 + 1e-8) + 0.7 / 1e-8) / 2)

    def test_ngl_perfect_binary(self):
        v = ex.evaluate(NGL_TREE, EvalPoint([1.0, 0.0], [1.0, 0.0]))
        expected = 0.5 * (math.exp(0.4092) + math.exp(2.4092)) \
            - 0.5 * (math.cos(math.cos(math.sin(1.0))) + math.cos(math.cos(0.0)))
        assert v == pytest.approx(expected, abs=1e-12)
        assert v == pytest.approx(5.6530, abs=1e-3)

    def test_identity_is_zero(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(4), 50)
        r = np.eye(4)[rng.integers(0, 4, 50)]
        assert np.all(ex.evaluate(ex.parse_expr("(sub y_pred y_pred)"), p, r) == 0)

    def test_overflow_reports_class(self):
        e = ex.parse_expr("(exp (exp (exp (mul 10.0 y_pred))))")
        with pytest.raises(EvaluationError) as info:
            ex.evaluate(e, [0.1, 0.9], [0.0, 1.0])
        assert info.value.class_index == 1

    @settings(max_examples=200, deadline=None)
    @given(trees.filter(lambda t: not ex.contains_op(t, "exp")),
           st.integers(2, 10), st.integers(0, 2**32 - 1))
    def test_total_without_exp(self, e, n, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(n))
        r = np.eye(n)[rng.integers(n)]
        try:
            v = ex.evaluate(e, p, r)
        except EvaluationError:
            # only overflow of huge-but-finite chains can be non-finite
            return
        assert math.isfinite(v)

    @settings(max_examples=200, deadline=None)
    @given(trees, st.integers(0, 2**32 - 1))
    def test_never_returns_nan(self, e, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(3), 5)
        r = np.eye(3)[rng.integers(0, 3, 5)]
        try:
            v = ex.evaluate(e, p, r)
        except EvaluationError:
            return
        assert np.all(np.isfinite(v))

    def test_matches_arbitrary_precision_reference(self):
        rng = np.random.default_rng(1)
        for s in range(40):
            e = ex.random_tree(rng_seed=s)
            p, r = random_points(rng, 5)
            try:
                got = ex.classwise(e, p, r)
            except EvaluationError:
                continue
            want = [float(mp_eval(e, pi, ri)) for pi, ri in zip(p, r)]
            np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-9)

    def test_ngl_tree_vs_scalar_reference(self):
        rng = np.random.default_rng(2)
        p, r = random_points(rng, 1000)
        got = ex.classwise(NGL_TREE, p, r)
        want = np.array([ngl_scalar(a, b) for a, b in zip(p, r)])
        assert np.max(np.abs(got - want)) <= 1e-12

    @pytest.mark.parametrize("p,r", [([0.2, 0.8], [0.0, 0.0]), ([0.5, 0.6], [1.0, 0.0]),
                                     ([0.5], [1.0, 0.0]), ([-0.1, 1.1], [1.0, 0.0])])
    def test_evalpoint_invariants(self, p, r):
        with pytest.raises(ValueError):
            EvalPoint(p, r)


class TestDifferentiate:
    def test_sin(self):
        assert ex.differentiate(ex.parse_expr("(sin y_pred)")) == ex.parse_expr("(cos y_pred)")

    def test_constant(self):
        assert ex.differentiate(Const(3.14)) == Const(0.0)

    def test_label_is_constant(self):
        assert ex.differentiate(Y_REAL) == Const(0.0)

    def test_abs_subgradient_at_zero(self):
        # d/dx sqrt(|x| + eps) at x = 0 uses sign(0) = 0
        d = ex.differentiate(ex.parse_expr("(sqrt_protected (sub y_pred 0.5))"))
        assert ex.evaluate(d, [0.5, 0.5], [1.0, 0.0]) == 0.0
        d = ex.differentiate(ex.parse_expr("(log_protected (sub y_pred 0.5))"))
        assert ex.evaluate(d, [0.5, 0.5], [1.0, 0.0]) == 0.0

    def test_protected_forms(self):
        x = 0.3
        cases = {
            "(sqrt_protected y_pred)": 1 / (2 * math.sqrt(x + 1e-8)),
            "(log_protected y_pred)": 1 / (x + 1e-8),
            "(div_protected 2.0 y_pred)": -2.0 / (x + 1e-8) ** 2,
            "(log_protected (negate y_pred))": 1 / (x + 1e-8),
        }
        for text, want in cases.items():
            d = ex.differentiate(ex.parse_expr(text))
            assert ex.classwise(d, [x], [1.0])[0] == pytest.approx(want, rel=1e-12), text

    def test_ngl_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        stats = gradient_check(NGL_TREE, *random_points(rng, 200))
        assert stats["failures"] == 0
        assert stats["checked"] == 200

    @pytest.mark.parametrize("name", ["f1", "f2", "f3", "f4", "ngl"])
    def test_catalog_trees(self, name):
        rng = np.random.default_rng(6)
        stats = gradient_check(CATALOG[name].tree, *random_points(rng, 500))
        assert stats["failures"] == 0
        assert stats["checked"] >= 400

    @settings(max_examples=100, deadline=None)
    @given(trees, st.integers(0, 2**32 - 1))
    def test_random_trees(self, e, seed):
        stats = gradient_check(e, *random_points(np.random.default_rng(seed), 20))
        assert stats["failures"] == 0


class TestValidate:
    def test_missing_label(self):
        rep = ex.validate(ex.parse_expr("(add y_pred 1.0)"))
        assert not rep.ok and rep.failures == ["missing y_real"]

    @staticmethod
    def _chain(n_nodes):
        e = ex.parse_expr("(add y_pred y_real)")
        while ex.size(e) < n_nodes:
            e = Unary("sin", e)
        return e

    def test_size_boundary(self):
        assert ex.validate(self._chain(100)).ok
        rep = ex.validate(self._chain(101), TreeConstraints(max_size=100))
        assert not rep.ok and rep.failures == ["size"]

    def test_height(self):
        rep = ex.validate(ex.parse_expr("(add y_pred y_real)"), TreeConstraints(min_height=3))
        assert rep.failures == ["height"]

    def test_ngl_passes(self):
        assert ex.validate(NGL_TREE).ok


class TestText:
    def test_format(self):
        assert ex.format_expr(ex.parse_expr("(sub y_pred y_real)")) == "(sub y_pred y_real)"
        assert ex.format_expr(Binary("sub", Y_PRED, Y_REAL)) == "(sub y_pred y_real)"

    def test_parse_error_position(self):
        with pytest.raises(ParseError) as info:
            ex.parse_expr("(sin")
        assert info.value.position == 4

    @pytest.mark.parametrize("text,pos", [("(sin y_pred", 11), ("(foo y_pred)", 1),
                                          ("(add y_pred)", 11), ("y_pred y_real", 7),
                                          (")", 0), ("(sin y_pred y_real)", 12),
                                          ("(sin nan)", 5), ("", 0), ("(sin z)", 5)])
    def test_malformed(self, text, pos):
        with pytest.raises(ParseError) as info:
            ex.parse_expr(text)
        assert info.value.position == pos

    @pytest.mark.parametrize("name", ["f1", "f2", "f3", "f4", "f5"])
    def test_builtin_round_trip(self, name):
        tree = CATALOG[name].tree
        assert ex.parse_expr(ex.format_expr(tree)) == tree

    @settings(max_examples=300, deadline=None)
    @given(trees)
    def test_round_trip(self, e):
        assert ex.parse_expr(ex.format_expr(e)) == e
