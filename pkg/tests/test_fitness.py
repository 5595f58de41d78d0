import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossforge import expr as ex
from lossforge.data import synth_blobs
from lossforge.expr import parse_expr
from lossforge.fitness import (CandidateRejected, ClassifierFitness, ExperimentSpec,
                               FitnessOracle, LandscapeDistance, RangeCheckSpec, Scalar,
                               VsBaseline, compare, evaluate_fitness, fitness_key,
                               improvement_pct, probe_grid, range_check, vs_baseline)
from lossforge.losses import CATALOG, NGL_TREE, builtin
from lossforge.nn import TrainConfig


def table_trainer(table):
    """Trainer returning fixed errors: table[loss_name][dataset][run]."""
    def trainer(loss, d, k):
        return table[loss.name][d][k]
    return trainer


class TestCompare:
    def test_scalar(self):
        assert compare(Scalar(0.10), Scalar(0.20)) < 0
        assert compare(Scalar(0.20), Scalar(0.10)) > 0
        assert compare(Scalar(0.1), Scalar(0.1)) == 0

    def test_any_win_beats_none(self):
        assert compare(VsBaseline(1, 2.0), VsBaseline(0, 0.5)) < 0

    def test_equal_wins_higher_mean_better(self):
        assert compare(VsBaseline(2, 4.0), VsBaseline(2, 6.0)) > 0

    def test_zero_wins_lower_degradation_better(self):
        assert compare(VsBaseline(0, 3.0), VsBaseline(0, 7.0)) < 0

    def test_more_wins_better(self):
        assert compare(VsBaseline(3, 0.5), VsBaseline(1, 20.0)) < 0

    def test_mixed_shapes(self):
        with pytest.raises(TypeError):
            compare(Scalar(0.1), VsBaseline(1, 1.0))

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            Scalar(float("nan"))
        with pytest.raises(ValueError):
            VsBaseline(-1, 0.0)

    values = st.builds(VsBaseline, st.integers(0, 4), st.floats(-50, 50, allow_nan=False))

    @settings(max_examples=500)
    @given(values, values, values)
    def test_total_preorder(self, a, b, c):
        assert compare(a, a) == 0
        assert compare(a, b) == -compare(b, a)
        if compare(a, b) <= 0 and compare(b, c) <= 0:
            assert compare(a, c) <= 0

    def test_sort_key(self):
        vals = [VsBaseline(0, 5.0), VsBaseline(2, 1.0), VsBaseline(1, 9.0), VsBaseline(2, 3.0)]
        assert sorted(vals, key=fitness_key) == [VsBaseline(2, 3.0), VsBaseline(2, 1.0),
                                                 VsBaseline(1, 9.0), VsBaseline(0, 5.0)]


class TestEvaluateFitness:
    def test_multi_run_mean(self):
        spec = ExperimentSpec("single-dataset-multi-run", ("a",), runs_per_dataset=3)
        f = evaluate_fitness(builtin("ngl"), spec,
                             table_trainer({"ngl": [[0.10, 0.12, 0.14]]}))
        assert isinstance(f, Scalar) and f.error == pytest.approx(0.12)

    def test_vs_baseline_wins(self):
        spec = ExperimentSpec("multi-dataset-vs-baseline", ("a", "b", "c"),
                              baseline_errors={"a": 0.20, "b": 0.30, "c": 0.40})
        f = evaluate_fitness(builtin("ngl"), spec,
                             table_trainer({"ngl": [[0.18], [0.33], [0.39]]}))
        assert f.wins == 2 and f.mean_improvement_pct == pytest.approx(6.25)

    def test_vs_baseline_all_worse(self):
        f = vs_baseline([0.2, 0.2, 0.2], [0.21, 0.22, 0.23])
        assert f.wins == 0 and f.mean_improvement_pct == pytest.approx(10.0)

    def test_ties_are_not_wins(self):
        f = vs_baseline([0.2, 0.3], [0.2, 0.25])
        assert f.wins == 1

    def test_needs_baseline(self):
        spec = ExperimentSpec("multi-dataset-vs-baseline", ("a", "b"))
        with pytest.raises(ValueError):
            evaluate_fitness(builtin("ngl"), spec, table_trainer({"ngl": [[0.1], [0.1]]}))

    def test_improvement_with_perfect_ce(self):
        assert improvement_pct(0.0, 0.0) == 0.0
        assert improvement_pct(0.0, 0.05) == pytest.approx(-5.0)
        assert improvement_pct(0.2, 0.1) == pytest.approx(50.0)

    @pytest.mark.parametrize("kw", [dict(mode="bogus"), dict(runs_per_dataset=0),
                                    dict(datasets=()), dict(datasets=("a", "b")),
                                    dict(runs_per_dataset=2)])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            ExperimentSpec(**kw)


class TestRangeCheck:
    @pytest.mark.parametrize("name", ["ngl", "f1", "f2", "f3", "f4"])
    def test_catalog_passes(self, name):
        assert range_check(CATALOG[name].tree).passed

    def test_tiny_constant_fails(self):
        e = parse_expr("(add (mul (mul 0.0 y_pred) y_real) 1e-06)")
        res = range_check(e)
        assert not res.passed and res.reason == "value below 1e-05"
        assert res.value == pytest.approx(1e-6)

    def test_triple_exp_overflows(self):
        res = range_check(parse_expr("(mul y_real (exp (exp (exp (mul 10.0 y_pred)))))"))
        assert not res.passed and res.reason == "non-finite value (overflow)"
        assert res.y_pred is not None and len(res.y_pred) == len(res.y_real)

    def test_large_value_fails(self):
        res = range_check(parse_expr("(add y_real (mul 1000000.0 (add y_pred 1.0)))"))
        assert res.reason == "value above 100000"

    def test_non_finite_gradient_fails(self):
        res = range_check(parse_expr("(add 1.0 (mul y_real (exp (mul 745.0 y_pred))))"))
        assert not res.passed

    def test_probe_grid(self):
        spec = RangeCheckSpec()
        grids = probe_grid(spec)
        assert [g[0].shape[1] for g in grids] == [2, 3, 10]
        for y_pred, y_real in grids:
            n = y_pred.shape[1]
            assert np.allclose(y_pred.sum(axis=1), 1.0)
            assert y_pred.min() >= spec.margin / n - 1e-15
            assert np.all(y_real.sum(axis=1) == 1)
            # every probe is paired with every one-hot label
            assert len(y_pred) % n == 0

    def test_gathered_evaluation_matches_direct(self):
        spec = RangeCheckSpec()
        for s in range(100):
            e = ex.random_tree(rng_seed=s)
            direct = True
            for y_pred, y_real in probe_grid(spec):
                try:
                    v = np.abs(ex.evaluate(e, y_pred, y_real))
                    ex.classwise(ex.differentiate(e), y_pred, y_real)
                except ex.EvaluationError:
                    direct = False
                    break
                if np.any(v < spec.lower) or np.any(v > spec.upper):
                    direct = False
                    break
            assert range_check(e, spec).passed == direct, ex.format_expr(e)


class Rejecting(FitnessOracle):
    def score(self, e):
        if ex.contains_op(e, "cos"):
            raise ex.EvaluationError("boom")
        return Scalar(float(ex.size(e)))


class TestOracle:
    def test_range_rejection(self):
        with pytest.raises(CandidateRejected, match="below"):
            Rejecting()(parse_expr("(add (mul (mul 0.0 y_pred) y_real) 1e-06)"))

    def test_evaluation_error_rejects(self):
        with pytest.raises(CandidateRejected):
            Rejecting()(parse_expr("(add (cos y_pred) (add y_real 1.0))"))

    def test_passes_through(self):
        f1 = CATALOG["f1"].tree
        assert Rejecting()(f1) == Scalar(float(ex.size(f1)))

    def test_landscape_distance_target(self):
        assert LandscapeDistance()(NGL_TREE).error == pytest.approx(0.0, abs=1e-12)
        assert LandscapeDistance()(CATALOG["f4"].tree).error > 0.5


@pytest.fixture(scope="module")
def tiny_data():
    return {"a": synth_blobs(3, 40, 2, 3.0, seed=1), "b": synth_blobs(2, 40, 3, 2.0, seed=2)}


class TestClassifierFitness:
    def test_deterministic(self, tiny_data):
        spec = ExperimentSpec(datasets=("a",), trainer=TrainConfig(epochs=3), seed=4)
        a = ClassifierFitness(spec, tiny_data)(NGL_TREE)
        b = ClassifierFitness(spec, tiny_data)(NGL_TREE)
        assert a == b and 0 <= a.error <= 1

    def test_vs_baseline_computes_ce(self, tiny_data):
        spec = ExperimentSpec("multi-dataset-vs-baseline", ("a", "b"), runs_per_dataset=2,
                              trainer=TrainConfig(epochs=3))
        oracle = ClassifierFitness(spec, tiny_data)
        assert set(oracle.spec.baseline_errors) == {"a", "b"}
        assert isinstance(oracle(NGL_TREE), VsBaseline)
        # CE against itself: no wins, zero degradation
        ce_fit = evaluate_fitness(builtin("ce"), oracle.spec, oracle.trainer)
        assert ce_fit == VsBaseline(0, 0.0)
