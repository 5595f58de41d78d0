import json

import numpy as np
import pytest

from lossforge import analysis as an
from lossforge.expr import EvaluationError, parse_expr
from lossforge.losses import CATALOG, builtin, from_tree

from oracles import ngl_scalar


def test_ngl_at_perfect_prediction():
    g = an.binary_reduce(builtin("ngl"))
    assert g(1.0, 1) == pytest.approx(5.6530, abs=1e-3)
    assert g(1.0, 1) == pytest.approx(0.5 * (ngl_scalar(1, 1) + ngl_scalar(0, 0)), abs=1e-12)


def test_ngl_matches_scalar_reference_on_grid():
    g = an.binary_reduce(builtin("ngl"))
    grid = np.linspace(0, 1, 1001)
    want = [0.5 * (ngl_scalar(p, 1) + ngl_scalar(1 - p, 0)) for p in grid]
    assert np.max(np.abs(g(grid, 1) - want)) <= 1e-12


@pytest.mark.parametrize("name", sorted(CATALOG))
def test_relabeling_symmetry(name):
    g = an.binary_reduce(builtin(name))
    grid = np.linspace(0.001, 0.999, 999)
    np.testing.assert_allclose(g(grid, 1), g(1 - grid, 0), rtol=1e-12, atol=1e-12)


def test_ce_decreases_to_zero():
    g = an.binary_reduce(builtin("ce"))
    grid = np.linspace(0, 1, 1001)
    v = g(grid, 1)
    assert np.all(np.diff(v) < 0) and abs(v[-1]) < 1e-8


class TestSampleLandscape:
    def test_ngl_curve(self):
        c = an.sample_landscape(builtin("ngl"), 1, 1e-3)
        assert len(c.grid) == 1001 and c.grid[0] == 0 and c.grid[-1] == 1
        assert an.classify(c.values) == "interior-minimum"

    def test_ce_strictly_decreasing(self):
        c = an.sample_landscape(builtin("ce"), 1)
        assert np.all(np.diff(c.values[1:-1]) < 0)

    @pytest.mark.parametrize("name", sorted(CATALOG))
    def test_gradient_consistent_with_values(self, name):
        c = an.sample_landscape(builtin(name), 1, 1e-3)
        h = 1e-6
        g = an.binary_reduce(builtin(name))
        inner = c.grid[20:-20]
        fd = (g(inner + h, 1) - g(inner - h, 1)) / (2 * h)
        rel = np.abs(c.gradient_values[20:-20] - fd) / np.maximum(np.abs(fd), 1.0)
        assert rel.max() <= 1e-4

    def test_errors_annotated(self):
        loss = from_tree(parse_expr("(mul y_real (exp (exp (exp (mul 10.0 y_pred)))))"))
        with pytest.raises(EvaluationError, match="y_pred0="):
            an.sample_landscape(loss, 1)

    @pytest.mark.parametrize("kw", [dict(y_real_fixed=2), dict(grid_step=0.0),
                                    dict(grid_step=0.7)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            an.sample_landscape(builtin("ce"), **kw)

    def test_csv(self):
        c = an.sample_landscape(builtin("ngl"), 1, 0.25)
        lines = c.to_csv().splitlines()
        assert lines[0] == "y_pred0,value,gradient" and len(lines) == 6
        assert float(lines[1].split(",")[1]) == pytest.approx(c.values[0])


class TestClassify:
    @pytest.mark.parametrize("values,shape", [
        ([3, 2, 1], "monotone-decreasing"), ([1, 2, 3], "monotone-increasing"),
        ([3, 1, 2], "interior-minimum"), ([1, 2, 1], "other"), ([1, 1, 1], "other"),
        ([3, 2, 2, 1], "monotone-decreasing"), ([3, 1, 2, 1, 2], "other"),
    ])
    def test_shapes(self, values, shape):
        assert an.classify(np.array(values, float)) == shape

    def test_noise_tolerance(self):
        v = np.array([3.0, 2.0, 2.0 + 1e-12, 1.0])
        assert an.classify(v) == "monotone-decreasing"


class TestAnalyze:
    def test_ngl(self):
        rep = an.analyze(an.sample_landscape(builtin("ngl"), 1))
        assert rep.argmin == pytest.approx(0.57, abs=0.02)
        assert rep.shape == "interior-minimum" and rep.increase_near_1

    def test_f4(self):
        assert an.analyze(an.sample_landscape(builtin("f4"), 1)).argmin == pytest.approx(
            0.61, abs=0.02)

    def test_f3(self):
        assert an.analyze(an.sample_landscape(builtin("f3"), 1)).shape == "monotone-decreasing"

    def test_f2_other(self):
        assert an.analyze(an.sample_landscape(builtin("f2"), 1)).shape == "other"

    @pytest.mark.parametrize("name", ["ngl", "f1", "f4"])
    def test_refined_within_one_step(self, name):
        c = an.sample_landscape(builtin(name), 1, 1e-3)
        rep = an.analyze(c)
        assert abs(rep.argmin - c.grid[np.argmin(c.values)]) <= 1e-3
        assert rep.min_value <= c.values.min()

    def test_monotone_argmin_at_boundary(self):
        rep = an.analyze(an.sample_landscape(builtin("ce"), 1))
        assert rep.argmin == 1.0 and not rep.increase_near_1

    def test_y_real_zero_mirrors(self):
        rep = an.analyze(an.sample_landscape(builtin("ngl"), 0))
        assert rep.argmin == pytest.approx(1 - 0.5659, abs=2e-3)

    def test_report_json(self):
        rep = an.analyze(an.sample_landscape(builtin("ngl"), 1))
        d = json.loads(rep.to_json())
        assert d["shape"] == "interior-minimum" and d["loss_name"] == "ngl"

    def test_short_curve(self):
        c = an.LandscapeCurve(1, np.array([0.0, 1.0]), np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            an.analyze(c)
