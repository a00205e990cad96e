import math

import numpy as np
import pytest

from barrier_ext.autodiff import (
    DomainError,
    ShapeError,
    Tape,
    backward,
    grad_check,
    index_select,
    matmul,
    softmax_rows,
)


def make_scalarizer(rng, shape):
    """Fixed random projection to a scalar, frozen across re-evaluations."""
    weights = rng.normal(size=shape)

    def scalarize(out):
        return (out * out.tape.constant(weights)).sum()

    return scalarize


class TestForward:
    def test_softmax_symmetry(self):
        tape = Tape()
        s = softmax_rows(tape.leaf([[0.0, 0.0]]), temperature=1.0)
        np.testing.assert_allclose(s.value, [[0.5, 0.5]], rtol=1e-15)

    def test_softmax_temperature_sharpening(self):
        tape = Tape()
        s = softmax_rows(tape.leaf([[1.0, 0.0]]), temperature=5.0)
        expected = math.exp(5.0) / (math.exp(5.0) + 1.0)
        np.testing.assert_allclose(s.value, [[expected, 1.0 - expected]], rtol=1e-12)
        assert s.value[0, 0] == pytest.approx(0.993307, abs=1e-6)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        tape = Tape()
        s = softmax_rows(tape.leaf(rng.normal(size=(40, 5)) * 3.0), temperature=5.0)
        np.testing.assert_allclose(s.value.sum(axis=1), np.ones(40), atol=1e-12)
        assert np.all(s.value > 0.0) and np.all(s.value < 1.0)

    def test_sum(self):
        tape = Tape()
        assert tape.leaf([1.0, 2.0, 3.0, 4.0]).sum().item() == 10.0

    def test_row_bias_broadcast(self):
        tape = Tape()
        a = tape.leaf(np.ones((3, 2)))
        b = tape.leaf([10.0, 20.0])
        np.testing.assert_array_equal((a + b).value, [[11.0, 21.0]] * 3)

    def test_shape_mismatch_reports_op_and_shapes(self):
        tape = Tape()
        a = tape.leaf(np.ones((2, 3)))
        b = tape.leaf(np.ones((3, 3)))
        with pytest.raises(ShapeError, match=r"mul.*\(2, 3\).*\(3, 3\)"):
            _ = a * b
        with pytest.raises(ShapeError, match="matmul"):
            matmul(a, a)

    def test_checked_mode_guards(self):
        tape = Tape()
        with pytest.raises(DomainError):
            tape.leaf([1.0, float("nan")])
        with pytest.raises(DomainError):
            tape.leaf([-1.0]).log()
        unchecked = Tape(checked=False)
        x = unchecked.leaf([-1.0]).log()
        assert math.isnan(float(x.value[0]))

    def test_index_select_bounds(self):
        tape = Tape()
        x = tape.leaf(np.arange(6.0).reshape(2, 3))
        with pytest.raises(IndexError):
            index_select(x, 1, (3,))

    def test_softmax_requires_rank_2(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            softmax_rows(tape.leaf([1.0, 2.0]))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.leaf(np.arange(12.0).reshape(3, 4))
        g = backward(x.sum())
        np.testing.assert_array_equal(g[x], np.ones((3, 4)))

    def test_square_gradient(self):
        tape = Tape()
        x = tape.leaf(3.0)
        g = backward(x * x)
        assert float(g[x]) == 6.0

    def test_non_scalar_output_rejected(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(x * x)

    def test_unused_leaf_gets_zero_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        y = tape.leaf(5.0)
        g = backward((x * x).sum())
        assert g[y].shape == () and float(g[y]) == 0.0

    def test_seed_linearity(self):
        rng = np.random.default_rng(3)
        point = rng.normal(size=(4, 3))
        scale = 7.25

        def build(mult):
            tape = Tape()
            x = tape.leaf(point)
            s = softmax_rows(x, temperature=2.0)
            out = (s * s).sum() * mult
            return backward(out)[x]

        g1 = build(1.0)
        g2 = build(scale)
        np.testing.assert_allclose(g2, scale * g1, rtol=1e-12)

    def test_replay_determinism(self):
        rng = np.random.default_rng(11)
        point = rng.normal(size=(5, 4))

        def run():
            tape = Tape()
            x = tape.leaf(point)
            s = softmax_rows(x, temperature=3.0)
            h = (s.exp() + s).log()
            out = (h * h).sum()
            return out.value.copy(), backward(out)[x]

        v1, g1 = run()
        v2, g2 = run()
        assert v1.tobytes() == v2.tobytes()
        assert g1.tobytes() == g2.tobytes()


class TestGradCheck:
    def test_sum_of_squares_is_nearly_exact(self):
        rng = np.random.default_rng(0)
        err = grad_check(lambda x: (x * x).sum(), rng.normal(size=9))
        assert err < 1e-8

    @pytest.mark.parametrize("trial", range(5))
    def test_each_op_vjp_matches_finite_differences(self, trial):
        rng = np.random.default_rng(100 + trial)
        checks = {}

        a0 = rng.normal(size=(3, 4))
        proj = make_scalarizer(rng, (3, 4))
        other = rng.normal(size=(3, 4))
        bias = rng.normal(size=4)
        denom = 2.0 + np.abs(rng.normal(size=(3, 4)))

        def with_aux(build):
            return grad_check(build, a0, step=1e-6)

        checks["add"] = with_aux(lambda x: proj(x + x.tape.constant(other)))
        checks["add_bias"] = with_aux(lambda x: proj(x + x.tape.constant(bias)))
        checks["sub"] = with_aux(lambda x: proj(x.tape.constant(other) - x))
        checks["mul"] = with_aux(lambda x: proj(x * x.tape.constant(other)))
        checks["div"] = with_aux(lambda x: proj(x / x.tape.constant(denom)))
        checks["div_by_var"] = with_aux(
            lambda x: proj(x.tape.constant(np.ones((3, 4))) / (x.exp() + 1.0))
        )
        checks["exp"] = with_aux(lambda x: proj(x.exp()))
        checks["log"] = grad_check(
            lambda x: proj(x.log()), 0.5 + np.abs(rng.normal(size=(3, 4)))
        )
        # keep clear of the relu kink so central differences are valid
        relu_point = rng.normal(size=(3, 4))
        relu_point[np.abs(relu_point) < 1e-3] = 0.5
        checks["relu"] = grad_check(lambda x: proj(x.relu()), relu_point)
        checks["sum"] = with_aux(lambda x: x.sum())

        w_rhs = rng.normal(size=(4, 2))
        proj_mm = make_scalarizer(rng, (3, 2))
        checks["matmul_lhs"] = with_aux(lambda x: proj_mm(matmul(x, x.tape.constant(w_rhs))))
        w_lhs = rng.normal(size=(2, 5))
        proj_mm2 = make_scalarizer(rng, (2, 3))
        checks["matmul_rhs"] = grad_check(
            lambda x: proj_mm2(matmul(x.tape.constant(w_lhs), x)), rng.normal(size=(5, 3))
        )
        proj_rows = make_scalarizer(rng, (3, 4))
        checks["index_select_rows"] = with_aux(
            lambda x: proj_rows(index_select(x, 0, (0, 2, 2)))
        )
        proj_cols = make_scalarizer(rng, (3, 2))
        checks["index_select_cols"] = with_aux(
            lambda x: proj_cols(index_select(x, 1, (1, 3)))
        )
        checks["scalar_mul"] = with_aux(lambda x: proj(x * -1.75))
        checks["softmax_rows"] = with_aux(lambda x: proj(softmax_rows(x, temperature=4.0)))

        bad = {name: err for name, err in checks.items() if not err < 1e-5}
        assert not bad, f"VJP mismatch beyond 1e-5: {bad}"

    def test_composite_cross_entropy_style_program(self):
        rng = np.random.default_rng(42)
        labels = np.zeros((4, 2))
        labels[np.arange(4), rng.integers(0, 2, size=4)] = 1.0

        def program(x):
            s = softmax_rows(x, temperature=5.0)
            picked = index_select(s, 0, (0, 1, 3))
            y = x.tape.constant(labels[[0, 1, 3]])
            return -((picked.log() * y).sum())

        assert grad_check(program, rng.normal(size=(4, 2))) < 1e-5

    def test_detects_deliberately_broken_derivative(self, monkeypatch):
        import barrier_ext.autodiff as ad

        def broken_relu_bwd(tape, parents, out, g, attrs):
            return (g * (parents[0] > 0.0) * 1.5,)

        monkeypatch.setitem(ad._BACKWARD, "relu", broken_relu_bwd)
        point = np.array([0.5, 2.0, -1.0, 3.0])
        err = grad_check(lambda x: x.relu().sum(), point)
        assert err > 1e-2


class TestTapeIsolation:
    def test_vars_are_tape_bound(self):
        t1, t2 = Tape(), Tape()
        x = t1.leaf([1.0])
        y = t2.leaf([1.0])
        with pytest.raises(ValueError, match="different tape"):
            t1.apply("add", x, y)
