"""Solver tests: CG against a dense-solve oracle, the damping threshold and
rate formulas at their closed-form values, and Picard-iteration behavior."""

import numpy as np
import pytest

from molkit.errors import ConvergenceError, DivergenceError
from molkit.imaging import ComplexImage, generate_coil_maps, generate_mask
from molkit.linops import SenseModel, gram_apply
from molkit.solvers import (
    SolverConfig,
    alpha_max,
    conjugate_gradient,
    contraction_rate,
    estimate_rate,
    fixed_point_iterate,
)


def rand_img(shape, seed):
    rng = np.random.default_rng(seed)
    return ComplexImage(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


class TestConjugateGradient:
    def test_identity_in_one_iteration(self):
        rhs = rand_img((8, 8), 0)
        out = conjugate_gradient(lambda v: v, rhs)
        assert np.allclose(out.data, rhs.data, atol=1e-12)

    def test_scalar_system(self):
        rhs = rand_img((8, 8), 1)
        out = conjugate_gradient(lambda v: ComplexImage(1.05 * v.data), rhs)
        assert np.max(np.abs(out.data - rhs.data / 1.05)) < 1e-10

    def test_zero_rhs_short_circuit(self):
        out = conjugate_gradient(lambda v: v, ComplexImage(np.zeros((4, 4))))
        assert np.all(out.data == 0)

    def test_matches_dense_solve_oracle(self):
        # materialize I + al*A^H A on an 8x8 grid as a dense 64x64 system
        n, al = 8, 0.05
        maps = generate_coil_maps(n, n, 3, seed=2)
        mask = generate_mask(n, n, 2.0, "uniform", seed=3, center_fraction=0.1)
        model = SenseModel(maps, mask, (n, n))

        def op(v):
            return ComplexImage(v.data + al * gram_apply(v, model).data)

        mat = np.zeros((n * n, n * n), dtype=np.complex128)
        for j in range(n * n):
            e = np.zeros(n * n, dtype=np.complex128)
            e[j] = 1.0
            mat[:, j] = op(ComplexImage(e.reshape(n, n))).data.ravel()
        rhs = rand_img((n, n), 4)
        expected = np.linalg.solve(mat, rhs.data.ravel()).reshape(n, n)
        out = conjugate_gradient(op, rhs, SolverConfig(cg_tolerance=1e-12, cg_max_iterations=200))
        assert np.max(np.abs(out.data - expected)) < 1e-6

    def test_converges_within_budget_on_resolvent_systems(self):
        al = 0.05
        for kind, acc in [("cartesian-variable-density", 4.0), ("uniform", 2.0), ("full", 1.0)]:
            for ncoils in (1, 4):
                maps = generate_coil_maps(16, 16, ncoils, seed=5)
                mask = generate_mask(16, 16, acc, kind, seed=6, center_fraction=0.1)
                model = SenseModel(maps, mask, (16, 16))
                rhs = rand_img((16, 16), 7)
                out = conjugate_gradient(
                    lambda v: ComplexImage(v.data + al * gram_apply(v, model).data),
                    rhs, SolverConfig(),
                )
                resid = np.linalg.norm(
                    out.data + al * gram_apply(out, model).data - rhs.data
                ) / rhs.norm()
                assert resid < 1e-6

    def test_nonconvergence_raises_with_residual(self):
        rng = np.random.default_rng(8)
        diag = np.exp(rng.uniform(0, np.log(1e3), size=(8, 8)))  # condition number ~1e3
        rhs = rand_img((8, 8), 9)
        with pytest.raises(ConvergenceError) as err:
            conjugate_gradient(
                lambda v: ComplexImage(diag * v.data),
                rhs, SolverConfig(cg_max_iterations=3, cg_tolerance=1e-12),
            )
        assert err.value.residual is not None and err.value.residual > 0


class TestAlphaMax:
    def test_worked_example(self):
        assert abs(alpha_max(0.1) - 0.05540) < 1e-5

    def test_unit_damping_threshold(self):
        assert abs(alpha_max(3 - np.sqrt(5)) - 1.0) < 1e-6

    def test_direct_substitution(self):
        assert abs(alpha_max(0.5) - 4.0 / 9.0) < 1e-15

    @pytest.mark.parametrize("m", [-0.1, 0.0, 1.0, 3.0])
    def test_domain_rejected(self, m):
        with pytest.raises(ValueError):
            alpha_max(m)

    def test_strictly_increasing(self):
        grid = np.linspace(0.005, 0.995, 100)
        vals = [alpha_max(m) for m in grid]
        assert all(b > a for a, b in zip(vals, vals[1:]))


class TestContractionRate:
    def test_closed_form_value(self):
        assert abs(contraction_rate(0.05, 0.1) - np.sqrt(0.999025)) < 1e-12

    def test_small_alpha_limit(self):
        assert contraction_rate(1e-8, 0.1) > 1 - 1e-6

    def test_near_threshold_still_contracting(self):
        m = 0.1
        rate = contraction_rate(alpha_max(m) - 1e-9, m)
        assert rate < 1.0
        assert 1.0 - rate < 1e-4

    def test_rejects_beyond_threshold(self):
        with pytest.raises(ValueError):
            contraction_rate(alpha_max(0.1) + 1e-9, 0.1)

    def test_threshold_equivalence_on_grid(self):
        # rate < 1 exactly on alpha < alpha_max: scan a 50x50 grid
        for m in np.linspace(0.02, 0.98, 50):
            amax = alpha_max(m)
            for alpha in np.linspace(0.02, 1.2, 50):
                inside = 0.0 < alpha < amax
                if inside:
                    assert contraction_rate(alpha, m) < 1.0
                else:
                    expr = 1.0 - 2 * alpha * m + alpha**2 * (2 - m) ** 2
                    assert np.sqrt(max(expr, 0.0)) >= 1.0 - 1e-12


class TestFixedPoint:
    def test_affine_contraction(self):
        res = fixed_point_iterate(
            lambda x: ComplexImage(0.5 * x.data + 1.0),
            ComplexImage(np.zeros((4, 4))),
        )
        assert res.converged
        assert np.max(np.abs(res.x_star.data - 2.0)) < 1e-4

    def test_identity_converges_immediately(self):
        x0 = rand_img((4, 4), 10)
        res = fixed_point_iterate(lambda x: x, x0)
        assert res.converged and res.iterations == 1
        assert res.residuals == [0.0]

    def test_expansive_map_fails(self):
        res = None
        err = None
        try:
            res = fixed_point_iterate(
                lambda x: ComplexImage(2.0 * x.data),
                ComplexImage(np.ones((4, 4))),
                SolverConfig(fp_max_iterations=50),
            )
        except DivergenceError as exc:
            err = exc
        assert err is not None or (res is not None and not res.converged)

    def test_nan_iterate_raises_with_index(self):
        def mapper(x):
            out = x.data * 1e154
            return ComplexImage.__new__(ComplexImage), out  # never reached

        def explode(x):
            obj = ComplexImage.__new__(ComplexImage)
            obj.data = x.data * 1e160  # bypass validation to inject inf
            return obj

        with pytest.raises(DivergenceError) as err:
            fixed_point_iterate(explode, ComplexImage(np.ones((2, 2))))
        assert err.value.iteration is not None

    def test_residual_history_and_memory_contract(self):
        res = fixed_point_iterate(
            lambda x: ComplexImage(0.9 * x.data),
            rand_img((4, 4), 11),
            SolverConfig(fp_tolerance=1e-3),
        )
        assert len(res.residuals) == res.iterations

    def test_initialization_independence_for_contractions(self):
        cfg = SolverConfig(fp_tolerance=1e-8, fp_max_iterations=500)

        def contraction(x):
            return ComplexImage(0.6 * x.data + 0.5)

        a = fixed_point_iterate(contraction, rand_img((4, 4), 12), cfg)
        b = fixed_point_iterate(contraction, rand_img((4, 4), 13), cfg)
        gap = np.linalg.norm(a.x_star.data - b.x_star.data) / np.linalg.norm(a.x_star.data)
        assert gap < 10 * cfg.fp_tolerance

    def test_zero_start_is_allowed(self):
        res = fixed_point_iterate(
            lambda x: ComplexImage(0.5 * x.data + 1.0),
            ComplexImage(np.zeros((3, 3))),
        )
        assert res.converged


class TestEstimateRate:
    def test_exact_geometric_sequence(self):
        assert abs(estimate_rate([1, 0.5, 0.25, 0.125, 0.0625]) - 0.5) < 1e-12

    def test_known_contraction_run(self):
        res = fixed_point_iterate(
            lambda x: ComplexImage(0.9 * x.data),
            rand_img((8, 8), 14),
            SolverConfig(fp_tolerance=1e-9, fp_max_iterations=300),
        )
        assert abs(estimate_rate(res.residuals) - 0.9) < 1e-3

    def test_too_short_history_rejected(self):
        with pytest.raises(ValueError):
            estimate_rate([1, 0.5, 0.25, 0.125])

    def test_rate_bounded_by_lipschitz(self):
        for lip in (0.3, 0.7, 0.95):
            res = fixed_point_iterate(
                lambda x, c=lip: ComplexImage(c * x.data + (1 - c)),
                rand_img((4, 4), 15),
                SolverConfig(fp_tolerance=1e-10, fp_max_iterations=1000),
            )
            assert estimate_rate(res.residuals) <= lip + 0.02
