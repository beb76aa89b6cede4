import numpy as np
import pytest

from netlasso_aid.errors import DegenerateDataWarning, InvalidInputError
from netlasso_aid.ocsvm import (
    INCIDENT,
    NORMAL,
    LossConfig,
    ModelParams,
    ProxTerm,
    anomaly_score,
    classify,
    decision_score,
    fit_standalone,
    optimal_bias,
    primal_objective,
    solve_local,
)

from oracles import grid_search_2d, ocsvm_objective, one_sided_derivatives


class TestPrimalObjective:
    def test_vanishes_at_origin(self):
        m = ModelParams(np.zeros(2), 0.0)
        cfg = LossConfig(nu=0.5, n=2)
        assert primal_objective(m, np.array([[1.0, 0.0], [0.0, 1.0]]), cfg) == 0.0

    def test_hand_evaluation(self):
        m = ModelParams(np.array([1.0, 0.0]), 0.5)
        cfg = LossConfig(nu=0.5, n=2)
        val = primal_objective(m, np.array([[1.0, 0.0], [0.0, 1.0]]), cfg)
        assert val == pytest.approx(0.5 + 1.0 * (0.0 + 0.5) - 0.5)

    def test_inactive_hinge_reduces_to_quadratic(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = rng.normal(size=3)
            x = rng.normal(size=3)
            b = float(w @ x) - rng.uniform(0.1, 2.0)  # <w,x> >= b
            m = ModelParams(w, b)
            val = primal_objective(m, x[None, :], LossConfig(nu=1.0, n=1))
            assert val == pytest.approx(0.5 * w @ w - b, abs=1e-12)

    def test_rejects_dimension_mismatch(self):
        m = ModelParams(np.zeros(3), 0.0)
        with pytest.raises(InvalidInputError):
            primal_objective(m, np.ones((2, 2)), LossConfig(nu=0.5, n=2))

    def test_rejects_empty_data(self):
        m = ModelParams(np.zeros(2), 0.0)
        with pytest.raises(InvalidInputError):
            primal_objective(m, np.empty((0, 2)), LossConfig(nu=0.5, n=1))

    def test_rejects_wrong_count(self):
        m = ModelParams(np.zeros(2), 0.0)
        with pytest.raises(InvalidInputError):
            primal_objective(m, np.ones((3, 2)), LossConfig(nu=0.5, n=2))


class TestDecisionScore:
    def test_unit_inner_product(self):
        m = ModelParams(np.array([1.0, 0, 0, 0]), 0.0)
        assert decision_score(m, np.array([1.0, 0, 0, 0])) == 1.0

    def test_sign_flip(self):
        m = ModelParams(np.array([1.0, 0, 0, 0]), 0.0)
        assert decision_score(m, np.array([-1.0, 0, 0, 0])) == -1.0

    def test_boundary_case(self):
        m = ModelParams(np.array([2.0, 1.0]), 3.0)
        assert decision_score(m, np.array([1.0, 1.0])) == 0.0

    def test_anomaly_score_is_negation(self):
        m = ModelParams(np.array([0.5, -0.25]), 0.1)
        x = np.array([0.3, 0.9])
        assert anomaly_score(m, x) == -decision_score(m, x)

    def test_dimension_mismatch(self):
        m = ModelParams(np.array([1.0, 2.0]), 0.0)
        with pytest.raises(InvalidInputError):
            decision_score(m, np.array([1.0, 2.0, 3.0]))


class TestClassify:
    def test_positive_score_is_normal(self):
        m = ModelParams(np.array([1.0]), 0.0)
        assert classify(m, np.array([1.0])) == NORMAL

    def test_negative_score_is_incident(self):
        m = ModelParams(np.array([1.0]), 0.0)
        assert classify(m, np.array([-1.0])) == INCIDENT

    def test_zero_score_ties_to_normal(self):
        m = ModelParams(np.array([2.0, 1.0]), 3.0)
        assert classify(m, np.array([1.0, 1.0])) == NORMAL


class TestSolveLocal:
    def test_matches_grid_oracle_on_spec_instance(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        cfg = LossConfig(nu=0.95, n=3)
        m = solve_local(X, cfg, (), tol=1e-6)
        obj = primal_objective(m, X, cfg)
        assert abs(obj - grid_search_2d(X, 0.95)) <= 1e-3

    def test_matches_grid_oracle_with_prox(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            n = int(rng.integers(3, 9))
            X = rng.uniform(-1, 1, size=(n, 2))
            prox_spec = [(rng.uniform(-0.5, 0.5, 2), float(rng.uniform(0.5, 2.0)))]
            cfg = LossConfig(nu=0.5, n=n)
            m = solve_local(X, cfg, [ProxTerm(t, r) for t, r in prox_spec], tol=1e-6)
            got = ocsvm_objective(m.w, m.b, X, 0.5, prox_spec)
            want = grid_search_2d(X, 0.5, prox_spec)
            assert got <= want + 1e-3

    def test_huge_prox_pins_weight_to_target(self):
        target = np.array([0.7, -0.3])
        with pytest.warns(DegenerateDataWarning):
            m = solve_local(
                np.zeros((1, 2)), LossConfig(nu=1.0, n=1),
                [ProxTerm(target, 1e6)], tol=1e-6,
            )
        assert np.abs(m.w - target).max() <= 1e-3

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, size=(15, 4))
        cfg = LossConfig(nu=0.9, n=15)
        prox = [ProxTerm(np.array([0.1, 0.0, -0.1, 0.2]), 1.5)]
        m1 = solve_local(X, cfg, prox, tol=1e-8)
        m2 = solve_local(X, cfg, prox, tol=1e-8)
        assert np.array_equal(m1.w, m2.w) and m1.b == m2.b

    def test_rejects_bad_tol(self):
        with pytest.raises(InvalidInputError):
            solve_local(np.ones((2, 2)), LossConfig(nu=0.5, n=2), (), tol=0.0)

    def test_first_order_conditions(self):
        rng = np.random.default_rng(11)
        tol = 1e-6
        for trial in range(40):
            n = int(rng.integers(2, 11))
            d = int(rng.integers(2, 5))
            X = rng.uniform(-1, 1, size=(n, d))
            nu = float(rng.uniform(0.3, 1.0))
            prox_spec = (
                [(rng.uniform(-0.5, 0.5, d), float(rng.uniform(0.5, 2.0)))]
                if trial % 2 else []
            )
            m = solve_local(
                X, LossConfig(nu=nu, n=n),
                [ProxTerm(t, r) for t, r in prox_spec], tol=tol,
            )
            worst = one_sided_derivatives(m.w, m.b, X, nu, prox_spec)
            assert worst >= -10.0 * tol, f"trial {trial}: derivative {worst}"


class TestFitStandalone:
    def test_equals_solve_local_without_prox(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(-1, 1, size=(10, 3))
        cfg = LossConfig(nu=0.7, n=10)
        a = fit_standalone(X, cfg, tol=1e-8)
        b = solve_local(X, cfg, (), tol=1e-8)
        assert np.array_equal(a.w, b.w) and a.b == b.b

    def test_identical_points_sit_on_boundary(self):
        x0 = np.array([0.4, -0.2])
        X = np.tile(x0, (6, 1))
        with pytest.warns(DegenerateDataWarning):
            m = fit_standalone(X, LossConfig(nu=0.8, n=6), tol=1e-9)
        # every (identical) point lies on the learned boundary
        assert decision_score(m, x0) == pytest.approx(0.0, abs=1e-9)

    def test_all_zero_windows_warn_and_stay_finite(self):
        X = np.zeros((5, 4))
        with pytest.warns(DegenerateDataWarning):
            m = fit_standalone(X, LossConfig(nu=0.5, n=5), tol=1e-6)
        assert np.all(np.isfinite(m.w)) and np.isfinite(m.b)


class TestNuProperty:
    def test_outlier_fraction_bound(self):
        rng = np.random.default_rng(17)
        for _ in range(60):
            n = int(rng.integers(3, 40))
            d = int(rng.integers(2, 5))
            X = rng.normal(0.0, 0.4, size=(n, d))
            nu = float(rng.uniform(0.1, 1.0))
            m = fit_standalone(X, LossConfig(nu=nu, n=n), tol=1e-6)
            frac = float(np.mean(X @ m.w - m.b < 0.0))
            assert frac <= nu + 1.0 / n


class TestConvexityOracle:
    def test_output_beats_every_grid_point(self):
        rng = np.random.default_rng(23)
        for trial in range(8):
            n = int(rng.integers(2, 8))
            X = rng.uniform(-1, 1, size=(n, 2))
            nu = 0.5 if trial % 2 else 0.95
            cfg = LossConfig(nu=nu, n=n)
            m = fit_standalone(X, cfg, tol=1e-6)
            got = primal_objective(m, X, cfg)
            assert got <= grid_search_2d(X, nu) + 1e-6


class TestBoundedness:
    def test_solver_never_returns_non_finite(self):
        rng = np.random.default_rng(29)
        for _ in range(30):
            n = int(rng.integers(1, 25))
            d = int(rng.integers(1, 6))
            X = rng.uniform(-1, 1, size=(n, d))
            nu = float(rng.uniform(0.05, 0.999))
            m = fit_standalone(X, LossConfig(nu=nu, n=n), tol=1e-6)
            assert np.all(np.isfinite(m.w)) and np.isfinite(m.b)


class TestOptimalBias:
    def test_is_exact_minimiser_over_candidates(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            scores = rng.normal(size=n)
            nu = float(rng.uniform(0.05, 1.0))
            b = optimal_bias(scores, nu)
            C = 1.0 / (nu * n)

            def part(bb):
                return C * np.maximum(0.0, bb - scores).sum() - bb

            # the minimum of the convex piecewise-linear part lies on a kink
            best = min(part(s) for s in scores)
            assert part(b) <= best + 1e-12


class TestValidation:
    def test_loss_config_bounds(self):
        with pytest.raises(InvalidInputError):
            LossConfig(nu=0.0, n=5)
        with pytest.raises(InvalidInputError):
            LossConfig(nu=1.2, n=5)
        with pytest.raises(InvalidInputError):
            LossConfig(nu=0.5, n=0)

    def test_model_params_must_be_finite(self):
        with pytest.raises(InvalidInputError):
            ModelParams(np.array([np.nan, 1.0]), 0.0)
        with pytest.raises(InvalidInputError):
            ModelParams(np.array([1.0]), float("inf"))

    def test_prox_term_requires_positive_rho(self):
        with pytest.raises(InvalidInputError):
            ProxTerm(np.zeros(2), 0.0)

    def test_model_params_immutable(self):
        m = ModelParams(np.array([1.0, 2.0]), 0.5)
        with pytest.raises(ValueError):
            m.w[0] = 9.0
