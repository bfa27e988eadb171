import jax.numpy as jnp
import numpy as np
import pytest

from lfraug import ConfigError
from lfraug.bench import Dataset, MsdParams, msd_baseline, msd_generate
from lfraug.model import BaselineModel, LfrDims, Normalizer, fit_normalizer, simulate
from lfraug.param import init_fp_equivalent
from lfraug.train import (
    TrainConfig,
    adam_minimize,
    baseline_cost,
    build_objective,
    estimate_x0_test,
    fit,
    group_w_indices,
    lbfgs_b_minimize,
    loss_simulation,
    make_split_problem,
    metrics,
    reg_ann,
    reg_baseline,
    reg_group_lasso,
    reg_lfr_l1,
    reg_x0,
    rho_lfr_rule_of_thumb,
)
from test_model import lti_baseline, small_dims


class TestRegularizers:
    def test_reg_ann(self):
        assert reg_ann(np.zeros(4), 1.0, 1.0) == 0.0
        assert reg_ann(np.array([1.0, -2.0]), 2.0, 1.0) == pytest.approx(8.0)
        assert reg_ann(np.array([1.0, -2.0]), 0.0, 0.0) == 0.0

    def test_reg_x0(self):
        assert reg_x0(np.zeros(3), 2.0) == 0.0
        assert reg_x0(np.array([3.0, 4.0]), 2.0) == pytest.approx(25.0)
        assert reg_x0(np.array([3.0, 4.0]), 0.0) == 0.0

    def test_reg_baseline(self):
        assert reg_baseline([2.0], [2.0], 2.0) == 0.0
        assert reg_baseline([3.0], [2.0], 2.0) == pytest.approx(0.25)
        with pytest.raises(ConfigError):
            reg_baseline([1.0], [0.0], 1.0)

    def test_reg_lfr_l1(self):
        w = np.zeros((2, 3))
        w[0, 0], w[1, 2] = 1.0, -2.0
        assert reg_lfr_l1(w, np.ones(6), 0.5) == pytest.approx(1.5)
        assert reg_lfr_l1(w, np.zeros(6), 0.5) == 0.0

    def test_rho_rule_of_thumb(self):
        assert rho_lfr_rule_of_thumb(1e-3, 10.0) == pytest.approx(0.01)

    def test_reg_group_lasso(self):
        assert reg_group_lasso(np.zeros(3), 2.0) == 0.0
        assert reg_group_lasso([5.0], 2.0) == pytest.approx(10.0)  # ||(3,4)|| = 5
        assert reg_group_lasso([1.0, 2.0], 0.0) == 0.0


class TestMetrics:
    def test_perfect_fit(self):
        y = np.arange(10.0)[:, None]
        m = metrics(y, y)
        assert m["rmse"] == 0.0
        assert m["nrmse_percent"] == 0.0
        assert m["bfr_percent"] == 100.0

    def test_mean_predictor_has_zero_bfr(self):
        y = np.array([1.0, 2.0, 3.0])[:, None]
        m = metrics(y, np.full_like(y, 2.0))
        assert m["bfr_percent"] == 0.0
        assert m["nrmse_percent"] == pytest.approx(100.0)

    def test_hand_arithmetic(self):
        y = np.array([1.0, 2.0, 3.0])
        y_hat = np.array([1.0, 2.0, 4.0])
        assert metrics(y, y_hat)["rmse"] == pytest.approx(np.sqrt(1.0 / 3.0))

    def test_skip(self):
        y = np.array([100.0, 1.0, 2.0, 3.0])
        y_hat = np.array([0.0, 1.0, 2.0, 3.0])
        assert metrics(y, y_hat, skip=1)["rmse"] == 0.0


class TestLossSimulation:
    def test_exact_model_is_zero(self):
        data = msd_generate(MsdParams(f_c=0.0, c_v=0.0), 200, seed=1)
        bl = msd_baseline(MsdParams())
        dims = LfrDims(2, 0, 1, 1, 1, 1)
        norm = fit_normalizer(data, bl)
        m = init_fp_equivalent(dims, bl, norm, "free", seed=0)
        # frictionless generator == baseline: FP-equivalent init is exact
        assert loss_simulation(m, data, np.zeros(2)) < 1e-20

    def test_two_sample_arithmetic(self):
        def f(x, u, th):
            return 0.5 * x

        def h(x, u, th):
            return jnp.stack([x[0], 2.0 * x[0]])

        bl = BaselineModel("two-out", f, h, np.ones(1), np.ones(1), 0.5, np.sqrt(5.0),
                           (np.array([-2.0]), np.array([2.0])),
                           (np.array([-1.0]), np.array([1.0])), 1, 1, 2)
        dims = LfrDims(n_xb=1, n_xa=0, n_u=1, n_y=2, n_za=0, n_wa=0)
        m = init_fp_equivalent(dims, bl, Normalizer.identity(1, 2, 1), "free", seed=0,
                               coupling_scale=0.0)
        u = np.zeros((2, 1))
        y_model, _, _ = simulate(np.zeros(1), u, m)
        y_data = y_model + np.array([[1.0, 0.0], [0.0, 2.0]])
        data = Dataset(u=u, y=y_data, ts=1.0)
        assert loss_simulation(m, data, np.zeros(1)) == pytest.approx(2.5)


class TestAdam:
    def test_quadratic(self):
        res = adam_minimize(lambda v: (v[0] - 3.0) ** 2, np.zeros(1), 500, 0.1)
        assert abs(res.x[0] - 3.0) < 1e-3

    def test_zero_epochs_identity(self):
        x0 = np.array([1.0, -2.0])
        res = adam_minimize(lambda v: jnp.sum(v**2), x0, 0, 0.1)
        np.testing.assert_array_equal(res.x, x0)

    def test_rosenbrock(self):
        def rosen(v):
            return (1.0 - v[0]) ** 2 + 100.0 * (v[1] - v[0] ** 2) ** 2

        res = adam_minimize(rosen, np.array([-0.5, 0.5]), 5000, 0.02)
        assert res.value < 1e-2

    def test_nonfinite_abort_after_ten(self):
        res = adam_minimize(lambda v: jnp.log(v[0]), np.array([-1.0]), 100, 0.1)
        assert res.status == "aborted"
        assert res.rejections == 10


class TestLbfgsB:
    def test_unconstrained_quadratic(self):
        target = np.arange(1.0, 6.0)
        res = lbfgs_b_minimize(lambda v: jnp.sum((v - target) ** 2), np.zeros(5),
                               epochs=50)
        assert np.linalg.norm(res.x - target) < 1e-8
        assert res.n_iters <= 50

    def test_monotone_trace(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((8, 8))
        q = a @ a.T + np.eye(8)
        b = rng.standard_normal(8)
        res = lbfgs_b_minimize(lambda v: 0.5 * v @ (jnp.asarray(q) @ v) - b @ v,
                               np.zeros(8), epochs=100)
        assert all(res.trace[i + 1] <= res.trace[i] + 1e-12
                   for i in range(len(res.trace) - 1))

    def test_bound_active_exactly(self):
        # min (x+2)^2 s.t. x >= 0 -> x* = 0 exactly
        res = lbfgs_b_minimize(lambda v: (v[0] + 2.0) ** 2, np.array([1.0]),
                               lower_bounds=np.zeros(1), epochs=50)
        assert res.x[0] == 0.0


class TestSplitting:
    def _problem(self):
        rng = np.random.default_rng(14)
        q = rng.standard_normal((6, 6))
        q = q @ q.T + np.eye(6)
        b = rng.standard_normal(6)
        smooth = lambda v: 0.5 * v @ (jnp.asarray(q) @ v) - jnp.asarray(b) @ v
        split_idx = np.array([1, 3, 4])
        weights = np.array([0.5, 1.0, 2.0])
        return smooth, split_idx, weights

    def test_reconstruction_reproduces_unsplit_value(self):
        smooth, split_idx, weights = self._problem()
        problem = make_split_problem(smooth, 6, split_idx, weights)
        rng = np.random.default_rng(3)
        for _ in range(20):
            theta = rng.standard_normal(6)
            zeta = problem.encode(theta)
            np.testing.assert_allclose(problem.decode(zeta), theta, atol=1e-15)
            unsplit = float(smooth(jnp.asarray(theta))) + float(
                weights @ np.abs(theta[split_idx])
            )
            assert float(problem.objective(jnp.asarray(zeta))) == pytest.approx(
                unsplit, abs=1e-12
            )

    def test_lasso_exact_zero(self):
        # min (th - 1)^2 + lam |th|: soft threshold solutions
        for lam, expect in ((1.0, 0.5), (3.0, 0.0)):
            problem = make_split_problem(lambda v: (v[0] - 1.0) ** 2, 1,
                                         np.array([0]), np.array([lam]))
            res = lbfgs_b_minimize(problem.objective, problem.encode(np.array([0.3])),
                                   lower_bounds=problem.lower_bounds, epochs=200)
            theta = problem.decode(res.x)
            assert theta[0] == pytest.approx(expect, abs=1e-12)
            if expect == 0.0:
                assert theta[0] == 0.0


class TestGroupIndices:
    def test_xa_group_is_row_and_column(self):
        dims = LfrDims(n_xb=2, n_xa=2, n_u=1, n_y=1, n_za=2, n_wa=2)
        n_cols = dims.n_x + dims.n_u + dims.n_w
        groups = group_w_indices(dims, "xa")
        assert len(groups) == 2
        row, col = 2, 2  # first augmentation state
        expected = set(np.arange(n_cols) + row * n_cols)
        n_rows = dims.n_x + dims.n_y + dims.n_z
        expected |= set(np.arange(n_rows) * n_cols + col)
        assert set(groups[0]) == expected

    def test_za_group_is_full_row(self):
        dims = LfrDims(n_xb=1, n_xa=0, n_u=1, n_y=1, n_za=2, n_wa=1)
        groups = group_w_indices(dims, "za")
        n_cols = dims.n_x + dims.n_u + dims.n_w
        r = dims.n_x + dims.n_y + dims.n_zb  # first z_a row
        assert set(groups[0]) == set(np.arange(n_cols) + r * n_cols)

    def test_wa_group_is_full_column(self):
        dims = LfrDims(n_xb=1, n_xa=0, n_u=1, n_y=1, n_za=1, n_wa=2)
        groups = group_w_indices(dims, "wa")
        n_rows = dims.n_x + dims.n_y + dims.n_z
        n_cols = dims.n_x + dims.n_u + dims.n_w
        c = dims.n_x + dims.n_u + dims.n_wb
        assert set(groups[0]) == set(np.arange(n_rows) * n_cols + c)

    def test_constrained_mode_raises(self):
        data = msd_generate(MsdParams(), 50, seed=0)
        bl = msd_baseline(MsdParams())
        dims = LfrDims(2, 0, 1, 1, 1, 1)
        norm = fit_normalizer(data, bl)
        m = init_fp_equivalent(dims, bl, norm, "well_posed", seed=0)
        cfg = TrainConfig(param_mode="well_posed", rho_wa=0.1, adam_epochs=1,
                          lbfgs_epochs=1)
        with pytest.raises(ConfigError):
            build_objective(m, data, cfg)
        m2 = init_fp_equivalent(dims, bl, norm, "contracting", seed=0, preopt_steps=5)
        cfg2 = TrainConfig(param_mode="contracting", rho_xa=0.1, adam_epochs=1,
                           lbfgs_epochs=1)
        with pytest.raises(ConfigError):
            build_objective(m2, data, cfg2)


class TestObjective:
    def test_zero_weights_equal_simulation_loss(self):
        data = msd_generate(MsdParams(), 100, seed=2)
        bl = msd_baseline(MsdParams())
        dims = LfrDims(2, 0, 1, 1, 1, 1)
        norm = fit_normalizer(data, bl)
        m = init_fp_equivalent(dims, bl, norm, "well_posed", seed=0,
                               l_mode="paper")
        cfg = TrainConfig(rho_a_l2=0, rho_a_l1=0, rho_x0=0, rho_b=0, rho_l=0,
                          rho_lfr=0, param_mode="well_posed")
        obj = build_objective(m, data, cfg)
        flat = np.zeros(obj.layout.size)
        flat[: m.layout().size] = m.flat_params()
        assert obj.split_idx.size == 0
        assert float(obj.smooth_loss(flat)) == pytest.approx(
            float(obj.sim_loss(flat)), abs=1e-15
        )
        # and the simulation loss agrees with the public eager evaluation
        assert float(obj.sim_loss(flat)) == pytest.approx(
            loss_simulation(m, data, np.zeros(2)), rel=1e-9
        )


class TestEstimateX0:
    def test_identity_output_recovers_first_sample(self):
        bl = lti_baseline()  # h = x: identity output
        m = init_fp_equivalent(small_dims(), bl, Normalizer.identity(1, 1, 1),
                               "free", seed=0, coupling_scale=0.0)
        rng = np.random.default_rng(4)
        u = rng.uniform(-1, 1, (30, 1))
        x0_true = np.array([0.73])
        y, _, _ = simulate(x0_true, u, m)
        data = Dataset(u=u, y=y, ts=1.0)
        x0_est = estimate_x0_test(m, data, n_init=10)
        np.testing.assert_allclose(x0_est, x0_true, atol=1e-9)

    def test_observable_two_state_recovery(self):
        bl = msd_baseline(MsdParams())  # y = x1 only; observable pair
        data0 = msd_generate(MsdParams(f_c=0.0, c_v=0.0), 60, seed=5)
        dims = LfrDims(2, 0, 1, 1, 1, 1)
        norm = fit_normalizer(data0, bl)
        m = init_fp_equivalent(dims, bl, norm, "free", seed=0, coupling_scale=0.0)
        x0_true_phys = np.array([0.02, -0.5])
        x0_scaled = np.zeros(2)
        x0_scaled[:2] = norm.scale_state(x0_true_phys)
        y, _, _ = simulate(x0_scaled, data0.u, m)
        data = Dataset(u=data0.u, y=y, ts=0.01)
        x0_est = estimate_x0_test(m, data, n_init=10, epochs=600)
        np.testing.assert_allclose(x0_est, x0_scaled, atol=1e-6)

    def test_full_window_equals_whole_trajectory_objective(self):
        bl = lti_baseline()
        m = init_fp_equivalent(small_dims(), bl, Normalizer.identity(1, 1, 1),
                               "free", seed=0, coupling_scale=0.0)
        rng = np.random.default_rng(6)
        u = rng.uniform(-1, 1, (15, 1))
        y, _, _ = simulate(np.array([0.4]), u, m)
        data = Dataset(u=u, y=y, ts=1.0)
        x0_full = estimate_x0_test(m, data, n_init=15)
        np.testing.assert_allclose(x0_full, [0.4], atol=1e-9)


class TestFit:
    def test_noiseless_baseline_data_stays_at_init(self):
        # generator without friction == baseline: init is already optimal, and
        # the Armijo rule keeps the quasi-Newton phase from degrading it
        data = msd_generate(MsdParams(f_c=0.0, c_v=0.0), 200, seed=7)
        bl = msd_baseline(MsdParams())
        dims = LfrDims(2, 0, 1, 1, 1, 1)
        cfg = TrainConfig(param_mode="well_posed", l_mode="paper", adam_epochs=0,
                          lbfgs_epochs=50, rho_b=0.0, rho_l=0.0, seed=0)
        init = init_fp_equivalent(dims, bl, fit_normalizer(data, bl), "well_posed",
                                  seed=0, l_mode="paper", eval_cfg=cfg.eval_cfg())
        res = fit(data, bl, dims, cfg, model=init)
        assert loss_simulation(res.model, data, res.x0) < 1e-10
        moved = max(
            np.max(np.abs(res.model.params[k] - init.params[k]))
            for k in init.params
            if init.params[k].size
        )
        assert moved < 1e-3
        assert res.certificates["wp_margin"] > 0.0

    def test_baseline_cost_matches_metrics(self):
        data = msd_generate(MsdParams(), 500, seed=8)
        bl = msd_baseline(MsdParams())
        norm = fit_normalizer(data, bl)
        v_base = baseline_cost(data, bl, norm)
        assert v_base > 0.01  # friction mismatch is visible
