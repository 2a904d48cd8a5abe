import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stelar.epi import SirConfig, sir_simulate
from stelar.sir_fit import (
    PARAM_NAMES,
    SirParams,
    build_template,
    extend_template,
    fit_sir_multistart,
    fit_sir_params,
    latent_trajectories,
    sensitivities,
    sir_gradients,
    sir_objective,
)

FD_STEP = 1e-6


def random_in_box(rng, K):
    """Parameters with beta * (s + i) <= 1 so every trajectory stays nonnegative."""
    s = rng.uniform(0.3, 1.0, K)
    i = rng.uniform(0.01, 0.3, K)
    beta = rng.uniform(0.05, 0.95, K) / (s + i)
    gamma = rng.uniform(0.02, 0.6, K)
    return SirParams(beta, gamma, s, i)


def fd_gradients(params, C, nu, h=FD_STEP):
    """Central differences of the summed objective, one coordinate at a time."""
    z = params.to_array()
    out = np.zeros_like(z)
    for p in range(4):
        for k in range(z.shape[1]):
            up, down = z.copy(), z.copy()
            up[p, k] += h
            down[p, k] -= h
            f_up = sir_objective(SirParams.from_array(up), C, nu)
            f_down = sir_objective(SirParams.from_array(down), C, nu)
            out[p, k] = (f_up - f_down) / (2 * h)
    return out


def fig1_params():
    return SirParams([0.4], [0.1], [0.95], [0.05])


class TestTemplate:
    def test_matches_simulator(self):
        tmpl = build_template(fig1_params(), 50)
        ref = sir_simulate(SirConfig(0.95, 0.05, 0.4, 0.1, 50)).new_infections
        np.testing.assert_allclose(tmpl[:, 0], ref, rtol=1e-14)

    def test_zero_infected_gives_zero(self):
        p = SirParams([0.4, 0.3], [0.1, 0.2], [0.9, 0.8], [0.0, 0.0])
        assert not build_template(p, 20).any()

    def test_zero_beta_column(self):
        p = SirParams([0.0, 0.3], [0.1, 0.2], [0.9, 0.8], [0.1, 0.1])
        tmpl = build_template(p, 20)
        assert not tmpl[:, 0].any() and tmpl[:, 1].all()

    def test_latent_shift(self):
        P, Q = latent_trajectories(fig1_params(), 5)
        assert P[0, 0] == 0.95 and Q[0, 0] == 0.05
        assert P[1, 0] == pytest.approx(0.931) and Q[1, 0] == pytest.approx(0.064)

    def test_extension_continues_template(self):
        p = random_in_box(np.random.default_rng(0), 3)
        np.testing.assert_array_equal(extend_template(p, 30, 10), build_template(p, 40)[30:])

    def test_rescaled_scales_curve(self):
        p = random_in_box(np.random.default_rng(1), 2)
        np.testing.assert_allclose(
            build_template(p.rescaled([3.0, 0.5]), 30), build_template(p, 30) * [3.0, 0.5],
            rtol=1e-12,
        )


class TestObjective:
    def test_exact_template_is_zero(self):
        p = random_in_box(np.random.default_rng(2), 3)
        assert sir_objective(p, build_template(p, 25), 1.0) == 0.0

    def test_unit_residuals(self):
        p = random_in_box(np.random.default_rng(3), 3)
        C = build_template(p, 25) + 1.0
        assert sir_objective(p, C, 1.0) == pytest.approx(25 * 3, rel=1e-12)

    def test_zero_weight(self):
        p = random_in_box(np.random.default_rng(4), 2)
        assert sir_objective(p, np.full((10, 2), 7.0), 0.0) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sir_objective(fig1_params(), np.zeros((10, 2)), 1.0)


class TestGradients:
    def test_initial_sensitivities(self):
        S, I, dS, dI = sensitivities(fig1_params(), 4)
        assert dS[2, 0, 0] == 1.0 and dI[3, 0, 0] == 1.0
        for p in (0, 1, 3):
            assert dS[p, 0, 0] == 0.0
        for p in (0, 1, 2):
            assert dI[p, 0, 0] == 0.0

    def test_zero_at_exact_fit(self):
        p = random_in_box(np.random.default_rng(5), 3)
        g = sir_gradients(p, build_template(p, 30), 1.0)
        for name in PARAM_NAMES:
            assert np.max(np.abs(g[name])) <= 1e-12

    def test_zero_weight(self):
        p = random_in_box(np.random.default_rng(6), 2)
        g = sir_gradients(p, np.ones((20, 2)), 0.0)
        assert all(not g[name].any() for name in PARAM_NAMES)

    @pytest.mark.parametrize("draw", range(20))
    def test_finite_difference_oracle(self, draw):
        rng = np.random.default_rng(1000 + draw)
        p = random_in_box(rng, 2)
        C = build_template(random_in_box(rng, 2), 20) + rng.uniform(0, 0.05, (20, 2))
        nu = rng.uniform(0.5, 2.0)
        g = sir_gradients(p, C, nu)
        fd = fd_gradients(p, C, nu)
        for row, name in enumerate(PARAM_NAMES):
            err = np.abs(g[name] - fd[row])
            assert np.all(err <= np.maximum(1e-4 * np.abs(fd[row]), 1e-8)), name


class TestFit:
    def test_exact_start_unchanged(self):
        p = random_in_box(np.random.default_rng(7), 3)
        out = fit_sir_params(p, build_template(p, 30), 1.0, 20)
        np.testing.assert_array_equal(out.to_array(), p.to_array())

    def test_zero_weight_unchanged(self):
        p = random_in_box(np.random.default_rng(8), 2)
        out = fit_sir_params(p, np.ones((15, 2)), 0.0, 10)
        np.testing.assert_array_equal(out.to_array(), p.to_array())

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            fit_sir_params(fig1_params(), np.zeros((5, 1)), 1.0, 0)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("direction", ["gauss_newton", "gradient"])
    def test_recovers_hidden_curve(self, seed, direction):
        C = build_template(fig1_params(), 60)
        rng = np.random.default_rng(seed)
        start = SirParams.from_array(fig1_params().to_array() * rng.uniform(0.9, 1.1, (4, 1)))
        before = sir_objective(start, C, 1.0)
        after = sir_objective(fit_sir_params(start, C, 1.0, 200, direction), C, 1.0)
        assert after <= 0.1 * before

    @pytest.mark.parametrize("direction", ["gauss_newton", "gradient"])
    def test_monotone_per_step(self, direction):
        rng = np.random.default_rng(9)
        C = build_template(random_in_box(rng, 3), 40) + rng.uniform(0, 0.02, (40, 3))
        p = random_in_box(rng, 3)
        values = [sir_objective(p, C, 1.0)]
        for _ in range(30):
            p = fit_sir_params(p, C, 1.0, 1, direction)
            values.append(sir_objective(p, C, 1.0))
        assert np.all(np.diff(values) <= 0)

    def test_columns_independent(self):
        rng = np.random.default_rng(10)
        p = random_in_box(rng, 3)
        C = build_template(random_in_box(rng, 3), 30)
        C2 = C.copy()
        C2[:, 1] *= 3.0
        a = fit_sir_params(p, C, 1.0, 15).to_array()
        b = fit_sir_params(p, C2, 1.0, 15).to_array()
        np.testing.assert_array_equal(a[:, [0, 2]], b[:, [0, 2]])
        assert not np.array_equal(a[:, 1], b[:, 1])

    def test_multistart_finds_late_peak(self):
        # onset far below the default start fraction peaks near the window end
        truth = SirParams([0.4], [0.1], [1.0 - 1e-6], [1e-6]).rescaled(500.0)
        C = build_template(truth, 60)
        fitted = fit_sir_multistart(C, 300)
        assert sir_objective(fitted, C, 1.0) <= 1e-4 * np.sum(C * C)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16), steps=st.integers(1, 8))
    def test_objective_never_increases(self, seed, steps):
        rng = np.random.default_rng(seed)
        p = random_in_box(rng, 2)
        C = rng.uniform(0, 0.2, (25, 2))
        out = fit_sir_params(p, C, 1.0, steps)
        assert sir_objective(out, C, 1.0) <= sir_objective(p, C, 1.0)
        assert np.all(out.to_array() >= 0)
