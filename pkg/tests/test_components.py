import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pspinn.components import (
    DELTA,
    EFD,
    OMEGA,
    PM,
    PSV,
    RF,
    SM_STATE_NAMES,
    VR,
    LimitedResidual,
    LinearModel,
    SmParams,
    SynchronousMachine,
    algebraic_outputs,
    apply_limits,
    eval_rhs,
    linear_test_rhs,
    load_params,
    parse_params_text,
    rhs_vjp,
    saturation,
    solve_network,
)
from pspinn.errors import DimensionMismatch, InvalidParams, NonFiniteState, SingularNetworkMatrix

finite = st.floats(-3.0, 3.0, allow_nan=False)
states = st.lists(finite, min_size=9, max_size=9).map(np.array)


def _scalar_currents(delta, p):
    # Cramer's rule on [[a, -b], [c, a]] [i_d, i_q] = [V sin, V cos], written out by hand
    a = p.R_s + p.R_e
    b = p.X_q + p.X_ep
    c = p.X_d_prime + p.X_ep
    r1 = p.V_s * math.sin(delta - p.theta_vs)
    r2 = p.V_s * math.cos(delta - p.theta_vs)
    det = a * a + b * c
    return (r1 * a + b * r2) / det, (a * r2 - c * r1) / det


class TestParams:
    def test_bundled_file_matches_defaults(self, params):
        assert params == SmParams()

    def test_bundled_values(self, params):
        assert params.H == 5.06
        assert params.X_d_prime == 0.232
        assert params.V_R_max == 8.0
        assert params.Omega_B == 314.159

    def test_parse_comments_and_blanks(self):
        values = parse_params_text("# header\n\nH = 3.0  # inertia\nD=1\n")
        assert values == {"H": "3.0", "D": "1"}

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidParams, match="unknown"):
            SmParams.from_mapping({"X_zz": 1.0})

    def test_duplicate_key_rejected(self):
        with pytest.raises(InvalidParams, match="duplicate"):
            parse_params_text("H = 1\nH = 2\n")

    @pytest.mark.parametrize("field", ["H", "T_A", "T_SV", "T_d0_prime"])
    def test_non_positive_time_constant(self, field):
        with pytest.raises(InvalidParams):
            SmParams(**{field: 0.0})

    def test_inverted_regulator_limits(self):
        with pytest.raises(InvalidParams):
            SmParams(V_R_min=9.0)

    def test_round_trip_text(self, tmp_path):
        p = SmParams(H=4.0, vq_sign_convention="standard")
        path = tmp_path / "p.txt"
        path.write_text(p.to_text())
        assert load_params(path) == p


class TestNetwork:
    def test_delta_zero(self, params):
        i_d, i_q = solve_network(0.0, params)
        assert i_d == pytest.approx(1 / 0.332, abs=1e-12)
        assert i_d == pytest.approx(3.01205, abs=1e-5)
        assert abs(i_q) < 1e-15

    def test_delta_half_pi(self, params):
        i_d, i_q = solve_network(math.pi / 2, params)
        assert i_q == pytest.approx(-1 / 1.32, abs=1e-12)
        assert i_q == pytest.approx(-0.75758, abs=1e-5)
        assert abs(i_d) < 1e-12

    def test_zero_bus_voltage(self, params):
        i_d, i_q = solve_network(0.3, params.replace(V_s=0.0, theta_vs=0.3))
        assert i_d == 0.0 and i_q == 0.0

    def test_singular_matrix(self, params):
        # b * c = 0 with a = 0 makes the determinant vanish
        with pytest.raises(SingularNetworkMatrix):
            solve_network(0.1, params.replace(X_ep=-params.X_q))

    @given(st.floats(-10, 10), st.floats(0.0, 0.2), st.floats(0.0, 0.2))
    def test_residual(self, delta, r_s, r_e):
        p = SmParams(R_s=r_s, R_e=r_e)
        i_d, i_q = solve_network(delta, p)
        a, b, c = r_s + r_e, p.X_q + p.X_ep, p.X_d_prime + p.X_ep
        assert abs(a * i_d - b * i_q - math.sin(delta)) <= 1e-12
        assert abs(c * i_d + a * i_q - math.cos(delta)) <= 1e-12

    @given(st.floats(-6, 6), st.floats(0.0, 0.1))
    def test_matches_scalar_oracle(self, delta, r_e):
        p = SmParams(R_e=r_e, theta_vs=0.2, V_s=1.05)
        expect = _scalar_currents(delta, p)
        got = solve_network(delta, p)
        assert np.allclose(got, expect, rtol=1e-13, atol=1e-13)


class TestAlgebraic:
    def test_saturation_reference(self, params):
        assert saturation(1.08, params) == pytest.approx(0.098 * math.exp(0.55 * 1.08), rel=1e-15)
        assert saturation(1.08, params) == pytest.approx(0.177496, abs=1e-5)

    def test_saturation_zero(self, params):
        assert saturation(0.0, params) == 0.098

    def test_terminal_voltage_delta_zero(self, params):
        i_d, i_q = solve_network(0.0, params)
        out = algebraic_outputs(0.0, 1.08, i_d, i_q, params)
        assert abs(out.v_d) < 1e-15
        assert out.v_q == pytest.approx(1 - 0.1 / 0.332, abs=1e-12)
        assert out.v_q == pytest.approx(0.69880, abs=1e-5)
        assert out.v_t == pytest.approx(0.69880, abs=1e-5)

    def test_standard_sign_convention(self, params):
        p = params.replace(vq_sign_convention="standard")
        i_d, i_q = solve_network(0.0, p)
        out = algebraic_outputs(0.0, 1.08, i_d, i_q, p)
        assert out.v_q == pytest.approx(1 + 0.1 / 0.332, abs=1e-12)

    @given(st.floats(-5, 5), st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5))
    def test_terminal_voltage_is_norm(self, delta, e_fd, i_d, i_q):
        out = algebraic_outputs(delta, e_fd, i_d, i_q, SmParams(R_e=0.05))
        assert out.v_t >= 0
        assert out.v_t == pytest.approx(math.hypot(out.v_d, out.v_q), rel=1e-14, abs=1e-15)


class TestRhs:
    def test_rate_feedback(self, params, nominal_state):
        f = eval_rhs(0.0, nominal_state, params)
        expect = (1 / 0.35) * (-1 + (0.063 / 0.35) * 1.08)
        assert f[RF] == pytest.approx(expect, rel=1e-14)
        assert f[RF] == pytest.approx(-2.30171, abs=1e-5)

    def test_zero_speed_gives_zero_angle_rate(self, params, nominal_state):
        assert eval_rhs(0.0, nominal_state, params)[DELTA] == 0.0

    def test_turbine_equilibrium(self, params, nominal_state):
        assert eval_rhs(0.0, nominal_state, params)[PM] == 0.0

    def test_full_vector_against_scalar_oracle(self, params):
        x = [0.7, 0.3, 1.02, 0.05, 1.3, 0.9, 2.0, 0.6, 0.65]
        p = params
        i_d, i_q = _scalar_currents(x[0], p)
        v_d = -p.X_ep * i_q + math.sin(x[0])
        v_q = -p.X_ep * i_d + math.cos(x[0])
        v_t = math.hypot(v_d, v_q)
        s_e = 0.098 * math.exp(0.55 * x[4])
        expect = [
            x[1],
            p.Omega_B / (2 * p.H) * (x[7] - x[3] * i_d - x[2] * i_q - (p.X_q_prime - p.X_d_prime) * i_d * i_q - p.D * x[1]),
            (-x[2] - (p.X_d - p.X_d_prime) * i_d + x[4]) / p.T_d0_prime,
            (-x[3] + (p.X_q - p.X_q_prime) * i_q) / p.T_q0_prime,
            (-(p.K_E + s_e) * x[4] + x[6]) / p.T_E,
            (-x[5] + p.K_F / p.T_F * x[4]) / p.T_F,
            (p.K_A * x[5] - p.K_A * p.K_F / p.T_F * x[4] + p.K_A * (p.V_ref - v_t) - x[6]) / p.T_A,
            (-x[7] + x[8]) / p.T_CH,
            (-x[8] + p.P_c - (1 / p.R_D) * (x[1] / p.Omega_B)) / p.T_SV,
        ]
        assert np.allclose(eval_rhs(0.0, np.array(x), p), expect, rtol=1e-13, atol=1e-13)

    def test_batched_equals_rowwise(self, params, rng):
        x = rng.uniform(-1, 1, size=(7, 9)) + np.array([0, 0, 1, 0, 1, 1, 2, 0.7, 0.7])
        batched = eval_rhs(0.0, x, params)
        for row, out in zip(x, batched):
            assert np.array_equal(eval_rhs(0.0, row, params), out)

    def test_non_finite_state(self, params, nominal_state):
        nominal_state[3] = np.nan
        with pytest.raises(NonFiniteState):
            eval_rhs(0.0, nominal_state, params)

    def test_wrong_dimension(self, params):
        with pytest.raises(DimensionMismatch):
            eval_rhs(0.0, np.zeros(8), params)

    @given(states)
    def test_angle_rate_equals_speed(self, x):
        assert eval_rhs(0.0, x, SmParams())[DELTA] == x[OMEGA]

    @given(states)
    def test_deterministic(self, x):
        assert np.array_equal(eval_rhs(0.0, x, SmParams()), eval_rhs(0.0, x, SmParams()))

    @pytest.mark.parametrize("idx", [2, 3, 5, 6, 7, 8])
    @given(x=states)
    def test_linear_channels_are_affine(self, idx, x):
        # second differences in the channel's own variable vanish
        h = 0.37
        f = [eval_rhs(0.0, np.where(np.arange(9) == idx, x[idx] + k * h, x), SmParams())[idx] for k in (-1, 0, 1)]
        assert abs(f[0] - 2 * f[1] + f[2]) <= 1e-8

    @given(states, st.lists(finite, min_size=9, max_size=9).map(np.array))
    def test_vjp_matches_finite_differences(self, x, g):
        p = SmParams(R_e=0.03, theta_vs=0.1)
        got = rhs_vjp(0.0, x, g, p)
        eps = 1e-6
        fd = np.empty(9)
        for j in range(9):
            e = np.zeros(9)
            e[j] = eps
            fd[j] = g @ (eval_rhs(0.0, x + e, p) - eval_rhs(0.0, x - e, p)) / (2 * eps)
        assert np.allclose(got, fd, rtol=1e-6, atol=1e-6)


class TestLimits:
    def test_clamp_and_zero_outward(self, params, nominal_state):
        x = nominal_state.copy()
        x[VR] = 9.0
        d = np.zeros(9)
        d[VR] = 2.0
        xc, dc = apply_limits(x, d, params)
        assert xc[VR] == 8.0 and dc[VR] == 0.0

    def test_interior_unchanged(self, params, nominal_state):
        x = nominal_state.copy()
        x[PSV] = 0.5
        d = np.arange(9.0) - 4
        xc, dc = apply_limits(x, d, params)
        assert np.array_equal(xc, x) and np.array_equal(dc, d)

    def test_inward_derivative_kept(self, params, nominal_state):
        x = nominal_state.copy()
        x[VR] = 8.0
        d = np.zeros(9)
        d[VR] = -1.0
        assert apply_limits(x, d, params)[1][VR] == -1.0

    def test_lower_servo_bound(self, params, nominal_state):
        x = nominal_state.copy()
        x[PSV] = -0.2
        d = np.full(9, -1.0)
        xc, dc = apply_limits(x, d, params)
        assert xc[PSV] == 0.0 and dc[PSV] == 0.0
        assert dc[PM] == -1.0

    @given(states, st.lists(st.floats(-50, 50), min_size=9, max_size=9).map(np.array))
    def test_idempotent(self, x, d):
        p = SmParams()
        once = apply_limits(x * 4, d, p)
        twice = apply_limits(*once, p)
        assert np.array_equal(once[0], twice[0]) and np.array_equal(once[1], twice[1])

    def test_limited_rhs_respects_bound(self, machine, nominal_state):
        x = nominal_state.copy()
        x[VR] = 8.0
        x[EFD] = 0.1  # drives V_R upward
        assert machine.rhs(0.0, x)[VR] > 0
        assert machine.limited_rhs(0.0, x)[VR] == 0.0


class TestLimitedResidual:
    def test_rhs_is_limited_rhs(self, machine, nominal_state):
        x = np.tile(nominal_state, (3, 1))
        x[0, VR], x[1, VR], x[2, PSV] = 8.3, 0.5, 1.2
        x[0, EFD] = 0.1
        wrapped = LimitedResidual(machine)
        assert np.array_equal(wrapped.rhs(0.0, x), machine.limited_rhs(0.0, x))
        assert wrapped.rhs(0.0, x)[0, VR] == 0.0

    def test_vjp_matches_finite_differences(self, machine, nominal_state, rng):
        # rows inside, above and below the regulator range, away from the kinks
        x = np.tile(nominal_state, (4, 1)) + rng.normal(scale=0.05, size=(4, 9))
        x[0, VR], x[1, VR], x[2, VR], x[3, PSV] = 8.4, 0.6, 4.0, 1.1
        x[0, EFD] = 0.1
        wrapped = LimitedResidual(machine)
        c = rng.normal(size=x.shape)
        g = wrapped.rhs_vjp(0.0, x, c)
        h = 1e-6
        fd = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(9):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += h
                xm[i, j] -= h
                fd[i, j] = np.sum(c * (wrapped.rhs(0.0, xp) - wrapped.rhs(0.0, xm))) / (2 * h)
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-6)
        assert g[0, VR] == 0.0 and g[1, VR] == 0.0

    def test_unlimited_component_unchanged(self, rng):
        lin = LinearModel([[0.0, 1.0], [-1.0, 0.0]])
        wrapped = LimitedResidual(lin)
        x, c = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        assert np.array_equal(wrapped.rhs(0.0, x), lin.rhs(0.0, x))
        assert np.array_equal(wrapped.rhs_vjp(0.0, x, c), lin.rhs_vjp(0.0, x, c))


class TestLinearModel:
    def test_scalar_decay(self):
        assert np.array_equal(linear_test_rhs(0.0, np.array([1.0]), [[-1.0]]), [-1.0])

    def test_zero_matrix(self):
        assert np.array_equal(linear_test_rhs(0.0, np.ones(3), np.zeros((3, 3))), np.zeros(3))

    def test_oscillator(self):
        assert np.array_equal(linear_test_rhs(0.0, np.array([1.0, 0.0]), [[0, 1], [-1, 0]]), [0.0, -1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            linear_test_rhs(0.0, np.ones(3), np.eye(2))

    def test_model_vjp(self, rng):
        A = rng.normal(size=(3, 3))
        m = LinearModel(A)
        g = rng.normal(size=3)
        assert np.allclose(m.rhs_vjp(0.0, np.ones(3), g), A.T @ g)

    def test_machine_metadata(self, machine):
        assert machine.state_dim == 9
        assert machine.state_names == SM_STATE_NAMES
        assert machine.limits == {VR: (0.8, 8.0), PSV: (0.0, 1.0)}
