import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pspinn.errors import DimensionMismatch, FormatVersionMismatch, InvalidDims, NonFiniteInput
from pspinn.nn import (
    MlpModel,
    backward,
    config_hash,
    forward,
    forward_with_cache,
    init_mlp,
    load_model,
    n_params,
    normalization_bounds,
    normalize,
    save_model,
    time_derivative,
)
from pspinn.sampling import sm9_reference_domain


def small_net(seed=0, dims=(3, 5, 2)):
    low = np.array([-1.0, 0.5, 0.0])[: dims[0]]
    high = np.array([2.0, 1.5, 1.0])[: dims[0]]
    model = init_mlp(dims, seed, low, high)
    # nonzero biases so gradient checks exercise every parameter
    for b in model.biases:
        b[...] = np.random.default_rng(seed + 1).normal(scale=0.3, size=b.shape)
    return model


class TestInit:
    def test_reference_parameter_count(self):
        # input layer + three hidden-to-hidden layers + output layer
        expect = (10 * 64 + 64) + 3 * (64 * 64 + 64) + (64 * 9 + 9)
        assert expect == 13_769
        assert n_params([10, 64, 64, 64, 64, 9]) == expect

    def test_biases_zero(self):
        m = init_mlp([10, 64, 64, 9], seed=3)
        assert all(np.all(b == 0) for b in m.biases)

    def test_glorot_bounds(self):
        m = init_mlp([10, 64, 64, 9], seed=3)
        for W in m.weights:
            limit = np.sqrt(6.0 / sum(W.shape))
            assert np.all(np.abs(W) <= limit)
            assert np.abs(W).max() > 0.9 * limit

    def test_seed_determinism(self):
        assert np.array_equal(init_mlp([4, 8, 3], 5).params, init_mlp([4, 8, 3], 5).params)
        assert not np.array_equal(init_mlp([4, 8, 3], 5).params, init_mlp([4, 8, 3], 6).params)

    def test_views_share_memory(self):
        m = init_mlp([2, 3, 1])
        m.params[:] = 0
        assert np.all(m.weights[0] == 0)

    @pytest.mark.parametrize("dims", [[3], [3, 0, 2], []])
    def test_invalid_dims(self, dims):
        with pytest.raises(InvalidDims):
            init_mlp(dims)


class TestNormalization:
    def test_bounds_map_to_unit(self):
        d = sm9_reference_domain()
        low, high = normalization_bounds(d.bounds, 1.0)
        m = init_mlp([10, 4, 9], 0, low, high)
        free = np.append(~d.fixed, True)
        assert np.all(normalize(m, low)[free] == -1.0)
        assert np.all(normalize(m, high)[free] == 1.0)

    def test_fixed_inputs_zero(self):
        d = sm9_reference_domain()
        low, high = normalization_bounds(d.bounds, 1.0)
        m = init_mlp([10, 4, 9], 0, low, high)
        assert np.all(normalize(m, (low + high) / 2 + 0.3)[np.append(d.fixed, False)] == 0.0)

    def test_time_rate(self):
        m = init_mlp([2, 3, 1], 0, [0.0, 0.0], [1.0, 2.0])
        assert m.time_rate == 1.0 and m.time_scale == 1.0


class TestForward:
    def test_zero_network_gives_output_bias(self):
        m = init_mlp([3, 4, 2])
        m.params[:] = 0
        m.biases[-1][:] = [0.5, -2.0]
        assert np.array_equal(forward(m, np.ones(3)), [0.5, -2.0])
        assert np.array_equal(time_derivative(m, np.ones(3)), [0.0, 0.0])

    def test_batch_equals_single(self, rng):
        m = small_net()
        u = rng.uniform(0, 1, size=(17, 3))
        batched = forward(m, u)
        for row, out in zip(u, batched):
            assert np.allclose(forward(m, row), out, rtol=0, atol=1e-15)

    def test_untrained_net_misses_x0(self):
        m = init_mlp([10, 16, 9], 0)
        x0 = np.r_[np.full(9, 0.5), 0.0]
        assert not np.allclose(forward(m, x0), x0[:9])

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteInput):
            forward(small_net(), [0.0, np.nan, 1.0])

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            forward(small_net(), np.zeros(4))

    def test_linear_identity_net(self, rng):
        m = init_mlp([3, 2], 0, [0.0, 0.0, 0.0], [1.0, 1.0, 4.0], activation="identity")
        u = rng.uniform(size=(5, 3))
        assert np.allclose(time_derivative(m, u), m.weights[0][-1] / m.time_scale, rtol=0, atol=1e-15)

    @given(st.integers(0, 10_000))
    def test_time_derivative_finite_differences(self, seed):
        m = small_net(seed)
        u = np.random.default_rng(seed).uniform(0, 1, size=(4, 3))
        h = 1e-6
        up, dn = u.copy(), u.copy()
        up[:, -1] += h
        dn[:, -1] -= h
        fd = (forward(m, up) - forward(m, dn)) / (2 * h)
        assert np.max(np.abs(time_derivative(m, u) - fd)) < 1e-6


def _fd_grad(model, loss, h=1e-5):
    g = np.empty_like(model.params)
    base = model.params.copy()
    for k in range(len(base)):
        model.params[k] = base[k] + h
        fp = loss()
        model.params[k] = base[k] - h
        fm = loss()
        model.params[k] = base[k]
        g[k] = (fp - fm) / (2 * h)
    return g


class TestBackward:
    @pytest.mark.parametrize("use_y,use_ydot", [(True, False), (False, True), (True, True)])
    def test_gradient_check(self, rng, use_y, use_ydot):
        m = small_net(2)
        u = rng.uniform(0, 1, size=(6, 3))
        cy, cd = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))

        def loss():
            out = 0.0
            if use_y:
                out += np.sum(cy * forward(m, u))
            if use_ydot:
                out += np.sum(cd * time_derivative(m, u))
            return out

        _, _, cache = forward_with_cache(m, u, tangent=use_ydot)
        g = backward(m, cache, cy if use_y else None, cd if use_ydot else None)
        fd = _fd_grad(m, loss)
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-5

    def test_accumulates_into_out(self, rng):
        m = small_net()
        u = rng.uniform(size=(3, 3))
        _, _, cache = forward_with_cache(m, u, tangent=False)
        c = np.ones((3, 2))
        once = backward(m, cache, c)
        out = once.copy()
        backward(m, cache, c, out=out)
        assert np.allclose(out, 2 * once)


class TestPersistence:
    def test_round_trip(self, tmp_path, rng):
        m = small_net()
        m.provenance = {"config_sha256": "abc"}
        save_model(m, tmp_path / "m.pnnm")
        back = load_model(tmp_path / "m.pnnm")
        u = rng.uniform(size=(5, 3))
        assert np.array_equal(forward(back, u), forward(m, u))
        assert back.layer_dims == m.layer_dims and back.seed == m.seed
        assert back.provenance == {"config_sha256": "abc"}

    def test_dims_mismatch(self, tmp_path):
        save_model(small_net(), tmp_path / "m.pnnm")
        with pytest.raises(FormatVersionMismatch):
            load_model(tmp_path / "m.pnnm", expect_dims=(3, 6, 2))

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "m.pnnm"
        save_model(small_net(), path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatVersionMismatch):
            load_model(path)

    def test_config_hash(self):
        a = {"lr": 0.001, "epochs": 750}
        assert config_hash(a) == config_hash(dict(reversed(list(a.items()))))
        assert config_hash(a) != config_hash({**a, "epochs": 751})

    def test_bad_param_vector(self):
        with pytest.raises(InvalidDims):
            MlpModel((2, 2), np.zeros(5), [0, 0], [1, 1])
