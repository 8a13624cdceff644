import numpy as np
import pytest

from splatstyle import nn

from oracles import central_difference, mlp_reference, relative_error


def random_mlp(rng, dims=(8, 16, 16, 3)):
    weights = [rng.normal(scale=0.4, size=(dims[i + 1], dims[i]))
               for i in range(len(dims) - 1)]
    biases = [rng.normal(scale=0.1, size=dims[i + 1]) for i in range(len(dims) - 1)]
    return nn.MlpParams(weights=weights, biases=biases)


class TestForward:
    def test_zero_params_give_half(self):
        mlp = nn.MlpParams(weights=[np.zeros((4, 6)), np.zeros((3, 4))],
                           biases=[np.zeros(4), np.zeros(3)])
        out, _ = nn.mlp_forward(mlp, np.ones((5, 6)))
        np.testing.assert_allclose(out, 0.5)

    def test_single_identity_layer_at_zero(self):
        mlp = nn.MlpParams(weights=[np.eye(3)], biases=[np.zeros(3)])
        out, _ = nn.mlp_forward(mlp, np.zeros((1, 3)))
        np.testing.assert_allclose(out, 0.5)

    def test_matches_matmul_oracle(self, rng):
        mlp = random_mlp(rng)
        x = rng.normal(size=(20, 8))
        out, _ = nn.mlp_forward(mlp, x)
        np.testing.assert_allclose(out, mlp_reference(mlp.weights, mlp.biases, x),
                                   atol=1e-6)

    def test_outputs_in_unit_interval(self, rng):
        mlp = random_mlp(rng)
        out, _ = nn.mlp_forward(mlp, rng.normal(scale=5.0, size=(50, 8)))
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            nn.mlp_forward(random_mlp(rng), np.zeros((2, 5)))

    def test_bad_layer_chain_rejected(self):
        with pytest.raises(ValueError):
            nn.MlpParams(weights=[np.zeros((4, 6)), np.zeros((3, 5))],
                         biases=[np.zeros(4), np.zeros(3)])


class TestBackward:
    def test_zero_upstream_gives_zero(self, rng):
        mlp = random_mlp(rng)
        out, cache = nn.mlp_forward(mlp, rng.normal(size=(4, 8)))
        grads, grad_in = nn.mlp_backward(mlp, cache, np.zeros_like(out))
        assert all(np.all(g == 0) for g in grads["weights"])
        assert np.all(grad_in == 0)

    def test_sigmoid_slope_quarter(self):
        # single sigmoid unit, pre-activation 0: dL/dbias = sigma'(0) = 0.25
        mlp = nn.MlpParams(weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
        out, cache = nn.mlp_forward(mlp, np.zeros((1, 1)))
        grads, _ = nn.mlp_backward(mlp, cache, np.ones((1, 1)))
        assert grads["biases"][0][0] == pytest.approx(0.25, abs=1e-12)

    def test_stale_cache_rejected(self, rng):
        m1, m2 = random_mlp(rng), random_mlp(rng)
        out, cache = nn.mlp_forward(m1, rng.normal(size=(2, 8)))
        with pytest.raises(RuntimeError):
            nn.mlp_backward(m2, cache, np.zeros_like(out))

    def test_matches_finite_differences(self, rng):
        mlp = random_mlp(rng)
        x = rng.normal(size=(12, 8))

        def loss():
            return nn.mlp_forward(mlp, x)[0].sum()

        out, cache = nn.mlp_forward(mlp, x)
        grads, _ = nn.mlp_backward(mlp, cache, np.ones_like(out))
        for li in range(len(mlp.weights)):
            flat = mlp.weights[li]
            idx = [(int(a), int(b)) for a, b in
                   rng.integers(0, min(flat.shape), size=(6, 2))]
            fd = central_difference(loss, flat, idx, eps=1e-5)
            analytic = np.array([grads["weights"][li][i] for i in idx])
            keep = np.abs(fd) > 1e-9
            if keep.any():
                assert relative_error(fd[keep], analytic[keep]).max() <= 1e-3
            bflat = mlp.biases[li]
            bidx = [int(v) for v in rng.integers(0, bflat.size, size=4)]
            fd_b = central_difference(loss, bflat, bidx, eps=1e-5)
            an_b = np.array([grads["biases"][li][i] for i in bidx])
            keep = np.abs(fd_b) > 1e-9
            if keep.any():
                assert relative_error(fd_b[keep], an_b[keep]).max() <= 1e-3


class TestAdam:
    def test_zero_gradients_keep_params(self, rng):
        p = rng.normal(size=(5, 3))
        before = p.copy()
        state = nn.AdamState.for_params([p], lr=0.01)
        nn.adam_step(state, [p], [np.zeros_like(p)])
        np.testing.assert_array_equal(p, before)
        assert state.t == 1

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2 -> update = -lr * g / (|g| + eps) ~ -lr*sign(g)
        for g0 in (0.5, -2.0, 1e3):
            p = np.array([1.0])
            state = nn.AdamState.for_params([p], lr=1e-4)
            nn.adam_step(state, [p], [np.array([g0])])
            expected = 1.0 - 1e-4 * g0 / (abs(g0) + 1e-8)
            assert p[0] == pytest.approx(expected, abs=1e-9)

    def test_nan_gradient_raises(self):
        p = np.array([1.0])
        state = nn.AdamState.for_params([p])
        with pytest.raises(FloatingPointError):
            nn.adam_step(state, [p], [np.array([np.nan])])

    def test_deterministic_runs(self, rng):
        def run():
            r = np.random.default_rng(42)
            mlp = nn.he_uniform_mlp([6, 8, 2], seed=3)
            params = mlp.weights + mlp.biases
            state = nn.AdamState.for_params(params, lr=1e-3)
            x = r.normal(size=(10, 6))
            for _ in range(100):
                out, cache = nn.mlp_forward(mlp, x)
                grads, _ = nn.mlp_backward(mlp, cache, out - 0.25)
                nn.adam_step(state, params, grads["weights"] + grads["biases"])
            return [p.copy() for p in params]

        a, b = run(), run()
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)


def test_he_uniform_zero_last():
    mlp = nn.he_uniform_mlp([4, 8, 3], seed=0, zero_last=True)
    assert np.all(mlp.weights[-1] == 0)
    assert np.any(mlp.weights[0] != 0)
    assert mlp.dims() == [4, 8, 3]
