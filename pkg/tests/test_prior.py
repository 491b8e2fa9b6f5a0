import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynid import adcore as ad
from dynid._container import ContainerError
from dynid.adcore import Rng, Tensor
from dynid.prior import (
    LOG_2PI,
    BiNN,
    EmissionModel,
    FixedVariance,
    L63sVariance,
    VarDynNet,
    binn_drift,
    emission_logpdf,
    flow_n,
    flow_numpy,
    generate_stochastic,
    l63_binn,
    l96_binn,
    load_checkpoint,
    positive_variance,
    save_checkpoint,
    transition_logpdf,
)
from dynid.systems import DivergenceError, L63sParams, l63_rhs, l63s_drift, l96_rhs, rk4_step, simulate


def dense_gaussian_logpdf(x, mean, cov):
    """Textbook multivariate normal log-density."""
    d = len(x)
    diff = x - mean
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (d * np.log(2 * np.pi) + logdet + diff @ np.linalg.solve(cov, diff))


class TestBiNN:
    def test_zero_weights(self):
        net = BiNN(3, init_std=0.0)
        np.testing.assert_array_equal(binn_drift(net, np.array([1.0, -2.0, 3.0])).value, 0.0)

    def test_dense_shapes(self):
        net = BiNN(3, rng=Rng(0))
        assert net.lin_w.shape == (3, 3)
        assert net.lin_b.shape == (3,)
        assert net.bil_w.shape == (3, 3, 3)

    def test_l63_representable(self):
        z = np.random.default_rng(0).uniform(-30, 50, size=(1000, 3))
        np.testing.assert_allclose(l63_binn().drift_numpy(z), l63_rhs(z), rtol=0, atol=1e-10)

    def test_l63s_damping_representable(self):
        z = np.random.default_rng(1).uniform(-30, 50, size=(200, 3))
        p = L63sParams()
        np.testing.assert_allclose(l63_binn(p).drift_numpy(z), l63s_drift(z, p), rtol=0, atol=1e-10)

    def test_l96_representable(self):
        z = np.random.default_rng(2).normal(size=(50, 40)) * 4
        np.testing.assert_allclose(l96_binn().drift_numpy(z), l96_rhs(z), rtol=0, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 10, elements=st.floats(-10, 10)), st.integers(1, 9))
    def test_circular_shift_equivariance(self, z, shift):
        net = BiNN(10, "circular", Rng(3), init_std=0.5)
        # equal up to BLAS summation order
        np.testing.assert_allclose(
            net.drift_numpy(np.roll(z, shift)), np.roll(net.drift_numpy(z), shift), rtol=1e-14, atol=1e-13
        )

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            binn_drift(BiNN(3), np.zeros(4))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            BiNN(3, "banded")

    @pytest.mark.parametrize("mode,dim", [("dense", 3), ("circular", 8)])
    def test_weight_gradients(self, fd_check, mode, dim):
        net = BiNN(dim, mode, Rng(4), init_std=0.3)
        z = np.random.default_rng(5).normal(size=(4, dim))
        probe = np.random.default_rng(6).normal(size=(4, dim))
        err = fd_check(lambda: ad.sum(binn_drift(net, z) * Tensor(probe)), net.parameters())
        assert err < 1e-6


class TestFlow:
    def test_zero_drift(self):
        z = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(flow_numpy(BiNN(3, init_std=0.0), z, 1, 0.01), z)

    def test_fine_step_reference(self):
        z0 = np.array([-5.0, -6.0, 22.0])
        fine = z0
        for _ in range(100):
            fine = rk4_step(l63_rhs, fine, 1e-4)
        np.testing.assert_allclose(flow_numpy(l63_binn(), z0, 1, 0.01), fine, rtol=0, atol=1e-6)

    def test_matches_system_integrator(self):
        z0 = np.array([1.0, 1.0, 1.0])
        ref = simulate("l63", z0, 50, 0.01).states[-1]
        np.testing.assert_allclose(flow_numpy(l63_binn(), z0, 50, 0.01), ref, atol=1e-10)

    def test_four_single_steps(self):
        net = BiNN(3, rng=Rng(7), init_std=0.3)
        z = np.array([0.5, -0.2, 1.0])
        once = z
        for _ in range(4):
            once = flow_numpy(net, once, 1, 0.01)
        np.testing.assert_array_equal(flow_numpy(net, z, 4, 0.01), once)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8))
    def test_compositional(self, a, b):
        z = np.array([-5.0, -6.0, 22.0])
        net = l63_binn()
        np.testing.assert_array_equal(
            flow_numpy(net, z, a + b, 0.01), flow_numpy(net, flow_numpy(net, z, a, 0.01), b, 0.01)
        )

    def test_n_positive(self):
        with pytest.raises(ValueError):
            flow_n(l63_binn(), np.zeros(3), 0, 0.01)

    def test_divergence(self):
        with pytest.raises(DivergenceError):
            flow_numpy(l63_binn(), np.array([1e5, 1e5, 1e5]), 20, 0.01)


class TestVariance:
    def test_positive_and_clamped(self):
        raw = Tensor(np.array([-1e6, 0.0, 1e6]))
        v = positive_variance(raw).value
        assert np.all(v > 0)
        np.testing.assert_allclose(v, [np.exp(-10) + 1e-6, 1 + 1e-6, np.exp(10) + 1e-6])

    def test_vardyn_shape(self):
        net = VarDynNet(3, Rng(0))
        out = net.variance(np.zeros((5, 3)), np.ones((5, 3))).value
        assert out.shape == (5, 3) and np.all(out > 0)
        sizes = [layer.w.shape for layer in net.mlp.layers]
        assert sizes == [(6, 12), (12, 12), (12, 3)]

    def test_fixed_variance(self):
        v = FixedVariance([0.1, 0.2]).variance(None, np.zeros((4, 2))).value
        assert v.shape == (4, 2)
        with pytest.raises(ValueError):
            FixedVariance([0.0])

    def test_l63s_variance_noise_free_first_component(self):
        v = L63sVariance(L63sParams(), 0.01).variance(np.array([1.0, 2.0, 3.0]), None).value
        assert v[0] == pytest.approx(1e-6)
        assert v[1] == pytest.approx(0.01 * 25**2 / L63sParams().gamma + 1e-6)


class TestTransition:
    def test_at_mean(self):
        net = l63_binn()
        z = np.array([1.0, 2.0, 20.0])
        mean = flow_numpy(net, z, 2, 0.01)
        lp = transition_logpdf(net, FixedVariance(np.ones(3)), z, mean, 2, 0.01).item()
        assert lp == pytest.approx(-1.5 * LOG_2PI, abs=1e-12)
        assert lp == pytest.approx(-2.7568, abs=1e-4)

    def test_dense_oracle(self):
        rng = np.random.default_rng(8)
        net = BiNN(3, rng=Rng(9), init_std=0.3)
        varnet = VarDynNet(3, Rng(10))
        for _ in range(5):
            z0, z1 = rng.normal(size=3), rng.normal(size=3)
            mean = flow_numpy(net, z0, 3, 0.01)
            var = varnet.variance(z0, mean).value
            expected = dense_gaussian_logpdf(z1, mean, np.diag(var))
            got = transition_logpdf(net, varnet, z0, z1, 3, 0.01).item()
            assert got == pytest.approx(expected, abs=1e-10)

    def test_unimodal(self):
        net = l63_binn()
        z = np.array([1.0, 2.0, 20.0])
        mean = flow_numpy(net, z, 1, 0.01)
        direction = np.array([0.3, -1.0, 0.5])
        vals = [
            transition_logpdf(net, FixedVariance(np.ones(3)), z, mean + t * direction, 1, 0.01).item()
            for t in (0.0, 0.5, 1.0, 2.0)
        ]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_gradients(self, fd_check):
        net = BiNN(3, rng=Rng(11), init_std=0.3)
        varnet = VarDynNet(3, Rng(12))
        z0, z1 = np.array([0.3, -0.5, 0.8]), np.array([0.2, -0.4, 1.0])
        err = fd_check(lambda: transition_logpdf(net, varnet, z0, z1, 2, 0.05), net.parameters() + varnet.parameters())
        assert err < 1e-5


class TestEmission:
    def test_identity_at_mean(self):
        em = EmissionModel("identity", np.ones(3))
        z = np.array([1.0, 2.0, 3.0])
        assert emission_logpdf(em, z, z, np.ones(3, bool)).item() == pytest.approx(-1.5 * LOG_2PI, abs=1e-12)

    def test_all_masked(self):
        em = EmissionModel("identity", np.ones(3))
        z = ad.param(np.array([1.0, 2.0, 3.0]))
        with ad.Tape() as tape:
            lp = emission_logpdf(em, z, np.full(3, np.nan), np.zeros(3, bool))
        (g,) = tape.gradient(lp, [z])
        assert lp.item() == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_half_masked_term_oracle(self):
        em = EmissionModel("identity", np.array([0.5, 2.0, 1.5, 0.7]), d_z=4)
        rng = np.random.default_rng(13)
        z, x = rng.normal(size=4), rng.normal(size=4)
        mask = np.array([True, False, True, False])
        full = emission_logpdf(em, z, x, np.ones(4, bool)).item()
        terms = -0.5 * (np.log(2 * np.pi * em.obs_var) + (x - z) ** 2 / em.obs_var)
        half = emission_logpdf(em, z, x, mask).item()
        assert half == pytest.approx(full - terms[~mask].sum(), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-1e300, 1e300) | st.just(np.nan) | st.just(np.inf)))
    def test_sentinel_invariance(self, junk):
        em = EmissionModel("identity", np.ones(6), d_z=6)
        z = ad.param(np.linspace(-1, 1, 6))
        mask = np.array([True, False, True, False, False, True])
        x = np.linspace(0, 1, 6)
        x_junk = np.where(mask, x, junk)

        def run(xv):
            with ad.Tape() as tape:
                lp = emission_logpdf(em, z, xv, mask)
            return lp.item(), tape.gradient(lp, [z])[0]

        (a, ga), (b, gb) = run(x), run(x_junk)
        assert a == b
        np.testing.assert_array_equal(ga, gb)

    def test_legendre_matches_operator(self):
        from dynid.observation import legendre_observe

        em = EmissionModel("legendre", np.ones(128))
        z = np.array([0.4, -1.2, 2.0])
        np.testing.assert_allclose(em.observe(z).value, legendre_observe(z), atol=1e-12)

    def test_learned_shape_and_gradients(self, fd_check):
        em = EmissionModel("learned", np.ones(128), rng=Rng(14))
        z = np.array([[0.1, 0.2, -0.3]])
        x = np.random.default_rng(15).normal(size=(1, 128))
        assert em.observe(z).shape == (1, 128)
        err = fd_check(lambda: emission_logpdf(em, z, x, np.ones((1, 128), bool)), em.parameters())
        assert err < 1e-5

    def test_positive_r(self):
        with pytest.raises(ValueError):
            EmissionModel("identity", np.array([1.0, 0.0]))


class TestGenerateStochastic:
    def test_zero_variance_is_flow(self):
        net = l63_binn()
        z0 = np.array([1.0, 1.0, 1.0])
        seq = generate_stochastic(net, FixedVariance(np.ones(3)), z0, 30, 0.01, Rng(0), variance_scale=0.0)
        np.testing.assert_array_equal(seq.states[-1], flow_numpy(net, z0, 30, 0.01))

    def test_floor_variance_close_to_flow(self):
        net = l63_binn()
        z0 = np.array([1.0, 1.0, 1.0])
        seq = generate_stochastic(net, FixedVariance(np.full(3, 1e-12)), z0, 30, 0.01, Rng(0))
        np.testing.assert_allclose(seq.states[-1], flow_numpy(net, z0, 30, 0.01), atol=1e-4)

    def test_seeded(self):
        net, vn = l63_binn(), VarDynNet(3, Rng(1))
        a = generate_stochastic(net, vn, np.ones(3), 50, 0.01, Rng(2)).states
        b = generate_stochastic(net, vn, np.ones(3), 50, 0.01, Rng(2)).states
        c = generate_stochastic(net, vn, np.ones(3), 50, 0.01, Rng(3)).states
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_n_steps_positive(self):
        with pytest.raises(ValueError):
            generate_stochastic(l63_binn(), FixedVariance(np.ones(3)), np.ones(3), 0, 0.01, Rng(0))

    @pytest.mark.slow
    def test_side_switching_with_true_stochastic_model(self):
        p = L63sParams()
        net, vn = l63_binn(p), L63sVariance(p, 0.01)
        starts = simulate("l63", np.ones(3), 500, 0.01).states[-1] + np.zeros((20, 3))
        seq = generate_stochastic(net, vn, starts, 20000, 0.01, Rng(4)).states
        switched = np.any(np.diff(np.sign(seq[:, :, 0]), axis=0) != 0, axis=0)
        assert switched.mean() >= 0.9


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = BiNN(3, rng=Rng(0))
        save_checkpoint(tmp_path / "m.ckpt", {"binn": net}, {"delta": 0.01})
        meta, states = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"delta": 0.01}
        other = BiNN(3, rng=Rng(1))
        other.load_state_dict(states["binn"])
        np.testing.assert_array_equal(other.bil_w.value, net.bil_w.value)

    def test_shape_mismatch(self, tmp_path):
        import json
        import struct

        from dynid import _container

        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"binn": BiNN(3, rng=Rng(0))}, {})
        raw = path.read_bytes()
        pre = len(_container.MAGIC) + 12
        (hlen,) = struct.unpack("<Q", raw[pre - 8 : pre])
        header = json.loads(raw[pre : pre + hlen])
        header["meta"]["shapes"]["binn/lin_w"] = [9]
        new = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(raw[: pre - 8] + struct.pack("<Q", len(new)) + new + raw[pre + hlen :])
        with pytest.raises(ContainerError, match="lin_w"):
            load_checkpoint(path)

    def test_load_into_wrong_architecture(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", {"binn": BiNN(3, rng=Rng(0))}, {})
        _, states = load_checkpoint(tmp_path / "m.ckpt")
        with pytest.raises(Exception):
            BiNN(4).load_state_dict(states["binn"])
