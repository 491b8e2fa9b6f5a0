import warnings

import numpy as np
import pytest

from dynid import adcore as ad
from dynid.adcore import Rng, Tensor
from dynid.inference import (
    AuxNets,
    LstmInference,
    _solve_innovation,
    aux_initialize,
    enks_smooth,
    impute_forward,
    lstm_posterior,
)
from dynid.observation import ObservationSeries
from dynid.prior import l63_binn
from dynid.systems import simulate
from tests.oracles import A, Q, R, enks_relative_error, scalar_series

class TestEnKS:
    def test_rts_oracle(self):
        x = scalar_series(10, 40, 0)
        assert enks_relative_error(x, 2000, 1, lag=10) < 0.05

    def test_more_members_better(self):
        x = scalar_series(20, 30, 2)
        small = [enks_relative_error(x, 50, s, lag=10) for s in range(3)]
        large = [enks_relative_error(x, 2000, s, lag=10) for s in range(3)]
        assert max(large) < min(small)

    def test_exact_consistent_tracking(self):
        # zero model and observation noise, observations made by the model
        net = l63_binn()
        truth = simulate("l63", [1.0, 2.0, 20.0], 30, 0.01).states
        obs = ObservationSeries(truth, np.ones_like(truth, bool), 0.01)
        ens = enks_smooth(net, [0.0, 0.0, 0.0], None, obs, 20, Rng(0), init_mean=truth[0], init_var=[1e-30] * 3, obs_var=[1e-30] * 3)
        np.testing.assert_allclose(ens.mean(), truth, atol=1e-6)

    def test_unobserved_steps_untouched_by_analysis(self):
        x = scalar_series(1, 12, 3)[0]
        mask = np.ones((12, 1), bool)
        mask[4:8] = False
        obs = ObservationSeries(np.where(mask[:, 0], x, np.nan)[:, None], mask, 1.0)
        ens = enks_smooth(lambda m: A * m, [0.0], None, obs, 30, Rng(1), init_mean=[0.0], init_var=[1.0], obs_var=[R])
        for k in range(5, 8):
            # filtered ensemble at an unobserved step is the plain forecast
            np.testing.assert_allclose(ens.filtered[k], A * ens.filtered[k - 1], rtol=1e-13)
        # the smoother pass later revises those steps
        assert not np.allclose(ens.members[6], ens.filtered[6])

    def test_lag_zero_is_filter(self):
        x = scalar_series(1, 15, 4)[0]
        obs = ObservationSeries(x[:, None], np.ones((15, 1), bool), 1.0)
        ens = enks_smooth(lambda m: A * m, [Q], None, obs, 40, Rng(2), lag=0, init_mean=[0.0], init_var=[1.0], obs_var=[R])
        np.testing.assert_array_equal(ens.members, ens.filtered)

    def test_default_members(self):
        x = scalar_series(1, 5, 5)[0]
        obs = ObservationSeries(x[:, None], np.ones((5, 1), bool), 1.0)
        assert enks_smooth(lambda m: A * m, [Q], None, obs, rng=Rng(0), init_mean=[0.0], obs_var=[R]).n_members == 50

    def test_too_few_members(self):
        obs = ObservationSeries(np.zeros((3, 1)), np.ones((3, 1), bool), 1.0)
        with pytest.raises(ValueError):
            enks_smooth(lambda m: m, [Q], None, obs, 1, init_mean=[0.0], obs_var=[R])

    def test_singular_innovation_jitter(self):
        c = np.zeros((2, 2))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = _solve_innovation(c, np.ones((2, 3)))
        assert any("jitter" in str(w.message) for w in caught)
        np.testing.assert_allclose(out, 1e8, rtol=1e-6)

    def test_seeded(self):
        x = scalar_series(1, 10, 6)[0]
        obs = ObservationSeries(x[:, None], np.ones((10, 1), bool), 1.0)
        run = lambda: enks_smooth(lambda m: A * m, [Q], None, obs, 30, Rng(7), init_mean=[0.0], obs_var=[R]).members  # noqa: E731
        np.testing.assert_array_equal(run(), run())


class TestImpute:
    def test_forward_fill(self):
        v = np.array([[np.nan, 1.0], [2.0, np.nan], [np.nan, np.nan], [5.0, 6.0]])
        out = impute_forward(v, ~np.isnan(v))
        np.testing.assert_array_equal(out, [[0.0, 1.0], [2.0, 1.0], [2.0, 1.0], [5.0, 6.0]])


def make_inference(variational=False, seed=0):
    return LstmInference(3, 3, 9, 2, [3, 7, 3], "relu", (7,), "relu", variational, Rng(seed), seg_len=4)


def randomize_decoder(inf, seed=1):
    # the decoder's final layer starts at zero; perturb it so it matters
    inf.dec.layers[-1].w.value = 0.3 * np.random.default_rng(seed).normal(size=inf.dec.layers[-1].w.shape)


class TestLstmPosterior:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.values = rng.normal(size=(12, 3))
        self.mask = np.ones((12, 3), bool)
        self.prior = rng.normal(size=(12, 3))

    def test_shapes(self):
        inf = make_inference(variational=True)
        mu, var = lstm_posterior(inf, ObservationSeries(self.values, self.mask, 0.01), self.prior)
        assert mu.shape == (12, 3) and var.shape == (12, 3)
        assert np.all(var.value > 0)
        assert inf.dec_sizes == (21, 7, 6)

    def test_deterministic_variant(self):
        inf = make_inference(variational=False)
        mu, var = lstm_posterior(inf, ObservationSeries(self.values, self.mask, 0.01), self.prior)
        assert var is None and mu.shape == (12, 3)
        assert inf.dec_sizes == (21, 7, 3)

    def test_zero_decoder_returns_forecast(self):
        inf = make_inference()
        mu, _ = lstm_posterior(inf, ObservationSeries(self.values, self.mask, 0.01), self.prior)
        np.testing.assert_allclose(mu.value[1:], self.prior[1:], atol=1e-12)

    def test_bidirectional(self):
        inf = make_inference()
        single = inf.context(self.values, self.mask)
        double = inf.context(np.concatenate([self.values, self.values]), np.ones((24, 3), bool))
        np.testing.assert_allclose(double.hf.value[0, :12], single.hf.value[0], atol=1e-12)
        assert not np.allclose(double.hb.value[0, :12], single.hb.value[0])

    def test_all_masked_no_leakage(self):
        inf = make_inference()
        randomize_decoder(inf)
        mask = np.zeros((12, 3), bool)
        a = lstm_posterior(inf, ObservationSeries(np.full((12, 3), np.nan), mask, 0.01), self.prior)[0].value
        b = lstm_posterior(inf, ObservationSeries(np.full((12, 3), 1e300), mask, 0.01), self.prior)[0].value
        np.testing.assert_array_equal(a, b)
        c = lstm_posterior(inf, ObservationSeries(np.full((12, 3), np.nan), mask, 0.01), self.prior + 1.0)[0].value
        assert not np.allclose(a[1:], c[1:])

    def test_masked_entries_no_gradient_leak(self):
        inf = make_inference(variational=True)
        randomize_decoder(inf)
        mask = np.random.default_rng(2).random((12, 3)) > 0.5
        mask[0] = True

        def grads(values):
            with ad.Tape() as tape:
                mu, var = lstm_posterior(inf, ObservationSeries(values, mask, 0.01), self.prior)
                loss = ad.sum(mu * mu) + ad.sum(var)
            return loss.item(), tape.gradient(loss, inf.parameters())

        la, ga = grads(np.where(mask, self.values, np.nan))
        lb, gb = grads(np.where(mask, self.values, -7.0))
        assert la == lb
        for x, y in zip(ga, gb):
            np.testing.assert_array_equal(x, y)

    def test_reparameterization_mean(self):
        inf = make_inference(variational=True)
        randomize_decoder(inf)
        mu, var = lstm_posterior(inf, ObservationSeries(self.values, self.mask, 0.01), self.prior)
        m, v = mu.value[5], var.value[5]
        draws = ad.sample_gaussian(Rng(3), Tensor(np.broadcast_to(m, (100_000, 3))), Tensor(np.broadcast_to(v, (100_000, 3)))).value
        se = np.sqrt(v / 100_000)
        assert np.all(np.abs(draws.mean(axis=0) - m) < 4 * se)
        np.testing.assert_allclose(draws.var(axis=0), v, rtol=0.02)

    def test_gradients(self, fd_check):
        inf = make_inference(variational=True)
        randomize_decoder(inf)
        obs = ObservationSeries(self.values[:8], self.mask[:8], 0.01)
        probe = np.random.default_rng(4).normal(size=(8, 3))

        def fn():
            mu, var = lstm_posterior(inf, obs, self.prior[:8])
            return ad.sum(mu * Tensor(probe)) + ad.sum(ad.log(var))

        assert fd_check(fn, inf.parameters(), n_probe=3) < 1e-4

    def test_prior_shape_checked(self):
        with pytest.raises(ad.ShapeError):
            lstm_posterior(make_inference(), ObservationSeries(self.values, self.mask, 0.01), self.prior[:5])

    def test_round_trip_architecture(self):
        inf = make_inference(variational=True)
        again = LstmInference.from_architecture({**inf.architecture(), "rng": Rng(0)})
        assert again.architecture() == inf.architecture()


class TestAux:
    def test_shapes_and_finite(self):
        inf = make_inference()
        obs = ObservationSeries(np.random.default_rng(0).normal(size=(12, 3)), np.ones((12, 3), bool), 0.01)
        z0, hf0, hb = aux_initialize(inf, obs)
        assert (z0.shape, hf0.shape, hb.shape) == ((3,), (9,), (9,))
        assert all(np.all(np.isfinite(t.value)) for t in (z0, hf0, hb))

    def test_leading_segment_matters(self):
        inf = make_inference()
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
        b[4:] = a[4:]
        full = np.ones((12, 3), bool)
        za = aux_initialize(inf, ObservationSeries(a, full, 0.01))[0].value
        zb = aux_initialize(inf, ObservationSeries(b, full, 0.01))[0].value
        assert not np.allclose(za, zb)

    def test_too_short(self):
        with pytest.raises(ValueError):
            AuxNets(3, 3, 9, 2, Rng(0), seg_len=4).initialize(np.zeros((1, 7, 3)))

    def test_gradients(self, fd_check):
        inf = make_inference()
        obs = ObservationSeries(np.random.default_rng(2).normal(size=(8, 3)), np.ones((8, 3), bool), 0.01)

        def fn():
            z0, hf0, hb = aux_initialize(inf, obs)
            return ad.sum(z0 * z0) + ad.sum(hf0) + ad.sum(hb * hb)

        assert fd_check(fn, inf.aux.parameters(), n_probe=4) < 1e-4
