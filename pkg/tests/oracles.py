"""Closed-form references for the scalar linear-Gaussian system
``z' = a z + w``, ``w ~ N(0, Q)``, ``x = z + v``, ``v ~ N(0, R)``."""

import numpy as np

from dynid import adcore as ad
from dynid.adcore import Rng, Tensor
from dynid.inference import enks_smooth_batch
from dynid.model import Model
from dynid.prior import LOG_2PI, BiNN, EmissionModel, FixedVariance, flow_numpy, gaussian_logpdf_terms
from dynid.training import loss_elbo

A, Q, R, M0, P0 = 0.9, 0.1, 0.5, 0.0, 1.0


def rts_smoother(x):
    """Closed-form Kalman filter + Rauch-Tung-Striebel pass for the scalar
    system ``z' = A z + w``, ``x = z + v``."""
    T = len(x)
    mf, pf, mp, pp = (np.zeros(T) for _ in range(4))
    for k in range(T):
        mp[k], pp[k] = (M0, P0) if k == 0 else (A * mf[k - 1], A * A * pf[k - 1] + Q)
        gain = pp[k] / (pp[k] + R)
        mf[k] = mp[k] + gain * (x[k] - mp[k])
        pf[k] = (1 - gain) * pp[k]
    ms, ps = mf.copy(), pf.copy()
    for k in range(T - 2, -1, -1):
        j = pf[k] * A / pp[k + 1]
        ms[k] = mf[k] + j * (ms[k + 1] - mp[k + 1])
        ps[k] = pf[k] + j * j * (ps[k + 1] - pp[k + 1])
    return ms, ps


def scalar_series(n_series, T, seed):
    """Observations only."""
    return simulate_scalar(n_series, T, seed)[1]


def enks_relative_error(x, n_members, seed, lag):
    ens = enks_smooth_batch(
        lambda m: A * m, [Q], None, x[:, :, None], np.ones(x.shape + (1,), bool), 1.0,
        n_members, Rng(seed), lag, init_mean=np.full((len(x), 1), M0), init_var=[P0], obs_var=[R],
    )
    sq, var = [], []
    for e, xs in zip(ens, x):
        ms, ps = rts_smoother(xs)
        sq.append(np.mean((e.mean()[:, 0] - ms) ** 2))
        var.append(np.mean(ps))
    return np.sqrt(np.mean(sq) / np.mean(var))


T1 = 10


def scalar_model():
    # drift rate whose RK4 step of size 1 multiplies the state by 0.9
    roots = np.roots([1 / 24, 1 / 6, 1 / 2, 1, 1 - 0.9])
    rate = max(r.real for r in roots if abs(r.imag) < 1e-12 and abs(r.real) < 1)
    net = BiNN(1, init_std=0.0)
    net.lin_w.value = np.array([[rate]])
    model = Model(net, EmissionModel("identity", [R], 1), 1.0, FixedVariance([Q]))
    factor = float(flow_numpy(net, np.array([1.0]), 1, 1.0)[0])
    return model, factor


def prior_cov(a, steps):
    var = np.empty(steps)
    var[0] = P0
    for k in range(1, steps):
        var[k] = a * a * var[k - 1] + Q
    i, j = np.meshgrid(np.arange(steps), np.arange(steps), indexing="ij")
    return a ** np.abs(i - j) * var[np.minimum(i, j)]


def log_evidence(x, a):
    c = prior_cov(a, len(x)) + R * np.eye(len(x))
    _, logdet = np.linalg.slogdet(c)
    return -0.5 * (len(x) * LOG_2PI + logdet + x @ np.linalg.solve(c, x))


class _Ctx:
    def __init__(self, steps, batch):
        self.steps, self.batch = steps, batch
        self.z0 = Tensor(np.zeros((batch, 1)))

    @property
    def n_steps(self):
        return self.steps


class ExactPosterior:
    """Markov factorisation of the exact Gaussian posterior:
    ``q(z_k | z_{k-1}) = N(c_k F(z_{k-1}) + b_k, v_k)``."""

    def __init__(self, x, a, mean_shift=0.0):
        steps = len(x)
        cov = prior_cov(a, steps)
        post_cov = np.linalg.inv(np.linalg.inv(cov) + np.eye(steps) / R)
        post_mean = post_cov @ (x / R)
        self.c, self.b, self.v = np.zeros(steps), np.zeros(steps), np.zeros(steps)
        self.b[0], self.v[0] = post_mean[0] + mean_shift, post_cov[0, 0]
        for k in range(1, steps):
            s_pp = post_cov[:k, :k]
            s_kp = post_cov[k, :k]
            w = np.linalg.solve(s_pp, s_kp)
            # Markov: only the coefficient of z_{k-1} survives
            g = w[-1]
            self.c[k] = g / a
            self.b[k] = post_mean[k] - g * post_mean[k - 1] + mean_shift
            self.v[k] = post_cov[k, k] - s_kp @ w

    def context(self, values, mask):
        return _Ctx(values.shape[1], values.shape[0])

    def decode(self, ctx, steps, forecast):
        forecast = ad.as_tensor(forecast)
        idx = np.arange(ctx.steps)[steps]
        if np.ndim(idx) == 0:
            c, b, v = self.c[idx], self.b[idx], self.v[idx]
        else:
            c, b, v = self.c[idx][:, None], self.b[idx][:, None], self.v[idx][:, None]
        mu = forecast * Tensor(np.broadcast_to(c, forecast.shape).copy()) + Tensor(np.broadcast_to(b, forecast.shape).copy())
        return mu, Tensor(np.broadcast_to(v, forecast.shape).copy())


def z0_prior(z0):
    return ad.sum(gaussian_logpdf_terms(z0, M0, P0))


def elbo_samples(model, post, x, seed, n_batches=100, batch=100):
    """Mean of ``n_batches * batch`` single-sample ELBO estimates and its
    standard error (from the batch means)."""
    values = np.broadcast_to(x[None, :, None], (batch, len(x), 1))
    mask = np.ones_like(values, bool)
    means = [
        -loss_elbo(model, values, mask, 1, Rng(seed, (b,)), post, z0_prior).item() for b in range(n_batches)
    ]
    return np.mean(means), np.std(means, ddof=1) / np.sqrt(n_batches)


def simulate_scalar(n_series, steps, seed, a=A):
    rng = np.random.default_rng(seed)
    z = np.zeros((n_series, steps))
    z[:, 0] = M0 + rng.normal(size=n_series) * np.sqrt(P0)
    for k in range(1, steps):
        z[:, k] = a * z[:, k - 1] + rng.normal(size=n_series) * np.sqrt(Q)
    return z, z + rng.normal(size=z.shape) * np.sqrt(R)
