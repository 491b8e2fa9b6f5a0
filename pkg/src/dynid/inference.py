"""Posterior engines: a perturbed-observation ensemble Kalman smoother and a
bidirectional recurrent inference network with auxiliary initialisation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import adcore as ad
from .adcore import Rng, Tensor
from .layers import MLP, LSTM, Linear, Module
from .observation import ObservationSeries
from .prior import BiNN, EmissionModel, flow_numpy, positive_variance

JITTER = 1e-8
DEFAULT_MEMBERS = 50


# ---------------------------------------------------------------------------
# ensemble Kalman smoother
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    """Smoothed members ``(T+1, N, d)`` plus the filter-only snapshot taken
    right after each step's own analysis."""

    members: np.ndarray
    filtered: np.ndarray

    def __post_init__(self):
        if self.members.shape[1] < 2:
            raise ValueError("an ensemble needs at least two members")

    @property
    def n_members(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=1)

    def var(self) -> np.ndarray:
        return self.members.var(axis=1, ddof=1)


def _forecast_fn(forecast, delta: float) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(forecast, BiNN):
        return lambda x: flow_numpy(forecast, x, 1, delta)
    if callable(forecast):
        return forecast
    raise TypeError("forecast must be a BiNN or a callable on (N, d) arrays")


def _emission_fn(emission) -> Callable[[np.ndarray], np.ndarray]:
    if emission is None:
        return lambda z: z
    if isinstance(emission, EmissionModel):
        def h(z):
            with ad.no_record():
                return emission.observe(z).value
        return h
    return emission


def _solve_innovation(c: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        warnings.warn("singular innovation covariance; adding jitter", RuntimeWarning, stacklevel=3)
        chol = np.linalg.cholesky(c + JITTER * np.eye(len(c)))
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, y)


def _centered_normal(rng: Rng, shape) -> np.ndarray:
    # exact zero mean and unit variance over the member axis (improved sampling)
    eps = rng.normal(shape)
    eps = eps - eps.mean(axis=-2, keepdims=True)
    return eps / eps.std(axis=-2, ddof=1, keepdims=True)


def enks_smooth(
    forecast,
    q_var,
    emission,
    obs: ObservationSeries,
    n_members: int = DEFAULT_MEMBERS,
    rng: Rng | None = None,
    lag: int | None = None,
    init_mean=None,
    init_var=None,
    obs_var=None,
) -> Ensemble:
    """Fixed-lag stochastic EnKS.

    ``forecast`` maps member arrays ``(..., N, d)`` one step ahead (a
    :class:`BiNN` is integrated with one RK4 step of ``obs.delta``);
    ``q_var`` is the diagonal model-noise variance added after each
    forecast.  Each analysis uses perturbed observations restricted to the
    observed components and is propagated back to the previous ``lag``
    steps (default: all).
    """
    if len(obs) == 0:
        raise ValueError("enks_smooth: empty observation series")
    init_mean = None if init_mean is None else np.asarray(init_mean, dtype=np.float64)[None]
    init_var = None if init_var is None else np.asarray(init_var, dtype=np.float64)[None]
    ens = enks_smooth_batch(
        forecast, q_var, emission, obs.values[None], obs.mask[None], obs.delta,
        n_members, rng, lag, init_mean, init_var, obs_var,
    )
    return ens[0]


def enks_smooth_batch(
    forecast,
    q_var,
    emission,
    values: np.ndarray,
    mask: np.ndarray,
    delta: float,
    n_members: int = DEFAULT_MEMBERS,
    rng: Rng | None = None,
    lag: int | None = None,
    init_mean=None,
    init_var=None,
    obs_var=None,
) -> list[Ensemble]:
    """:func:`enks_smooth` over ``S`` series ``(S, T+1, d_x)`` at once; the
    forecasts of all members of all series are propagated together."""
    if n_members < 2:
        raise ValueError(f"enks_smooth needs at least 2 members, got {n_members}")
    rng = rng or Rng(0)
    f = _forecast_fn(forecast, delta)
    h = _emission_fn(emission)
    if obs_var is None:
        if not isinstance(emission, EmissionModel):
            raise ValueError("enks_smooth needs obs_var unless emission is an EmissionModel")
        obs_var = emission.obs_var
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n_seq, n_steps, d_x = values.shape
    obs_var = np.broadcast_to(np.asarray(obs_var, dtype=np.float64), (d_x,))
    if init_mean is None:
        raise ValueError("enks_smooth needs init_mean (state dimension is not inferable)")
    init_mean = np.broadcast_to(np.asarray(init_mean, dtype=np.float64), (n_seq, np.shape(init_mean)[-1]))
    d = init_mean.shape[-1]
    init_var = np.ones((n_seq, d)) if init_var is None else np.broadcast_to(np.asarray(init_var, dtype=np.float64), (n_seq, d))
    q_std = np.sqrt(np.broadcast_to(np.asarray(q_var, dtype=np.float64), (d,)))
    lag = n_steps if lag is None else int(lag)
    if lag < 0:
        raise ValueError("lag must be nonnegative")

    members = np.empty((n_seq, n_steps, n_members, d))
    filtered = np.empty_like(members)
    members[:, 0] = init_mean[:, None] + np.sqrt(init_var)[:, None] * _centered_normal(rng, (n_seq, n_members, d))
    for k in range(n_steps):
        if k > 0:
            members[:, k] = f(members[:, k - 1])
            if np.any(q_std > 0):
                members[:, k] += q_std * _centered_normal(rng, (n_seq, n_members, d))
        hx = h(members[:, k])
        lo = max(0, k - lag)
        for s in range(n_seq):
            observed = np.flatnonzero(mask[s, k])
            if not observed.size:
                continue
            y = hx[s][:, observed]
            ya = y - y.mean(axis=0)
            r = obs_var[observed]
            eps = _centered_normal(rng, (n_members, observed.size))
            perturbed = values[s, k, observed] + np.sqrt(r) * eps
            c = ya.T @ ya / (n_members - 1) + np.diag(r)
            g = _solve_innovation(c, (perturbed - y).T)  # (m, N)
            window = members[s, lo : k + 1]
            anomalies = window - window.mean(axis=1, keepdims=True)
            cross = np.einsum("lnd,nm->ldm", anomalies, ya) / (n_members - 1)
            window += np.einsum("ldm,mn->lnd", cross, g)
        filtered[:, k] = members[:, k]
    return [Ensemble(members[s], filtered[s]) for s in range(n_seq)]


# ---------------------------------------------------------------------------
# recurrent inference network
# ---------------------------------------------------------------------------


def impute_forward(values: np.ndarray, mask: np.ndarray, initial: float = 0.0) -> np.ndarray:
    """Replace masked entries by the last observed value of the same
    component (time axis ``-2``), or ``initial`` before the first one."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    steps = values.shape[-2]
    idx = np.where(mask, np.arange(steps)[:, None], -1)
    idx = np.maximum.accumulate(idx, axis=-2)
    filled = np.take_along_axis(np.where(mask, values, initial), np.maximum(idx, 0), axis=-2)
    return np.where(idx >= 0, filled, initial)


class AuxNets(Module):
    """Recurrent nets that read a leading (trailing) segment of observations
    and emit the initial states of the forward (backward) recurrences and
    the initial hidden state ``z0``."""

    def __init__(self, d_x: int, d_z: int, hidden: int, n_layers: int, rng: Rng, seg_len: int = 10):
        if seg_len < 1:
            raise ValueError("seg_len must be >= 1")
        self.seg_len = seg_len
        self.fwd_aux = LSTM(d_x, hidden, n_layers, rng.child(0))
        self.bwd_aux = LSTM(d_x, hidden, n_layers, rng.child(1))
        self.z0_head = Linear(hidden, d_z, rng.child(2))

    def initialize(self, xn: np.ndarray):
        """``xn``: normalised, imputed observations ``(B, T+1, d_x)``.

        Returns normalised ``z0`` ``(B, d_z)`` and the per-layer initial
        states of the forward and backward recurrences.
        """
        steps = xn.shape[1]
        if steps < 2 * self.seg_len:
            raise ValueError(f"series of length {steps} is shorter than two segments of {self.seg_len}")
        _, fstate = self.fwd_aux.run(Tensor(xn[:, : self.seg_len]))
        _, bstate = self.bwd_aux.run(Tensor(xn[:, steps - self.seg_len :]), reverse=True)
        hidden = self.fwd_aux.hidden
        z0 = self.z0_head(fstate[-1][:, :hidden])
        return z0, fstate, bstate


@dataclass
class PosteriorContext:
    """Observation-dependent quantities shared by every decoding step."""

    hf: Tensor  # (B, T+1, H) forward states h^f_0..h^f_T
    hb: Tensor  # (B, T+1, H) backward states h^b_0..h^b_T
    z0: Tensor  # (B, d_z) initial state in physical units

    @property
    def n_steps(self) -> int:
        return self.hf.shape[1]


class LstmInference(Module):
    """Bidirectional recurrent posterior ``q(z_k | F^n(z_{k-n}), x_{0:T})``.

    The decoder reads ``(forecast, h^f_k, h^b_k)`` and returns a correction
    to the forecast (and, when ``variational``, a diagonal variance), both in
    units of the fixed state scale.
    """

    def __init__(
        self,
        d_x: int,
        d_z: int,
        hidden: int = 9,
        n_layers: int = 2,
        enc_sizes=None,
        enc_activation: str = "relu",
        dec_hidden=(7,),
        dec_activation: str = "relu",
        variational: bool = False,
        rng: Rng | None = None,
        seg_len: int = 10,
        x_shift=0.0,
        x_scale=1.0,
        z_shift=0.0,
        z_scale=1.0,
    ):
        rng = rng or Rng(0)
        enc_sizes = list(enc_sizes or [d_x, 7, d_z])
        if enc_sizes[0] != d_x:
            raise ad.ShapeError(f"encoder input {enc_sizes[0]} != observation dimension {d_x}")
        self.d_x, self.d_z, self.hidden, self.variational = d_x, d_z, hidden, variational
        self.x_shift = np.broadcast_to(np.asarray(x_shift, dtype=np.float64), (d_x,)).copy()
        self.x_scale = np.broadcast_to(np.asarray(x_scale, dtype=np.float64), (d_x,)).copy()
        self.z_shift = np.broadcast_to(np.asarray(z_shift, dtype=np.float64), (d_z,)).copy()
        self.z_scale = np.broadcast_to(np.asarray(z_scale, dtype=np.float64), (d_z,)).copy()
        enc_out = enc_sizes[-1]
        self.enc = MLP(enc_sizes, enc_activation, rng.child(0))
        self.forward_lstm = LSTM(enc_out, hidden, n_layers, rng.child(1))
        self.backward_lstm = LSTM(hidden + enc_out, hidden, n_layers, rng.child(2))
        out = 2 * d_z if variational else d_z
        self.dec = MLP([d_z + 2 * hidden, *dec_hidden, out], dec_activation, rng.child(3))
        # the decoder outputs a correction to the forecast: start from zero
        self.dec.layers[-1].w.value[:] = 0.0
        self.aux = AuxNets(d_x, d_z, hidden, n_layers, rng.child(4), seg_len)

    @property
    def dec_sizes(self) -> tuple[int, ...]:
        return self.dec.sizes

    def normalize_obs(self, values, mask) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        xn = np.where(mask, (np.where(mask, values, 0.0) - self.x_shift) / self.x_scale, 0.0)
        return impute_forward(xn, mask)

    def context(self, values, mask) -> PosteriorContext:
        """Run the auxiliary nets and both recurrences over ``(B, T+1, d_x)``."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values, mask = values[None], np.asarray(mask)[None]
        if values.shape[-1] != self.d_x:
            raise ad.ShapeError(f"observations have dimension {values.shape[-1]}, expected {self.d_x}")
        xn = self.normalize_obs(values, mask)
        z0n, fstate, bstate = self.aux.initialize(xn)
        enc = self.enc(Tensor(xn))
        steps = xn.shape[1]
        hf_tail, _ = self.forward_lstm.run(enc[:, : steps - 1], fstate)
        hf0 = fstate[-1][:, : self.hidden]
        hf = ad.concat([ad.reshape(hf0, (hf0.shape[0], 1, self.hidden)), hf_tail], axis=1)
        hb, _ = self.backward_lstm.run(ad.concat([hf, enc], axis=-1), bstate, reverse=True)
        z0 = z0n * Tensor(self.z_scale) + self.z_shift
        return PosteriorContext(hf, hb, z0)

    def decode(self, ctx: PosteriorContext, steps, forecast):
        """Posterior mean (and variance) at time indices ``steps`` given the
        prior forecasts ``(B, len(steps), d_z)`` (or ``(B, d_z)`` for an int)."""
        forecast = ad.as_tensor(forecast)
        fn = ad.sub(forecast, self.z_shift) * Tensor(1.0 / self.z_scale)
        out = self.dec(ad.concat([fn, ctx.hf[:, steps], ctx.hb[:, steps]], axis=-1))
        d = self.d_z
        mu = forecast + out[..., :d] * Tensor(self.z_scale)
        if not self.variational:
            return mu, None
        return mu, positive_variance(out[..., d:], unit=self.z_scale**2)

    def architecture(self) -> dict:
        return {
            "d_x": self.d_x,
            "d_z": self.d_z,
            "hidden": self.hidden,
            "n_layers": len(self.forward_lstm.cells),
            "enc_sizes": list(self.enc.sizes),
            "enc_activation": self.enc.activation,
            "dec_hidden": list(self.dec.sizes[1:-1]),
            "dec_activation": self.dec.activation,
            "variational": self.variational,
            "seg_len": self.aux.seg_len,
            "x_shift": self.x_shift.tolist(),
            "x_scale": self.x_scale.tolist(),
            "z_shift": self.z_shift.tolist(),
            "z_scale": self.z_scale.tolist(),
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "LstmInference":
        return cls(**arch)


def aux_initialize(inf: LstmInference, obs: ObservationSeries):
    """``(z0, h^f_0, h^b_{T+1})`` for a single series: the initial state and
    the top-layer hidden vectors that seed the two recurrences."""
    xn = inf.normalize_obs(obs.values, obs.mask)[None]
    z0n, fstate, bstate = inf.aux.initialize(xn)
    z0 = z0n * Tensor(inf.z_scale) + inf.z_shift
    return z0[0], fstate[-1][0, : inf.hidden], bstate[-1][0, : inf.hidden]


def lstm_posterior(inf: LstmInference, obs: ObservationSeries, prior_means):
    """Per-step posterior given precomputed prior means ``(T+1, d_z)``.

    Row 0 of ``prior_means`` is ignored: the initial state comes from the
    auxiliary net.  Returns ``(mu, var)`` with ``var`` ``None`` for the
    deterministic variant.
    """
    prior_means = ad.as_tensor(prior_means)
    if prior_means.shape != (len(obs), inf.d_z):
        raise ad.ShapeError(f"prior_means shape {prior_means.shape} != {(len(obs), inf.d_z)}")
    ctx = inf.context(obs.values, obs.mask)
    forecast = ad.concat([ad.reshape(ctx.z0, (1, 1, inf.d_z)), ad.reshape(prior_means[1:], (1, len(obs) - 1, inf.d_z))], axis=1)
    mu, var = inf.decode(ctx, slice(None), forecast)
    return mu[0], (None if var is None else var[0])
