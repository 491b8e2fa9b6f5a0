"""Objectives (deterministic, MAP, ELBO), the random-n-step-ahead driver and
the alternating EnKS/gradient (EM) driver."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import adcore as ad
from .adcore import Rng, Tensor
from .inference import PosteriorContext, enks_smooth_batch
from .model import Model
from .observation import Dataset
from .prior import (
    EmissionModel,
    FixedVariance,
    flow_n,
    gaussian_logpdf_terms,
    _mask_arrays,
)
from .systems import DivergenceError

OBJECTIVES = ("elbo", "map", "determ")
INFERENCES = ("enks", "lstm")

#: the model rows of the reference comparison: (objective, inference)
MODEL_ROWS = {
    "BiNN_EnKS": ("determ", "enks"),
    "DAODEN_determ": ("determ", "lstm"),
    "DAODEN_MAP": ("map", "lstm"),
    "DAODEN_full": ("elbo", "lstm"),
}
VALID_PAIRS = frozenset(MODEL_ROWS.values())


class TrainingError(RuntimeError):
    """Training could not continue; ``trace`` holds the rows logged so far."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    objective: str = "determ"
    inference: str = "lstm"
    n_step_max: int = 4
    lam: float = 1.0
    lr: float = 1e-3
    lr_dynamics: float | None = None  # defaults to lr
    clip_norm: float = 10.0
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    m_steps: int = 20
    q_var: float = 1e-2
    n_members: int = 50
    enks_lag: int | None = None
    max_retries: int = 3

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.inference not in INFERENCES:
            raise ValueError(f"inference must be one of {INFERENCES}, got {self.inference!r}")
        if (self.objective, self.inference) not in VALID_PAIRS:
            raise ValueError(
                f"(objective={self.objective}, inference={self.inference}) is not a supported configuration"
            )
        if self.n_step_max < 1:
            raise ValueError("n_step_max must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.m_steps < 1:
            raise ValueError("epochs, batch_size and m_steps must be positive")
        if not (self.lr > 0 and self.clip_norm > 0):
            raise ValueError("lr and clip_norm must be positive")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive moment estimation with global gradient-norm clipping.

    ``groups`` is a list of ``(params, lr)`` pairs.
    """

    def __init__(self, groups, clip_norm: float = 10.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        self.clip_norm = clip_norm
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(p.value) for p in ps] for ps, _ in self.groups]
        self.v = [[np.zeros_like(p.value) for p in ps] for ps, _ in self.groups]

    @property
    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def scale_lr(self, factor: float) -> None:
        self.groups = [(ps, lr * factor) for ps, lr in self.groups]

    def snapshot(self):
        return (
            [p.value.copy() for p in self.params],
            [[a.copy() for a in g] for g in self.m],
            [[a.copy() for a in g] for g in self.v],
            self.t,
        )

    def restore(self, snap) -> None:
        values, m, v, t = snap
        for p, val in zip(self.params, values):
            p.value = val.copy()
        self.m, self.v, self.t = m, v, t

    def step(self, grads: list[np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))
        factor = min(1.0, self.clip_norm / norm) if norm > 0 else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        it = iter(grads)
        for gi, (ps, lr) in enumerate(self.groups):
            for pi, p in enumerate(ps):
                g = next(it) * factor
                m = self.m[gi][pi] = self.b1 * self.m[gi][pi] + (1 - self.b1) * g
                v = self.v[gi][pi] = self.b2 * self.v[gi][pi] + (1 - self.b2) * g * g
                p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# rollouts and forecasts
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    """Ancestral pass of the inference network through the prior.

    ``z``: ``(B, T+1, d)`` posterior means or samples; ``sources`` and
    ``forecasts``: ``(B, T, d)`` the states ``z_{k-m}`` and ``F^m(z_{k-m})``
    feeding step ``k = 1..T`` (``m = 1`` for ``k < n``, else ``n``);
    ``mu``/``var``: posterior moments at every step (``var`` is ``None``
    for Dirac posteriors).
    """

    z: Tensor
    sources: Tensor
    forecasts: Tensor
    mu: Tensor
    var: Tensor | None
    n: int


def _stack_steps(steps: list[Tensor]) -> Tensor:
    return ad.stack(steps, axis=1)


def rollout(model: Model, ctx: PosteriorContext, n: int, rng: Rng | None = None, posterior=None) -> Rollout:
    """Random n-step training inner loop: one-step forecasts for ``k < n``, then ``n``-step
    forecasts computed block-wise (a block of ``n`` consecutive steps only
    depends on the previous block).  Samples from ``q`` when ``rng`` is given
    and the posterior is Gaussian; otherwise uses its mean."""
    post = posterior or model.inference
    steps = ctx.n_steps
    if n < 1:
        raise ValueError("n must be >= 1")

    def draw(mu, var):
        if rng is None or var is None:
            return mu
        return ad.sample_gaussian(rng, mu, var)

    mu0, var0 = post.decode(ctx, 0, ctx.z0)
    z_steps, mu_steps, var_steps = [draw(mu0, var0)], [mu0], [var0]
    src_pieces, fc_pieces, z_pieces, mu_pieces, var_pieces = [], [], [], [], []
    for k in range(1, min(n, steps)):
        fc = flow_n(model.net, z_steps[k - 1], 1, model.delta)
        mu, var = post.decode(ctx, k, fc)
        src_pieces.append(z_steps[k - 1])
        fc_pieces.append(fc)
        z_steps.append(draw(mu, var))
        mu_steps.append(mu)
        var_steps.append(var)
    head_z = _stack_steps(z_steps)
    z_pieces.append(head_z)
    mu_pieces.append(_stack_steps(mu_steps))
    if var0 is not None:
        var_pieces.append(_stack_steps(var_steps))
    head_src = [_stack_steps(src_pieces)] if src_pieces else []
    head_fc = [_stack_steps(fc_pieces)] if fc_pieces else []
    src_blocks, fc_blocks = list(head_src), list(head_fc)

    segment = head_z  # z_{start-n} .. z_{start-1}
    start = n
    while start < steps:
        length = min(n, steps - start)
        src = segment[:, :length]
        fc = flow_n(model.net, src, n, model.delta)
        mu, var = post.decode(ctx, slice(start, start + length), fc)
        z = draw(mu, var)
        src_blocks.append(src)
        fc_blocks.append(fc)
        z_pieces.append(z)
        mu_pieces.append(mu)
        if var is not None:
            var_pieces.append(var)
        segment = z
        start += length
    cat = lambda xs: xs[0] if len(xs) == 1 else ad.concat(xs, axis=1)  # noqa: E731
    return Rollout(
        z=cat(z_pieces),
        sources=cat(src_blocks) if src_blocks else None,
        forecasts=cat(fc_blocks) if fc_blocks else None,
        mu=cat(mu_pieces),
        var=cat(var_pieces) if var_pieces else None,
        n=n,
    )


def nstep_forecasts(net, z, n: int, delta: float) -> tuple[Tensor, Tensor]:
    """``(sources, forecasts)`` for steps ``1..T`` of a fixed trajectory
    ``z`` ``(B, T+1, d)``: ``F^1(z_{k-1})`` for ``k < n``, ``F^n(z_{k-n})``
    otherwise."""
    z = ad.as_tensor(z)
    steps = z.shape[1]
    srcs, fcs = [], []
    head = min(n, steps) - 1
    if head > 0:
        src = z[:, :head]
        srcs.append(src)
        fcs.append(flow_n(net, src, 1, delta))
    if n < steps:
        src = z[:, : steps - n]
        srcs.append(src)
        fcs.append(flow_n(net, src, n, delta))
    cat = lambda xs: xs[0] if len(xs) == 1 else ad.concat(xs, axis=1)  # noqa: E731
    return cat(srcs), cat(fcs)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _batched(z, values, mask):
    z = ad.as_tensor(z)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if z.ndim == 2:
        z = ad.reshape(z, (1,) + z.shape)
        values, mask = values[None], mask[None]
    return z, values, mask


def observation_sq_error(em: EmissionModel, z, values, mask) -> Tensor:
    """``sum over observed scalars of (H(z) - x)^2``; masked entries give
    exactly zero value and gradient."""
    xf, m = _mask_arrays(values, mask)
    return ad.sum(ad.square(ad.sub(em.observe(z), xf)) * Tensor(m))


def determ_terms(em, z, forecasts, values, mask, lam: float) -> Tensor:
    batch = z.shape[0]
    obs_term = observation_sq_error(em, z, values, mask)
    dyn_term = ad.sum(ad.square(ad.sub(z[:, 1:], forecasts)))
    return (obs_term * lam + dyn_term) * (1.0 / batch)


def map_terms(em, varnet, z, sources, forecasts, values, mask) -> Tensor:
    batch = z.shape[0]
    xf, m = _mask_arrays(values, mask)
    emission = ad.sum(gaussian_logpdf_terms(Tensor(xf), em.observe(z), em.obs_var) * Tensor(m))
    var = varnet.variance(sources, forecasts)
    transition = ad.sum(gaussian_logpdf_terms(z[:, 1:], forecasts, var))
    return (emission + transition) * (-1.0 / batch)


def loss_determ(model: Model, z, values, mask, n: int, lam: float = 1.0) -> Tensor:
    """``lam * ||H(z) - x||^2`` (observed entries) plus squared n-step
    forecast residuals of the fixed trajectory ``z``; averaged over the
    batch axis if present."""
    z, values, mask = _batched(z, values, mask)
    _, fcs = nstep_forecasts(model.net, z, n, model.delta)
    return determ_terms(model.emission, z, fcs, values, mask, lam)


def loss_map(model: Model, z, values, mask, n: int) -> Tensor:
    """Negative joint log density of ``(x, z)`` with a flat initial prior."""
    z, values, mask = _batched(z, values, mask)
    srcs, fcs = nstep_forecasts(model.net, z, n, model.delta)
    return map_terms(model.emission, model.varnet, z, srcs, fcs, values, mask)


def elbo_terms(model: Model, ro: Rollout, values, mask, z0_logpdf: Callable | None = None) -> Tensor:
    batch = ro.z.shape[0]
    joint = map_terms(model.emission, model.varnet, ro.z, ro.sources, ro.forecasts, values, mask) * (-float(batch))
    entropy = ad.sum(gaussian_logpdf_terms(ro.z, ro.mu, ro.var))
    total = joint - entropy
    if z0_logpdf is not None:
        total = total + z0_logpdf(ro.z[:, 0])
    return total * (-1.0 / batch)


def loss_elbo(
    model: Model,
    values,
    mask,
    n: int,
    rng: Rng,
    posterior=None,
    z0_logpdf: Callable | None = None,
) -> Tensor:
    """Single-sample reparameterised ``-ELBO``; ``z0_logpdf`` adds a proper
    initial-state prior (the default is flat)."""
    post = posterior or model.inference
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.ndim == 2:
        values, mask = values[None], mask[None]
    ctx = post.context(values, mask)
    ro = rollout(model, ctx, n, rng, post)
    if ro.var is None:
        raise ValueError("loss_elbo needs a Gaussian (variational) posterior")
    return elbo_terms(model, ro, values, mask, z0_logpdf)


def rollout_loss(model: Model, config: TrainConfig, values, mask, n: int, rng: Rng) -> Tensor:
    ctx = model.inference.context(values, mask)
    sample = rng if config.objective == "elbo" else None
    ro = rollout(model, ctx, n, sample)
    if ro.forecasts is None:
        raise ValueError("sequences need at least two steps")
    if config.objective == "determ":
        return determ_terms(model.emission, ro.z, ro.forecasts, values, mask, config.lam)
    if config.objective == "map":
        return map_terms(model.emission, model.varnet, ro.z, ro.sources, ro.forecasts, values, mask)
    return elbo_terms(model, ro, values, mask)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    iterations: int = 0
    config: dict = field(default_factory=dict)


TRACE_COLUMNS = ("epoch", "iteration", "n", "loss", "wall_time")


def write_trace(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in trace:
            writer.writerow(row)


def _make_optimizer(model: Model, config: TrainConfig, include_other: bool = True) -> Adam:
    lr_dyn = config.lr_dynamics if config.lr_dynamics is not None else config.lr
    groups = [(model.dynamics_parameters(), lr_dyn)]
    if include_other:
        groups.append((model.other_parameters(), config.lr))
    return Adam(groups, config.clip_norm)


def _guarded_step(opt: Adam, loss_fn: Callable[[], Tensor], config: TrainConfig, trace, row: dict, last_snap):
    """Evaluate, differentiate and update.  A non-finite loss (or a diverged
    rollout) undoes the previous update, halves every learning rate and
    retries, at most ``max_retries`` times."""
    for attempt in range(config.max_retries + 1):
        try:
            with ad.Tape() as tape:
                loss = loss_fn()
            value = loss.item()
        except (DivergenceError, ad.DomainError, FloatingPointError):
            value = float("nan")
        if np.isfinite(value):
            grads = tape.gradient(loss, opt.params)
            if all(np.all(np.isfinite(g)) for g in grads):
                snap = opt.snapshot()
                opt.step(grads)
                trace.append({**row, "loss": value})
                return snap
        if attempt == config.max_retries:
            break
        if last_snap is not None:
            opt.restore(last_snap)
        opt.scale_lr(0.5)
    raise TrainingError(
        f"non-finite loss at epoch {row['epoch']} iteration {row['iteration']} after {config.max_retries} retries",
        trace,
    )


def train_random_nstep(
    config: TrainConfig,
    dataset: Dataset,
    model: Model,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Joint gradient training of drift, variance, emission and inference
    parameters with a random forecast horizon ``n ~ U{1..n_step_max}`` per
    iteration."""
    if config.inference != "lstm" or model.inference is None:
        raise ValueError("train_random_nstep needs a recurrent inference model")
    if config.objective == "elbo" and not model.inference.variational:
        raise ValueError("the ELBO objective needs a variational inference network")
    if config.objective in ("map", "elbo") and model.varnet is None:
        raise ValueError(f"the {config.objective} objective needs a variance model")
    rng = Rng(config.seed, (7,))
    opt = _make_optimizer(model, config)
    trace: list[dict] = []
    t0 = time.perf_counter()
    values = dataset.values
    mask = dataset.mask
    n_seq = len(dataset)
    it = 0
    snap = None
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.child(epoch, 0).permutation(n_seq)
            n_rng = rng.child(epoch, 1)
            for b, lo in enumerate(range(0, n_seq, config.batch_size)):
                idx = np.sort(order[lo : lo + config.batch_size])
                n = int(n_rng.integers(1, config.n_step_max))
                sample_rng = rng.child(epoch, 2, b)
                xb, mb = values[idx], mask[idx]

                def loss_fn(xb=xb, mb=mb, n=n, sample_rng=sample_rng):
                    return rollout_loss(model, config, xb, mb, n, Rng(sample_rng.seed, sample_rng.key))

                row = {"epoch": epoch, "iteration": it, "n": n}
                snap = _guarded_step(opt, loss_fn, config, trace, row, snap)
                trace[-1]["wall_time"] = time.perf_counter() - t0
                if callback is not None:
                    callback(trace[-1])
                it += 1
    return TrainResult(trace, it, asdict(config))


def enks_initial_moments(model: Model, values: np.ndarray, mask: np.ndarray):
    """Initial ensemble moments per sequence: observed first values where
    available, otherwise the data mean, with the data variance as spread."""
    d = model.d_z
    if model.emission.operator != "identity":
        return np.zeros((len(values), d)), np.ones((len(values), d))
    xf = np.where(mask, values, 0.0)
    count = np.maximum(mask.sum(axis=(0, 1)), 1)
    mean = xf.sum(axis=(0, 1)) / count
    var = (np.where(mask, (values - mean) ** 2, 0.0)).sum(axis=(0, 1)) / count
    first = mask[:, 0]
    init_mean = np.where(first, xf[:, 0], mean)
    init_var = np.where(first, model.emission.obs_var, var)
    return init_mean, init_var


def e_step(model: Model, config: TrainConfig, dataset: Dataset, rng: Rng) -> np.ndarray:
    """Posterior means ``(S, T+1, d)`` from the ensemble smoother."""
    init_mean, init_var = enks_initial_moments(model, dataset.values, dataset.mask)
    with np.errstate(over="ignore", invalid="ignore"):
        ens = enks_smooth_batch(
            model.net, config.q_var, model.emission, dataset.values, dataset.mask, model.delta,
            config.n_members, rng, config.enks_lag, init_mean, init_var,
        )
    return np.stack([e.mean() for e in ens])


def train_em_enks(
    config: TrainConfig,
    dataset: Dataset,
    model: Model,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Alternate an EnKS E-step (posterior means ``z*``) with ``m_steps``
    clipped gradient steps on the drift holding ``z*`` fixed.  Each epoch is
    one EM cycle; every M-step iteration draws its own ``n``."""
    if config.inference != "enks":
        raise ValueError("train_em_enks needs inference='enks'")
    rng = Rng(config.seed, (8,))
    opt = _make_optimizer(model, config, include_other=False)
    trace: list[dict] = []
    t0 = time.perf_counter()
    it = 0
    snap = None
    varnet = model.varnet if model.varnet is not None else FixedVariance(np.ones(model.d_z))
    for cycle in range(config.epochs):
        zstar = e_step(model, config, dataset, rng.child(cycle, 0))
        if not np.all(np.isfinite(zstar)):
            raise TrainingError(f"ensemble smoother produced non-finite states in cycle {cycle}", trace)
        n_rng = rng.child(cycle, 1)
        for g in range(config.m_steps):
            n = int(n_rng.integers(1, config.n_step_max))

            def loss_fn(n=n):
                if config.objective == "map":
                    bundle = Model(model.net, model.emission, model.delta, varnet)
                    return loss_map(bundle, Tensor(zstar), dataset.values, dataset.mask, n)
                return loss_determ(model, Tensor(zstar), dataset.values, dataset.mask, n, config.lam)

            row = {"epoch": cycle, "iteration": it, "n": n}
            snap = _guarded_step(opt, loss_fn, config, trace, row, snap)
            trace[-1]["wall_time"] = time.perf_counter() - t0
            if callback is not None:
                callback(trace[-1])
            it += 1
    return TrainResult(trace, it, asdict(config))
