"""Forecast and reconstruction errors, synchronisation horizon, first
Lyapunov exponent, and test-set aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import adcore as ad
from .model import Model
from .observation import Dataset
from .prior import BiNN, flow_numpy
from .systems import DivergenceError, StateSequence, rk4_step, rhs_for, simulate, system_scalar_std

#: reference first Lyapunov exponents used for unit conversion
LAMBDA1_TRUE = {"l63": 0.91, "l96": 1.67, "l63s": 0.91}
EPS0 = 1e-8
REPORT_COLUMNS = ("e4", "rec", "pi05", "lambda1")


def _states(x) -> np.ndarray:
    return x.states if isinstance(x, StateSequence) else np.asarray(x, dtype=np.float64)


def forecast_rmse(pred, truth, n: int) -> float:
    """RMSE over steps ``1..n`` and all state components."""
    p, t = _states(pred), _states(truth)
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(p) < n + 1 or len(t) < n + 1:
        raise ValueError(f"forecast_rmse needs at least {n + 1} states, got {len(p)} and {len(t)}")
    if p.shape[1:] != t.shape[1:]:
        raise ValueError(f"state shapes differ: {p.shape[1:]} vs {t.shape[1:]}")
    return float(np.sqrt(np.mean((p[1 : n + 1] - t[1 : n + 1]) ** 2)))


def reconstruction_rmse(zstar, truth) -> float:
    """RMSE over all steps and components."""
    z, t = _states(zstar), _states(truth)
    if z.shape != t.shape:
        raise ValueError(f"reconstruction_rmse: shapes differ, {z.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((z - t) ** 2)))


def pi_half(pred, truth, system_std: float, lambda1_true: float, delta: float | None = None) -> float:
    """First step whose per-step RMSE exceeds ``system_std / 2``, in
    Lyapunov time units ``k * delta * lambda1_true``; the horizon of the
    series if the threshold is never crossed."""
    if not lambda1_true > 0:
        raise ValueError("lambda1_true must be positive")
    if delta is None:
        if not isinstance(pred, StateSequence):
            raise ValueError("pi_half needs delta for raw arrays")
        delta = pred.delta
    p, t = _states(pred), _states(truth)
    if p.shape != t.shape:
        raise ValueError(f"pi_half: shapes differ, {p.shape} vs {t.shape}")
    err = np.sqrt(np.mean((p - t) ** 2, axis=tuple(range(1, p.ndim))))
    over = np.flatnonzero(err > 0.5 * system_std)
    k = over[0] if over.size else len(p) - 1
    return float(k * delta * lambda1_true)


def _as_flow(flow, delta: float) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(flow, BiNN):
        return lambda z: flow_numpy(flow, z, 1, delta)
    if isinstance(flow, str):
        rhs = rhs_for(flow)
        return lambda z: rk4_step(rhs, z, delta)
    return flow


def lyapunov1(flow, z0, n_steps: int, delta: float, eps0: float = EPS0, direction=None) -> float:
    """Two-trajectory estimate with renormalisation after every step.

    ``flow`` is a one-step map on ``(..., d)`` arrays, a :class:`BiNN`, or a
    system name; ``z0`` may be batched, giving one estimate per start.
    """
    if n_steps < 1000:
        raise ValueError("lyapunov1 needs n_steps >= 1000")
    step = _as_flow(flow, delta)
    z = np.array(z0, dtype=np.float64)
    if direction is None:
        direction = np.ones_like(z)
    u = np.broadcast_to(np.asarray(direction, dtype=np.float64), z.shape)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    # fiducial and companion trajectories advance together in one array
    pair = np.stack([z, z + eps0 * u])
    total = np.zeros(z.shape[:-1])
    for k in range(n_steps):
        pair = step(pair)
        z = pair[0]
        if not np.all(np.isfinite(z)) or np.any(np.abs(z) > 1e6):
            raise DivergenceError(f"lyapunov1: fiducial trajectory diverged at step {k + 1}", k + 1)
        off = pair[1] - z
        dist = np.linalg.norm(off, axis=-1)
        dist = np.where(dist > 0, dist, eps0)  # a collapsed offset contributes ln(1) = 0
        total += np.log(dist / eps0)
        pair[1] = z + off * (eps0 / dist)[..., None]
    out = total / (n_steps * delta)
    return float(out) if out.ndim == 0 else out


@dataclass
class MetricReport:
    e_n: dict[int, tuple[float, float]]
    rec: tuple[float, float] | None
    pi_half: tuple[float, float]
    lambda1: tuple[float, float]
    system_lambda1_true: float
    n_sequences: int
    meta: dict = field(default_factory=dict)

    def row(self) -> dict[str, tuple[float, float] | None]:
        return {"e4": self.e_n.get(4), "rec": self.rec, "pi05": self.pi_half, "lambda1": self.lambda1}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["e_n"] = {str(k): list(v) for k, v in self.e_n.items()}
        d["table"] = {k: (None if v is None else {"mean": v[0], "std": v[1]}) for k, v in self.row().items()}
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            writer.writerow([_fmt(v) for v in self.row().values()])


def _fmt(v) -> str:
    return "" if v is None else f"{v[0]:.6g}±{v[1]:.6g}"


def _mean_std(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x)), float(np.std(x))


@dataclass
class EvalConfig:
    horizons: tuple[int, ...] = (1, 4)
    pi_horizon: int = 1000
    lyap_steps: int = 20000
    lyap_starts: int = 5
    forecast_from: str = "truth"  # or "posterior"
    seed: int = 0


def posterior_means(model: Model, dataset: Dataset, inference: str, config=None) -> np.ndarray:
    """Reconstructed states ``(S, T+1, d)`` from the configured inference."""
    if inference == "lstm":
        from .training import rollout

        with ad.no_record():
            ctx = model.inference.context(dataset.values, dataset.mask)
            return rollout(model, ctx, 1).mu.value
    if inference == "enks":
        from .adcore import Rng
        from .training import TrainConfig, e_step

        cfg = config or TrainConfig(inference="enks")
        return e_step(model, cfg, dataset, Rng(cfg.seed, (9,)))
    raise ValueError(f"unknown inference {inference!r}")


def evaluate(model: Model, inference: str | None, test: Dataset, config: EvalConfig = EvalConfig(), train_config=None) -> MetricReport:
    """Per-sequence metrics aggregated as mean and standard deviation.

    Forecast errors start from the true initial state (twin experiment) or
    the posterior mean; the synchronisation horizon compares a free model
    run against the true system over ``pi_horizon`` steps; the Lyapunov
    exponent uses ``lyap_starts`` start states from the test set.
    """
    if len(test) == 0:
        raise ValueError("evaluate: empty test set")
    system = test.system
    lam_true = LAMBDA1_TRUE[system]
    sys_std = system_scalar_std(system)
    truth = test.states
    delta = test.delta
    zstar = None
    if inference is not None:
        zstar = posterior_means(model, test, inference, train_config)
    if config.forecast_from == "posterior":
        if zstar is None:
            raise ValueError("forecast_from='posterior' needs an inference engine")
        starts = zstar[:, 0]
    else:
        starts = truth[:, 0]

    hmax = max(max(config.horizons), config.pi_horizon)
    with ad.no_record():
        pred = [starts]
        z = starts
        diverged_at = None
        for k in range(hmax):
            try:
                z = flow_numpy(model.net, z, 1, delta)
            except DivergenceError:
                diverged_at = k + 1
                break
            pred.append(z)
        pred = np.stack(pred, axis=1)
    if diverged_at is not None:
        # the model left the admissible region: hold the last valid state
        pad = np.repeat(pred[:, -1:], hmax + 1 - pred.shape[1], axis=1)
        pred = np.concatenate([pred, pad], axis=1)

    e_n = {}
    for n in config.horizons:
        if n + 1 > truth.shape[1]:
            raise ValueError(f"test sequences are shorter than the horizon {n}")
        e_n[n] = _mean_std([forecast_rmse(pred[i], truth[i], n) for i in range(len(test))])

    rec = None
    if zstar is not None:
        rec = _mean_std([reconstruction_rmse(zstar[i], truth[i]) for i in range(len(test))])

    if system == "l63s":
        pis = [float("nan")]
    else:
        true_long = simulate(system, truth[:, 0], config.pi_horizon, delta).states.swapaxes(0, 1)
        pis = [
            pi_half(pred[i, : config.pi_horizon + 1], true_long[i], sys_std, lam_true, delta)
            for i in range(len(test))
        ]

    n_starts = min(config.lyap_starts, len(test))
    try:
        lams = lyapunov1(model.net, truth[:n_starts, -1], config.lyap_steps, delta)
    except DivergenceError:
        lams = np.full(n_starts, np.nan)
    return MetricReport(
        e_n=e_n,
        rec=rec,
        pi_half=_mean_std(pis),
        lambda1=_mean_std(lams),
        system_lambda1_true=lam_true,
        n_sequences=len(test),
        meta={"forecast_from": config.forecast_from, "pred_diverged_at": diverged_at},
    )
