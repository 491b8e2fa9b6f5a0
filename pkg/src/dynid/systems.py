"""Benchmark dynamical systems, reference integrators and dataset generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .adcore import Rng, Tensor

SYSTEMS = ("l63", "l96", "l63s")
DIVERGENCE_BOUND = 1e6

#: default time steps per system
DEFAULT_DELTA = {"l63": 0.01, "l96": 0.05, "l63s": 0.01}


class DivergenceError(RuntimeError):
    """A trajectory left the admissible region or produced non-finite values."""

    def __init__(self, message: str, step: int | None = None, last_valid=None):
        super().__init__(message)
        self.step = step
        self.last_valid = last_valid


@dataclass(frozen=True)
class L63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


@dataclass(frozen=True)
class L96Params:
    n_z: int = 40
    forcing: float = 8.0

    def __post_init__(self):
        if self.n_z < 4:
            raise ValueError(f"L96 needs n_z >= 4, got {self.n_z}")


@dataclass(frozen=True)
class L63sParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    gamma: float = 5.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


def default_params(system: str):
    if system == "l63":
        return L63Params()
    if system == "l96":
        return L96Params()
    if system == "l63s":
        return L63sParams()
    raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")


@dataclass
class StateSequence:
    """States ``z_0..z_T`` sampled every ``delta`` time units.

    ``states`` has shape ``(T+1, d)``; batched rollouts use ``(T+1, B, d)``.
    """

    states: np.ndarray
    delta: float
    system_tag: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[-1]


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------


def l63_rhs(z, p: L63Params = L63Params()) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    x, y, w = z[..., 0], z[..., 1], z[..., 2]
    return np.stack(
        [p.sigma * (y - x), (p.rho - w) * x - y, x * y - p.beta * w], axis=-1
    )


def l96_rhs(z, p: L96Params = L96Params()) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != p.n_z:
        raise ValueError(f"l96_rhs: state has length {z.shape[-1]}, expected {p.n_z}")
    n = p.n_z
    idx = np.arange(n)
    # neighbours z[i+1], z[i-2], z[i-1] on the ring
    ahead, back2, back1 = z[..., (idx + 1) % n], z[..., (idx - 2) % n], z[..., (idx - 1) % n]
    return (ahead - back2) * back1 - z + p.forcing


def l63s_drift(z, p: L63sParams = L63sParams()) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    damp = np.array([4.0, 4.0, 8.0]) / (2.0 * p.gamma)
    return l63_rhs(z, L63Params(p.sigma, p.rho, p.beta)) - damp * z


def l63s_diffusion(z, p: L63sParams = L63sParams()) -> np.ndarray:
    """Coefficients of the single Brownian increment for each component."""
    z = np.asarray(z, dtype=np.float64)
    root = np.sqrt(p.gamma)
    return np.stack([np.zeros_like(z[..., 0]), (p.rho - z[..., 2]) / root, z[..., 1] / root], axis=-1)


def rhs_for(system: str, params=None) -> Callable:
    params = params or default_params(system)
    if system == "l63":
        return lambda z: l63_rhs(z, params)
    if system == "l96":
        return lambda z: l96_rhs(z, params)
    if system == "l63s":
        return lambda z: l63s_drift(z, params)
    raise ValueError(f"unknown system {system!r}")


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------


def _finite(x) -> bool:
    v = x.value if isinstance(x, Tensor) else x
    return bool(np.all(np.isfinite(v)))


def rk4_step(rhs: Callable, z, delta: float, check: bool = True):
    """One classical Runge-Kutta step.

    Works for numpy arrays and for :class:`Tensor` operands (the arithmetic is
    recorded on an active tape in the latter case).
    """
    if not delta > 0:
        raise ValueError(f"rk4_step: delta must be positive, got {delta}")
    half = 0.5 * delta
    k1 = rhs(z)
    if check and not _finite(k1):
        raise DivergenceError("rk4_step: non-finite value at stage k1")
    k2 = rhs(z + k1 * half)
    if check and not _finite(k2):
        raise DivergenceError("rk4_step: non-finite value at stage k2")
    k3 = rhs(z + k2 * half)
    if check and not _finite(k3):
        raise DivergenceError("rk4_step: non-finite value at stage k3")
    k4 = rhs(z + k3 * delta)
    if check and not _finite(k4):
        raise DivergenceError("rk4_step: non-finite value at stage k4")
    return z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (delta / 6.0)


def euler_maruyama_step(p: L63sParams, z, delta: float, rng: Rng | None = None, xi=None) -> np.ndarray:
    """One Ito-Euler step of the stochastic Lorenz-63 system.

    A single scalar Brownian increment per trajectory drives components 2 and 3.
    ``xi`` overrides the standard-normal draw (shape ``z.shape[:-1]``).
    """
    if not delta > 0:
        raise ValueError(f"euler_maruyama_step: delta must be positive, got {delta}")
    z = np.asarray(z, dtype=np.float64)
    if xi is None:
        if rng is None:
            raise ValueError("euler_maruyama_step needs rng or xi")
        xi = rng.normal(z.shape[:-1])
    xi = np.asarray(xi, dtype=np.float64)[..., None]
    return z + l63s_drift(z, p) * delta + l63s_diffusion(z, p) * np.sqrt(delta) * xi


def simulate(
    system: str,
    z0,
    n_steps: int,
    delta: float,
    rng: Rng | None = None,
    params=None,
) -> StateSequence:
    """Integrate a benchmark system; ``z0`` may carry leading batch dimensions."""
    if system not in SYSTEMS:
        raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")
    params = params or default_params(system)
    stochastic = system == "l63s"
    if stochastic and rng is None:
        raise ValueError("simulate: l63s is stochastic and needs an rng")
    if not stochastic and rng is not None:
        raise ValueError(f"simulate: {system} is deterministic; pass rng=None")
    z = np.array(z0, dtype=np.float64)
    out = np.empty((n_steps + 1,) + z.shape)
    out[0] = z
    rhs = None if stochastic else rhs_for(system, params)
    for k in range(1, n_steps + 1):
        if stochastic:
            z = euler_maruyama_step(params, z, delta, rng)
        else:
            try:
                z = rk4_step(rhs, z, delta)
            except DivergenceError as err:
                raise DivergenceError(f"{system} diverged at step {k}: {err}", k, out[k - 1]) from None
        if not np.all(np.abs(z) <= DIVERGENCE_BOUND):
            raise DivergenceError(f"{system} diverged at step {k}", k, out[k - 1])
        out[k] = z
    return StateSequence(out, delta, system)


# ---------------------------------------------------------------------------
# reference statistics
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _reference(system: str, params, delta: float) -> np.ndarray:
    if system == "l96":
        z0 = np.full(params.n_z, params.forcing)
        z0[0] += 0.01
        spin, n = 2000, 20000
    else:
        z0 = np.array([1.0, 1.0, 1.0])
        spin, n = 1000, 50000
    rng = Rng(20240601) if system == "l63s" else None
    seq = simulate(system, z0, spin + n, delta, rng=rng, params=params)
    states = seq.states[spin:]
    states.setflags(write=False)
    return states


def reference_run(system: str, params=None, delta: float | None = None) -> np.ndarray:
    """Long on-attractor run (cached per system/params/delta)."""
    params = params or default_params(system)
    delta = delta or DEFAULT_DELTA[system]
    return _reference(system, params, float(delta))


def system_std(system: str, params=None, delta: float | None = None) -> np.ndarray:
    """Per-component long-run standard deviation."""
    return reference_run(system, params, delta).std(axis=0)


def system_scalar_std(system: str, params=None, delta: float | None = None) -> float:
    """Root-mean-square of the per-component standard deviations."""
    return float(np.sqrt(np.mean(system_std(system, params, delta) ** 2)))


def bounding_box(system: str, params=None, delta: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    ref = reference_run(system, params, delta)
    return ref.min(axis=0), ref.max(axis=0)


def make_dataset(
    system: str,
    n_sequences: int,
    seq_len: int,
    delta: float,
    burn_in: int,
    rng: Rng,
    params=None,
) -> list[StateSequence]:
    """Draw initial conditions in the attractor's bounding box, spin up, record.

    Each returned sequence holds ``seq_len`` states.
    """
    if n_sequences < 1 or seq_len < 1 or burn_in < 0:
        raise ValueError("make_dataset: counts must be positive")
    params = params or default_params(system)
    lo, hi = bounding_box(system, params, DEFAULT_DELTA[system])
    z0 = rng.uniform(lo, hi, size=(n_sequences, lo.size))
    stochastic = system == "l63s"
    run = simulate(system, z0, burn_in + seq_len - 1, delta, rng=rng if stochastic else None, params=params)
    states = run.states[burn_in:]
    return [
        StateSequence(states[:, i].copy(), delta, system, {"index": i}) for i in range(n_sequences)
    ]
