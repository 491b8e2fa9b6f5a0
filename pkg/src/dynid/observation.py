"""Observation operators, noise/masking protocol and dataset persistence."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre

from . import systems
from ._container import ContainerError, read_container, write_container
from .adcore import Rng
from .systems import StateSequence

OPERATORS = ("identity", "legendre", "learned")
SENTINEL = np.nan
DATASET_KIND = "dataset"

#: noise ratios evaluated for the noisy L63 benchmark
NOISE_RATIOS = (0.085, 0.167, 0.333, 0.667)


@dataclass
class ObservationSeries:
    """Observed values ``x_0..x_T`` with a per-scalar availability mask.

    Masked entries hold :data:`SENTINEL` (NaN); consumers must go through
    :meth:`filled` or the mask and never read them directly.
    """

    values: np.ndarray
    mask: np.ndarray
    delta: float
    r: float = 0.0
    operator_tag: str = "identity"
    noise_var: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError(f"values {self.values.shape} and mask {self.mask.shape} differ in shape")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("observed entries must be finite")
        if self.operator_tag not in OPERATORS:
            raise ValueError(f"unknown operator tag {self.operator_tag!r}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.mask, self.values, fill)


# ---------------------------------------------------------------------------
# observation operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LegendreOperator:
    """First six Legendre polynomials sampled on a uniform grid over [-1, 1]."""

    n_points: int = 128

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n_points)

    @property
    def modes(self) -> np.ndarray:
        return _legendre_modes(self.n_points)


@lru_cache(maxsize=8)
def _legendre_modes(n_points: int) -> np.ndarray:
    grid = np.linspace(-1.0, 1.0, n_points)
    modes = np.stack([legendre.legval(grid, np.eye(6)[i]) for i in range(6)], axis=1)
    modes.setflags(write=False)
    return modes


def legendre_observe(z, op: LegendreOperator = LegendreOperator()) -> np.ndarray:
    """``x = modes[:, :3] z + modes[:, 3:] z**3`` (batched over leading axes)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != 3:
        raise ValueError(f"legendre_observe expects 3-dimensional states, got {z.shape}")
    m = op.modes
    return z @ m[:, :3].T + (z**3) @ m[:, 3:].T


# ---------------------------------------------------------------------------
# noise and masking
# ---------------------------------------------------------------------------


def add_noise(
    seq: StateSequence | np.ndarray,
    r: float,
    rng: Rng,
    signal_std: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Additive Gaussian noise with std ``r`` times the per-component signal std.

    ``signal_std`` defaults to the long-run std of the sequence's system.
    Returns the noisy values and the diagonal noise variance used.
    """
    if r < 0:
        raise ValueError(f"noise ratio must be nonnegative, got {r}")
    states = seq.states if isinstance(seq, StateSequence) else np.asarray(seq, dtype=np.float64)
    if signal_std is None:
        if not isinstance(seq, StateSequence) or not seq.system_tag:
            raise ValueError("add_noise needs signal_std for untagged data")
        signal_std = systems.system_std(seq.system_tag)
    std = r * np.asarray(signal_std, dtype=np.float64)
    if r == 0:
        return states.copy(), np.zeros_like(std)
    return states + std * rng.normal(states.shape), std**2


def apply_mask(
    values: np.ndarray,
    missing_rate: float,
    rng: Rng,
    delta: float = 1.0,
    r: float = 0.0,
    operator_tag: str = "identity",
    noise_var: np.ndarray | None = None,
    max_tries: int = 1000,
) -> ObservationSeries:
    """Independently hide each scalar with probability ``missing_rate``.

    Every component is observed at least once; otherwise the mask is redrawn.
    """
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError(f"missing_rate must lie in [0, 1), got {missing_rate}")
    values = np.asarray(values, dtype=np.float64)
    for _ in range(max_tries):
        mask = ~rng.bernoulli(missing_rate, values.shape)
        if missing_rate == 0.0 or np.all(mask.any(axis=0)):
            break
    else:
        raise RuntimeError("apply_mask: could not observe every component at least once")
    return ObservationSeries(np.where(mask, values, SENTINEL), mask, delta, r, operator_tag, noise_var)


@lru_cache(maxsize=None)
def _legendre_signal_std(n_points: int) -> np.ndarray:
    ref = systems.reference_run("l63")
    return legendre_observe(ref, LegendreOperator(n_points)).std(axis=0)


def observe_sequence(
    seq: StateSequence,
    r: float,
    missing_rate: float,
    rng: Rng,
    operator_tag: str = "identity",
) -> ObservationSeries:
    """Full protocol: operator, additive noise, then masking."""
    if operator_tag == "legendre":
        clean = legendre_observe(seq.states)
        noisy, noise_var = add_noise(clean, r, rng, signal_std=_legendre_signal_std(clean.shape[-1]))
    elif operator_tag == "identity":
        noisy, noise_var = add_noise(seq, r, rng)
    else:
        raise ValueError(f"cannot generate data with operator {operator_tag!r}")
    return apply_mask(noisy, missing_rate, rng, seq.delta, r, operator_tag, noise_var)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """A set of equally long sequences with their observations.

    ``states``: (S, T+1, d_z); ``values``/``mask``: (S, T+1, d_x).
    """

    system: str
    delta: float
    states: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    r: float = 0.0
    missing_rate: float = 0.0
    operator_tag: str = "identity"
    noise_var: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.states.shape[0]

    def sequence(self, i: int) -> StateSequence:
        return StateSequence(self.states[i], self.delta, self.system)

    def observations(self, i: int) -> ObservationSeries:
        return ObservationSeries(self.values[i], self.mask[i], self.delta, self.r, self.operator_tag, self.noise_var)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.mask, self.values, fill)

    def subset(self, idx) -> "Dataset":
        idx = np.atleast_1d(idx)
        return Dataset(
            self.system, self.delta, self.states[idx], self.values[idx], self.mask[idx],
            self.r, self.missing_rate, self.operator_tag, self.noise_var, dict(self.meta),
        )


def build_dataset(
    system: str,
    n_sequences: int,
    seq_len: int,
    r: float,
    missing_rate: float,
    rng: Rng,
    delta: float | None = None,
    burn_in: int = 2000,
    operator_tag: str = "identity",
) -> Dataset:
    """Simulate sequences and observe them under the noise/masking protocol."""
    delta = delta or systems.DEFAULT_DELTA[system]
    seqs = systems.make_dataset(system, n_sequences, seq_len, delta, burn_in, rng.child(0))
    obs_rng = rng.child(1)
    obs = [observe_sequence(s, r, missing_rate, obs_rng, operator_tag) for s in seqs]
    return Dataset(
        system=system,
        delta=delta,
        states=np.stack([s.states for s in seqs]),
        values=np.stack([o.values for o in obs]),
        mask=np.stack([o.mask for o in obs]),
        r=r,
        missing_rate=missing_rate,
        operator_tag=operator_tag,
        noise_var=obs[0].noise_var,
        meta={"seed": rng.seed, "key": list(rng.key), "burn_in": burn_in},
    )


def save_dataset(path, ds: Dataset) -> None:
    meta = {
        "system": ds.system,
        "delta": ds.delta,
        "r": ds.r,
        "missing_rate": ds.missing_rate,
        "operator_tag": ds.operator_tag,
        "extra": ds.meta,
    }
    blocks = {"states": ds.states, "values": ds.filled(0.0), "mask": ds.mask}
    if ds.noise_var is not None:
        blocks["noise_var"] = ds.noise_var
    write_container(path, DATASET_KIND, meta, blocks)


def load_dataset(path) -> Dataset:
    meta, blocks = read_container(path, DATASET_KIND)
    for name in ("states", "values", "mask"):
        if name not in blocks:
            raise ContainerError(f"{path}: missing {name!r} section")
    mask = blocks["mask"]
    if mask.shape != blocks["values"].shape:
        raise ContainerError(f"{path}: 'mask' section shape does not match 'values'")
    try:
        return Dataset(
            system=meta["system"],
            delta=float(meta["delta"]),
            states=blocks["states"],
            values=np.where(mask, blocks["values"], SENTINEL),
            mask=mask,
            r=float(meta["r"]),
            missing_rate=float(meta["missing_rate"]),
            operator_tag=meta["operator_tag"],
            noise_var=blocks.get("noise_var"),
            meta=meta.get("extra", {}),
        )
    except KeyError as err:
        raise ContainerError(f"{path}: header lacks key {err}") from None
