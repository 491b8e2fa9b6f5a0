"""Generative model: bilinear drift, RK4 flow, model-error variance, emission."""

from __future__ import annotations

import numpy as np

from . import adcore as ad
from ._container import ContainerError, read_container, write_container
from .adcore import Rng, Tensor
from .layers import MLP, Module
from .observation import LegendreOperator
from .systems import DIVERGENCE_BOUND, DivergenceError, L63Params, L63sParams, L96Params, StateSequence, rk4_step

LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR = 1e-6
RAW_CLAMP = 10.0


def positive_variance(raw, floor: float = VAR_FLOOR, unit=1.0) -> Tensor:
    """Clamped exponential: ``unit * exp(clip(raw, -10, 10)) + floor``."""
    v = ad.exp(ad.clip(raw, -RAW_CLAMP, RAW_CLAMP))
    if not (np.isscalar(unit) and unit == 1.0):
        v = v * ad.Tensor(unit)
    return v + floor


def gaussian_logpdf_terms(x, mean, var) -> Tensor:
    """Elementwise ``log N(x; mean, var)``."""
    var = ad.as_tensor(var)
    return (ad.log(var) + LOG_2PI + ad.square(ad.sub(x, mean)) / var) * -0.5


# ---------------------------------------------------------------------------
# drift network
# ---------------------------------------------------------------------------


class BiNN(Module):
    """Second-order polynomial drift ``f(z) = z A + b + [z^T B_k z]_k``.

    ``dense`` mode: ``A`` is ``(d, d)`` acting on the right (input, output),
    ``B`` holds ``d`` forms of size ``d x d``.

    ``circular`` mode shares one stencil across the ring of ``d`` sites: with
    ``s_i = (z_{i-r}, ..., z_{i+r})``, ``f_i = s_i a + b + s_i^T C s_i``.

    Optional fixed ``shift``/``scale`` precondition the weights: the
    polynomial acts on ``u = (z - shift) / scale`` and its output is
    multiplied by ``scale``.  The drift is still a second-order polynomial in
    ``z``; only the conditioning of the weights changes.  Circular mode needs
    scalar ``shift``/``scale`` to stay shift-equivariant.
    """

    def __init__(
        self,
        dim: int,
        mode: str = "dense",
        rng: Rng | None = None,
        init_std: float = 0.01,
        radius: int = 2,
        shift=0.0,
        scale=1.0,
    ):
        if mode not in ("dense", "circular"):
            raise ValueError(f"unknown BiNN mode {mode!r}")
        self.dim, self.mode, self.radius = dim, mode, radius
        self.shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (dim,)).copy()
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (dim,)).copy()
        if np.any(self.scale <= 0):
            raise ValueError("BiNN scale must be positive")
        if mode == "circular" and (np.ptp(self.shift) > 0 or np.ptp(self.scale) > 0):
            raise ValueError("circular BiNN needs a scalar shift and scale")
        self._plain = not (np.any(self.shift) or np.any(self.scale != 1.0))
        rng = rng or Rng(0)
        if mode == "dense":
            shapes = {"lin_w": (dim, dim), "lin_b": (dim,), "bil_w": (dim, dim, dim)}
        else:
            width = 2 * radius + 1
            shapes = {"lin_w": (width, 1), "lin_b": (1,), "bil_w": (1, width, width)}
        for i, (name, shape) in enumerate(shapes.items()):
            setattr(self, name, ad.param(init_std * rng.child(i).normal(shape)))

    @property
    def offsets(self) -> range:
        return range(-self.radius, self.radius + 1)

    def drift(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.shape[-1] != self.dim:
            raise ad.ShapeError(f"binn_drift: state dimension {z.shape[-1]} != model dimension {self.dim}")
        if not self._plain:
            z = ad.sub(z, self.shift) * Tensor(1.0 / self.scale)
        if self.mode == "dense":
            out = ad.matmul(z, self.lin_w) + self.lin_b + ad.bilinear(z, self.bil_w, z)
        else:
            stencil = ad.stack([ad.roll(z, -o, axis=-1) for o in self.offsets], axis=-1)
            out = ad.matmul(stencil, self.lin_w) + ad.bilinear(stencil, self.bil_w, stencil) + self.lin_b
            out = ad.reshape(out, z.shape)
        return out if self._plain else out * Tensor(self.scale)

    __call__ = drift

    def drift_numpy(self, z: np.ndarray) -> np.ndarray:
        with ad.no_record():
            return self.drift(z).value

    def set_polynomial(self, lin, bias, bil) -> None:
        """Set weights so the drift equals ``z lin + bias + [z^T bil_k z]_k``
        in raw coordinates (dense mode), accounting for the preconditioning."""
        if self.mode != "dense":
            raise ValueError("set_polynomial supports dense mode only")
        lin, bias, bil = (np.asarray(a, dtype=np.float64) for a in (lin, bias, bil))
        m, s = self.shift, self.scale
        sym = bil + bil.transpose(0, 2, 1)
        # substitute z = m + s*u and divide output k by s_k
        new_lin = s[:, None] * (lin + np.einsum("kij,j->ik", sym, m)) / s[None, :]
        new_bias = (m @ lin + bias + np.einsum("i,kij,j->k", m, bil, m)) / s
        new_bil = bil * s[None, :, None] * s[None, None, :] / s[:, None, None]
        self.lin_w.value = new_lin
        self.lin_b.value = new_bias
        self.bil_w.value = new_bil

    def polynomial(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw-coordinate ``(lin, bias, bil)`` of the drift (dense mode);
        inverse of :meth:`set_polynomial`."""
        if self.mode != "dense":
            raise ValueError("polynomial supports dense mode only")
        m, s = self.shift, self.scale
        w, c, bn = self.lin_w.value, self.lin_b.value, self.bil_w.value
        bil = bn * s[:, None, None] / (s[None, :, None] * s[None, None, :])
        sym = bil + bil.transpose(0, 2, 1)
        lin = w * s[None, :] / s[:, None] - np.einsum("kij,j->ik", sym, m)
        bias = s * c - m @ (w * s[None, :] / s[:, None]) + np.einsum("i,kij,j->k", m, bil, m)
        return lin, bias, bil


def binn_drift(net: BiNN, z) -> Tensor:
    return net.drift(z)


def l63_binn(p: L63Params | L63sParams = L63Params()) -> BiNN:
    """Dense BiNN whose drift equals the (optionally damped) Lorenz-63 field."""
    net = BiNN(3, init_std=0.0)
    damp = np.zeros(3)
    if isinstance(p, L63sParams):
        damp = np.array([4.0, 4.0, 8.0]) / (2.0 * p.gamma)
    a = np.array(
        [[-p.sigma - damp[0], p.sigma, 0.0], [p.rho, -1.0 - damp[1], 0.0], [0.0, 0.0, -p.beta - damp[2]]]
    )
    net.lin_w.value = a.T.copy()
    bil = np.zeros((3, 3, 3))
    bil[1, 0, 2] = -1.0  # -z1 z3 in dz2/dt
    bil[2, 0, 1] = 1.0  # z1 z2 in dz3/dt
    net.bil_w.value = bil
    return net


def l96_binn(p: L96Params = L96Params()) -> BiNN:
    """Circular BiNN whose drift equals the Lorenz-96 field."""
    net = BiNN(p.n_z, mode="circular", init_std=0.0, radius=2)
    r = net.radius
    lin = np.zeros((2 * r + 1, 1))
    lin[r] = -1.0
    bil = np.zeros((1, 2 * r + 1, 2 * r + 1))
    bil[0, r + 1, r - 1] = 1.0  # z_{i+1} z_{i-1}
    bil[0, r - 2, r - 1] = -1.0  # -z_{i-2} z_{i-1}
    net.lin_w.value = lin
    net.lin_b.value = np.array([p.forcing])
    net.bil_w.value = bil
    return net


def flow_n(net: BiNN, z, n: int, delta: float) -> Tensor:
    """``n`` composed RK4 steps of size ``delta`` under the network drift."""
    if n < 1:
        raise ValueError(f"flow_n: n must be >= 1, got {n}")
    z = ad.as_tensor(z)
    for step in range(n):
        z = rk4_step(net.drift, z, delta)
        if not np.all(np.abs(z.value) <= DIVERGENCE_BOUND):
            raise DivergenceError(f"flow diverged at composed step {step + 1}", step + 1)
    return z


def flow_numpy(net: BiNN, z: np.ndarray, n: int, delta: float) -> np.ndarray:
    with ad.no_record():
        return flow_n(net, z, n, delta).value


# ---------------------------------------------------------------------------
# model-error variance
# ---------------------------------------------------------------------------


class VarDynNet(Module):
    """Diagonal model-error variance from ``(z_prev, forecast)``.

    Inputs are standardised with fixed ``shift``/``scale`` (per state
    component) before a tanh MLP; the raw output goes through
    :func:`positive_variance` in units of ``scale**2``.
    """

    def __init__(self, dim: int, rng: Rng | None = None, hidden: int | None = None, shift=0.0, scale=1.0):
        rng = rng or Rng(0)
        hidden = hidden or 4 * dim
        self.dim = dim
        self.shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), (dim,)).copy()
        self.scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (dim,)).copy()
        self.mlp = MLP([2 * dim, hidden, hidden, dim], "tanh", rng)

    def variance(self, z_prev, forecast) -> Tensor:
        u = ad.concat([ad.sub(z_prev, self.shift), ad.sub(forecast, self.shift)], axis=-1)
        u = u * Tensor(np.concatenate([1.0 / self.scale, 1.0 / self.scale]))
        return positive_variance(self.mlp(u), unit=self.scale**2)

    __call__ = variance


class FixedVariance:
    """Constant diagonal variance with the :class:`VarDynNet` call signature."""

    def __init__(self, var):
        self.var = np.asarray(var, dtype=np.float64)
        if np.any(self.var <= 0):
            raise ValueError("FixedVariance entries must be positive")

    def variance(self, z_prev, forecast) -> Tensor:
        shape = ad.as_tensor(forecast).shape
        return Tensor(np.broadcast_to(self.var, shape))

    __call__ = variance

    def parameters(self) -> list:
        return []


class L63sVariance:
    """Ground-truth one-step variance of the stochastic L63 increments."""

    def __init__(self, p: L63sParams, delta: float, floor: float = VAR_FLOOR):
        self.p, self.delta, self.floor = p, delta, floor

    def variance(self, z_prev, forecast) -> Tensor:
        z = ad.as_tensor(z_prev).value
        d = np.stack(
            [np.zeros_like(z[..., 0]), (self.p.rho - z[..., 2]) ** 2, z[..., 1] ** 2], axis=-1
        ) * (self.delta / self.p.gamma)
        return Tensor(d + self.floor)

    __call__ = variance

    def parameters(self) -> list:
        return []


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


class EmissionModel(Module):
    """Gaussian emission ``x ~ N(H(z), diag(R))`` with fixed ``R``."""

    def __init__(self, operator: str, obs_var, d_z: int = 3, rng: Rng | None = None, sizes=None):
        if operator not in ("identity", "legendre", "learned"):
            raise ValueError(f"unknown observation operator {operator!r}")
        self.operator = operator
        self.obs_var = np.asarray(obs_var, dtype=np.float64)
        if np.any(self.obs_var <= 0):
            raise ValueError("observation variances must be positive")
        if operator == "learned":
            sizes = sizes or [d_z, 32, 64, 128]
            self.h_net = MLP(sizes, "sigmoid", rng or Rng(0))
        elif operator == "legendre":
            self._modes = Tensor(LegendreOperator().modes.T.copy())

    def observe(self, z) -> Tensor:
        if self.operator == "identity":
            return ad.as_tensor(z)
        if self.operator == "legendre":
            z = ad.as_tensor(z)
            return ad.matmul(ad.concat([z, z * ad.square(z)], axis=-1), self._modes)
        return self.h_net(z)

    __call__ = observe


def _mask_arrays(x, mask):
    mask = np.asarray(mask, dtype=bool)
    x = np.where(mask, np.asarray(x, dtype=np.float64), 0.0)
    return x, mask.astype(np.float64)


def transition_logpdf(net: BiNN, varnet, z_prev, z_next, n: int, delta: float) -> Tensor:
    """``log N(z_next; F^n(z_prev), diag(d))`` summed over all entries."""
    mean = flow_n(net, z_prev, n, delta)
    var = varnet.variance(z_prev, mean)
    return ad.sum(gaussian_logpdf_terms(z_next, mean, var))


def emission_logpdf(em: EmissionModel, z, x, mask) -> Tensor:
    """Sum over observed scalars of ``log N(x_j; H(z)_j, R_jj)``; masked
    entries contribute exactly zero value and zero gradient."""
    xf, m = _mask_arrays(x, mask)
    terms = gaussian_logpdf_terms(Tensor(xf), em.observe(z), em.obs_var)
    return ad.sum(terms * Tensor(m))


# ---------------------------------------------------------------------------
# stochastic simulation
# ---------------------------------------------------------------------------


def generate_stochastic(
    net: BiNN,
    varnet,
    z0,
    n_steps: int,
    delta: float,
    rng: Rng,
    variance_scale: float = 1.0,
) -> StateSequence:
    """Ancestral sampling ``z <- N(F^1(z), diag(varnet(z, F^1(z))))``.

    ``variance_scale=0`` gives the deterministic flow rollout exactly.
    ``z0`` may be batched; states come back as ``(n_steps+1, ..., d)``.
    """
    if n_steps < 1:
        raise ValueError("generate_stochastic needs n_steps >= 1")
    z = np.array(z0, dtype=np.float64)
    out = np.empty((n_steps + 1,) + z.shape)
    out[0] = z
    with ad.no_record():
        for k in range(1, n_steps + 1):
            try:
                mu = flow_n(net, z, 1, delta)
            except DivergenceError as err:
                raise DivergenceError(f"stochastic rollout diverged at step {k}: {err}", k, out[k - 1]) from None
            if variance_scale > 0:
                d = varnet.variance(Tensor(z), mu).value
                z = mu.value + np.sqrt(variance_scale * d) * rng.normal(z.shape)
            else:
                z = mu.value
            if not np.all(np.abs(z) <= DIVERGENCE_BOUND):
                raise DivergenceError(f"stochastic rollout diverged at step {k}", k, out[k - 1])
            out[k] = z
    return StateSequence(out, delta, "generated")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_KIND = "checkpoint"


def save_checkpoint(path, modules: dict[str, Module], meta: dict) -> None:
    """Write named module states plus a JSON header (architecture, delta, ...)."""
    blocks = {}
    shapes = {}
    for prefix, mod in modules.items():
        for name, val in mod.state_dict().items():
            key = f"{prefix}/{name}"
            blocks[key] = val
            shapes[key] = list(val.shape)
    write_container(path, CHECKPOINT_KIND, {"meta": meta, "shapes": shapes}, blocks)


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    header, blocks = read_container(path, CHECKPOINT_KIND)
    states: dict[str, dict[str, np.ndarray]] = {}
    for key, val in blocks.items():
        prefix, _, name = key.partition("/")
        if list(val.shape) != header["shapes"].get(key):
            raise ContainerError(f"{path}: shape mismatch in {key!r} section")
        states.setdefault(prefix, {})[name] = val
    return header["meta"], states
