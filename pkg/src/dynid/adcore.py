"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array.  While a :class:`Tape` is active, every
primitive whose inputs require gradients appends a node (output, parents,
vector-Jacobian product) to the tape; :meth:`Tape.gradient` replays the nodes
in reverse creation order, which is a valid reverse topological order because
a node can only reference tensors created before it.

Outside a tape, primitives are plain numpy evaluations and nothing is
recorded, so the same model code serves training and fast inference.

Broadcasting follows numpy semantics for the elementwise primitives; the
adjoint is summed back to each operand's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "Rng",
    "as_tensor",
    "param",
    "forward_op",
    "backward",
    "sample_gaussian",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operands of a primitive do not conform."""


class DomainError(ValueError):
    """A primitive was evaluated outside its mathematical domain."""


# ---------------------------------------------------------------------------
# tensors and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array that may participate in a recorded computation."""

    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.value)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records primitive evaluations for one forward/backward pass.

    Use as a context manager; tapes nest, and the innermost one records.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of scalar ``root`` with respect to each tensor in ``wrt``.

        The tape is not consumed: replaying it yields bitwise-identical results.
        """
        if root.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        adj: dict[int, np.ndarray] = {}
        if root.requires_grad:
            adj[id(root)] = np.ones_like(root.value)
        for out, parents, vjp in reversed(self.nodes):
            g = adj.get(id(out))
            if g is None:
                continue
            pgrads = vjp(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = adj.get(key)
                adj[key] = pg if prev is None else prev + pg
        return [
            adj[id(w)].reshape(w.shape) if id(w) in adj else np.zeros_like(w.value)
            for w in wrt
        ]


def backward(tape: Tape, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional alias of :meth:`Tape.gradient`."""
    return tape.gradient(root, wrt)


@contextmanager
def no_record():
    """Suspend recording (e.g. for metric rollouts inside a training step)."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(value, name: str | None = None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _emit(value: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = _current_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                tape.nodes.append((out, parents, vjp))
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a.value, b.value)
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a.value, b.value)
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a.value, b.value)
    av, bv = a.value, b.value
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {av.shape} and {bv.shape}")
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not conform")
    try:
        out2 = a2 @ b2
    except ValueError:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not conform") from None
    out = out2
    if av.ndim == 1:
        out = out[..., 0, :]
    if bv.ndim == 1:
        out = out[..., 0]

    def vjp(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bv.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def bilinear(u, w, v) -> Tensor:
    """out[..., k] = sum_pq u[..., p] w[k, p, q] v[..., q]."""
    u, w, v = as_tensor(u), as_tensor(w), as_tensor(v)
    uv, wv, vv = u.value, w.value, v.value
    if wv.ndim != 3 or uv.shape[-1:] != wv.shape[1:2] or vv.shape[-1:] != wv.shape[2:3]:
        raise ShapeError(
            f"bilinear: forms {wv.shape} do not conform to operands {uv.shape} and {vv.shape}"
        )
    try:
        batch = np.broadcast_shapes(uv.shape[:-1], vv.shape[:-1])
    except ValueError:
        raise ShapeError(f"bilinear: operand shapes {uv.shape} and {vv.shape} do not broadcast") from None
    k, p, q = wv.shape
    ub = np.broadcast_to(uv, batch + (p,))
    vb = np.broadcast_to(vv, batch + (q,))
    outer = (ub[..., :, None] * vb[..., None, :]).reshape(batch + (p * q,))
    wflat = wv.reshape(k, p * q)
    out = outer @ wflat.T

    def vjp(g):
        gm = (g @ wflat).reshape(batch + (p, q))
        gu = _unbroadcast((gm * vb[..., None, :]).sum(-1), uv.shape)
        gv = _unbroadcast((gm * ub[..., :, None]).sum(-2), vv.shape)
        gw = (g.reshape(-1, k).T @ outer.reshape(-1, p * q)).reshape(k, p, q)
        return gu, gw, gv

    return _emit(out, (u, w, v), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    vals = [t.value for t in ts]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} do not conform on axis {axis}") from None
    ax = axis % out.ndim
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]} differ") from None
    ax = axis % out.ndim
    return _emit(out, ts, lambda g: tuple(np.moveaxis(g, ax, 0)))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, idx) -> Tensor:
    """Slicing (basic or integer-array indexing)."""
    a = as_tensor(a)
    av = a.value
    try:
        out = av[idx]
    except IndexError as err:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {av.shape}: {err}") from None
    basic = _is_basic_index(idx)

    def vjp(g):
        ga = np.zeros_like(av)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _emit(np.array(out, dtype=np.float64), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    s = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {s} to {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(s),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return _emit(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def roll(a, shift: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return _emit(np.roll(a.value, shift, axis=axis), (a,), lambda g: (np.roll(g, -shift, axis=axis),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    s = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s).copy(),)

    return _emit(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0):
        raise DomainError(f"log: non-positive entry (min {av.min():.3g}) in shape {av.shape}")
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av < 0):
        raise DomainError(f"sqrt: negative entry (min {av.min():.3g})")
    out = np.sqrt(av)
    return _emit(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _emit(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit(av * av, (a,), lambda g: (2.0 * g * av,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the adjoint is zero where the clamp is active."""
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _emit(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def lstm_cell(x, state, w, b) -> Tensor:
    """Fused LSTM recurrence.

    ``state`` packs ``[h, c]`` along the last axis (width 2H); ``w`` has shape
    ``(in + H, 4H)`` with gate blocks ordered input, forget, output, cell.
    Returns the new packed state.
    """
    x, state, w, b = as_tensor(x), as_tensor(state), as_tensor(w), as_tensor(b)
    xv, sv, wv, bv = x.value, state.value, w.value, b.value
    hidden = sv.shape[-1] // 2
    n_in = xv.shape[-1]
    if (
        sv.shape[-1] != 2 * hidden
        or wv.shape != (n_in + hidden, 4 * hidden)
        or bv.shape != (4 * hidden,)
        or xv.shape[:-1] != sv.shape[:-1]
    ):
        raise ShapeError(
            f"lstm_cell: input {xv.shape}, state {sv.shape}, weights {wv.shape}, bias {bv.shape} do not conform"
        )
    h, c = sv[..., :hidden], sv[..., hidden:]
    xh = np.concatenate([xv, h], axis=-1)
    z = xh @ wv + bv
    gates = _sigmoid(z[..., : 3 * hidden])
    i, f, o = gates[..., :hidden], gates[..., hidden : 2 * hidden], gates[..., 2 * hidden :]
    gc = np.tanh(z[..., 3 * hidden :])
    c_new = f * c + i * gc
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=-1)

    def vjp(g):
        gh, gcn = g[..., :hidden], g[..., hidden:]
        dc = gcn + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * gc * i * (1.0 - i),
                dc * c * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                dc * i * (1.0 - gc * gc),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * hidden)
        dw = xh.reshape(-1, n_in + hidden).T @ dz2
        db = dz2.sum(axis=0)
        dxh = dz @ wv.T
        dstate = np.concatenate([dxh[..., n_in:], dc * f], axis=-1)
        return dxh[..., :n_in], dstate, dw, db

    return _emit(out, (x, state, w, b), vjp)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "scalar-mul": scale,
    "elementwise-mul": mul,
    "div": div,
    "matmul": matmul,
    "bilinear-form": bilinear,
    "concat": concat,
    "stack": stack,
    "slice": getitem,
    "reshape": reshape,
    "transpose": transpose,
    "roll": roll,
    "sum": sum,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "square": square,
    "softplus": softplus,
    "clip": clip,
    "lstm-cell": lstm_cell,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Evaluate a primitive by name (recorded on the active tape, if any)."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


class Rng:
    """Seedable counter-based (Philox) stream with polar-method Gaussians.

    ``Rng(seed, key)`` derives independent streams: the same ``(seed, key)``
    always yields the same numbers on every platform.
    """

    def __init__(self, seed: int, key: Iterable[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self._gen.random(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size=()) -> np.ndarray:
        """Standard normal draws by the Marsaglia polar method."""
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n)
        filled = 0
        while filled < n:
            pairs = (n - filled + 1) // 2
            m = int(pairs * 1.3) + 4
            u = self._gen.random((m, 2)) * 2.0 - 1.0
            s = np.einsum("ij,ij->i", u, u)
            ok = (s > 0.0) & (s < 1.0)
            u, s = u[ok], s[ok]
            draws = (u * np.sqrt(-2.0 * np.log(s) / s)[:, None]).reshape(-1)
            take = min(draws.size, n - filled)
            out[filled : filled + take] = draws[:take]
            filled += take
        return out.reshape(shape) if shape else out[0]


def sample_gaussian(rng: Rng, mean, diag_var) -> Tensor:
    """Reparameterised draw ``mean + sqrt(diag_var) * eps``."""
    mean, diag_var = as_tensor(mean), as_tensor(diag_var)
    if np.any(diag_var.value <= 0):
        raise DomainError("sample_gaussian: variance entries must be strictly positive")
    _broadcast_check("sample_gaussian", mean.value, diag_var.value)
    shape = np.broadcast_shapes(mean.shape, diag_var.shape)
    eps = rng.normal(shape)
    return add(mean, mul(sqrt(diag_var), Tensor(eps)))
