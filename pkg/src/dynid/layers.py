"""Small parameter containers: dense layers, MLPs and stacked LSTMs."""

from __future__ import annotations

import numpy as np

from . import adcore as ad
from .adcore import Rng, Tensor

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "linear": lambda x: x,
}


class Module:
    """Parameters are :class:`Tensor` attributes with ``requires_grad``;
    submodules are :class:`Module` attributes or lists of them.  Iteration
    order follows attribute assignment order, so it is deterministic."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            val = np.asarray(state[name], dtype=np.float64)
            if val.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {val.shape}, model {p.shape}")
            p.value = val.copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, std: float | None = None):
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, size=(n_in, n_out)) if std is None else std * rng.normal((n_in, n_out))
        self.w = ad.param(w)
        self.b = ad.param(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class MLP(Module):
    """Dense network; ``sizes`` lists layer widths including input and output."""

    def __init__(self, sizes, activation: str, rng: Rng, final_activation: str = "linear"):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        if activation not in ACTIVATIONS or final_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation; choose from {sorted(ACTIVATIONS)}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.final_activation = final_activation
        self.layers = [Linear(a, b, rng.child(i)) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def __call__(self, x) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        return ACTIVATIONS[self.final_activation](self.layers[-1](x))


class LSTM(Module):
    """Stacked LSTM over sequences shaped ``(B, T, n_in)``.

    Recurrent state is a list (one entry per layer) of packed ``[h, c]``
    tensors of width ``2 * hidden``.
    """

    def __init__(self, n_in: int, hidden: int, n_layers: int, rng: Rng):
        self.n_in, self.hidden, self.n_layers = n_in, hidden, n_layers
        self.cells = []
        for layer in range(n_layers):
            width = (n_in if layer == 0 else hidden) + hidden
            bound = 1.0 / np.sqrt(hidden)
            cell = Module()
            cell.w = ad.param(rng.child(layer).uniform(-bound, bound, size=(width, 4 * hidden)))
            b = np.zeros(4 * hidden)
            b[hidden : 2 * hidden] = 1.0  # forget-gate bias
            cell.b = ad.param(b)
            self.cells.append(cell)

    def zero_state(self, batch: int) -> list[Tensor]:
        return [Tensor(np.zeros((batch, 2 * self.hidden))) for _ in range(self.n_layers)]

    def run(self, xs, state=None, reverse: bool = False):
        """Returns top-layer hidden states ``(B, T, hidden)`` in input time
        order and the final per-layer states."""
        xs = ad.as_tensor(xs)
        batch, steps = xs.shape[0], xs.shape[1]
        state = list(state) if state is not None else self.zero_state(batch)
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        tops = []
        H = self.hidden
        for t in order:
            inp = xs[:, t]
            for layer, cell in enumerate(self.cells):
                state[layer] = ad.lstm_cell(inp, state[layer], cell.w, cell.b)
                inp = state[layer][:, :H]
            tops.append(inp)
        if reverse:
            tops.reverse()
        return ad.stack(tops, axis=1), state
