"""A trainable model bundle (drift, variance, emission, inference) and its
checkpoint round trip."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._container import ContainerError
from .adcore import Rng
from .inference import LstmInference
from .layers import Module
from .prior import BiNN, EmissionModel, FixedVariance, VarDynNet, load_checkpoint, save_checkpoint


@dataclass
class Model:
    net: BiNN
    emission: EmissionModel
    delta: float
    varnet: VarDynNet | FixedVariance | None = None
    inference: LstmInference | None = None
    meta: dict = field(default_factory=dict)

    @property
    def d_z(self) -> int:
        return self.net.dim

    def modules(self) -> dict[str, Module]:
        mods: dict[str, Module] = {"binn": self.net}
        if self.emission.operator == "learned":
            mods["emission"] = self.emission
        if isinstance(self.varnet, VarDynNet):
            mods["varnet"] = self.varnet
        if self.inference is not None:
            mods["inference"] = self.inference
        return mods

    def dynamics_parameters(self) -> list:
        return self.net.parameters()

    def other_parameters(self) -> list:
        out = []
        for name, mod in self.modules().items():
            if name != "binn":
                out.extend(mod.parameters())
        return out

    def architecture(self) -> dict:
        arch = {
            "delta": self.delta,
            "binn": {
                "dim": self.net.dim,
                "mode": self.net.mode,
                "radius": self.net.radius,
                "shift": self.net.shift.tolist(),
                "scale": self.net.scale.tolist(),
            },
            "emission": {"operator": self.emission.operator, "obs_var": self.emission.obs_var.tolist()},
            "varnet": None,
            "inference": None if self.inference is None else self.inference.architecture(),
        }
        if self.emission.operator == "learned":
            arch["emission"]["sizes"] = list(self.emission.h_net.sizes)
        if isinstance(self.varnet, VarDynNet):
            arch["varnet"] = {
                "kind": "learned",
                "hidden": self.varnet.mlp.sizes[1],
                "shift": self.varnet.shift.tolist(),
                "scale": self.varnet.scale.tolist(),
            }
        elif isinstance(self.varnet, FixedVariance):
            arch["varnet"] = {"kind": "fixed", "var": np.broadcast_to(self.varnet.var, (self.d_z,)).tolist()}
        return arch


def model_from_architecture(arch: dict, rng: Rng | None = None) -> Model:
    rng = rng or Rng(0)
    b = arch["binn"]
    net = BiNN(
        b["dim"], b["mode"], rng.child(0), radius=b["radius"],
        shift=b.get("shift", 0.0), scale=b.get("scale", 1.0),
    )
    e = arch["emission"]
    em = EmissionModel(e["operator"], e["obs_var"], b["dim"], rng.child(1), e.get("sizes"))
    varnet = None
    v = arch.get("varnet")
    if v and v["kind"] == "learned":
        varnet = VarDynNet(b["dim"], rng.child(2), v["hidden"], v["shift"], v["scale"])
    elif v and v["kind"] == "fixed":
        varnet = FixedVariance(v["var"])
    inf = None
    if arch.get("inference"):
        inf = LstmInference.from_architecture({**arch["inference"], "rng": rng.child(3)})
    return Model(net, em, float(arch["delta"]), varnet, inf)


def save_model(path, model: Model, extra: dict | None = None) -> None:
    meta = {"architecture": model.architecture(), "info": {**model.meta, **(extra or {})}}
    save_checkpoint(path, model.modules(), meta)


def load_model(path) -> Model:
    meta, states = load_checkpoint(path)
    try:
        model = model_from_architecture(meta["architecture"])
    except (KeyError, TypeError) as err:
        raise ContainerError(f"{path}: malformed architecture header ({err})") from None
    mods = model.modules()
    if set(mods) != set(states):
        raise ContainerError(f"{path}: checkpoint holds {sorted(states)}, architecture needs {sorted(mods)}")
    for name, mod in mods.items():
        try:
            mod.load_state_dict(states[name])
        except ValueError as err:
            raise ContainerError(f"{path}: {err}") from None
    model.meta = meta.get("info", {})
    return model
