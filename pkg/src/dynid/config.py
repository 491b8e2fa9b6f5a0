"""Flat JSON experiment configuration, presets and validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .training import MODEL_ROWS

EXPERIMENT_SYSTEMS = ("l63", "l96", "l63s", "l63-legendre")
PRESETS = ("desk", "full")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    system: str = "l63"
    model: str = "DAODEN_determ"
    r: float = 0.333
    missing_rate: float = 0.0
    seed: int = 0
    out_dir: str = "runs"
    # data
    n_train: int = 200
    n_test: int = 50
    seq_len: int = 150
    burn_in: int = 2000
    # architecture
    hidden: int = 9
    n_layers: int = 2
    enc_sizes: list = field(default_factory=lambda: [3, 7, 3])
    enc_activation: str = "relu"
    dec_hidden: list = field(default_factory=lambda: [7])
    dec_activation: str = "relu"
    emission_sizes: list = field(default_factory=lambda: [3, 32, 64, 128])
    seg_len: int = 10
    obs_var_factor: float = 1.0
    binn_init_std: float = 0.01
    # training
    n_step_max: int = 4
    lam: float = 1.0
    lr: float = 1e-3
    lr_dynamics: float | None = None
    clip_norm: float = 10.0
    epochs: int = 100
    batch_size: int = 1
    m_steps: int = 20
    q_var: float = 1e-2
    n_members: int = 50
    enks_lag: int | None = None
    # evaluation
    horizons: list = field(default_factory=lambda: [1, 4])
    pi_horizon: int = 1000
    lyap_steps: int = 20000
    lyap_starts: int = 5
    forecast_from: str = "truth"
    n_eval: int | None = None

    @property
    def objective(self) -> str:
        return MODEL_ROWS[self.model][0]

    @property
    def inference(self) -> str:
        return MODEL_ROWS[self.model][1]

    @property
    def base_system(self) -> str:
        return "l63" if self.system == "l63-legendre" else self.system

    @property
    def operator(self) -> str:
        return "legendre" if self.system == "l63-legendre" else "identity"

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Content hash of every setting except the output location."""
        content = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        blob = json.dumps(content, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "ExperimentConfig":
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(key, msg)

        need(self.system in EXPERIMENT_SYSTEMS, "system", f"must be one of {EXPERIMENT_SYSTEMS}")
        need(self.model in MODEL_ROWS, "model", f"must be one of {sorted(MODEL_ROWS)}")
        need(self.r >= 0, "r", "must be nonnegative")
        need(0 <= self.missing_rate < 1, "missing_rate", "must lie in [0, 1)")
        for key in ("n_train", "n_test", "seq_len", "hidden", "n_layers", "seg_len", "n_step_max",
                    "epochs", "batch_size", "m_steps", "n_members", "pi_horizon", "lyap_starts"):
            need(isinstance(getattr(self, key), int) and getattr(self, key) >= 1, key, "must be a positive integer")
        need(self.burn_in >= 0, "burn_in", "must be nonnegative")
        need(self.seq_len >= 2 * self.seg_len, "seq_len", "must hold two auxiliary segments")
        need(self.seq_len > max(self.horizons), "seq_len", "must exceed every forecast horizon")
        need(self.lyap_steps >= 1000, "lyap_steps", "must be >= 1000")
        need(self.lr > 0, "lr", "must be positive")
        need(self.lr_dynamics is None or self.lr_dynamics > 0, "lr_dynamics", "must be positive")
        need(self.clip_norm > 0, "clip_norm", "must be positive")
        need(self.lam >= 0, "lam", "must be nonnegative")
        need(self.q_var >= 0, "q_var", "must be nonnegative")
        need(self.obs_var_factor > 0, "obs_var_factor", "must be positive")
        need(self.n_members >= 2, "n_members", "must be >= 2")
        need(self.forecast_from in ("truth", "posterior"), "forecast_from", "must be 'truth' or 'posterior'")
        need(all(isinstance(h, int) and h >= 1 for h in self.horizons), "horizons", "must be positive integers")
        need(self.enc_activation in ("relu", "tanh", "sigmoid"), "enc_activation", "unknown activation")
        need(self.dec_activation in ("relu", "tanh", "sigmoid"), "dec_activation", "unknown activation")
        need(self.system != "l63-legendre" or self.model == "DAODEN_determ", "model",
             "the unknown-operator setting supports DAODEN_determ only")
        need(self.system != "l63-legendre" or self.missing_rate == 0, "missing_rate",
             "the unknown-operator setting uses complete observations")
        need(self.n_eval is None or self.n_eval >= 1, "n_eval", "must be positive")
        return self


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}

_SYSTEM_DEFAULTS = {
    "l63": {},
    "l63s": {"r": 0.333},
    "l96": {
        "hidden": 80,
        "enc_sizes": [40, 80, 40],
        "dec_hidden": [80],
        "seg_len": 10,
    },
    "l63-legendre": {
        "r": 0.194,
        "enc_sizes": [128, 64, 32, 3],
        "enc_activation": "sigmoid",
    },
}

#: desk presets: reduced data and settings tuned to finish in minutes on one core
_DESK = {
    "n_train": 20,
    "n_test": 10,
    "batch_size": 20,
    "epochs": 1500,
    "lr": 3e-3,
    "lr_dynamics": 3e-2,
    "lam": 0.02,
    "lyap_starts": 3,
}
_DESK_MODEL = {
    "BiNN_EnKS": {"epochs": 150, "m_steps": 20, "lr_dynamics": 5e-2},
}
#: sparse data: more sequences so the inference network generalises
_DESK_PARTIAL = {"n_train": 100, "epochs": 400}


def preset(name: str, system: str = "l63", model: str = "DAODEN_determ", missing_rate: float = 0.0) -> dict:
    if name not in PRESETS:
        raise ConfigError("preset", f"must be one of {PRESETS}")
    out = dict(_SYSTEM_DEFAULTS.get(system, {}))
    if name == "desk":
        out.update(_DESK)
        out.update(_DESK_MODEL.get(model, {}))
        if missing_rate > 0:
            out.update(_DESK_PARTIAL)
            # same total weight on the observations as with complete data
            out["lam"] = _DESK["lam"] / (1.0 - missing_rate)
    return out


def make_config(overrides: dict | None = None, preset_name: str | None = None) -> ExperimentConfig:
    """Build a validated config: dataclass defaults, then system/preset
    defaults, then ``overrides``.  Unknown keys are rejected."""
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in _FIELD_TYPES:
            raise ConfigError(key, "unknown configuration key")
    system = overrides.get("system", "l63")
    model = overrides.get("model", "DAODEN_determ")
    if system not in EXPERIMENT_SYSTEMS:
        raise ConfigError("system", f"must be one of {EXPERIMENT_SYSTEMS}")
    missing_rate = overrides.get("missing_rate", 0.0)
    if not isinstance(missing_rate, (int, float)) or isinstance(missing_rate, bool) or not 0 <= missing_rate < 1:
        raise ConfigError("missing_rate", "must be a number in [0, 1)")
    base = preset(preset_name, system, model, missing_rate) if preset_name else dict(_SYSTEM_DEFAULTS.get(system, {}))
    base.update(overrides)
    for key, val in base.items():
        _check_type(key, val)
    return ExperimentConfig(**base).validate()


def _check_type(key: str, val) -> None:
    default = getattr(ExperimentConfig(), key)
    if val is None:
        if default is not None and key not in ("lr_dynamics", "enks_lag", "n_eval"):
            raise ConfigError(key, "may not be null")
        return
    if isinstance(default, bool) or isinstance(val, bool):
        raise ConfigError(key, "booleans are not accepted")
    if isinstance(default, int) and not isinstance(val, int):
        raise ConfigError(key, f"expected an integer, got {type(val).__name__}")
    if isinstance(default, float) and not isinstance(val, (int, float)):
        raise ConfigError(key, f"expected a number, got {type(val).__name__}")
    if isinstance(default, str) and not isinstance(val, str):
        raise ConfigError(key, f"expected a string, got {type(val).__name__}")
    if isinstance(default, list) and not isinstance(val, list):
        raise ConfigError(key, f"expected a list, got {type(val).__name__}")


def load_config(path, preset_name: str | None = None, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text()) if path else {}
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"invalid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    return make_config(data, preset_name)
