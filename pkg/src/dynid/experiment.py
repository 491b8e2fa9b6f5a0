"""End-to-end pipeline used by the command line: data, model, training,
evaluation."""

from __future__ import annotations

import numpy as np

from . import systems
from .adcore import Rng
from .config import ExperimentConfig
from .inference import LstmInference
from .metrics import EvalConfig, MetricReport, evaluate
from .model import Model
from .observation import Dataset, build_dataset
from .prior import BiNN, EmissionModel, FixedVariance, VarDynNet
from .training import TrainConfig, TrainResult, train_em_enks, train_random_nstep


def generate(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training and test sets from disjoint random streams."""
    rng = Rng(cfg.seed, (1,))
    common = dict(
        system=cfg.base_system,
        seq_len=cfg.seq_len,
        r=cfg.r,
        missing_rate=cfg.missing_rate,
        burn_in=cfg.burn_in,
        operator_tag=cfg.operator,
    )
    train = build_dataset(n_sequences=cfg.n_train, rng=rng.child(0), **common)
    test = build_dataset(n_sequences=cfg.n_test, rng=rng.child(1), **common)
    for ds, split in ((train, "train"), (test, "test")):
        ds.meta.update({"split": split, "config_digest": cfg.digest(), "experiment_system": cfg.system})
    return train, test


def _observed_moments(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    count = np.maximum(ds.mask.sum(axis=(0, 1)), 1)
    xf = np.where(ds.mask, ds.values, 0.0)
    mean = xf.sum(axis=(0, 1)) / count
    var = np.where(ds.mask, (ds.values - mean) ** 2, 0.0).sum(axis=(0, 1)) / count
    return mean, np.sqrt(np.maximum(var, 1e-12))


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        objective=cfg.objective,
        inference=cfg.inference,
        n_step_max=cfg.n_step_max,
        lam=cfg.lam,
        lr=cfg.lr,
        lr_dynamics=cfg.lr_dynamics,
        clip_norm=cfg.clip_norm,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        m_steps=cfg.m_steps,
        q_var=cfg.q_var,
        n_members=cfg.n_members,
        enks_lag=cfg.enks_lag,
    )


def eval_config(cfg: ExperimentConfig) -> EvalConfig:
    return EvalConfig(
        horizons=tuple(cfg.horizons),
        pi_horizon=cfg.pi_horizon,
        lyap_steps=cfg.lyap_steps,
        lyap_starts=cfg.lyap_starts,
        forecast_from=cfg.forecast_from,
        seed=cfg.seed,
    )


def build_model(cfg: ExperimentConfig, train: Dataset) -> Model:
    """Fresh model sized for the configured system, with input
    standardisation taken from the training observations."""
    rng = Rng(cfg.seed, (2,))
    system = cfg.base_system
    delta = train.delta
    d_z = systems.default_params("l96").n_z if system == "l96" else 3
    x_mean, x_std = _observed_moments(train)
    d_x = train.values.shape[-1]
    obs_var = np.maximum(cfg.obs_var_factor * np.asarray(train.noise_var, dtype=np.float64), 1e-6)
    if cfg.operator == "identity":
        emission = EmissionModel("identity", obs_var, d_z)
        z_shift, z_scale = x_mean, x_std
    else:
        emission = EmissionModel("learned", obs_var, d_z, rng.child(1), cfg.emission_sizes)
        z_shift, z_scale = np.zeros(d_z), np.ones(d_z)
    if system == "l96":
        # one shared stencil: pool the moments over the ring
        net = BiNN(d_z, "circular", rng.child(0), cfg.binn_init_std, shift=z_shift.mean(), scale=z_scale.mean())
    else:
        net = BiNN(d_z, "dense", rng.child(0), cfg.binn_init_std, shift=z_shift, scale=z_scale)
    varnet = None
    if cfg.objective in ("map", "elbo"):
        varnet = VarDynNet(d_z, rng.child(2), shift=z_shift, scale=z_scale)
    elif cfg.inference == "enks":
        varnet = FixedVariance(np.full(d_z, cfg.q_var if cfg.q_var > 0 else 1.0))
    inf = None
    if cfg.inference == "lstm":
        inf = LstmInference(
            d_x, d_z, cfg.hidden, cfg.n_layers, cfg.enc_sizes, cfg.enc_activation,
            tuple(cfg.dec_hidden), cfg.dec_activation, cfg.objective == "elbo", rng.child(3),
            cfg.seg_len, x_mean, x_std, z_shift, z_scale,
        )
    return Model(net, emission, delta, varnet, inf, {"system": cfg.system, "model": cfg.model})


def train(cfg: ExperimentConfig, train_ds: Dataset, model: Model, callback=None) -> TrainResult:
    tc = train_config(cfg)
    if tc.inference == "enks":
        return train_em_enks(tc, train_ds, model, callback)
    return train_random_nstep(tc, train_ds, model, callback)


def run_evaluation(cfg: ExperimentConfig, model: Model, test: Dataset) -> MetricReport:
    if cfg.n_eval is not None:
        test = test.subset(np.arange(min(cfg.n_eval, len(test))))
    inference = cfg.inference if (cfg.inference == "enks" or model.inference is not None) else None
    return evaluate(model, inference, test, eval_config(cfg), train_config(cfg))
