"""Command line: ``dynid {generate,train,evaluate,simulate,report}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._container import ContainerError
from .adcore import Rng
from .config import PRESETS, ConfigError, ExperimentConfig, load_config
from .experiment import build_model, generate, run_evaluation, train
from .model import load_model, save_model
from .observation import load_dataset, save_dataset
from .prior import FixedVariance, generate_stochastic
from .systems import DivergenceError
from .training import TrainingError, write_trace


class CliError(RuntimeError):
    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    return {
        "out": out,
        "train": out / "train.dyn",
        "test": out / "test.dyn",
        "checkpoint": out / "model.ckpt",
        "trace": out / "trace.csv",
        "manifest": out / "manifest.json",
        "report_json": out / "report.json",
        "report_csv": out / "report.csv",
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("missing_file", f"{what} not found: {path}", path=str(path))
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, args) -> dict:
    p = _paths(cfg)
    p["out"].mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = generate(cfg)
    save_dataset(p["train"], train_ds)
    save_dataset(p["test"], test_ds)
    return {
        "train": str(p["train"]),
        "test": str(p["test"]),
        "n_train": len(train_ds),
        "n_test": len(test_ds),
        "train_sha256": file_sha256(p["train"]),
        "test_sha256": file_sha256(p["test"]),
    }


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    p = _paths(cfg)
    data_path = Path(args.dataset) if args.dataset else p["train"]
    train_ds = load_dataset(_require(data_path, "training dataset"))
    manifest = {
        "command": "train",
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "dataset": str(data_path),
        "dataset_sha256": file_sha256(data_path),
        "version": __version__,
        "status": "running",
    }
    p["out"].mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, train_ds)
    try:
        result = train(cfg, train_ds, model)
    except (TrainingError, DivergenceError) as err:
        trace = getattr(err, "trace", [])
        write_trace(p["trace"], trace)
        manifest.update(status="failed", error=str(err))
        _write_json(p["manifest"], manifest)
        raise CliError("training_failed", str(err), manifest=str(p["manifest"])) from None
    save_model(p["checkpoint"], model, {"config_sha256": cfg.digest(), "dataset_sha256": manifest["dataset_sha256"]})
    write_trace(p["trace"], result.trace)
    manifest.update(
        status="ok",
        iterations=result.iterations,
        final_loss=result.trace[-1]["loss"] if result.trace else None,
        checkpoint=str(p["checkpoint"]),
        checkpoint_sha256=file_sha256(p["checkpoint"]),
        trace=str(p["trace"]),
    )
    _write_json(p["manifest"], manifest)
    return {"checkpoint": str(p["checkpoint"]), "iterations": result.iterations, "final_loss": manifest["final_loss"]}


def cmd_evaluate(cfg: ExperimentConfig, args) -> dict:
    p = _paths(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else p["checkpoint"]
    data_path = Path(args.dataset) if args.dataset else p["test"]
    model = load_model(_require(ckpt, "checkpoint"))
    test_ds = load_dataset(_require(data_path, "test dataset"))
    report = run_evaluation(cfg, model, test_ds)
    report.meta.update(
        {
            "checkpoint_sha256": file_sha256(ckpt),
            "dataset_sha256": file_sha256(data_path),
            "config_sha256": cfg.digest(),
            "model": cfg.model,
            "system": cfg.system,
        }
    )
    p["out"].mkdir(parents=True, exist_ok=True)
    report.to_json(p["report_json"])
    report.to_csv(p["report_csv"])
    return {"report": str(p["report_json"]), "table": report.to_dict()["table"]}


def cmd_simulate(cfg: ExperimentConfig, args) -> dict:
    p = _paths(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else p["checkpoint"]
    model = load_model(_require(ckpt, "checkpoint"))
    if args.init is not None:
        z0 = np.asarray(json.loads(args.init), dtype=np.float64)
    else:
        test_path = p["test"]
        z0 = load_dataset(_require(test_path, "test dataset")).states[0, 0]
    if z0.shape != (model.d_z,):
        raise CliError("bad_argument", f"--init must have {model.d_z} entries")
    stochastic = args.mode == "stochastic"
    varnet = model.varnet
    if stochastic and varnet is None:
        raise CliError("bad_argument", "stochastic simulation needs a model with a variance network")
    sim_dir = p["out"] / "simulations"
    sim_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for run in range(args.n_runs):
        rng = Rng(cfg.seed, (5, run))
        try:
            seq = generate_stochastic(
                model.net, varnet or FixedVariance(np.ones(model.d_z)), z0, args.n_steps, model.delta, rng,
                variance_scale=1.0 if stochastic else 0.0,
            )
        except DivergenceError as err:
            raise CliError("divergence", str(err), run=run, last_valid_step=(err.step or 1) - 1) from None
        path = sim_dir / f"{args.mode}_{run:03d}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "time"] + [f"z{i + 1}" for i in range(model.d_z)])
            for k, z in enumerate(seq.states):
                writer.writerow([k, repr(k * model.delta)] + [repr(float(v)) for v in z])
        files.append(str(path))
    return {"files": files}


def cmd_report(cfg: ExperimentConfig, args) -> dict:
    """Collect ``report.json`` files under the given run directories into one
    table (CSV with a leading run column)."""
    dirs = [Path(d) for d in (args.runs or [cfg.out_dir])]
    rows = []
    for d in dirs:
        path = _require(d / "report.json", "report")
        data = json.loads(path.read_text())
        row = {"run": str(d), "model": data.get("meta", {}).get("model", "")}
        for col, val in data["table"].items():
            row[col] = "" if val is None else f"{val['mean']:.6g}±{val['std']:.6g}"
        rows.append(row)
    out = Path(args.table) if args.table else Path(cfg.out_dir) / "table.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["run", "model", "e4", "rec", "pi05", "lambda1"])
        writer.writeheader()
        writer.writerows(rows)
    return {"table": str(out), "rows": len(rows)}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynid", description="Identify dynamical systems from noisy, partial observations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON experiment configuration")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--preset", choices=PRESETS, help="size preset applied before the config file")
        return sp

    common(sub.add_parser("generate", help="simulate and observe train/test datasets"))
    sp = common(sub.add_parser("train", help="fit a model to the training dataset"))
    sp.add_argument("--dataset", help="training dataset (default: <out>/train.dyn)")
    sp = common(sub.add_parser("evaluate", help="compute the metric report on the test dataset"))
    sp.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.ckpt)")
    sp.add_argument("--dataset", help="test dataset (default: <out>/test.dyn)")
    sp = common(sub.add_parser("simulate", help="write free-running model trajectories as CSV"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--n-steps", type=int, default=20000)
    sp.add_argument("--n-runs", type=int, default=1)
    sp.add_argument("--mode", choices=("deterministic", "stochastic"), default="deterministic")
    sp.add_argument("--init", help="JSON list with the initial state (default: first test state)")
    sp = common(sub.add_parser("report", help="merge run reports into one table"))
    sp.add_argument("runs", nargs="*", help="run directories holding report.json")
    sp.add_argument("--table", help="output CSV path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.seed, args.out)
        if getattr(args, "n_steps", 1) < 1 or getattr(args, "n_runs", 1) < 1:
            raise CliError("bad_argument", "--n-steps and --n-runs must be positive")
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        return _fail({"error": "invalid_config", "key": err.key, "message": str(err)})
    except CliError as err:
        return _fail({"error": err.kind, "message": str(err), **err.extra})
    except (ContainerError, OSError) as err:
        return _fail({"error": "io", "message": str(err)})
    print(json.dumps({"command": args.command, "ok": True, **result}, sort_keys=True))
    return 0


def _fail(payload: dict) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
