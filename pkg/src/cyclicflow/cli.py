"""Command-line interface.

Exit codes: 0 success, 2 usage or schema error, 3 numerical failure.
Every command writes one ``*.manifest.json`` next to its outputs.
"""

from __future__ import annotations

import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .graph import Dataset, ExperimentData, InterventionSpec, NonConvergenceError
from .io import (
    SchemaError,
    load_dataset,
    load_model,
    load_truth,
    read_json,
    save_dataset,
    save_model,
    save_truth,
    write_json,
)
from .logdet import DegenerateJacobianError
from .metrics import evaluate
from .synth import SETTINGS, SettingSpec, build_setting, build_test_set, build_ground_truth, intervention_subset
from .train import NumericError, TrainConfig, train

EXIT_USAGE = 2
EXIT_NUMERIC = 3
NUMERIC_ERRORS = (NonConvergenceError, DegenerateJacobianError, NumericError, FloatingPointError)


def _fail(msg: str, code: int):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _threads():
    n = os.environ.get("NODAGS_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _manifest_path(out: Path) -> Path:
    return out.parent / (out.name.split(".")[0] + ".manifest.json") if out.suffix else out / "manifest.json"


def _write_manifest(out: Path, command: str, config: dict, inputs: dict, outputs: dict, seed, t0: float):
    write_json(
        _manifest_path(out),
        {
            "command": command,
            "config": config,
            "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
            "outputs": {k: str(v) for k, v in outputs.items() if v is not None},
            "seed": seed,
            "duration_s": round(time.time() - t0, 3),
            "version": __version__,
        },
    )


def _coerce(field_type, raw: str):
    if field_type in (int, "int"):
        return int(raw)
    if field_type in (float, "float"):
        return float(raw)
    return raw


def load_train_config(path) -> TrainConfig:
    """JSON object or ``key=value`` lines (``#`` comments allowed)."""
    text = Path(path).read_text()
    types = {f: type(v) for f, v in TrainConfig().to_dict().items()}
    try:
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise SchemaError(f"{path}: config must be a JSON object")
        items = [(None, k, v) for k, v in obj.items()]
    except json.JSONDecodeError:
        items = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            items.append((lineno, k, v))
    values = {}
    for lineno, k, v in items:
        where = f"{path}:{lineno}" if lineno else f"{path}"
        if k not in types:
            raise SchemaError(f"{where}: unknown config key {k!r}")
        try:
            values[k] = _coerce(types[k], v) if isinstance(v, str) else types[k](v)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: bad value for {k!r}: {v!r}") from exc
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _setting_option(f):
    def check(ctx, param, value):
        if value not in SETTINGS:
            raise click.BadParameter(f"unknown setting {value!r}; valid settings: {', '.join(SETTINGS)}")
        return value

    return click.option("--setting", required=True, callback=check, help="one of: " + ", ".join(SETTINGS))(f)


@click.group()
@click.version_option(__version__)
def main():
    """Cyclic causal structure learning with contractive residual flows."""
    _threads()


@main.command()
@_setting_option
@click.option("--nodes", "d", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="training dataset JSON")
@click.option("--density", type=float, default=2.0, show_default=True, help="expected edges per node")
@click.option("--samples", type=int, default=None, help="samples per experiment (default 5000 / 20000 observational)")
def generate(setting, d, seed, out, density, samples):
    """Simulate one synthetic setting: train data, test data and ground truth."""
    t0 = time.time()
    kw = {}
    if samples is not None:
        kw = {"n_per_intervention": samples, "n_observational": samples}
    spec = SettingSpec(setting, d=d, density=density, seed=seed, **kw)
    try:
        sem, train_data, test_data = build_setting(spec)
    except NUMERIC_ERRORS as exc:
        _fail(str(exc), EXIT_NUMERIC)
    stem = out.name.split(".")[0]
    truth_path = out.parent / f"{stem}.truth.json"
    test_path = out.parent / f"{stem}.test.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, train_data)
    save_dataset(test_path, test_data)
    save_truth(truth_path, sem)
    _write_manifest(out, "generate", {"setting": spec.to_dict(), "weight_support": [-1.0, -0.25, 0.25, 1.0]},
                    {}, {"train": out, "test": test_path, "truth": truth_path}, seed, t0)
    click.echo(f"wrote {len(train_data.experiments)} experiments ({train_data.n_samples} samples) to {out}")


@main.command("train")
@click.option("--data", "data_path", type=click.Path(path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
              help="JSON or key=value file with TrainConfig fields")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="model JSON")
@click.option("--history", type=click.Path(dir_okay=False, path_type=Path), default=None, help="per-epoch CSV")
def train_cmd(data_path, config_path, out, history):
    """Fit a mechanism to a dataset."""
    t0 = time.time()
    try:
        if not data_path.is_file():
            raise SchemaError(f"data file not found: {data_path}")
        if config_path is not None and not config_path.is_file():
            raise SchemaError(f"config file not found: {config_path}")
        data = load_dataset(data_path)
        cfg = load_train_config(config_path) if config_path else TrainConfig()
    except SchemaError as exc:
        _fail(str(exc), EXIT_USAGE)
    try:
        model, hist = train(data, cfg)
    except NUMERIC_ERRORS as exc:
        _fail(f"numerical failure during training: {exc}", EXIT_NUMERIC)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model)
    if history is not None:
        with open(history, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "objective", "penalty", "mean_logdet"])
            for r in hist:
                w.writerow([r.epoch, repr(r.objective), repr(r.penalty), repr(r.mean_logdet)])
    _write_manifest(out, "train", cfg.to_dict(), {"data": data_path, "config": config_path},
                    {"model": out, "history": history}, cfg.seed, t0)
    click.echo(f"wrote model to {out}")


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
@click.option("--data", "data_path", type=click.Path(path_type=Path), required=True, help="holdout dataset JSON")
@click.option("--truth", "truth_path", type=click.Path(path_type=Path), default=None, help="ground-truth JSON")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="metrics JSON")
@click.option("--threshold", type=float, default=0.5, show_default=True)
def eval_cmd(model_path, data_path, truth_path, out, threshold):
    """Score a fitted model on holdout interventions."""
    t0 = time.time()
    if not 0 < threshold < 1:
        _fail("--threshold must lie in (0, 1)", EXIT_USAGE)
    try:
        for p in (model_path, data_path, truth_path):
            if p is not None and not p.is_file():
                raise SchemaError(f"file not found: {p}")
        model = load_model(model_path)
        data = load_dataset(data_path)
        truth = load_truth(truth_path).graph if truth_path else None
        if data.d != model.d or (truth is not None and truth.d != model.d):
            raise SchemaError("model, data and truth disagree on the number of nodes")
    except SchemaError as exc:
        _fail(str(exc), EXIT_USAGE)
    try:
        report = evaluate(model, data, truth, threshold)
    except NUMERIC_ERRORS as exc:
        _fail(str(exc), EXIT_NUMERIC)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, {**report.to_dict(), "threshold": threshold, "model": str(model_path)})
    _write_manifest(out, "eval", {"threshold": threshold}, {"model": model_path, "data": data_path, "truth": truth_path},
                    {"metrics": out}, None, t0)
    click.echo(json.dumps(report.to_dict()))


def read_perturbation_csv(path, targets_column: str) -> Dataset:
    """Group CSV rows by their target set into experiments.

    Every column except ``targets_column`` is a numeric variable; the targets
    cell holds comma-separated variable names, empty for observational rows.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or targets_column not in reader.fieldnames:
            raise SchemaError(f"{path}: missing targets column {targets_column!r}")
        names = [c for c in reader.fieldnames if c != targets_column]
        index = {n: i for i, n in enumerate(names)}
        groups: dict[tuple[int, ...], list[list[float]]] = {}
        for rowno, row in enumerate(reader, 2):
            cell = (row[targets_column] or "").strip()
            targets = []
            for t in filter(None, (s.strip() for s in cell.split(","))):
                if t not in index:
                    raise SchemaError(f"{path}: row {rowno}: unknown target variable {t!r}")
                targets.append(index[t])
            try:
                values = [float(row[n]) for n in names]
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: row {rowno}: non-numeric value") from exc
            groups.setdefault(tuple(sorted(set(targets))), []).append(values)
    exps = [ExperimentData(InterventionSpec(t), np.array(rows)) for t, rows in groups.items()]
    return Dataset(len(names), exps)


@main.command("ingest-csv")
@click.option("--csv", "csv_path", type=click.Path(path_type=Path), required=True)
@click.option("--targets-column", required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def ingest_csv(csv_path, targets_column, out):
    """Convert a perturbation-screen style CSV into a dataset JSON."""
    t0 = time.time()
    try:
        if not csv_path.is_file():
            raise SchemaError(f"csv file not found: {csv_path}")
        data = read_perturbation_csv(csv_path, targets_column)
    except SchemaError as exc:
        _fail(str(exc), EXIT_USAGE)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, data)
    _write_manifest(out, "ingest-csv", {"targets_column": targets_column}, {"csv": csv_path}, {"dataset": out}, None, t0)
    click.echo(f"wrote {len(data.experiments)} experiments to {out}")


@main.command("sweep-interventions")
@_setting_option
@click.option("--nodes", "d", type=int, required=True)
@click.option("--k-list", required=True, help="comma-separated intervention counts, e.g. 0,1,2")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--density", type=float, default=2.0, show_default=True)
@click.option("--samples", type=int, default=1000, show_default=True, help="samples per experiment")
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
def sweep_interventions(setting, d, k_list, out, seed, density, samples, config_path):
    """Train and evaluate with k random single-node interventions for each k."""
    t0 = time.time()
    try:
        ks = [int(k) for k in k_list.split(",") if k.strip()]
    except ValueError:
        _fail(f"--k-list must be comma-separated integers, got {k_list!r}", EXIT_USAGE)
    if not ks or any(not 0 <= k <= d for k in ks):
        _fail(f"every k must lie in [0, {d}]", EXIT_USAGE)
    try:
        cfg = load_train_config(config_path) if config_path else TrainConfig(seed=seed)
    except (SchemaError, OSError) as exc:
        _fail(str(exc), EXIT_USAGE)
    spec = SettingSpec(setting, d=d, density=density, seed=seed, n_per_intervention=samples, n_observational=samples)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        sem = build_ground_truth(spec)
        test = build_test_set(spec, sem)
        for k in ks:
            model, _ = train(intervention_subset(spec, k, sem), replace(cfg, seed=seed))
            report = evaluate(model, test, sem.graph)
            write_json(out / f"metrics_k{k}.json", {"k": k, **report.to_dict(), "seed": seed, "setting": setting,
                                                    "threshold": 0.5})
            rows.append({"k": k, **report.to_dict()})
            click.echo(f"k={k} auprc={report.auprc} shd={report.shd}")
    except NUMERIC_ERRORS as exc:
        _fail(str(exc), EXIT_NUMERIC)
    save_truth(out / "truth.json", sem)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_manifest(out, "sweep-interventions", {"setting": spec.to_dict(), "k_list": ks, "train": cfg.to_dict()},
                    {"config": config_path}, {"dir": out}, seed, t0)


if __name__ == "__main__":
    main()
