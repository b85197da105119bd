"""JSON file formats for datasets, ground truth, models and metrics."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .graph import CausalGraph, Dataset, ExperimentData, GroundTruthSEM, InterventionSpec
from .mechanism import DTYPE, MaskedMechanism


class SchemaError(ValueError):
    """Input file does not match the expected layout; message names the field."""


def write_json(path, obj) -> None:
    # key order is fixed by construction; floats use shortest round-trip repr
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def _matrix(value, shape, where):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: expected a numeric array") from exc
    if shape is not None and arr.shape != shape:
        raise SchemaError(f"{where}: expected shape {shape}, got {arr.shape}")
    return arr


# --------------------------------------------------------------------- dataset
def dataset_to_dict(data: Dataset) -> dict:
    exps = []
    for e in data.experiments:
        rule = e.spec.values if isinstance(e.spec.values, str) else {"fixed": list(e.spec.values)}
        exps.append({"targets": list(e.spec.targets), "value_rule": rule, "samples": e.samples.tolist()})
    return {"d": data.d, "experiments": exps}


def dataset_from_dict(obj: dict, where: str = "dataset") -> Dataset:
    d = _require(obj, "d", where)
    if not isinstance(d, int) or d < 1:
        raise SchemaError(f"{where}.d: expected a positive integer")
    exps = []
    for k, e in enumerate(_require(obj, "experiments", where)):
        w = f"{where}.experiments[{k}]"
        targets = _require(e, "targets", w)
        rule = _require(e, "value_rule", w)
        if isinstance(rule, dict):
            rule = tuple(_require(rule, "fixed", f"{w}.value_rule"))
        elif rule != "standard_normal":
            raise SchemaError(f"{w}.value_rule: expected 'standard_normal' or {{'fixed': [...]}}")
        try:
            spec = InterventionSpec(tuple(targets), rule)
            spec.check(d)
        except ValueError as exc:
            raise SchemaError(f"{w}.targets: {exc}") from exc
        samples = _matrix(_require(e, "samples", w), None, f"{w}.samples").reshape(-1, d) if len(e["samples"]) else np.zeros((0, d))
        exps.append(ExperimentData(spec, samples))
    return Dataset(d, exps)


def save_dataset(path, data: Dataset) -> None:
    write_json(path, dataset_to_dict(data))


def load_dataset(path) -> Dataset:
    return dataset_from_dict(read_json(path), str(path))


# ---------------------------------------------------------------- ground truth
def sem_to_dict(sem: GroundTruthSEM) -> dict:
    return {
        "d": sem.d,
        "edges": sem.graph.edges.tolist(),
        "weights": sem.weights.tolist(),
        "activation": sem.activation,
        "noise_scales": sem.noise_scales.tolist(),
    }


def sem_from_dict(obj: dict, where: str = "truth") -> GroundTruthSEM:
    d = _require(obj, "d", where)
    edges = _matrix(_require(obj, "edges", where), (d, d), f"{where}.edges").astype(np.int64)
    weights = _matrix(obj.get("weights", np.zeros((d, d))), (d, d), f"{where}.weights")
    scales = _matrix(obj.get("noise_scales", np.ones(d)), (d,), f"{where}.noise_scales")
    try:
        return GroundTruthSEM(CausalGraph(edges), weights, obj.get("activation", "linear"), scales)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def save_truth(path, sem: GroundTruthSEM) -> None:
    write_json(path, sem_to_dict(sem))


def load_truth(path) -> GroundTruthSEM:
    return sem_from_dict(read_json(path), str(path))


# ----------------------------------------------------------------------- model
def model_to_dict(model: MaskedMechanism) -> dict:
    def arr(t):
        return t.detach().numpy().tolist()

    return {
        "d": model.d,
        "kind": model.kind,
        "activation": model.activation,
        "layers": [{"w": arr(w), "b": arr(b)} for w, b in zip(model.weights, model.biases)],
        "mask_logits": arr(model.mask_logits),
        "log_lambda": arr(model.log_lambda),
        "noise_means": arr(model.noise_means),
        "noise_log_scales": arr(model.noise_log_scales),
        "poisson_intensity": model.poisson_intensity,
        "lipschitz_target": model.lipschitz_target,
    }


def model_from_dict(obj: dict, where: str = "model") -> MaskedMechanism:
    d = _require(obj, "d", where)
    layers = _require(obj, "layers", where)
    if not layers:
        raise SchemaError(f"{where}.layers: at least one layer required")
    try:
        model = MaskedMechanism(
            d,
            n_hidden_layers=len(layers) - 1,
            activation=_require(obj, "activation", where),
            kind=_require(obj, "kind", where),
            lipschitz_target=obj.get("lipschitz_target", 0.9),
            poisson_intensity=obj.get("poisson_intensity", 2.0),
        )
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    with torch.no_grad():
        for k, layer in enumerate(layers):
            w = f"{where}.layers[{k}]"
            model.weights[k].copy_(torch.as_tensor(_matrix(_require(layer, "w", w), (d, d), f"{w}.w"), dtype=DTYPE))
            model.biases[k].copy_(torch.as_tensor(_matrix(_require(layer, "b", w), (d,), f"{w}.b"), dtype=DTYPE))
        model.mask_logits.copy_(torch.as_tensor(_matrix(_require(obj, "mask_logits", where), (d, d), f"{where}.mask_logits")))
        for name in ("log_lambda", "noise_means", "noise_log_scales"):
            getattr(model, name).copy_(torch.as_tensor(_matrix(_require(obj, name, where), (d,), f"{where}.{name}")))
    return model


def save_model(path, model: MaskedMechanism) -> None:
    write_json(path, model_to_dict(model))


def load_model(path) -> MaskedMechanism:
    return model_from_dict(read_json(path), str(path))
