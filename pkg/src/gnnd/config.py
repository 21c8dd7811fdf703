"""Experiment configuration: one JSON document, fixed schema, explicit
defaults, and validation that reports every problem at once."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

from .errors import ConfigError, ValidationError
from .models import ModelConfig
from .noise import NoiseSpec
from .training import OptimizerSpec, ScheduleSpec

__all__ = ["DatasetConfig", "ModelExtras", "BatchLimits", "ExperimentConfig",
           "load_config", "config_from_dict", "resolved_dict"]

_TASKS = ("relaxation", "equilibrium", "categorical")


@dataclass(frozen=True)
class DatasetConfig:
    task: str
    path: str | None = None
    num_graphs: int = 200
    nodes_min: int = 10
    nodes_max: int = 20
    num_types: int = 4
    edge_cutoff: float = 2.5
    perturb_scale: float = 0.3
    extra_bond_frac: float = 0.4
    node_vocab: int = 5
    edge_vocab: int = 3
    one_hot: bool = False
    val_fraction: float = 0.1
    fit_atomref: bool = False

    def __post_init__(self):
        if self.task not in _TASKS:
            raise ValidationError(f"dataset.task must be one of {_TASKS}, "
                                  f"got '{self.task}'")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("dataset.val_fraction must be in (0, 1)")
        if self.num_graphs < 2:
            raise ValidationError("dataset.num_graphs must be >= 2")


@dataclass(frozen=True)
class ModelExtras:
    """Featurization and composition knobs that ride in the model section."""

    num_rbf: int = 8
    rbf_cutoff: float = 2.5
    embed_dim: int = 16
    use_fractional: bool = False
    use_virtual_node: bool = True
    use_reference_energy: bool = False


@dataclass(frozen=True)
class BatchLimits:
    max_nodes: int = 256
    max_edges: int = 4096
    max_graphs: int = 8

    def __post_init__(self):
        if min(self.max_nodes, self.max_edges, self.max_graphs) < 1:
            raise ValidationError("batching limits must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    dataset: DatasetConfig
    model: ModelConfig
    model_extras: ModelExtras
    noise: NoiseSpec
    schedule: ScheduleSpec
    adam: OptimizerSpec
    batching: BatchLimits
    train_steps: int
    eval_interval: int
    use_ema_for_eval: bool = True
    early_stop_patience: int = 10
    energy_threshold: float = 0.02
    distance_threshold: float = 0.1

    def __post_init__(self):
        if self.train_steps < 1:
            raise ValidationError("train_steps must be >= 1")
        if self.eval_interval < 1:
            raise ValidationError("eval_interval must be >= 1")


def _pick(doc: dict, cls, problems: list[str], section: str,
          rename: dict | None = None):
    """Build a dataclass from the matching keys of `doc`, collecting unknown
    keys and constructor complaints instead of raising."""
    names = {f.name for f in dataclasses.fields(cls)}
    rename = rename or {}
    kwargs = {}
    for key, value in doc.items():
        name = rename.get(key, key)
        if name in names:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError) as err:
        problems.append(f"{section}: {err}")
        return None


def config_from_dict(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])

    known_top = {"seed", "out_dir", "dataset", "model", "noise", "schedule",
                 "adam", "batching", "train_steps", "eval_interval",
                 "use_ema_for_eval", "early_stop_patience", "energy_threshold",
                 "distance_threshold"}
    for key in doc:
        if key not in known_top:
            problems.append(f"unknown top-level key '{key}'")

    seed = doc.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed: required and must be an integer "
                        "(no wall-clock default)")
    out_dir = doc.get("out_dir")
    if not isinstance(out_dir, str) or not out_dir:
        problems.append("out_dir: required and must be a non-empty string")

    sections = {}
    for name, cls, rename in (
            ("dataset", DatasetConfig, None),
            ("noise", NoiseSpec, {"lambda": "aux_weight"}),
            ("schedule", ScheduleSpec, None),
            ("adam", OptimizerSpec, None),
            ("batching", BatchLimits, None)):
        sub = doc.get(name, {} if name in ("adam", "batching") else None)
        if sub is None:
            problems.append(f"{name}: section is required")
            sections[name] = None
        elif not isinstance(sub, dict):
            problems.append(f"{name}: must be an object")
            sections[name] = None
        else:
            sections[name] = _pick(sub, cls, problems, name, rename)

    model_doc = doc.get("model")
    model = extras = None
    if not isinstance(model_doc, dict):
        problems.append("model: section is required and must be an object")
    else:
        model_names = {f.name for f in dataclasses.fields(ModelConfig)}
        extra_names = {f.name for f in dataclasses.fields(ModelExtras)}
        for key in model_doc:
            if key not in model_names | extra_names:
                problems.append(f"model: unknown key '{key}'")
        model = _pick(model_doc, ModelConfig, problems, "model")
        extras = _pick(model_doc, ModelExtras, problems, "model")

    ds = sections.get("dataset")
    if ds is not None and ds.path is not None:
        full = ds.path if os.path.isabs(ds.path) else \
            os.path.join(base_dir, ds.path)
        if not os.path.exists(full):
            problems.append(f"dataset.path: file '{ds.path}' does not exist")
        else:
            sections["dataset"] = dataclasses.replace(ds, path=full)

    cfg = None
    if not problems:
        try:
            cfg = ExperimentConfig(
                seed=seed,
                out_dir=out_dir,
                dataset=sections["dataset"],
                model=model,
                model_extras=extras,
                noise=sections["noise"],
                schedule=sections["schedule"],
                adam=sections["adam"],
                batching=sections["batching"],
                train_steps=doc.get("train_steps", 0),
                eval_interval=doc.get("eval_interval", 0),
                use_ema_for_eval=doc.get("use_ema_for_eval", True),
                early_stop_patience=doc.get("early_stop_patience", 10),
                energy_threshold=doc.get("energy_threshold", 0.02),
                distance_threshold=doc.get("distance_threshold", 0.1),
            )
        except (ValidationError, TypeError) as err:
            problems.append(str(err))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file '{path}' does not exist"])
    except json.JSONDecodeError as err:
        raise ConfigError([f"config is not valid JSON: {err}"])
    return config_from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def resolved_dict(cfg: ExperimentConfig) -> dict:
    """The full config with every default filled in, for the run manifest."""
    doc = dataclasses.asdict(cfg)
    model = doc.pop("model")
    model.update(doc.pop("model_extras"))
    doc["model"] = model
    return doc
