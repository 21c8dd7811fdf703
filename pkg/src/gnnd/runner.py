"""Experiment orchestration: dataset wiring, the train/eval loop, artifact
emission (metrics CSV, diversity profile CSV, checkpoint, manifest), and
multi-run comparison.

A run directory is self-contained: the manifest carries the fully resolved
config, so a run can be reproduced or re-evaluated from the directory alone.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_from_dict, load_config
from .errors import ComparisonError, NumericError, ValidationError
from .featurize import FeaturizeSpec
from .graphs import Graph, batch_graphs, load_dataset
from .metrics import METRIC_DIRECTIONS, mad_profile
from .models import GCNModel, GNSModel, MPNNModel
from .noise import NoiseSpec
from .synth import (CategoricalSpec, RelaxationSpec,
                    generate_categorical_dataset, generate_equilibrium_dataset,
                    generate_relaxation_dataset)
from .training import (LossSpec, ReferenceEnergy, TrainState, evaluate,
                       fit_atomref, init_train_state, load_checkpoint,
                       lr_schedule, save_checkpoint, target_stats, train_step)

__all__ = ["TaskBundle", "build_task", "prepare_dataset", "split_dataset",
           "batch_stream", "run_experiment", "compare_runs", "load_run",
           "write_mad_profile"]

_METRIC_ORDER = ["mae", "aewt", "node_mae", "adwt", "std_mae", "log_mae",
                 "accuracy", "ce"]


@dataclass
class TaskBundle:
    model: object
    loss_spec: LossSpec
    ref_energy: ReferenceEnergy | None
    classification: bool
    primary_metric: str


def prepare_dataset(cfg: ExperimentConfig) -> list[Graph]:
    ds = cfg.dataset
    if ds.path is not None:
        graphs = load_dataset(ds.path)
    elif ds.task == "categorical":
        spec = CategoricalSpec(num_graphs=ds.num_graphs, nodes_min=ds.nodes_min,
                               nodes_max=ds.nodes_max, node_vocab=ds.node_vocab,
                               edge_vocab=ds.edge_vocab,
                               extra_edge_frac=ds.extra_bond_frac)
        graphs = generate_categorical_dataset(spec, cfg.seed)
    else:
        spec = RelaxationSpec(num_graphs=ds.num_graphs, nodes_min=ds.nodes_min,
                              nodes_max=ds.nodes_max, num_types=ds.num_types,
                              edge_cutoff=ds.edge_cutoff,
                              perturb_scale=ds.perturb_scale,
                              extra_bond_frac=ds.extra_bond_frac)
        generate = (generate_relaxation_dataset if ds.task == "relaxation"
                    else generate_equilibrium_dataset)
        graphs = generate(spec, cfg.seed)
    if ds.task == "categorical" and ds.one_hot:
        graphs = [_one_hot(g, ds.node_vocab) for g in graphs]
    return graphs


def _one_hot(graph: Graph, vocab: int) -> Graph:
    cats = graph.node_features[:, 0].astype(np.int64)
    feats = np.zeros((graph.n_nodes, vocab))
    feats[np.arange(graph.n_nodes), cats] = 1.0
    return dataclasses.replace(graph, node_features=feats)


def split_dataset(graphs: list[Graph], val_fraction: float, seed: int):
    order = np.random.default_rng([seed, 17]).permutation(len(graphs))
    n_val = max(1, int(round(val_fraction * len(graphs))))
    val_idx = set(order[:n_val].tolist())
    train = [graphs[i] for i in range(len(graphs)) if i not in val_idx]
    val = [graphs[i] for i in sorted(val_idx)]
    return train, val


def build_task(cfg: ExperimentConfig, train_graphs: list[Graph]) -> TaskBundle:
    ds, model_cfg, extras = cfg.dataset, cfg.model, cfg.model_extras
    geometric = ds.task in ("relaxation", "equilibrium")
    if geometric and model_cfg.arch != "gns":
        raise ValidationError(f"task '{ds.task}' needs positions; use the gns "
                              f"arch (got '{model_cfg.arch}')")
    if not geometric and model_cfg.arch == "gns":
        raise ValidationError("the gns arch needs a geometric task")

    if geometric:
        atomref = None
        if ds.fit_atomref:
            atomref = fit_atomref(train_graphs, ds.num_types)
        mean, std = target_stats(train_graphs, atomref)
        loss_spec = LossSpec(
            primary="mse", aux="position_mse", target_mean=mean,
            target_std=std, edge_cutoff=ds.edge_cutoff, atomref=atomref,
            energy_threshold=cfg.energy_threshold,
            distance_threshold=cfg.distance_threshold)
        feat = FeaturizeSpec(num_rbf=extras.num_rbf, embed_dim=extras.embed_dim,
                             rbf_cutoff=extras.rbf_cutoff,
                             use_fractional=extras.use_fractional)
        model = GNSModel(model_cfg, feat, num_atom_types=ds.num_types)
        ref = ReferenceEnergy(ds.num_types) if extras.use_reference_energy else None
        return TaskBundle(model, loss_spec, ref, False, "mae")

    if ds.one_hot:
        loss_spec = LossSpec(primary="softmax_ce", aux="feature_mse")
        model = GCNModel(model_cfg, node_in_dim=ds.node_vocab, graph_out_dim=2,
                         node_out_dim=ds.node_vocab)
    else:
        loss_spec = LossSpec(primary="softmax_ce", aux="category_ce",
                             node_vocab=ds.node_vocab, edge_vocab=ds.edge_vocab)
        if model_cfg.arch == "mpnn_vn":
            model = MPNNModel(model_cfg, node_vocab=ds.node_vocab,
                              edge_vocab=ds.edge_vocab, graph_out_dim=2,
                              use_virtual_node=extras.use_virtual_node)
        else:
            model = GCNModel(model_cfg, node_vocab=ds.node_vocab,
                             graph_out_dim=2, node_out_dim=ds.node_vocab)
    return TaskBundle(model, loss_spec, None, True, "accuracy")


def batch_stream(graphs: list[Graph], limits, seed: int):
    """Endless epoch-shuffled batches; pure function of (graphs, seed)."""
    epoch = 0
    while True:
        order = np.random.default_rng([seed, 29, epoch]).permutation(len(graphs))
        for batch in batch_graphs([graphs[i] for i in order], limits.max_nodes,
                                  limits.max_edges, limits.max_graphs):
            yield batch
        epoch += 1


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _improved(current: float, best: float, direction: str) -> bool:
    return current < best if direction == "min" else current > best


def write_mad_profile(path, model, params, batch) -> None:
    lat = mad_profile(model, params, batch, target="latents")
    res = mad_profile(model, params, batch, target="residual_updates")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "mad_latents", "mad_residuals"])
        for k in range(lat.num_layers):
            writer.writerow([k + 1, _fmt(float(lat.values[k])),
                             _fmt(float(res.values[k]))])


def run_experiment(cfg_or_path, seed: int | None = None,
                   out_dir: str | None = None) -> dict:
    """Execute one training run; returns a summary dict.

    Artifacts written to the run directory: metrics.csv (one row per eval),
    mad_profile.csv, checkpoint.bin, manifest.json. A mid-run numeric failure
    writes failure.json and re-raises.
    """
    cfg = cfg_or_path if isinstance(cfg_or_path, ExperimentConfig) \
        else load_config(cfg_or_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
    os.makedirs(cfg.out_dir, exist_ok=True)

    graphs = prepare_dataset(cfg)
    train_graphs, val_graphs = split_dataset(graphs, cfg.dataset.val_fraction,
                                             cfg.seed)
    task = build_task(cfg, train_graphs)
    model = task.model
    params = model.init_params(np.random.default_rng([cfg.seed, 3]))
    if task.ref_energy is not None:
        task.ref_energy.init(params, np.random.default_rng([cfg.seed, 5]))
    state = init_train_state(params, seed=cfg.seed)
    val_batches = batch_graphs(val_graphs, cfg.batching.max_nodes,
                               cfg.batching.max_edges, cfg.batching.max_graphs)

    def run_eval():
        return evaluate(model, state, val_batches, task.loss_spec,
                        use_ema=cfg.use_ema_for_eval,
                        ref_energy=task.ref_energy,
                        classification=task.classification)

    first = run_eval()
    metric_names = [m for m in _METRIC_ORDER if m in first]
    header = ["step", "lr", "train_loss", "aux_loss"] + \
        [f"val_{m}" for m in metric_names]
    rows = [[0, lr_schedule(0, cfg.schedule), float("nan"), float("nan")] +
            [first[m] for m in metric_names]]

    direction = METRIC_DIRECTIONS[task.primary_metric]
    best = first[task.primary_metric]
    best_step = 0
    stale = 0
    stream = batch_stream(train_graphs, cfg.batching, cfg.seed)
    loss_acc: list[float] = []
    aux_acc: list[float] = []
    stopped_early = False
    try:
        for _ in range(state.step):     # fast-forward after checkpoint resume
            next(stream)
        while state.step < cfg.train_steps:
            batch = next(stream)
            state, rec = train_step(state, batch, cfg.noise, model,
                                    task.loss_spec, cfg.schedule, cfg.adam,
                                    ref_energy=task.ref_energy)
            loss_acc.append(rec["loss"])
            aux_acc.append(rec["aux"])
            if state.step % cfg.eval_interval == 0 or \
                    state.step == cfg.train_steps:
                metrics = run_eval()
                rows.append([state.step, rec["lr"],
                             float(np.mean(loss_acc)), float(np.mean(aux_acc))] +
                            [metrics[m] for m in metric_names])
                loss_acc, aux_acc = [], []
                current = metrics[task.primary_metric]
                if _improved(current, best, direction):
                    best, best_step, stale = current, state.step, 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        stopped_early = True
                        break
    except NumericError as err:
        with open(os.path.join(cfg.out_dir, "failure.json"), "w") as fh:
            json.dump({"step": state.step, "error": str(err)}, fh, indent=2)
        raise

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])

    extra = {
        "target_mean": task.loss_spec.target_mean,
        "target_std": task.loss_spec.target_std,
    }
    if task.loss_spec.atomref is not None:
        extra["atomref"] = task.loss_spec.atomref
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.bin"), state, extra)

    eval_params = {k: __import__("gnnd.tensor", fromlist=["Tensor"]).Tensor(v)
                   for k, v in state.ema.items()} if cfg.use_ema_for_eval \
        else state.params
    if val_batches:
        write_mad_profile(os.path.join(cfg.out_dir, "mad_profile.csv"),
                          model, eval_params, val_batches[0])

    summary = {
        "best_" + task.primary_metric: best,
        "best_step": best_step,
        "final_step": state.step,
        "stopped_early": stopped_early,
    }
    manifest = {
        "config": _jsonable(dataclasses.asdict(cfg)),
        "version": __version__,
        "numpy_version": np.__version__,
        "n_train": len(train_graphs),
        "n_val": len(val_graphs),
        "metric_columns": header,
        "summary": summary,
    }
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return summary


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def load_run(run_dir):
    """Rebuild (cfg, task, state, val_batches) from a run directory."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ComparisonError(f"{run_dir}: no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    doc = manifest["config"]
    model = dict(doc["model"])
    model.update(doc.pop("model_extras"))
    doc["model"] = model
    noise = doc["noise"]
    noise["lambda"] = noise.pop("aux_weight")
    cfg = config_from_dict(doc, base_dir=run_dir)
    graphs = prepare_dataset(cfg)
    train_graphs, val_graphs = split_dataset(graphs, cfg.dataset.val_fraction,
                                             cfg.seed)
    task = build_task(cfg, train_graphs)
    state, extra = load_checkpoint(os.path.join(run_dir, "checkpoint.bin"))
    task.loss_spec = dataclasses.replace(
        task.loss_spec,
        target_mean=extra["target_mean"], target_std=extra["target_std"],
        atomref=extra.get("atomref"))
    val_batches = batch_graphs(val_graphs, cfg.batching.max_nodes,
                               cfg.batching.max_edges, cfg.batching.max_graphs)
    return cfg, task, state, val_batches


def _read_metrics(run_dir):
    path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise ComparisonError(f"{run_dir}: no metrics.csv")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def compare_runs(run_dirs, out_path) -> None:
    """Merge metrics aligned by step, one column block per run, plus a final
    row holding each column's best value (per the metric direction registry)."""
    if not run_dirs:
        raise ComparisonError("no run directories given")
    names = []
    for d in run_dirs:
        base = os.path.basename(os.path.normpath(str(d)))
        names.append(f"{base}#{names.count(base)}" if base in names else base)
    tables = [_read_metrics(d) for d in run_dirs]
    headers = [h for h, _ in tables]
    columns = [h[1:] for h in headers]       # step is the join key
    if any(set(c) != set(columns[0]) for c in columns):
        raise ComparisonError(f"runs have disjoint metric columns: "
                              f"{[sorted(c) for c in columns]}")
    step_maps = [{row[0]: row for row in rows} for _, rows in tables]
    shared = [s for s in step_maps[0] if all(s in m for m in step_maps)]
    shared.sort(key=float)

    out_header = ["step"]
    for name, cols in zip(names, columns):
        out_header += [f"{name}/{c}" for c in cols]
    out_rows = []
    for s in shared:
        row = [s]
        for (header, _), m in zip(tables, step_maps):
            idx = {c: i for i, c in enumerate(header)}
            row += [m[s][idx[c]] for c in header[1:]]
        out_rows.append(row)

    summary = ["best"]
    for (header, rows) in tables:
        for col_i, col in enumerate(header[1:], start=1):
            metric = col.removeprefix("val_")
            direction = METRIC_DIRECTIONS.get(metric)
            if direction is None:
                summary.append("")
                continue
            vals = [float(r[col_i]) for r in rows
                    if r[col_i] not in ("", "nan")]
            vals = [v for v in vals if not np.isnan(v)]
            if not vals:
                summary.append("")
            else:
                summary.append(_fmt(min(vals) if direction == "min"
                                    else max(vals)))
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(out_header)
        writer.writerows(out_rows)
        writer.writerow(summary)
