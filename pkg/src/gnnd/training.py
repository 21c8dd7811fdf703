"""Optimization loop pieces: warmup+cosine schedule, Adam, EMA shadow
parameters, per-atom-type target baselines, the corruption-aware training
step, evaluation, and binary checkpoints.

The whole run is a pure function of (config, seed): the only RNG lives in
TrainState and is checkpointed bit-exactly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (CheckpointError, ContractError, FitError, NumericError,
                     ValidationError)
from .featurize import atom_embed, init_atom_embedding
from .graphs import Batch, batch_from_graphs, unbatch
from .metrics import log_mae, mae, std_mae, within_threshold
from .nn import MLP
from .noise import NoiseSpec, compose_loss, corrupt_graph

__all__ = [
    "ScheduleSpec",
    "OptimizerSpec",
    "LossSpec",
    "TrainState",
    "lr_schedule",
    "adam_update",
    "ema_update",
    "init_train_state",
    "fit_atomref",
    "atomref_baseline",
    "count_atom_types",
    "ReferenceEnergy",
    "train_step",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "target_stats",
]


@dataclass(frozen=True)
class ScheduleSpec:
    """Linear warmup to max_lr, then a half-cosine decay to zero."""

    warmup_steps: int
    warmup_start_lr: float
    max_lr: float
    cosine_cycle_length: int

    def __post_init__(self):
        if self.warmup_steps < 0 or self.cosine_cycle_length < 0:
            raise ValidationError("schedule lengths must be >= 0")
        if self.warmup_steps > self.cosine_cycle_length:
            raise ValidationError(
                f"warmup_steps {self.warmup_steps} exceeds cycle length "
                f"{self.cosine_cycle_length}")
        if self.warmup_start_lr <= 0 or self.max_lr <= 0:
            raise ValidationError("learning rates must be positive")


def lr_schedule(step: int, spec: ScheduleSpec) -> float:
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step < spec.warmup_steps:
        frac = step / spec.warmup_steps
        return spec.warmup_start_lr + frac * (spec.max_lr - spec.warmup_start_lr)
    span = max(1, spec.cosine_cycle_length - spec.warmup_steps)
    t = min(1.0, (step - spec.warmup_steps) / span)
    return spec.max_lr * 0.5 * (1.0 + np.cos(np.pi * t))


@dataclass(frozen=True)
class OptimizerSpec:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    ema_decay: float = 0.9999


@dataclass
class TrainState:
    """Parameters, optimizer moments, EMA shadows, step counter, RNG."""

    params: dict[str, T.Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator


def init_train_state(params: dict, seed: int) -> TrainState:
    trainable = {k for k, v in params.items() if v.requires_grad}
    return TrainState(
        params=params,
        adam_m={k: np.zeros_like(params[k].data) for k in trainable},
        adam_v={k: np.zeros_like(params[k].data) for k in trainable},
        ema={k: v.data.copy() for k, v in params.items()},
        step=0,
        rng=np.random.default_rng(seed),
    )


def adam_update(state: TrainState, grads: dict[str, np.ndarray], lr: float,
                beta1: float = 0.9, beta2: float = 0.95,
                eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam over the trainable parameters, in place."""
    t = state.step + 1
    for name, g in grads.items():
        p = state.params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != param "
                                f"{name} shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def ema_effective_decay(step: int, base_decay: float) -> float:
    return min(base_decay, (1.0 + step) / (10.0 + step))


def ema_update(ema: dict[str, np.ndarray], params: dict[str, T.Tensor],
               step: int, base_decay: float) -> dict[str, np.ndarray]:
    """Shadow <- d*shadow + (1-d)*param with the step-ramped effective decay."""
    d = ema_effective_decay(step, base_decay)
    for name, shadow in ema.items():
        shadow *= d
        shadow += (1 - d) * params[name].data
    return ema


# ---------------------------------------------------------------------------
# target baselines


def count_atom_types(node_features: np.ndarray, num_types: int) -> np.ndarray:
    types = node_features[:, 0].astype(np.int64)
    return np.bincount(types, minlength=num_types).astype(np.float64)


def fit_atomref(graphs, num_types: int, target_index: int = 0) -> np.ndarray:
    """Least-squares per-atom-type coefficients for the graph target."""
    graphs = list(graphs)
    if len(graphs) < num_types:
        raise FitError(f"need at least {num_types} graphs to fit {num_types} "
                       "atom types; provide more data")
    counts = np.stack([count_atom_types(g.node_features, num_types)
                       for g in graphs])
    y = np.array([g.graph_target[target_index] for g in graphs])
    coef, _, rank, _ = np.linalg.lstsq(counts, y, rcond=None)
    if rank < num_types:
        raise FitError(f"design matrix rank {rank} < {num_types} atom types; "
                       "provide more varied data")
    return coef


def atomref_baseline(graph_or_batch, coef: np.ndarray) -> np.ndarray:
    """Per-graph baseline: coefficients dotted with the atom-type counts."""
    num_types = coef.shape[0]
    if isinstance(graph_or_batch, Batch):
        return np.array([count_atom_types(g.node_features, num_types) @ coef
                         for g in unbatch(graph_or_batch)])
    return np.atleast_1d(
        count_atom_types(graph_or_batch.node_features, num_types) @ coef)


class ReferenceEnergy:
    """Learned per-graph baseline: an MLP over atom-type embeddings, summed."""

    def __init__(self, num_types: int, embed_dim: int = 16, hidden: int = 16,
                 depth: int = 1, activation: str = "shifted_softplus"):
        self.num_types = num_types
        self.embed_dim = embed_dim
        self._mlp = MLP("ref/mlp", embed_dim, hidden, 1, depth, activation)

    def init(self, params: dict, rng: np.random.Generator) -> None:
        init_atom_embedding(params, "ref/embed", self.num_types, 0,
                            self.embed_dim, rng)
        self._mlp.init(params, rng)

    def apply(self, params: dict, batch: Batch) -> T.Tensor:
        types = batch.node_features[:, 0].astype(np.int64)
        per_node = self._mlp.apply(params, atom_embed(params, "ref/embed", types))
        return T.segment_sum(per_node, batch.graph_membership, batch.n_graphs)


# ---------------------------------------------------------------------------
# losses and the training step


@dataclass(frozen=True)
class LossSpec:
    """What the heads are trained against and how targets are scaled."""

    primary: str = "mse"            # "mse" | "softmax_ce" (graph head)
    aux: str = "none"               # "position_mse" | "category_ce" | "feature_mse"
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    target_std: np.ndarray = field(default_factory=lambda: np.ones(1))
    edge_cutoff: float | None = None
    node_vocab: int | None = None
    edge_vocab: int | None = None
    atomref: np.ndarray | None = None
    energy_threshold: float = 0.02
    distance_threshold: float = 0.1

    def __post_init__(self):
        if self.primary not in ("mse", "softmax_ce"):
            raise ValidationError(f"unknown primary loss '{self.primary}'")
        if self.aux not in ("none", "position_mse", "category_ce", "feature_mse"):
            raise ValidationError(f"unknown aux loss '{self.aux}'")

    def denormalize(self, preds: np.ndarray) -> np.ndarray:
        return preds * self.target_std + self.target_mean


def target_stats(graphs, atomref: np.ndarray | None = None):
    """Mean/std of graph targets (after the atomref baseline when given)."""
    ys = []
    for g in graphs:
        y = g.graph_target.astype(np.float64)
        if atomref is not None:
            y = y - atomref_baseline(g, atomref)
        ys.append(y)
    ys = np.stack(ys)
    mean = ys.mean(axis=0)
    std = ys.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def _mse(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    diff = T.sub(pred, T.Tensor(target))
    return T.mean_all(T.mul(diff, diff))


def _graph_regression_target(batch: Batch, loss_spec: LossSpec) -> np.ndarray:
    y = batch.graph_target
    if loss_spec.atomref is not None:
        y = y - atomref_baseline(batch, loss_spec.atomref)[:, None]
    return (y - loss_spec.target_mean) / loss_spec.target_std


def _primary_loss(head, batch, loss_spec, baseline=None) -> T.Tensor:
    if head.graph is None:
        return T.Tensor(0.0)
    pred = head.graph if baseline is None else T.add(head.graph, baseline)
    if loss_spec.primary == "mse":
        return _mse(pred, _graph_regression_target(batch, loss_spec))
    labels = batch.graph_target[:, 0].astype(np.int64)
    return T.softmax_cross_entropy(pred, labels)


def _aux_loss(head, edge_logits, aux_targets, loss_spec) -> T.Tensor:
    if head.nodes is None or aux_targets is None:
        return T.Tensor(0.0)
    if loss_spec.aux == "position_mse":
        return _mse(head.nodes, aux_targets["node_positions"])
    if loss_spec.aux == "feature_mse":
        return _mse(head.nodes, aux_targets["node_features"])
    if loss_spec.aux == "category_ce":
        loss = T.softmax_cross_entropy(head.nodes, aux_targets["node_categories"])
        edge_cats = aux_targets.get("edge_categories")
        if edge_logits is not None and edge_cats is not None and edge_cats.size:
            edge_ce = T.softmax_cross_entropy(edge_logits, edge_cats)
            loss = T.mul(T.add(loss, edge_ce), 0.5)
        return loss
    return T.Tensor(0.0)


def _corrupt_batch(batch: Batch, noise: NoiseSpec, rng, loss_spec: LossSpec):
    """Per-graph corruption, then re-concatenation. Returns the noisy batch
    plus the auxiliary-loss targets aligned with it."""
    records = [corrupt_graph(g, noise, rng, edge_cutoff=loss_spec.edge_cutoff,
                             node_vocab=loss_spec.node_vocab,
                             edge_vocab=loss_spec.edge_vocab)
               for g in unbatch(batch)]
    noisy = batch_from_graphs([r.noisy_graph for r in records])
    aux: dict[str, np.ndarray] = {}
    if all(r.corrected_node_targets is not None for r in records):
        aux["node_positions"] = np.concatenate(
            [r.corrected_node_targets for r in records])
    if all(r.clean_node_features is not None for r in records):
        clean = [np.asarray(r.clean_node_features) for r in records]
        if clean[0].ndim == 1:
            aux["node_categories"] = np.concatenate(clean).astype(np.int64)
        else:
            aux["node_features"] = np.concatenate(clean)
        if all(r.clean_edge_features is not None for r in records):
            aux["edge_categories"] = np.concatenate(
                [np.asarray(r.clean_edge_features) for r in records]).astype(np.int64)
    return noisy, (aux or None)


def _latent_norm_diagnostics(output) -> str:
    with np.errstate(all="ignore"):
        return "; ".join(f"layer {k}: {np.linalg.norm(s.data):.4g}"
                         for k, s in enumerate(output.snapshots))


def train_step(state: TrainState, batch: Batch, noise: NoiseSpec, model,
               loss_spec: LossSpec, schedule: ScheduleSpec,
               opt: OptimizerSpec = OptimizerSpec(),
               ref_energy: ReferenceEnergy | None = None):
    """One optimization step: corrupt, forward, composite loss over weight
    groups, backward, Adam with the scheduled rate, EMA, step+1.

    Returns (state, record) where the record holds the scalar losses; the
    reported primary/aux come from the final weight group.
    """
    lr = lr_schedule(state.step, schedule)
    aux_targets = None
    if noise.corrupts:
        batch, aux_targets = _corrupt_batch(batch, noise, state.rng, loss_spec)
    elif batch.node_targets is not None:
        aux_targets = {"node_positions": batch.node_targets}

    output = None
    try:
        output = model.forward(state.params, batch, train=True)
        baseline = ref_energy.apply(state.params, batch) if ref_energy else None
        group_losses = []
        primary_final = aux_final = None
        for head in output.group_heads:
            primary = _primary_loss(head, batch, loss_spec, baseline)
            if noise.aux_weight > 0:
                aux = _aux_loss(head, output.edge_logits, aux_targets, loss_spec)
            else:
                aux = T.Tensor(0.0)
            group_losses.append(compose_loss(primary, aux, noise.aux_weight))
            primary_final, aux_final = primary, aux
        total = group_losses[0]
        for gl in group_losses[1:]:
            total = T.add(total, gl)
        total = T.mul(total, 1.0 / len(group_losses))
    except NumericError as err:
        detail = ""
        try:
            with T.unchecked():
                diag = model.forward(state.params, batch, train=False)
            detail = f" (latent norms: {_latent_norm_diagnostics(diag)})"
        except Exception:
            pass
        raise NumericError(f"step {state.step}: {err}{detail}") from err

    trainable = {k: v for k, v in state.params.items() if v.requires_grad}
    grad_by_tensor = T.backward(total, params=list(trainable.values()))
    grads = {k: grad_by_tensor[v] for k, v in trainable.items()}
    adam_update(state, grads, lr, opt.beta1, opt.beta2, opt.eps)
    ema_update(state.ema, state.params, state.step, opt.ema_decay)
    state.step += 1
    record = {
        "step": state.step,
        "lr": lr,
        "loss": total.item(),
        "primary": primary_final.item(),
        "aux": aux_final.item(),
    }
    return state, record


def evaluate(model, state: TrainState, batches, loss_spec: LossSpec,
             use_ema: bool = True, ref_energy: ReferenceEnergy | None = None,
             classification: bool = False) -> dict:
    """Corruption-free forward passes over `batches`; metrics on raw scale.

    With use_ema, the EMA shadows are evaluated instead of the live
    parameters. No RNG is consulted anywhere on this path.
    """
    if use_ema:
        params = {k: T.Tensor(v, requires_grad=False)
                  for k, v in state.ema.items()}
    else:
        params = state.params
    graph_preds, graph_targets = [], []
    node_preds, node_targets = [], []
    for batch in batches:
        out = model.forward(params, batch, train=False)
        head = out.final
        if head.graph is not None and batch.graph_target is not None:
            pred = head.graph.data
            if ref_energy is not None:
                pred = pred + ref_energy.apply(params, batch).data
            if not classification:
                pred = loss_spec.denormalize(pred)
                if loss_spec.atomref is not None:
                    pred = pred + atomref_baseline(batch, loss_spec.atomref)[:, None]
            graph_preds.append(pred)
            graph_targets.append(batch.graph_target)
        if head.nodes is not None and batch.node_targets is not None:
            node_preds.append(head.nodes.data)
            node_targets.append(batch.node_targets)
    metrics: dict[str, float] = {}
    if graph_preds:
        pred = np.concatenate(graph_preds)
        target = np.concatenate(graph_targets)
        if classification:
            labels = target[:, 0].astype(np.int64)
            correct = pred.argmax(axis=1) == labels
            metrics["accuracy"] = float(correct.mean())
            zmax = pred.max(axis=1, keepdims=True)
            logp = pred - zmax - np.log(np.exp(pred - zmax).sum(axis=1,
                                                                keepdims=True))
            metrics["ce"] = float(-logp[np.arange(len(labels)), labels].mean())
        else:
            metrics["mae"] = mae(pred, target)
            metrics["aewt"] = within_threshold(pred[:, 0], target[:, 0],
                                               loss_spec.energy_threshold)
            per_target_mae = np.abs(pred - target).mean(axis=0)
            std = target.std(axis=0)
            if np.all(std > 0):
                metrics["std_mae"] = std_mae(per_target_mae, std)
                metrics["log_mae"] = log_mae(np.maximum(per_target_mae, 1e-300),
                                             std)
    if node_preds:
        pred = np.concatenate(node_preds)
        target = np.concatenate(node_targets)
        metrics["node_mae"] = mae(pred, target)
        metrics["adwt"] = within_threshold(pred, target,
                                           loss_spec.distance_threshold)
    return metrics


# ---------------------------------------------------------------------------
# checkpoints: magic "GNND", u32 version, length-prefixed named f64 tensors

_MAGIC = b"GNND"
_VERSION = 1
_U64_MASK = (1 << 64) - 1


def _encode_rng(rng: np.random.Generator) -> np.ndarray:
    s = rng.bit_generator.state
    if s.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported bit generator "
                              f"{s.get('bit_generator')}")
    st, inc = s["state"]["state"], s["state"]["inc"]
    words = np.array([st & _U64_MASK, (st >> 64) & _U64_MASK,
                      inc & _U64_MASK, (inc >> 64) & _U64_MASK,
                      s["has_uint32"], s["uinteger"]], dtype=np.uint64)
    return words.view(np.float64)


def _decode_rng(arr: np.ndarray) -> np.random.Generator:
    words = np.ascontiguousarray(arr).view(np.uint64)
    if words.shape != (6,):
        raise CheckpointError(f"malformed rng state of length {words.shape}")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(words[0]) | (int(words[1]) << 64),
                  "inc": int(words[2]) | (int(words[3]) << 64)},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return rng


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(data.astype("<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def _read_tensor(fh):
    name_len, = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    ndim, = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(path, state: TrainState,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Atomic write of the full TrainState plus any extra named arrays."""
    entries: list[tuple[str, np.ndarray]] = []
    for k, v in state.params.items():
        prefix = "param" if v.requires_grad else "buffer"
        entries.append((f"{prefix}/{k}", v.data))
    for k, v in state.adam_m.items():
        entries.append((f"adam_m/{k}", v))
    for k, v in state.adam_v.items():
        entries.append((f"adam_v/{k}", v))
    for k, v in state.ema.items():
        entries.append((f"ema/{k}", v))
    entries.append(("meta/step", np.asarray(float(state.step))))
    entries.append(("meta/rng", _encode_rng(state.rng)))
    for k, v in (extra or {}).items():
        entries.append((f"extra/{k}", np.asarray(v, dtype=np.float64)))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[TrainState, dict[str, np.ndarray]]:
    """Inverse of save_checkpoint; bit-exact including the RNG state."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        count, = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_read_tensor(fh) for _ in range(count))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} tensors")
    params: dict[str, T.Tensor] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    step = None
    rng = None
    for name, arr in tensors.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = T.Tensor(arr, requires_grad=True)
        elif kind == "buffer":
            params[rest] = T.Tensor(arr)
        elif kind == "adam_m":
            adam_m[rest] = arr.copy()
        elif kind == "adam_v":
            adam_v[rest] = arr.copy()
        elif kind == "ema":
            ema[rest] = arr.copy()
        elif name == "meta/step":
            step = int(arr)
        elif name == "meta/rng":
            rng = _decode_rng(arr)
        elif kind == "extra":
            extra[rest] = arr.copy()
        else:
            raise CheckpointError(f"{path}: unknown entry '{name}'")
    if step is None or rng is None:
        raise CheckpointError(f"{path}: missing step or rng state")
    return TrainState(params, adam_m, adam_v, ema, step, rng), extra
