"""Input corruption schemes, target correction, and the weighted auxiliary loss.

Position schemes add Gaussian noise (optionally after interpolating toward a
known relaxed configuration) and correct displacement targets by the injected
noise. Categorical schemes flip category ids and keep the clean ids as
reconstruction targets. Dropout zeroes feature entries with inverse scaling.
DropEdge / DropNode run as independent train-time augmentations and compose
with any of the above.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, ValidationError
from .graphs import Graph, recompute_edges

__all__ = [
    "NoiseSpec",
    "CorruptionRecord",
    "gaussian_corrupt",
    "trajectory_interpolate",
    "adjust_target",
    "flip_categories",
    "input_dropout",
    "drop_edge",
    "drop_node",
    "corrupt_graph",
    "compose_loss",
]

_KINDS = ("gaussian_positions", "trajectory_interp_then_gaussian",
          "category_flip", "input_dropout", "none")


@dataclass(frozen=True)
class NoiseSpec:
    """Declarative corruption scheme plus the auxiliary-loss weight."""

    kind: str = "none"
    sigma: float = 0.0
    flip_rate: float = 0.0
    dropout_rate: float = 0.0
    aux_weight: float = 0.0          # lambda on the node-level loss
    predict_differences: bool = False
    drop_edge_rate: float = 0.0
    drop_node_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"noise kind must be one of {_KINDS}, "
                                  f"got '{self.kind}'")
        if self.sigma < 0:
            raise ValidationError(f"sigma must be >= 0, got {self.sigma}")
        for name in ("flip_rate", "dropout_rate", "drop_edge_rate",
                     "drop_node_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.aux_weight < 0:
            raise ValidationError(f"aux_weight must be >= 0, got {self.aux_weight}")

    @property
    def corrupts(self) -> bool:
        return (self.kind != "none" or self.drop_edge_rate > 0
                or self.drop_node_rate > 0)


@dataclass
class CorruptionRecord:
    """A corrupted graph with whatever the auxiliary loss needs to target.

    per_node_noise always satisfies noisy positions - clean positions ==
    per_node_noise exactly (position schemes). Categorical schemes fill the
    mask/clean-target fields instead.
    """

    noisy_graph: Graph
    per_node_noise: np.ndarray | None = None
    corrected_node_targets: np.ndarray | None = None
    node_mask: np.ndarray | None = None
    edge_mask: np.ndarray | None = None
    clean_node_features: np.ndarray | None = None
    clean_edge_features: np.ndarray | None = None


def gaussian_corrupt(graph: Graph, sigma: float, rng: np.random.Generator,
                     edge_cutoff: float | None = None) -> CorruptionRecord:
    """Add iid N(0, sigma^2) noise to every position coordinate.

    With edge_cutoff given the edge set is rebuilt from the noisy positions
    (the geometric-task convention: noise first, then edges).
    """
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    if graph.positions is None:
        raise ContractError("gaussian_corrupt needs positions")
    if sigma == 0:
        noise = np.zeros_like(graph.positions)
        noisy = graph
    else:
        noise = rng.normal(0.0, sigma, size=graph.positions.shape)
        noisy = graph.with_positions(graph.positions + noise)
    if edge_cutoff is not None:
        senders, receivers = recompute_edges(noisy.positions, edge_cutoff)
        noisy = noisy.with_edges(senders, receivers)
    corrected = None
    if graph.node_targets is not None:
        corrected = adjust_target(graph.node_targets, noise)
    return CorruptionRecord(noisy, per_node_noise=noise,
                            corrected_node_targets=corrected)


def trajectory_interpolate(v_init: np.ndarray, v_final: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """One gamma ~ U(0,1) per call; returns v_init + gamma (v_final - v_init)."""
    v_init = np.asarray(v_init, dtype=np.float64)
    v_final = np.asarray(v_final, dtype=np.float64)
    if v_init.shape != v_final.shape:
        raise ContractError(f"position shapes differ: {v_init.shape} vs "
                            f"{v_final.shape}")
    gamma = rng.uniform(0.0, 1.0)
    return v_init + gamma * (v_final - v_init)


def adjust_target(delta: np.ndarray, per_node_noise: np.ndarray) -> np.ndarray:
    """Corrected displacement target after noise: delta - noise, elementwise."""
    delta = np.asarray(delta, dtype=np.float64)
    noise = np.asarray(per_node_noise, dtype=np.float64)
    if delta.shape != noise.shape:
        raise ContractError(f"target/noise shapes differ: {delta.shape} vs "
                            f"{noise.shape}")
    return delta - noise


def flip_categories(features: np.ndarray, vocab_sizes, rate: float,
                    rng: np.random.Generator):
    """Resample each category id uniformly over its vocabulary excluding the
    current value, independently with probability `rate`.

    Returns (noisy, clean); clean is the reconstruction target.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"flip rate must be in [0, 1], got {rate}")
    clean = np.asarray(features, dtype=np.int64).copy()
    if clean.ndim == 1:
        clean = clean[:, None]
    vocab = np.asarray(vocab_sizes, dtype=np.int64)
    if vocab.shape != (clean.shape[1],):
        raise ContractError(f"need one vocab size per column, got {vocab.shape} "
                            f"for {clean.shape[1]} columns")
    if np.any((clean < 0) | (clean >= vocab)):
        raise ContractError("category id outside its vocabulary")
    noisy = clean.copy()
    if rate > 0 and clean.size:
        if np.any(vocab < 2):
            raise ContractError("flipping needs vocabulary size >= 2")
        mask = rng.uniform(size=clean.shape) < rate
        draw = np.floor(rng.uniform(size=clean.shape) * (vocab - 1)).astype(np.int64)
        draw = np.minimum(draw, vocab - 2)       # guard u == 1.0
        draw += (draw >= clean)                  # skip the current value
        noisy[mask] = draw[mask]
    return noisy, clean


def input_dropout(features: np.ndarray, rate: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Zero entries independently with probability rate; survivors scaled by
    1/(1-rate) so the expectation is preserved."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    feats = np.asarray(features, dtype=np.float64)
    if rate == 0:
        return feats.copy()
    keep = rng.uniform(size=feats.shape) >= rate
    return feats * keep / (1.0 - rate)


def drop_edge(graph: Graph, rate: float, rng: np.random.Generator) -> Graph:
    """Remove each directed edge independently with probability rate."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"drop_edge rate must be in [0, 1], got {rate}")
    if rate == 0 or graph.n_edges == 0:
        return graph
    keep = rng.uniform(size=graph.n_edges) >= rate
    return replace(graph, senders=graph.senders[keep],
                   receivers=graph.receivers[keep],
                   edge_attrs=graph.edge_attrs[keep])


def drop_node(graph: Graph, rate: float, rng: np.random.Generator) -> Graph:
    """Remove nodes iid with probability rate; incident edges go too, and the
    surviving indices are compacted order-preservingly."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"drop_node rate must be in [0, 1], got {rate}")
    if rate == 0:
        return graph
    keep = rng.uniform(size=graph.n_nodes) >= rate
    if not keep.any():
        keep = rng.uniform(size=graph.n_nodes) >= rate
        if not keep.any():
            raise ContractError("drop_node removed every node twice in a row")
    remap = np.cumsum(keep) - 1
    edge_keep = keep[graph.senders] & keep[graph.receivers]
    return Graph(
        node_features=graph.node_features[keep],
        senders=remap[graph.senders[edge_keep]],
        receivers=remap[graph.receivers[edge_keep]],
        edge_attrs=graph.edge_attrs[edge_keep],
        global_attr=graph.global_attr,
        positions=None if graph.positions is None else graph.positions[keep],
        node_targets=None if graph.node_targets is None
        else graph.node_targets[keep],
        graph_target=graph.graph_target,
    )


def corrupt_graph(graph: Graph, spec: NoiseSpec, rng: np.random.Generator,
                  edge_cutoff: float | None = None,
                  node_vocab: int | None = None,
                  edge_vocab: int | None = None) -> CorruptionRecord:
    """Apply the full scheme: DropNode first, then the main corruption, then
    DropEdge. On geometric kinds the edge set is rebuilt from the noisy
    positions before DropEdge; on structural kinds DropEdge runs first so
    edge-level reconstruction targets stay aligned with the surviving edges.
    """
    if spec.drop_node_rate > 0:
        graph = drop_node(graph, spec.drop_node_rate, rng)
    geometric = spec.kind in ("gaussian_positions",
                              "trajectory_interp_then_gaussian")
    if not geometric and spec.drop_edge_rate > 0:
        graph = drop_edge(graph, spec.drop_edge_rate, rng)

    if geometric:
        base = graph
        if spec.kind == "trajectory_interp_then_gaussian":
            if graph.node_targets is None or not spec.predict_differences:
                raise ContractError("trajectory interpolation needs displacement "
                                    "targets (predict_differences)")
            v_final = graph.positions + graph.node_targets
            interp = trajectory_interpolate(graph.positions, v_final, rng)
            base = graph.with_positions(interp)
        rec = gaussian_corrupt(base, spec.sigma, rng, edge_cutoff)
        total_noise = rec.noisy_graph.positions - graph.positions
        corrected = None
        if spec.predict_differences and graph.node_targets is not None:
            corrected = adjust_target(graph.node_targets, total_noise)
        elif not spec.predict_differences:
            # denoising-autoencoder target: clean minus noisy position
            corrected = -total_noise
        rec = CorruptionRecord(rec.noisy_graph, per_node_noise=total_noise,
                               corrected_node_targets=corrected)
        if spec.drop_edge_rate > 0:
            rec.noisy_graph = drop_edge(rec.noisy_graph, spec.drop_edge_rate, rng)
        return rec

    if spec.kind == "category_flip":
        if node_vocab is None or edge_vocab is None:
            raise ContractError("category_flip needs node/edge vocabulary sizes")
        noisy_nodes, clean_nodes = flip_categories(
            graph.node_features[:, 0], [node_vocab], spec.flip_rate, rng)
        nf = graph.node_features.copy()
        nf[:, 0] = noisy_nodes[:, 0]
        if graph.n_edges:
            noisy_edges, clean_edges = flip_categories(
                graph.edge_attrs[:, 0], [edge_vocab], spec.flip_rate, rng)
            ea = graph.edge_attrs.copy()
            ea[:, 0] = noisy_edges[:, 0]
        else:
            clean_edges = np.zeros((0, 1), dtype=np.int64)
            ea = graph.edge_attrs
        rec = CorruptionRecord(
            replace(graph, node_features=nf, edge_attrs=ea),
            node_mask=(nf[:, 0] != graph.node_features[:, 0]),
            clean_node_features=clean_nodes[:, 0],
            clean_edge_features=clean_edges[:, 0])
    elif spec.kind == "input_dropout":
        noisy = input_dropout(graph.node_features, spec.dropout_rate, rng)
        rec = CorruptionRecord(
            replace(graph, node_features=noisy),
            node_mask=(noisy == 0).all(axis=1),
            clean_node_features=graph.node_features.copy())
    else:
        rec = CorruptionRecord(graph,
                               per_node_noise=None if graph.positions is None
                               else np.zeros_like(graph.positions),
                               corrected_node_targets=graph.node_targets)
    return rec


def compose_loss(primary: T.Tensor, aux: T.Tensor, weight: float) -> T.Tensor:
    """primary + weight * aux; both must be finite scalars, gradients flow
    through both terms."""
    if primary.shape != () or aux.shape != ():
        raise ContractError("compose_loss expects scalar losses")
    return T.add(primary, T.mul(aux, float(weight)))
