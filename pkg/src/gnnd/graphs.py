"""Graph containers, validation, dynamic batching, and serialization.

A Graph holds plain float64 numpy arrays; models wrap fields in autodiff
tensors at their boundary. Edges are directed and stored structure-of-arrays
(senders, receivers, edge_attrs). Datasets serialize as newline-delimited
JSON, optionally gzipped.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import OversizeError, ValidationError

__all__ = [
    "Graph",
    "Batch",
    "build_graph",
    "batch_graphs",
    "batch_from_graphs",
    "unbatch",
    "recompute_edges",
    "save_dataset",
    "load_dataset",
    "graph_to_json",
    "graph_from_json",
]


def _f64(x, ndim=None, name="array"):
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim}-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Graph:
    """Directed attributed graph with optional positions and targets."""

    node_features: np.ndarray            # [V, d_v]
    senders: np.ndarray                  # [E] int64
    receivers: np.ndarray                # [E] int64
    edge_attrs: np.ndarray               # [E, d_e]
    global_attr: np.ndarray              # [d_g]
    positions: np.ndarray | None = None  # [V, 3]
    node_targets: np.ndarray | None = None
    graph_target: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    def with_positions(self, positions) -> "Graph":
        return replace(self, positions=_f64(positions, 2, "positions"))

    def with_edges(self, senders, receivers, edge_attrs=None) -> "Graph":
        senders = np.asarray(senders, dtype=np.int64)
        receivers = np.asarray(receivers, dtype=np.int64)
        if edge_attrs is None:
            edge_attrs = np.zeros((senders.shape[0], self.edge_attrs.shape[1]))
        return replace(self, senders=senders, receivers=receivers,
                       edge_attrs=_f64(edge_attrs, 2, "edge_attrs"))


def build_graph(node_features, edges, global_attr=(), positions=None,
                node_targets=None, graph_target=None) -> Graph:
    """Validate fields and construct a Graph.

    `edges` is either a sequence of (sender, receiver, attr) tuples or a
    (senders, receivers, edge_attrs) triple of arrays. Validation errors name
    the offending edge.
    """
    node_features = _f64(node_features, 2, "node_features")
    n = node_features.shape[0]

    if isinstance(edges, tuple) and len(edges) == 3 and not _is_edge_tuple(edges):
        senders = np.asarray(edges[0], dtype=np.int64)
        receivers = np.asarray(edges[1], dtype=np.int64)
        edge_attrs = _f64(edges[2], 2, "edge_attrs")
        if not (senders.shape == receivers.shape == (edge_attrs.shape[0],)):
            raise ValidationError("edge arrays have inconsistent lengths")
    else:
        edges = list(edges)
        senders = np.zeros(len(edges), dtype=np.int64)
        receivers = np.zeros(len(edges), dtype=np.int64)
        attrs = []
        d_e = None
        for k, edge in enumerate(edges):
            s, r, attr = edge
            senders[k], receivers[k] = int(s), int(r)
            attr = np.atleast_1d(np.asarray(attr, dtype=np.float64))
            if d_e is None:
                d_e = attr.shape[0]
            elif attr.shape[0] != d_e:
                raise ValidationError(
                    f"edge {k}: attr length {attr.shape[0]} differs from {d_e}")
            attrs.append(attr)
        edge_attrs = (np.stack(attrs) if attrs
                      else np.zeros((0, 0), dtype=np.float64))

    bad = np.nonzero((senders < 0) | (senders >= n) |
                     (receivers < 0) | (receivers >= n))[0]
    if bad.size:
        k = int(bad[0])
        raise ValidationError(
            f"edge {k}: endpoint ({int(senders[k])} -> {int(receivers[k])}) "
            f"outside [0, {n})")

    if positions is not None:
        positions = _f64(positions, 2, "positions")
        if positions.shape[0] != n:
            raise ValidationError(
                f"positions rows {positions.shape[0]} != node count {n}")
    if node_targets is not None:
        node_targets = _f64(node_targets, 2, "node_targets")
        if node_targets.shape[0] != n:
            raise ValidationError(
                f"node_targets rows {node_targets.shape[0]} != node count {n}")
    if graph_target is not None:
        graph_target = _f64(np.atleast_1d(graph_target), 1, "graph_target")

    return Graph(node_features, senders, receivers, edge_attrs,
                 _f64(np.atleast_1d(global_attr), 1, "global_attr"),
                 positions, node_targets, graph_target)


def _is_edge_tuple(edges) -> bool:
    # disambiguate a single (s, r, attr) tuple from the array triple
    return np.isscalar(edges[0]) or np.asarray(edges[0]).ndim == 0


@dataclass(frozen=True)
class Batch:
    """Several graphs concatenated, with membership bookkeeping."""

    node_features: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    edge_attrs: np.ndarray
    global_attr: np.ndarray              # [G, d_g]
    graph_membership: np.ndarray         # [V] int64, node -> graph index
    node_counts: np.ndarray              # [G]
    edge_counts: np.ndarray              # [G]
    positions: np.ndarray | None = None
    node_targets: np.ndarray | None = None
    graph_target: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    @property
    def n_graphs(self) -> int:
        return self.node_counts.shape[0]

    @property
    def edge_membership(self) -> np.ndarray:
        return self.graph_membership[self.senders] if self.n_edges else \
            np.zeros(0, dtype=np.int64)


def _optional_stack(graphs, getter, what):
    present = [getter(g) is not None for g in graphs]
    if not any(present):
        return None
    if not all(present):
        raise ValidationError(f"{what}: present on some graphs but not others")
    return np.concatenate([getter(g) for g in graphs], axis=0)


def batch_from_graphs(graphs) -> Batch:
    """Concatenate graphs in order into one Batch (no size limits applied)."""
    graphs = list(graphs)
    if not graphs:
        raise ValidationError("cannot batch zero graphs")
    node_counts = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    edge_counts = np.array([g.n_edges for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(node_counts)[:-1]])
    senders = np.concatenate(
        [g.senders + off for g, off in zip(graphs, offsets)]) \
        if edge_counts.sum() else np.zeros(0, dtype=np.int64)
    receivers = np.concatenate(
        [g.receivers + off for g, off in zip(graphs, offsets)]) \
        if edge_counts.sum() else np.zeros(0, dtype=np.int64)
    d_e = max((g.edge_attrs.shape[1] for g in graphs if g.n_edges), default=0)
    edge_attrs = np.concatenate(
        [g.edge_attrs for g in graphs if g.n_edges], axis=0) \
        if edge_counts.sum() else np.zeros((0, d_e))
    membership = np.repeat(np.arange(len(graphs), dtype=np.int64), node_counts)
    gt = _optional_stack(graphs, lambda g: None if g.graph_target is None
                         else g.graph_target[None, :], "graph_target")
    return Batch(
        node_features=np.concatenate([g.node_features for g in graphs], axis=0),
        senders=senders.astype(np.int64),
        receivers=receivers.astype(np.int64),
        edge_attrs=edge_attrs,
        global_attr=np.stack([g.global_attr for g in graphs]),
        graph_membership=membership,
        node_counts=node_counts,
        edge_counts=edge_counts,
        positions=_optional_stack(graphs, lambda g: g.positions, "positions"),
        node_targets=_optional_stack(graphs, lambda g: g.node_targets,
                                     "node_targets"),
        graph_target=gt,
    )


def batch_graphs(graphs, max_nodes: int, max_edges: int,
                 max_graphs: int) -> list[Batch]:
    """Greedy in-order packing under simultaneous node/edge/graph limits.

    A graph that would push any count over its limit starts a new batch;
    a graph exceeding a limit on its own is an error naming that limit.
    """
    batches: list[Batch] = []
    bucket: list[Graph] = []
    nodes = edges = 0
    for g in graphs:
        if g.n_nodes > max_nodes:
            raise OversizeError(f"graph with {g.n_nodes} nodes exceeds "
                                f"max_nodes={max_nodes}")
        if g.n_edges > max_edges:
            raise OversizeError(f"graph with {g.n_edges} edges exceeds "
                                f"max_edges={max_edges}")
        if max_graphs < 1:
            raise OversizeError(f"max_graphs={max_graphs} admits no graph")
        if bucket and (nodes + g.n_nodes > max_nodes or
                       edges + g.n_edges > max_edges or
                       len(bucket) + 1 > max_graphs):
            batches.append(batch_from_graphs(bucket))
            bucket, nodes, edges = [], 0, 0
        bucket.append(g)
        nodes += g.n_nodes
        edges += g.n_edges
    if bucket:
        batches.append(batch_from_graphs(bucket))
    return batches


def unbatch(batch: Batch) -> list[Graph]:
    """Invert batch_from_graphs exactly."""
    graphs = []
    node_off = 0
    edge_off = 0
    for i in range(batch.n_graphs):
        nv = int(batch.node_counts[i])
        ne = int(batch.edge_counts[i])
        ns, nr = slice(node_off, node_off + nv), slice(edge_off, edge_off + ne)
        graphs.append(Graph(
            node_features=batch.node_features[ns].copy(),
            senders=batch.senders[nr] - node_off,
            receivers=batch.receivers[nr] - node_off,
            edge_attrs=batch.edge_attrs[nr].copy(),
            global_attr=batch.global_attr[i].copy(),
            positions=None if batch.positions is None
            else batch.positions[ns].copy(),
            node_targets=None if batch.node_targets is None
            else batch.node_targets[ns].copy(),
            graph_target=None if batch.graph_target is None
            else batch.graph_target[i].copy(),
        ))
        node_off += nv
        edge_off += ne
    return graphs


def recompute_edges(positions, cutoff: float):
    """All ordered pairs i != j with strict distance < cutoff.

    Returns (senders, receivers) sorted lexicographically by (sender,
    receiver). Strict inequality at the cutoff.
    """
    if cutoff <= 0:
        raise ValidationError(f"cutoff must be positive, got {cutoff}")
    pos = _f64(positions, 2, "positions")
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    senders, receivers = np.nonzero(dist < cutoff)  # row-major == lexicographic
    return senders.astype(np.int64), receivers.astype(np.int64)


# ---------------------------------------------------------------------------
# serialization: one JSON document per graph, newline-delimited

def graph_to_json(g: Graph) -> dict:
    edges = [[int(s), int(r), *map(float, a)]
             for s, r, a in zip(g.senders, g.receivers, g.edge_attrs)]
    targets = None
    if g.node_targets is not None or g.graph_target is not None:
        targets = {
            "node": None if g.node_targets is None else g.node_targets.tolist(),
            "graph": None if g.graph_target is None else g.graph_target.tolist(),
        }
    return {
        "node_features": g.node_features.tolist(),
        "positions": None if g.positions is None else g.positions.tolist(),
        "edges": edges,
        "global_attr": g.global_attr.tolist(),
        "targets": targets,
    }


def graph_from_json(doc: dict) -> Graph:
    edges = doc.get("edges", [])
    senders = np.array([e[0] for e in edges], dtype=np.int64)
    receivers = np.array([e[1] for e in edges], dtype=np.int64)
    d_e = len(edges[0]) - 2 if edges else 0
    edge_attrs = np.array([e[2:] for e in edges], dtype=np.float64) \
        .reshape(len(edges), d_e)
    targets = doc.get("targets") or {}
    return build_graph(
        node_features=doc["node_features"],
        edges=(senders, receivers, edge_attrs),
        global_attr=doc.get("global_attr", ()),
        positions=doc.get("positions"),
        node_targets=targets.get("node"),
        graph_target=targets.get("graph"),
    )


def _opener(path, mode):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def save_dataset(graphs, path) -> None:
    with _opener(path, "wt") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_json(g)) + "\n")


def load_dataset(path) -> list[Graph]:
    graphs = []
    with _opener(path, "rt") as fh:
        for line in fh:
            line = line.strip()
            if line:
                graphs.append(graph_from_json(json.loads(line)))
    return graphs
