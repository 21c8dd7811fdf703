"""The three architectures: encode-process-decode GNS with grouped layer
weights and per-group decoding, MPNN with optional virtual node, and a
residual GCN.

All models share a functional convention: `init_params(rng)` returns a flat
name->Tensor dict, `forward(params, batch, train)` returns a ModelOutput with
per-layer node-latent snapshots (for diversity diagnostics) and one decoded
head per weight group (the final group is the model's output).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ValidationError
from .featurize import (CellBasis, FeaturizeSpec, atom_embed, cell_invariants,
                        edge_feature_matrix, init_atom_embedding)
from .graphs import Batch
from .nn import MLP, parameter_count

__all__ = [
    "ModelConfig",
    "LatentGraph",
    "GroupHead",
    "ModelOutput",
    "GNSModel",
    "MPNNModel",
    "GCNModel",
    "gcn_layer",
    "build_model",
    "processor_parameter_count",
]

_ARCHS = ("gns", "mpnn_vn", "gcn")
_HEADS = ("graph_scalar", "node_vector", "both")


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    num_layers: int
    latent_dim: int
    mlp_hidden: int
    mlp_depth: int
    activation: str = "shifted_softplus"
    heads: str = "both"
    group_size: int | None = None     # GNS only; defaults to num_layers
    batch_norm: bool = False
    residual: bool = True             # GCN only; GNS/MPNN are always residual

    def __post_init__(self):
        if self.arch not in _ARCHS:
            raise ValidationError(f"arch must be one of {_ARCHS}, got '{self.arch}'")
        if self.num_layers < 1:
            raise ValidationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.heads not in _HEADS:
            raise ValidationError(f"heads must be one of {_HEADS}, got '{self.heads}'")
        if self.arch == "gns":
            g = self.effective_group_size
            if g < 1 or self.num_layers % g != 0:
                raise ValidationError(
                    f"group_size {g} must divide num_layers {self.num_layers} "
                    "(partial final group rejected)")

    @property
    def effective_group_size(self) -> int:
        return self.group_size if self.group_size is not None else self.num_layers

    @property
    def wants_graph_head(self) -> bool:
        return self.heads in ("graph_scalar", "both")

    @property
    def wants_node_head(self) -> bool:
        return self.heads in ("node_vector", "both")


@dataclass
class LatentGraph:
    """Node and edge latents plus the per-layer node-latent snapshot list."""

    node_latents: T.Tensor
    edge_latents: T.Tensor
    snapshots: list[T.Tensor] = field(default_factory=list)


@dataclass
class GroupHead:
    graph: T.Tensor | None = None   # [G, graph_out_dim]
    nodes: T.Tensor | None = None   # [V, node_out_dim]


@dataclass
class ModelOutput:
    snapshots: list[T.Tensor]       # num_layers + 1 entries, real nodes only
    group_heads: list[GroupHead]    # one per weight group; last is the output
    edge_logits: T.Tensor | None = None   # categorical edge reconstruction

    @property
    def final(self) -> GroupHead:
        return self.group_heads[-1]


def _zeros_const(shape) -> T.Tensor:
    return T.Tensor(np.zeros(shape))


# ---------------------------------------------------------------------------
# GNS


class GNSModel:
    """Encode-process-decode network over 3D point clouds.

    Edge inputs are Bessel RBF channels of the edge length plus the unit
    displacement (cell-basis image when the featurize spec asks for it, with
    the six rotation-invariant cell numbers appended). Processor layer k uses
    parameter set (k mod group_size); after every group the shared decoder
    is applied, giving one head per group.
    """

    def __init__(self, config: ModelConfig, feat: FeaturizeSpec,
                 num_atom_types: int, num_flags: int = 0,
                 node_out_dim: int = 3, graph_out_dim: int = 1):
        if config.arch != "gns":
            raise ValidationError(f"GNSModel requires arch 'gns', got {config.arch}")
        self.config = config
        self.feat = feat
        self.num_atom_types = num_atom_types
        self.num_flags = num_flags
        self.node_out_dim = node_out_dim
        self.graph_out_dim = graph_out_dim
        self.use_cell = feat.use_fractional
        d = config.latent_dim
        edge_in = feat.edge_dim + (6 if self.use_cell else 0)
        mk = lambda name, d_in, d_out: MLP(
            name, d_in, config.mlp_hidden, d_out, config.mlp_depth,
            config.activation, config.batch_norm)
        self._enc_node = mk("enc/node", feat.embed_dim, d)
        self._enc_edge = mk("enc/edge", edge_in, d)
        self._proc = [(mk(f"proc/{k}/edge", 3 * d, d), mk(f"proc/{k}/node", 2 * d, d))
                      for k in range(config.effective_group_size)]
        self._dec_graph_proc = mk("dec/graph/proc_mlp", d, d)
        self._dec_graph_enc = mk("dec/graph/enc_mlp", d, d)
        self._dec_node = mk("dec/node", d, node_out_dim)

    def init_params(self, rng: np.random.Generator) -> dict:
        params: dict[str, T.Tensor] = {}
        init_atom_embedding(params, "enc/embed", self.num_atom_types,
                            self.num_flags, self.feat.embed_dim, rng)
        self._enc_node.init(params, rng)
        self._enc_edge.init(params, rng)
        for edge_mlp, node_mlp in self._proc:
            edge_mlp.init(params, rng)
            node_mlp.init(params, rng)
        d = self.config.latent_dim
        if self.config.wants_graph_head:
            self._dec_graph_proc.init(params, rng)
            self._dec_graph_enc.init(params, rng)
            bound = np.sqrt(6.0 / (d + self.graph_out_dim))
            params["dec/graph/w_proc"] = T.parameter(
                rng.uniform(-bound, bound, size=(d, self.graph_out_dim)))
            params["dec/graph/b_proc"] = T.parameter(np.zeros(self.graph_out_dim))
            params["dec/graph/w_enc"] = T.parameter(
                rng.uniform(-bound, bound, size=(d, self.graph_out_dim)))
            params["dec/graph/b_enc"] = T.parameter(np.zeros(self.graph_out_dim))
        if self.config.wants_node_head:
            self._dec_node.init(params, rng)
        return params

    def _edge_inputs(self, batch: Batch) -> np.ndarray:
        disp = batch.positions[batch.receivers] - batch.positions[batch.senders]
        if not self.use_cell:
            return edge_feature_matrix(disp, self.feat)
        if batch.global_attr.shape[1] != 9:
            raise ContractError("fractional featurization expects the cell as "
                                "9 numbers in global_attr")
        cells = [CellBasis.from_flat(row) for row in batch.global_attr]
        feats = np.zeros((batch.n_edges, self.feat.edge_dim + 6))
        em = batch.edge_membership
        for g, cell in enumerate(cells):
            mask = em == g
            if mask.any():
                base = edge_feature_matrix(disp[mask], self.feat, cell)
                feats[mask] = np.concatenate(
                    [base, np.tile(cell_invariants(cell), (mask.sum(), 1))], axis=1)
        return feats

    def encode(self, params: dict, batch: Batch, train: bool = False) -> LatentGraph:
        if batch.positions is None:
            raise ContractError("GNS needs node positions (3D task)")
        types = batch.node_features[:, 0].astype(np.int64)
        flags = batch.node_features[:, 1:] if batch.node_features.shape[1] > 1 else None
        embedded = atom_embed(params, "enc/embed", types, flags)
        h = self._enc_node.apply(params, embedded, train)
        e = self._enc_edge.apply(params, T.Tensor(self._edge_inputs(batch)), train)
        return LatentGraph(h, e, snapshots=[h])

    def process(self, params: dict, latent: LatentGraph, batch: Batch,
                train: bool = False) -> LatentGraph:
        h, e = latent.node_latents, latent.edge_latents
        group = self.config.effective_group_size
        for k in range(self.config.num_layers):
            edge_mlp, node_mlp = self._proc[k % group]
            hs = T.gather_rows(h, batch.senders)
            hr = T.gather_rows(h, batch.receivers)
            e = T.add(e, edge_mlp.apply(params, T.concat_last_axis([e, hs, hr]), train))
            agg = T.segment_sum(e, batch.receivers, batch.n_nodes)
            h = T.add(h, node_mlp.apply(params, T.concat_last_axis([h, agg]), train))
            latent.snapshots.append(h)
        latent.node_latents, latent.edge_latents = h, e
        return latent

    def decode_graph(self, params: dict, h_proc: T.Tensor, h_enc: T.Tensor,
                     membership: np.ndarray, n_graphs: int,
                     train: bool = False) -> T.Tensor:
        """Two-branch sum-pool decoder over processor and encoder latents."""
        pooled_p = T.segment_sum(self._dec_graph_proc.apply(params, h_proc, train),
                                 membership, n_graphs)
        pooled_e = T.segment_sum(self._dec_graph_enc.apply(params, h_enc, train),
                                 membership, n_graphs)
        proc_branch = T.add(T.matmul(pooled_p, params["dec/graph/w_proc"]),
                            params["dec/graph/b_proc"])
        enc_branch = T.add(T.matmul(pooled_e, params["dec/graph/w_enc"]),
                           params["dec/graph/b_enc"])
        return T.add(proc_branch, enc_branch)

    def decode_nodes(self, params: dict, h_proc: T.Tensor,
                     train: bool = False) -> T.Tensor:
        return self._dec_node.apply(params, h_proc, train)

    def forward(self, params: dict, batch: Batch, train: bool = False) -> ModelOutput:
        latent = self.encode(params, batch, train)
        latent = self.process(params, latent, batch, train)
        snaps = latent.snapshots
        group = self.config.effective_group_size
        heads = []
        for boundary in range(group, self.config.num_layers + 1, group):
            h_b = snaps[boundary]
            head = GroupHead()
            if self.config.wants_graph_head:
                head.graph = self.decode_graph(params, h_b, snaps[0],
                                               batch.graph_membership,
                                               batch.n_graphs, train)
            if self.config.wants_node_head:
                head.nodes = self.decode_nodes(params, h_b, train)
            heads.append(head)
        return ModelOutput(snapshots=snaps, group_heads=heads)

    def intermediate_losses(self, output: ModelOutput, loss_fn) -> list[T.Tensor]:
        """One loss per weight group, all against the same targets."""
        return [loss_fn(head) for head in output.group_heads]


# ---------------------------------------------------------------------------
# MPNN with virtual node


def mpnn_step(params: dict, msg_mlp: MLP, upd_mlp: MLP, h: T.Tensor,
              m_prev: T.Tensor, m_prev2: T.Tensor, edge_latents: T.Tensor,
              senders: np.ndarray, receivers: np.ndarray, n_nodes: int,
              train: bool = False) -> tuple[T.Tensor, T.Tensor]:
    """One message-passing step.

    Message: psi(h_sender, h_receiver, edge latent, m_prev + m_prev2).
    Update: phi(h, incoming sum, outgoing sum) added residually to h.
    """
    if m_prev.shape != m_prev2.shape or m_prev.shape[0] != senders.shape[0]:
        raise ContractError(
            f"message state shape {m_prev.shape} does not match {senders.shape[0]} edges")
    hs = T.gather_rows(h, senders)
    hr = T.gather_rows(h, receivers)
    m_new = msg_mlp.apply(
        params, T.concat_last_axis([hs, hr, edge_latents, T.add(m_prev, m_prev2)]),
        train)
    incoming = T.segment_sum(m_new, receivers, n_nodes)
    outgoing = T.segment_sum(m_new, senders, n_nodes)
    h_new = T.add(h, upd_mlp.apply(
        params, T.concat_last_axis([h, incoming, outgoing]), train))
    return h_new, m_new


class MPNNModel:
    """Message-passing network over categorical node/edge features.

    With use_virtual_node, one extra node per graph is appended after the
    real nodes and wired bidirectionally to all of them; it carries a learned
    initial latent and a learned edge latent, and is excluded from snapshots,
    pooling, and node heads.
    """

    def __init__(self, config: ModelConfig, node_vocab: int, edge_vocab: int,
                 graph_out_dim: int = 1, use_virtual_node: bool = True):
        if config.arch != "mpnn_vn":
            raise ValidationError(f"MPNNModel requires arch 'mpnn_vn', got {config.arch}")
        self.config = config
        self.node_vocab = node_vocab
        self.edge_vocab = edge_vocab
        self.graph_out_dim = graph_out_dim
        self.use_virtual_node = use_virtual_node
        d = config.latent_dim
        mk = lambda name, d_in, d_out: MLP(
            name, d_in, config.mlp_hidden, d_out, config.mlp_depth,
            config.activation, config.batch_norm)
        self._steps = [(mk(f"msg/{t}", 4 * d, d), mk(f"upd/{t}", 3 * d, d))
                       for t in range(config.num_layers)]
        self._readout = mk("readout", d, graph_out_dim)
        self._dec_node = mk("dec/node", d, node_vocab)
        self._dec_edge = mk("dec/edge", d, edge_vocab)

    def init_params(self, rng: np.random.Generator) -> dict:
        params: dict[str, T.Tensor] = {}
        init_atom_embedding(params, "enc/node_embed", self.node_vocab, 0,
                            self.config.latent_dim, rng)
        init_atom_embedding(params, "enc/edge_embed", self.edge_vocab, 0,
                            self.config.latent_dim, rng)
        if self.use_virtual_node:
            bound = 1.0 / np.sqrt(self.config.latent_dim)
            params["vn/h0"] = T.parameter(
                rng.uniform(-bound, bound, size=(1, self.config.latent_dim)))
            params["vn/edge"] = T.parameter(
                rng.uniform(-bound, bound, size=(1, self.config.latent_dim)))
        for msg_mlp, upd_mlp in self._steps:
            msg_mlp.init(params, rng)
            upd_mlp.init(params, rng)
        if self.config.wants_graph_head:
            self._readout.init(params, rng)
        if self.config.wants_node_head:
            self._dec_node.init(params, rng)
            self._dec_edge.init(params, rng)
        return params

    def _augment(self, batch: Batch):
        """Append one virtual node per graph plus bidirectional edges."""
        nv, ng = batch.n_nodes, batch.n_graphs
        vn_index = nv + batch.graph_membership          # per real node
        senders = np.concatenate([batch.senders, np.arange(nv), vn_index])
        receivers = np.concatenate([batch.receivers, vn_index, np.arange(nv)])
        return senders.astype(np.int64), receivers.astype(np.int64), nv + ng

    def forward(self, params: dict, batch: Batch, train: bool = False) -> ModelOutput:
        nv = batch.n_nodes
        node_cats = batch.node_features[:, 0].astype(np.int64)
        edge_cats = batch.edge_attrs[:, 0].astype(np.int64) if batch.n_edges else \
            np.zeros(0, dtype=np.int64)
        h = atom_embed(params, "enc/node_embed", node_cats)
        e = atom_embed(params, "enc/edge_embed", edge_cats)
        real = np.arange(nv)
        if self.use_virtual_node:
            senders, receivers, n_all = self._augment(batch)
            vn_h = T.gather_rows(params["vn/h0"],
                                 np.zeros(batch.n_graphs, dtype=np.int64))
            h = T.concat_rows([h, vn_h])
            vn_e = T.gather_rows(params["vn/edge"],
                                 np.zeros(2 * nv, dtype=np.int64))
            e = T.concat_rows([e, vn_e])
        else:
            senders, receivers, n_all = batch.senders, batch.receivers, nv
        snapshots = [T.gather_rows(h, real) if self.use_virtual_node else h]
        m_prev = _zeros_const((senders.shape[0], self.config.latent_dim))
        m_prev2 = m_prev
        for msg_mlp, upd_mlp in self._steps:
            h, m_new = mpnn_step(params, msg_mlp, upd_mlp, h, m_prev, m_prev2,
                                 e, senders, receivers, n_all, train)
            m_prev2, m_prev = m_prev, m_new
            snapshots.append(T.gather_rows(h, real) if self.use_virtual_node else h)
        h_real = snapshots[-1]
        head = GroupHead()
        if self.config.wants_graph_head:
            pooled = T.segment_sum(h_real, batch.graph_membership, batch.n_graphs)
            head.graph = self._readout.apply(params, pooled, train)
        edge_logits = None
        if self.config.wants_node_head:
            head.nodes = self._dec_node.apply(params, h_real, train)
            m_real = T.gather_rows(m_prev, np.arange(batch.n_edges))
            edge_logits = self._dec_edge.apply(params, m_real, train)
        return ModelOutput(snapshots=snapshots, group_heads=[head],
                           edge_logits=edge_logits)


# ---------------------------------------------------------------------------
# GCN


def gcn_layer(h: T.Tensor, senders: np.ndarray, receivers: np.ndarray,
              w: T.Tensor, use_residual: bool = False) -> T.Tensor:
    """Unnormalized neighbor-sum convolution: h'_i = sum_j (h_j W) over
    in-neighbors j, optionally plus h_i."""
    w = T.constant(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ContractError(f"gcn_layer: W must be square, got {w.shape}")
    h = T.constant(h)
    msgs = T.gather_rows(h, senders)
    agg = T.segment_sum(msgs, receivers, h.shape[0])
    out = T.matmul(agg, w)
    return T.add(out, h) if use_residual else out


class GCNModel:
    """Residual graph convolution stack over categorical or dense features."""

    def __init__(self, config: ModelConfig, node_vocab: int | None = None,
                 node_in_dim: int | None = None, graph_out_dim: int = 1,
                 node_out_dim: int | None = None):
        if config.arch != "gcn":
            raise ValidationError(f"GCNModel requires arch 'gcn', got {config.arch}")
        if (node_vocab is None) == (node_in_dim is None):
            raise ValidationError("provide exactly one of node_vocab / node_in_dim")
        self.config = config
        self.node_vocab = node_vocab
        self.node_in_dim = node_in_dim
        self.graph_out_dim = graph_out_dim
        self.node_out_dim = node_out_dim if node_out_dim is not None else \
            (node_vocab if node_vocab is not None else node_in_dim)
        d = config.latent_dim
        mk = lambda name, d_in, d_out: MLP(
            name, d_in, config.mlp_hidden, d_out, config.mlp_depth,
            config.activation, config.batch_norm)
        self._enc = mk("enc/node", node_in_dim if node_in_dim else d, d)
        self._readout = mk("readout", d, graph_out_dim)
        self._dec_node = mk("dec/node", d, self.node_out_dim)

    def init_params(self, rng: np.random.Generator) -> dict:
        params: dict[str, T.Tensor] = {}
        if self.node_vocab is not None:
            init_atom_embedding(params, "enc/node_embed", self.node_vocab, 0,
                                self.config.latent_dim, rng)
        else:
            self._enc.init(params, rng)
        d = self.config.latent_dim
        bound = np.sqrt(6.0 / (2 * d))
        for k in range(self.config.num_layers):
            params[f"gcn/{k}/w"] = T.parameter(
                rng.uniform(-bound, bound, size=(d, d)))
        if self.config.wants_graph_head:
            self._readout.init(params, rng)
        if self.config.wants_node_head:
            self._dec_node.init(params, rng)
        return params

    def forward(self, params: dict, batch: Batch, train: bool = False) -> ModelOutput:
        if self.node_vocab is not None:
            cats = batch.node_features[:, 0].astype(np.int64)
            h = atom_embed(params, "enc/node_embed", cats)
        else:
            h = self._enc.apply(params, T.Tensor(batch.node_features), train)
        snapshots = [h]
        for k in range(self.config.num_layers):
            z = gcn_layer(h, batch.senders, batch.receivers, params[f"gcn/{k}/w"])
            z = T.relu(z)
            h = T.add(h, z) if self.config.residual else z
            snapshots.append(h)
        head = GroupHead()
        if self.config.wants_graph_head:
            pooled = T.segment_sum(h, batch.graph_membership, batch.n_graphs)
            head.graph = self._readout.apply(params, pooled, train)
        if self.config.wants_node_head:
            head.nodes = self._dec_node.apply(params, h, train)
        return ModelOutput(snapshots=snapshots, group_heads=[head])


def processor_parameter_count(params: dict) -> int:
    """Stored scalars in the message-passing stack (GNS 'proc/' parameters)."""
    return parameter_count(params, "proc/")


def build_model(config: ModelConfig, **task_kwargs):
    """Dispatch on config.arch; task_kwargs are the task-shape arguments."""
    if config.arch == "gns":
        return GNSModel(config, **task_kwargs)
    if config.arch == "mpnn_vn":
        return MPNNModel(config, **task_kwargs)
    return GCNModel(config, **task_kwargs)
