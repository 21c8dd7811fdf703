"""Synthetic datasets standing in for the real 3D and categorical benchmarks.

Relaxation task: point clouds under a bonded-spring + soft-repulsion pairwise
potential are relaxed to a strict local minimum by gradient descent; the
dataset input is a perturbed copy of the minimum, the node target is the
displacement back, and the graph target is the energy at the minimum.

Categorical task: random connected graphs with categorical node/edge features
whose label is the parity of a motif count (edges joining same-category
endpoints), so the task is structural and balanced.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError, ValidationError
from .graphs import Graph, build_graph, recompute_edges

__all__ = [
    "RelaxationSpec",
    "CategoricalSpec",
    "RelaxedSystem",
    "pairwise_energy",
    "pairwise_gradient",
    "relax",
    "generate_relaxation_systems",
    "generate_relaxation_dataset",
    "generate_equilibrium_dataset",
    "generate_categorical_dataset",
    "worker_count",
]


def worker_count() -> int:
    """Dataset-generation parallelism, capped by GNND_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("GNND_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RelaxationSpec:
    num_graphs: int
    nodes_min: int = 10
    nodes_max: int = 20
    num_types: int = 4
    edge_cutoff: float = 3.0        # proximity graph the model sees
    perturb_scale: float = 0.3      # input = minimum + N(0, scale^2)
    extra_bond_frac: float = 0.4    # cycle-creating bonds beyond the tree
    spring_k: float = 1.0
    hinge_k: float = 0.3            # second-neighbor springs stiffen hinges
    global_k: float = 0.02          # weak all-pairs confinement kills torsions
    repulsion_a: float = 2.0
    repulsion_rho: float = 0.4
    radius_base: float = 0.7
    radius_step: float = 0.15
    gtol: float = 1e-6
    max_iters: int = 50000

    def __post_init__(self):
        if self.num_graphs < 1:
            raise ValidationError("num_graphs must be >= 1")
        if not 2 <= self.nodes_min <= self.nodes_max:
            raise ValidationError("need 2 <= nodes_min <= nodes_max")
        if self.num_types < 1:
            raise ValidationError("num_types must be >= 1")

    def radius(self, types: np.ndarray) -> np.ndarray:
        return self.radius_base + self.radius_step * types


@dataclass(frozen=True)
class CategoricalSpec:
    num_graphs: int
    nodes_min: int = 8
    nodes_max: int = 14
    node_vocab: int = 5
    edge_vocab: int = 3
    extra_edge_frac: float = 0.5

    def __post_init__(self):
        if self.num_graphs < 1:
            raise ValidationError("num_graphs must be >= 1")
        if not 2 <= self.nodes_min <= self.nodes_max:
            raise ValidationError("need 2 <= nodes_min <= nodes_max")
        if self.node_vocab < 2 or self.edge_vocab < 2:
            raise ValidationError("vocabularies need at least 2 categories")


@dataclass(frozen=True)
class RelaxedSystem:
    """One sampled system: what the potential needs plus the relaxed state."""

    types: np.ndarray               # [n] int
    bonds: np.ndarray               # [B, 2] int, undirected pairs
    minimum: np.ndarray             # [n, 3] relaxed positions
    energy: float                   # potential at the minimum
    graph: Graph                    # the dataset graph (perturbed input)


def _pair_terms(positions: np.ndarray):
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    return diff, dist


def second_neighbor_pairs(bonds: np.ndarray, n: int) -> np.ndarray:
    """Distinct (i, k) pairs joined by a 2-bond path, excluding bonded pairs."""
    adj = [[] for _ in range(n)]
    bonded = set()
    for i, j in bonds:
        adj[i].append(int(j))
        adj[j].append(int(i))
        bonded.add((min(int(i), int(j)), max(int(i), int(j))))
    pairs = set()
    for j in range(n):
        nbrs = adj[j]
        for a in range(len(nbrs)):
            for b in range(a + 1, len(nbrs)):
                p = (min(nbrs[a], nbrs[b]), max(nbrs[a], nbrs[b]))
                if p[0] != p[1] and p not in bonded:
                    pairs.add(p)
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def _spring_sets(types: np.ndarray, bonds: np.ndarray, spec: RelaxationSpec):
    """(pairs, rest lengths, stiffness) for bonds and second neighbors."""
    radii = spec.radius(types)
    sets = []
    if bonds.size:
        rest = radii[bonds[:, 0]] + radii[bonds[:, 1]]
        sets.append((bonds, rest, spec.spring_k))
    second = second_neighbor_pairs(bonds, types.shape[0])
    if second.size and spec.hinge_k > 0:
        # straight-chain rest length keeps hinges from going floppy
        rest2 = 2.0 * radii.mean() + radii[second[:, 0]] + radii[second[:, 1]]
        sets.append((second, rest2, spec.hinge_k))
    if spec.global_k > 0:
        n = types.shape[0]
        iu = np.triu_indices(n, k=1)
        allp = np.stack(iu, axis=1)
        rest_all = radii[allp[:, 0]] + radii[allp[:, 1]] + 1.0
        sets.append((allp, rest_all, spec.global_k))
    return sets


def pairwise_energy(positions: np.ndarray, types: np.ndarray,
                    bonds: np.ndarray, spec: RelaxationSpec) -> float:
    """Bonded and second-neighbor springs with type-set rest lengths plus
    all-pairs exponential repulsion."""
    _, dist = _pair_terms(positions)
    n = positions.shape[0]
    iu = np.triu_indices(n, k=1)
    energy = spec.repulsion_a * np.exp(-dist[iu] / spec.repulsion_rho).sum()
    for pairs, rest, k in _spring_sets(types, bonds, spec):
        d = dist[pairs[:, 0], pairs[:, 1]]
        energy += 0.5 * k * ((d - rest) ** 2).sum()
    return float(energy)


def pairwise_gradient(positions: np.ndarray, types: np.ndarray,
                      bonds: np.ndarray, spec: RelaxationSpec) -> np.ndarray:
    diff, dist = _pair_terms(positions)
    np.fill_diagonal(dist, np.inf)
    # repulsion: dE/dr = -A/rho * exp(-r/rho), along the unit separation
    coeff = -spec.repulsion_a / spec.repulsion_rho * np.exp(-dist / spec.repulsion_rho)
    grad = (coeff / dist)[:, :, None] * diff
    grad = grad.sum(axis=1)
    for pairs, rest, k in _spring_sets(types, bonds, spec):
        p0, p1 = pairs[:, 0], pairs[:, 1]
        d = dist[p0, p1]
        unit = diff[p0, p1] / d[:, None]
        force = (k * (d - rest))[:, None] * unit
        np.add.at(grad, p0, force)
        np.add.at(grad, p1, -force)
    return grad


def relax(positions: np.ndarray, types: np.ndarray, bonds: np.ndarray,
          spec: RelaxationSpec):
    """Gradient descent until the force max-norm drops below gtol.

    Steps are sized by the Barzilai-Borwein rule (curvature estimated from
    successive gradients) with Armijo backtracking as a descent safeguard.
    Returns (positions, energy, iterations).
    """
    x = positions.copy()
    energy = pairwise_energy(x, types, bonds, spec)
    step = 0.1
    prev_x = prev_grad = None
    recent = [energy]  # non-monotone (GLL) reference window
    for it in range(spec.max_iters):
        grad = pairwise_gradient(x, types, bonds, spec)
        gmax = np.abs(grad).max()
        if gmax < spec.gtol:
            return x, energy, it
        if prev_x is not None:
            dg = grad - prev_grad
            denom = (dg * dg).sum()
            if denom > 0:
                step = abs(((x - prev_x) * dg).sum()) / denom
        step = float(np.clip(step, 1e-12, 1e3))
        gsq = (grad ** 2).sum()
        bound = max(recent)
        while True:
            trial = x - step * grad
            e_trial = pairwise_energy(trial, types, bonds, spec)
            if e_trial <= bound - 1e-6 * step * gsq:
                break
            step *= 0.5
            if step < 1e-16:
                raise GenerationError("relaxation stalled: no descent step found")
        prev_x, prev_grad = x, grad
        x, energy = trial, e_trial
        recent.append(energy)
        if len(recent) > 10:
            recent.pop(0)
    raise GenerationError(f"relaxation did not converge within {spec.max_iters} "
                          f"iterations (|grad|_inf = {gmax:.3g})")


def _sample_topology(n: int, extra_frac: float, rng: np.random.Generator):
    """Random recursive tree plus extra distinct pairs (cycles)."""
    pairs = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    extra = int(round(extra_frac * n))
    for _ in range(extra):
        i, j = rng.integers(0, n), rng.integers(0, n)
        if i == j:
            continue
        pairs.add((min(int(i), int(j)), max(int(i), int(j))))
    return np.array(sorted(pairs), dtype=np.int64)


def _sample_system(spec: RelaxationSpec, rng: np.random.Generator) -> RelaxedSystem:
    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
    types = rng.integers(0, spec.num_types, size=n)
    bonds = _sample_topology(n, spec.extra_bond_frac, rng)
    box = 1.5 * n ** (1.0 / 3.0)
    start = rng.uniform(-box, box, size=(n, 3))
    minimum, energy, _ = relax(start, types, bonds, spec)
    noise = rng.normal(0.0, spec.perturb_scale, size=minimum.shape)
    initial = minimum + noise
    senders, receivers = recompute_edges(initial, spec.edge_cutoff)
    graph = build_graph(
        node_features=types[:, None].astype(np.float64),
        edges=(senders, receivers, np.zeros((senders.shape[0], 0))),
        global_attr=np.zeros(1),
        positions=initial,
        node_targets=minimum - initial,
        graph_target=[energy],
    )
    return RelaxedSystem(types, bonds, minimum, energy, graph)


def _parallel_map(fn, seeds):
    workers = worker_count()
    if workers == 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def generate_relaxation_systems(spec: RelaxationSpec,
                                seed: int) -> list[RelaxedSystem]:
    children = np.random.SeedSequence(seed).spawn(spec.num_graphs)
    return _parallel_map(
        lambda child: _sample_system(spec, np.random.Generator(np.random.PCG64(child))),
        children)


def generate_relaxation_dataset(spec: RelaxationSpec, seed: int) -> list[Graph]:
    return [s.graph for s in generate_relaxation_systems(spec, seed)]


def generate_equilibrium_dataset(spec: RelaxationSpec, seed: int) -> list[Graph]:
    """Configurations at their local minimum with the energy as graph target;
    the denoising scheme supplies node targets at train time."""
    graphs = []
    for system in generate_relaxation_systems(spec, seed):
        senders, receivers = recompute_edges(system.minimum, spec.edge_cutoff)
        graphs.append(build_graph(
            node_features=system.types[:, None].astype(np.float64),
            edges=(senders, receivers, np.zeros((senders.shape[0], 0))),
            global_attr=np.zeros(1),
            positions=system.minimum,
            graph_target=[system.energy],
        ))
    return graphs


def _sample_categorical(spec: CategoricalSpec,
                        rng: np.random.Generator) -> Graph:
    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
    cats = rng.integers(0, spec.node_vocab, size=n)
    pairs = _sample_topology(n, spec.extra_edge_frac, rng)
    edge_cats = rng.integers(0, spec.edge_vocab, size=pairs.shape[0])
    same = cats[pairs[:, 0]] == cats[pairs[:, 1]]
    label = int(same.sum() % 2)
    senders = np.concatenate([pairs[:, 0], pairs[:, 1]])
    receivers = np.concatenate([pairs[:, 1], pairs[:, 0]])
    attrs = np.concatenate([edge_cats, edge_cats])[:, None].astype(np.float64)
    return build_graph(
        node_features=cats[:, None].astype(np.float64),
        edges=(senders, receivers, attrs),
        global_attr=np.zeros(1),
        graph_target=[float(label)],
    )


def generate_categorical_dataset(spec: CategoricalSpec, seed: int) -> list[Graph]:
    children = np.random.SeedSequence(seed).spawn(spec.num_graphs)
    return _parallel_map(
        lambda child: _sample_categorical(
            spec, np.random.Generator(np.random.PCG64(child))),
        children)
