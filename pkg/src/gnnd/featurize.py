"""Input featurization for 3D tasks.

Radial Bessel basis over edge distances, unit displacement directions
(optionally expressed in the periodic-cell basis), the rotation/translation
invariant cell summary vector, and the learned atom-type embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ValidationError

__all__ = [
    "CellBasis",
    "FeaturizeSpec",
    "bessel_rbf",
    "bessel_rbf_matrix",
    "edge_features",
    "edge_feature_matrix",
    "to_fractional",
    "from_fractional",
    "cell_invariants",
    "init_atom_embedding",
    "atom_embed",
]


@dataclass(frozen=True)
class CellBasis:
    """Unit-cell basis vectors alpha, beta, gamma (each a 3-vector)."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if v.shape != (3,):
                raise ValidationError(f"cell vector {name} must have shape (3,)")
            object.__setattr__(self, name, v)
        if abs(np.linalg.det(self.matrix())) < 1e-12:
            raise np.linalg.LinAlgError("degenerate cell: basis is singular")

    def matrix(self) -> np.ndarray:
        """3x3 matrix with alpha, beta, gamma as columns."""
        return np.stack([self.alpha, self.beta, self.gamma], axis=1)

    def flatten(self) -> np.ndarray:
        """Rows alpha, beta, gamma as 9 numbers (the global_attr encoding)."""
        return np.concatenate([self.alpha, self.beta, self.gamma])

    @classmethod
    def from_flat(cls, flat) -> "CellBasis":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (9,):
            raise ValidationError(f"flattened cell must have 9 entries, got {flat.shape}")
        return cls(flat[0:3], flat[3:6], flat[6:9])


@dataclass(frozen=True)
class FeaturizeSpec:
    """How to featurize geometry: RBF channel count/cutoff, basis, embed size."""

    num_rbf: int
    embed_dim: int
    rbf_cutoff: float = 5.0
    use_fractional: bool = False

    def __post_init__(self):
        if self.num_rbf < 1:
            raise ValidationError(f"num_rbf must be >= 1, got {self.num_rbf}")
        if self.rbf_cutoff <= 0:
            raise ValidationError(f"rbf_cutoff must be > 0, got {self.rbf_cutoff}")
        if self.embed_dim < 1:
            raise ValidationError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def edge_dim(self) -> int:
        return self.num_rbf + 3


def bessel_rbf(d: float, c: int, cutoff: float) -> float:
    """Radial Bessel channel c at distance d: sqrt(2/R) * sin(c*pi*d/R) / d."""
    if d <= 0:
        raise ContractError(f"bessel_rbf: distance must be positive, got {d}")
    if c < 1:
        raise ContractError(f"bessel_rbf: channel index must be >= 1, got {c}")
    if cutoff <= 0:
        raise ContractError(f"bessel_rbf: cutoff must be positive, got {cutoff}")
    return float(np.sqrt(2.0 / cutoff) * np.sin(c * np.pi * d / cutoff) / d)


def bessel_rbf_matrix(dists: np.ndarray, num_rbf: int, cutoff: float) -> np.ndarray:
    """All channels for a vector of distances: shape [E, num_rbf]."""
    d = np.asarray(dists, dtype=np.float64)
    if d.size and d.min() <= 0:
        raise ContractError("bessel_rbf: distances must be positive")
    c = np.arange(1, num_rbf + 1, dtype=np.float64)
    return np.sqrt(2.0 / cutoff) * np.sin(c * np.pi * d[:, None] / cutoff) / d[:, None]


def to_fractional(positions, cell: CellBasis) -> np.ndarray:
    """Coordinates in the cell basis: solve [alpha beta gamma] f = p per row."""
    pos = np.asarray(positions, dtype=np.float64)
    return np.linalg.solve(cell.matrix(), pos.T).T


def from_fractional(fractional, cell: CellBasis) -> np.ndarray:
    frac = np.asarray(fractional, dtype=np.float64)
    return (cell.matrix() @ frac.T).T


def cell_invariants(cell: CellBasis) -> np.ndarray:
    """(alpha.beta, beta.gamma, alpha.gamma, |alpha|, |beta|, |gamma|)."""
    a, b, g = cell.alpha, cell.beta, cell.gamma
    return np.array([
        a @ b, b @ g, a @ g,
        np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(g),
    ])


def edge_features(displacement, spec: FeaturizeSpec,
                  cell: CellBasis | None = None) -> np.ndarray:
    """RBF channels on |d| followed by the unit displacement direction.

    With use_fractional, the direction is the cell-basis image of d/|d|
    (distances stay Cartesian).
    """
    d = np.asarray(displacement, dtype=np.float64)
    if d.shape != (3,):
        raise ContractError(f"displacement must be a 3-vector, got {d.shape}")
    return edge_feature_matrix(d[None, :], spec, cell)[0]


def edge_feature_matrix(displacements, spec: FeaturizeSpec,
                        cell: CellBasis | None = None) -> np.ndarray:
    """Vectorized edge_features: [E, 3] displacements -> [E, num_rbf + 3]."""
    d = np.asarray(displacements, dtype=np.float64)
    norms = np.sqrt((d ** 2).sum(axis=1))
    if d.shape[0] and norms.min() <= 0:
        raise ContractError("edge_features: zero displacement (self edge?)")
    rbf = bessel_rbf_matrix(norms, spec.num_rbf, spec.rbf_cutoff)
    unit = d / norms[:, None]
    if spec.use_fractional:
        if cell is None:
            raise ContractError("use_fractional requires a cell basis")
        unit = np.linalg.solve(cell.matrix(), unit.T).T
    return np.concatenate([rbf, unit], axis=1)


def init_atom_embedding(params: dict, name: str, num_types: int, num_flags: int,
                        embed_dim: int, rng: np.random.Generator) -> None:
    """Embedding table plus the linear map that folds in binary flags."""
    bound = 1.0 / np.sqrt(embed_dim)
    params[f"{name}/table"] = T.parameter(
        rng.uniform(-bound, bound, size=(num_types, embed_dim)))
    fan_in = embed_dim + num_flags
    w_bound = np.sqrt(6.0 / (fan_in + embed_dim))
    params[f"{name}/w"] = T.parameter(
        rng.uniform(-w_bound, w_bound, size=(fan_in, embed_dim)))
    params[f"{name}/b"] = T.parameter(np.zeros(embed_dim))


def atom_embed(params: dict, name: str, atom_types, flags=None) -> T.Tensor:
    """Lookup + flag concat + learned projection to embed_dim."""
    types = np.asarray(atom_types, dtype=np.int64)
    rows = T.gather_rows(params[f"{name}/table"], types)
    if flags is not None and np.asarray(flags).size:
        rows = T.concat_last_axis([rows, T.constant(np.asarray(flags, dtype=np.float64))])
    return T.add(T.matmul(rows, params[f"{name}/w"]), params[f"{name}/b"])
