"""Small parameterized building blocks: dense layers and MLPs.

Parameters live in a flat dict[str, Tensor] keyed by slash-separated names;
insertion order is the checkpoint declaration order. Batch-norm running
statistics are stored in the same dict with requires_grad=False.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError

__all__ = ["init_dense", "dense", "MLP", "activation_fn",
           "trainable", "parameter_count"]

_BN_MOMENTUM = 0.9
_BN_EPS = 1e-5


def activation_fn(name: str):
    if name == "shifted_softplus":
        return T.softplus_shifted
    if name == "relu":
        return T.relu
    raise ContractError(f"unknown activation '{name}'")


def init_dense(params: dict, name: str, d_in: int, d_out: int,
               rng: np.random.Generator) -> None:
    bound = np.sqrt(6.0 / (d_in + d_out))
    params[f"{name}/w"] = T.parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
    params[f"{name}/b"] = T.parameter(np.zeros(d_out))


def dense(params: dict, name: str, x: T.Tensor) -> T.Tensor:
    return T.add(T.matmul(x, params[f"{name}/w"]), params[f"{name}/b"])


class MLP:
    """depth hidden layers of width `hidden`, then a linear output layer.

    With batch_norm, normalization follows every hidden layer; running
    statistics are updated on train-mode forward passes and used verbatim
    in eval mode.
    """

    def __init__(self, name: str, d_in: int, hidden: int, d_out: int,
                 depth: int, activation: str = "shifted_softplus",
                 batch_norm: bool = False):
        if depth < 0:
            raise ContractError(f"MLP depth must be >= 0, got {depth}")
        self.name = name
        self.d_in = d_in
        self.hidden = hidden
        self.d_out = d_out
        self.depth = depth
        self.activation = activation
        self.batch_norm = batch_norm

    def init(self, params: dict, rng: np.random.Generator) -> None:
        d = self.d_in
        for i in range(self.depth):
            init_dense(params, f"{self.name}/h{i}", d, self.hidden, rng)
            if self.batch_norm:
                params[f"{self.name}/bn{i}/scale"] = T.parameter(np.ones(self.hidden))
                params[f"{self.name}/bn{i}/offset"] = T.parameter(np.zeros(self.hidden))
                params[f"{self.name}/bn{i}/mean"] = T.Tensor(np.zeros(self.hidden))
                params[f"{self.name}/bn{i}/var"] = T.Tensor(np.ones(self.hidden))
            d = self.hidden
        init_dense(params, f"{self.name}/out", d, self.d_out, rng)

    def init_zero_output(self, params: dict, rng: np.random.Generator) -> None:
        """Like init, but the output layer starts at zero (residual identity)."""
        self.init(params, rng)
        params[f"{self.name}/out/w"] = T.parameter(
            np.zeros_like(params[f"{self.name}/out/w"].data))

    def apply(self, params: dict, x: T.Tensor, train: bool = False) -> T.Tensor:
        act = activation_fn(self.activation)
        h = x
        for i in range(self.depth):
            h = act(dense(params, f"{self.name}/h{i}", h))
            if self.batch_norm:
                h = self._batch_norm(params, f"{self.name}/bn{i}", h, train)
        return dense(params, f"{self.name}/out", h)

    def _batch_norm(self, params, name, h, train):
        if train:
            mean = T.mean_axis0(h)
            centered = T.sub(h, mean)
            var = T.mean_axis0(T.mul(centered, centered))
            # running statistics are plain state, updated outside the tape
            rm, rv = params[f"{name}/mean"], params[f"{name}/var"]
            rm.data *= _BN_MOMENTUM
            rm.data += (1 - _BN_MOMENTUM) * mean.data
            rv.data *= _BN_MOMENTUM
            rv.data += (1 - _BN_MOMENTUM) * var.data
        else:
            mean = params[f"{name}/mean"]
            var = params[f"{name}/var"]
            centered = T.sub(h, mean)
        inv_std = T.pow_scalar(T.add(var, _BN_EPS), -0.5)
        normed = T.mul(centered, inv_std)
        return T.add(T.mul(normed, params[f"{name}/scale"]),
                     params[f"{name}/offset"])


def trainable(params: dict) -> dict:
    return {k: v for k, v in params.items() if v.requires_grad}


def parameter_count(params: dict, prefix: str = "") -> int:
    """Total stored scalars under a name prefix (trainable entries only)."""
    return sum(v.size for k, v in params.items()
               if v.requires_grad and k.startswith(prefix))
