"""Sparse low-rank boosting adapters.

A layer with weight ``W`` (``N x d``) gains ``S @ X`` where ``X`` is a fixed
``(d/k) x d`` 0/1 matrix broadcasting each column of ``S`` over one k-wide
input group. With the default init, ``S[i, j]`` is the mean of the pruned
weights of row ``i`` in group ``j``, so every group sum of the effective
weight equals the group sum of the dense weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError
from .sparsity import Mask, check_pattern

INIT_METHODS = ("mean", "xavier", "zero")


def init_projection(d: int, k: int, dtype=np.float32) -> np.ndarray:
    if k <= 0 or d % k:
        raise DimensionError(f"group width {k} must divide input dim {d}")
    r = d // k
    x = np.zeros((r, d), dtype=dtype)
    for i in range(r):
        x[i, i * k : (i + 1) * k] = 1
    return x


def init_slorb_weights(w: np.ndarray, mask: Mask, k: int) -> np.ndarray:
    w = np.asarray(w)
    n_out, d = w.shape
    if d % k:
        raise DimensionError(f"group width {k} must divide input dim {d}")
    check_pattern(mask.array, mask.pattern)
    pruned = np.where(mask.array, 0, w)
    return (pruned.reshape(n_out, d // k, k).sum(axis=-1) / k).astype(w.dtype)


@dataclass
class SLoRBAdapter:
    k: int
    S: ad.Tensor
    X: ad.Tensor
    enabled: bool = True
    init: str = "mean"

    @property
    def rank(self) -> int:
        return self.X.shape[0]

    @property
    def train_projection(self) -> bool:
        return self.X.requires_grad

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        # x X^T then (.) S^T; S @ X is never materialised
        return ad.matmul(ad.matmul(x, self.X), self.S)

    def dense(self) -> np.ndarray:
        return self.S.data @ self.X.data

    def param_count(self) -> int:
        return self.S.size + self.X.size


def make_adapter(
    w: np.ndarray,
    mask: Mask,
    k: int,
    init: str = "mean",
    train_projection: bool = False,
    rng: np.random.Generator | None = None,
) -> SLoRBAdapter:
    if init not in INIT_METHODS:
        raise ValueError(f"unknown SLoRB init {init!r}; choose from {INIT_METHODS}")
    n_out, d = np.shape(w)
    dtype = np.asarray(w).dtype
    x = init_projection(d, k, dtype)
    if init == "mean":
        s = init_slorb_weights(w, mask, k)
    elif init == "xavier":
        if rng is None:
            raise ValueError("xavier init needs an rng")
        r = d // k
        bound = math.sqrt(6.0 / (n_out + r))
        s = rng.uniform(-bound, bound, size=(n_out, r)).astype(dtype)
    else:
        s = np.zeros((n_out, d // k), dtype=dtype)
    return SLoRBAdapter(
        k=k,
        S=ad.Tensor(s, requires_grad=True),
        X=ad.Tensor(x, requires_grad=train_projection),
        init=init,
    )


def adapter_param_count(n_out: int, d: int, k: int) -> int:
    r = d // k
    return n_out * r + r * d


def merge_for_export(w: np.ndarray, mask: Mask, adapter: SLoRBAdapter | None) -> dict:
    """Split a layer into its packable masked weight and its dense adapter parts."""
    masked = np.where(mask.array, w, 0).astype(np.asarray(w).dtype)
    out = {"masked": masked, "effective": masked.copy()}
    if adapter is not None and adapter.enabled:
        out["S"] = adapter.S.data.copy()
        out["X"] = adapter.X.data.copy()
        out["effective"] = masked + adapter.dense()
    return out
