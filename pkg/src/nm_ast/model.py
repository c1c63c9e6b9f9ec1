"""Tiny pre-norm causal decoder whose linears can carry an N:M mask."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import rng as rng_mod
from .errors import DimensionError
from .slorb import SLoRBAdapter, make_adapter
from .sparsity import Mask, NMPattern, select_mask_magnitude


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    context_length: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    mlp_ratio: int = 4
    tie_embeddings: bool = True
    sparsify_lm_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context_length < 2:
            raise ValueError("context_length must be at least 2")
        if self.sparsify_lm_head and self.tie_embeddings:
            raise ValueError("a tied lm-head is the embedding and cannot be sparsified")

    def to_dict(self) -> dict:
        return asdict(self)


class SparseLinear:
    """``y = x (m(W) * W)^T + b [+ x X^T S^T]``.

    The full ``weight`` is always kept; ``mask`` only affects the forward pass,
    and the straight-through rule sends the gradient to every entry.
    """

    def __init__(self, name: str, weight: ad.Tensor, bias: ad.Tensor | None = None):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.mask: Mask | None = None
        self.adapter: SLoRBAdapter | None = None
        self._mult: np.ndarray | None = None

    def set_mask(self, mask: Mask | None) -> None:
        if mask is not None and mask.shape != self.weight.shape:
            raise DimensionError(f"{self.name}: mask {mask.shape} vs weight {self.weight.shape}")
        self.mask = mask
        self._mult = None if mask is None else mask.array.astype(self.weight.data.dtype)

    def effective_weight(self) -> ad.Tensor:
        if self.mask is None:
            return self.weight
        if self._mult is None or self._mult.dtype != self.weight.data.dtype:
            self._mult = self.mask.array.astype(self.weight.data.dtype)
        return ad.ste_mask(self.weight, self._mult)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        y = ad.linear(x, self.effective_weight(), self.bias)
        if self.adapter is not None and self.adapter.enabled:
            y = ad.add(y, self.adapter.forward(x))
        return y


class ModelOutput(NamedTuple):
    logits: ad.Tensor
    hidden: list
    attentions: list


class Transformer:
    def __init__(self, config: ModelConfig, params: dict[str, ad.Tensor]):
        self.config = config
        self.params = params
        c = config
        self.linears: dict[str, SparseLinear] = {}
        for i in range(c.n_layers):
            for part in ("attn.qkv", "attn.proj", "mlp.fc", "mlp.proj"):
                name = f"h.{i}.{part}"
                self.linears[name] = SparseLinear(name, params[name + ".w"], params[name + ".b"])
        if not c.tie_embeddings:
            self.linears["lm_head"] = SparseLinear("lm_head", params["lm_head.w"])

    # ---------------------------------------------------------------- construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=None) -> "Transformer":
        dtype = dtype or ad.default_dtype()
        c = config
        d, hidden = c.d_model, c.d_model * c.mlp_ratio
        resid_std = 0.02 / math.sqrt(2 * c.n_layers)

        def normal(name, shape, std):
            return rng_mod.stream(seed, name).normal(0.0, std, size=shape).astype(dtype)

        shapes: dict[str, tuple] = {
            "wte": ((c.vocab_size, d), 0.02),
            "wpe": ((c.context_length, d), 0.01),
        }
        arrays: dict[str, np.ndarray] = {}
        for i in range(c.n_layers):
            p = f"h.{i}."
            arrays[p + "ln_1.g"] = np.ones(d, dtype)
            arrays[p + "ln_1.b"] = np.zeros(d, dtype)
            shapes[p + "attn.qkv.w"] = ((3 * d, d), 0.02)
            arrays[p + "attn.qkv.b"] = np.zeros(3 * d, dtype)
            shapes[p + "attn.proj.w"] = ((d, d), resid_std)
            arrays[p + "attn.proj.b"] = np.zeros(d, dtype)
            arrays[p + "ln_2.g"] = np.ones(d, dtype)
            arrays[p + "ln_2.b"] = np.zeros(d, dtype)
            shapes[p + "mlp.fc.w"] = ((hidden, d), 0.02)
            arrays[p + "mlp.fc.b"] = np.zeros(hidden, dtype)
            shapes[p + "mlp.proj.w"] = ((d, hidden), resid_std)
            arrays[p + "mlp.proj.b"] = np.zeros(d, dtype)
        arrays["ln_f.g"] = np.ones(d, dtype)
        arrays["ln_f.b"] = np.zeros(d, dtype)
        if not c.tie_embeddings:
            shapes["lm_head.w"] = ((c.vocab_size, d), 0.02)
        for name, (shape, std) in shapes.items():
            arrays[name] = normal(name, shape, std)
        return cls.from_arrays(config, arrays)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "Transformer":
        names = sorted(arrays)
        params = {n: ad.Tensor(np.ascontiguousarray(arrays[n]), requires_grad=True, dtype=arrays[n].dtype)
                  for n in names}
        return cls(config, params)

    def copy(self) -> "Transformer":
        arrays = {n: t.data.copy() for n, t in self.params.items()}
        other = Transformer.from_arrays(self.config, arrays)
        for name, lin in self.linears.items():
            target = other.linears[name]
            if lin.mask is not None:
                target.set_mask(lin.mask.copy())
            if lin.adapter is not None:
                a = lin.adapter
                target.adapter = SLoRBAdapter(
                    k=a.k,
                    S=ad.Tensor(a.S.data.copy(), requires_grad=True, dtype=a.S.data.dtype),
                    X=ad.Tensor(a.X.data.copy(), requires_grad=a.X.requires_grad, dtype=a.X.data.dtype),
                    enabled=a.enabled,
                    init=a.init,
                )
        return other

    def astype(self, dtype) -> "Transformer":
        out = self.copy()
        for t in out.all_tensors().values():
            t.data = t.data.astype(dtype)
        for lin in out.linears.values():
            lin.set_mask(lin.mask)
        return out

    def freeze(self) -> "Transformer":
        for t in self.all_tensors().values():
            t.requires_grad = False
        return self

    # ---------------------------------------------------------------- parameters

    def adapter_tensors(self) -> dict[str, ad.Tensor]:
        out = {}
        for name, lin in self.linears.items():
            if lin.adapter is not None:
                out[name + ".slorb.S"] = lin.adapter.S
                out[name + ".slorb.X"] = lin.adapter.X
        return out

    def all_tensors(self) -> dict[str, ad.Tensor]:
        return {**self.params, **self.adapter_tensors()}

    def trainable(self) -> dict[str, ad.Tensor]:
        return {n: t for n, t in self.all_tensors().items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.all_tensors().values():
            t.grad = None

    def sparsifiable(self) -> dict[str, SparseLinear]:
        return {
            n: lin for n, lin in self.linears.items()
            if n != "lm_head" or self.config.sparsify_lm_head
        }

    def masked_layers(self) -> dict[str, SparseLinear]:
        return {n: lin for n, lin in self.linears.items() if lin.mask is not None}

    @property
    def is_sparse(self) -> bool:
        return bool(self.masked_layers())

    def sparsify(self, pattern: NMPattern) -> "Transformer":
        """Install magnitude masks on every sparsifiable linear."""
        for lin in self.sparsifiable().values():
            lin.set_mask(select_mask_magnitude(lin.weight.data, pattern))
        return self

    def remove_masks(self) -> None:
        for lin in self.linears.values():
            lin.set_mask(None)

    def enable_slorb(self, k: int, init: str = "mean", train_projection: bool = False, seed: int = 0) -> None:
        for name, lin in self.masked_layers().items():
            lin.adapter = make_adapter(
                lin.weight.data, lin.mask, k, init=init, train_projection=train_projection,
                rng=rng_mod.stream(seed, name + ".slorb.S"),
            )

    def apply_masks_permanently(self) -> None:
        """Zero pruned weights in place (the export form)."""
        for lin in self.masked_layers().values():
            lin.weight.data *= lin.mask.array.astype(lin.weight.data.dtype)

    # ---------------------------------------------------------------- forward

    def forward(self, ids: np.ndarray, return_states: bool = False) -> ModelOutput:
        c = self.config
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise DimensionError("token ids must be a [batch, seq] array")
        b, s = ids.shape
        if s > c.context_length:
            raise ValueError(f"sequence length {s} exceeds context length {c.context_length}")
        p = self.params
        x = ad.add_rows(ad.embedding(p["wte"], ids), p["wpe"])
        h_count, hd = c.n_heads, c.d_model // c.n_heads
        inv_sqrt = 1.0 / math.sqrt(hd)
        hidden, attns = [], []
        for i in range(c.n_layers):
            pre = f"h.{i}."
            h = ad.layernorm(x, p[pre + "ln_1.g"], p[pre + "ln_1.b"])
            qkv = self.linears[pre + "attn.qkv"](h)
            qkv = ad.transpose(ad.reshape(qkv, (b, s, 3, h_count, hd)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            probs = ad.causal_softmax(ad.matmul(ad.scale(q, inv_sqrt), k))
            att = ad.matmul(probs, ad.transpose(v))
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, s, c.d_model))
            x = ad.add(x, self.linears[pre + "attn.proj"](att))
            h = ad.layernorm(x, p[pre + "ln_2.g"], p[pre + "ln_2.b"])
            h = ad.gelu(self.linears[pre + "mlp.fc"](h))
            x = ad.add(x, self.linears[pre + "mlp.proj"](h))
            if return_states:
                hidden.append(x)
                attns.append(probs)
        x = ad.layernorm(x, p["ln_f.g"], p["ln_f.b"])
        if c.tie_embeddings:
            logits = ad.matmul(x, p["wte"])
        else:
            logits = self.linears["lm_head"](x)
        return ModelOutput(logits, hidden, attns)

    __call__ = forward


def eval_windows(tokens: np.ndarray, context: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping ``(inputs, targets)`` windows covering the stream."""
    tokens = np.asarray(tokens)
    count = (tokens.size - 1) // context
    if count < 1:
        raise ValueError(f"token stream of length {tokens.size} is shorter than one window of {context}")
    idx = np.arange(count)[:, None] * context + np.arange(context)[None, :]
    return tokens[idx], tokens[idx + 1]


def window_nll(model: Transformer, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 16) -> float:
    """Summed next-token negative log-likelihood over the given windows (float64 accumulation)."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            x = inputs[start : start + batch_size]
            y = targets[start : start + batch_size]
            logits = model.forward(x).logits.data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=-1))
            picked = np.take_along_axis(z, y[..., None], axis=-1)[..., 0]
            total += float((lse - picked).sum())
    return total


def perplexity(model: Transformer, tokens: np.ndarray, context: int | None = None, batch_size: int = 16) -> float:
    context = context or model.config.context_length
    inputs, targets = eval_windows(tokens, context)
    return math.exp(window_nll(model, inputs, targets, batch_size) / targets.size)


def clone_config(config: ModelConfig, **changes) -> ModelConfig:
    return ModelConfig(**{**config.to_dict(), **changes})


__all__ = [
    "ModelConfig",
    "ModelOutput",
    "SparseLinear",
    "Transformer",
    "clone_config",
    "eval_windows",
    "perplexity",
    "window_nll",
]
