"""Distillation objectives.

Teacher quantities are always treated as constants: they may be passed as
arrays or tensors, and only their ``.data`` is read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError

VARIANTS = ("forward_kl", "reverse_kl", "tinybert", "mobilebert", "squarehead")


@dataclass(frozen=True)
class DistillConfig:
    variant: str = "forward_kl"
    alpha: float = 2 / 3
    tau: float = 1.0
    logit_weight: float = 1.0
    feat_weight: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown distillation variant {self.variant!r}; choose from {VARIANTS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def needs_states(self) -> bool:
        return self.variant in ("tinybert", "mobilebert", "squarehead")


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _tokens(shape) -> int:
    return int(np.prod(shape[:-1]))


def forward_kl_loss(teacher_logits, student_logits: ad.Tensor) -> ad.Tensor:
    """Mean over tokens of ``KL(p_teacher || p_student)``."""
    t = _const(teacher_logits).astype(student_logits.data.dtype, copy=False)
    if t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {t.shape} vs student logits {student_logits.shape}")
    p_t = _softmax(t)
    z = t - t.max(axis=-1, keepdims=True)
    logp_t = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logq = ad.log_softmax(student_logits)
    # sum p_t log p_t is constant; only the cross term carries gradient
    cross = ad.sum(ad.mul(logq, ad.Tensor(p_t, dtype=p_t.dtype)))
    entropy_term = float(np.sum(p_t * logp_t))
    return ad.scale(ad.add(ad.neg(cross), entropy_term), 1.0 / _tokens(t.shape))


def reverse_kl_loss(teacher_logits, student_logits: ad.Tensor) -> ad.Tensor:
    """Mean over tokens of ``KL(p_student || p_teacher)``."""
    t = _const(teacher_logits).astype(student_logits.data.dtype, copy=False)
    if t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {t.shape} vs student logits {student_logits.shape}")
    z = t - t.max(axis=-1, keepdims=True)
    logp_t = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logq = ad.log_softmax(student_logits)
    q = ad.exp(logq)
    diff = ad.sub(logq, ad.Tensor(logp_t, dtype=logp_t.dtype))
    return ad.scale(ad.sum(ad.mul(q, diff)), 1.0 / _tokens(t.shape))


def combined_loss(task_loss: ad.Tensor, logit_loss: ad.Tensor, alpha: float) -> ad.Tensor:
    """``alpha * logit_loss + (1 - alpha) * task_loss``; endpoints drop the other term entirely."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return task_loss
    if alpha == 1.0:
        return logit_loss
    return ad.add(ad.scale(logit_loss, alpha), ad.scale(task_loss, 1.0 - alpha))


def mse(student: ad.Tensor, teacher) -> ad.Tensor:
    t = _const(teacher).astype(student.data.dtype, copy=False)
    if t.shape != student.shape:
        raise DimensionError(f"mse: {student.shape} vs {t.shape}")
    return ad.mean(ad.square(ad.sub(student, ad.Tensor(t, dtype=t.dtype))))


def soft_cross_entropy(teacher_logits, student_logits: ad.Tensor, tau: float = 1.0) -> ad.Tensor:
    """``CE(softmax(z_t / tau), softmax(z_s / tau))`` averaged over tokens."""
    t = _const(teacher_logits).astype(student_logits.data.dtype, copy=False)
    p_t = _softmax(t / tau)
    logq = ad.log_softmax(ad.scale(student_logits, 1.0 / tau))
    return ad.scale(ad.neg(ad.sum(ad.mul(logq, ad.Tensor(p_t, dtype=p_t.dtype)))), 1.0 / _tokens(t.shape))


def _check_states(teacher, student) -> None:
    if len(teacher.hidden) != len(student.hidden) or len(teacher.attentions) != len(student.attentions):
        raise DimensionError("teacher and student expose different numbers of layers")
    for th, sh in zip(teacher.hidden, student.hidden):
        if _const(th).shape != sh.shape:
            raise DimensionError("teacher and student hidden sizes differ")


def tinybert_loss(teacher_state, student_state, tau: float = 1.0) -> ad.Tensor:
    """Hidden-state MSE plus per-head attention MSE on every layer but the last, plus soft CE on logits.

    The hidden projection is the identity because teacher and student share a width.
    """
    _check_states(teacher_state, student_state)
    total = soft_cross_entropy(teacher_state.logits, student_state.logits, tau)
    layers = len(student_state.hidden)
    for i in range(layers - 1):
        # mean over all (B, H, S, S) entries equals the head-average of per-head MSEs
        total = ad.add(total, mse(student_state.hidden[i], teacher_state.hidden[i]))
        total = ad.add(total, mse(student_state.attentions[i], teacher_state.attentions[i]))
    return total


def tinybert_minimum(teacher_logits, tau: float = 1.0) -> float:
    """Value of :func:`tinybert_loss` when the student equals the teacher (the soft CE's entropy floor)."""
    t = _const(teacher_logits).astype(np.float64)
    p = _softmax(t / tau)
    z = t / tau - (t / tau).max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-(p * logp).sum() / _tokens(t.shape))


def mobilebert_attention_kl(teacher_attn, student_attn: ad.Tensor) -> ad.Tensor:
    """Mean over batch, heads and query tokens of ``KL(teacher_row || student_row)``."""
    p = _const(teacher_attn)
    if p.shape != student_attn.shape:
        raise DimensionError(f"attention maps {p.shape} vs {student_attn.shape}")
    if ad.is_strict() and not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("teacher attention rows are not stochastic")
    return ad.scale(ad.kl_div_probs(p, student_attn), 1.0 / _tokens(p.shape))


def mobilebert_loss(teacher_state, student_state) -> ad.Tensor:
    """Per layer: feature-map MSE plus attention transfer KL, summed over layers."""
    _check_states(teacher_state, student_state)
    total = None
    for th, sh, ta, sa in zip(teacher_state.hidden, student_state.hidden,
                              teacher_state.attentions, student_state.attentions):
        term = ad.add(mse(sh, th), mobilebert_attention_kl(ta, sa))
        total = term if total is None else ad.add(total, term)
    return total


def feature_loss(teacher_hidden, student_hidden: ad.Tensor) -> ad.Tensor:
    t = _const(teacher_hidden)
    denom = float(np.mean(np.square(t.astype(np.float64))))
    if denom <= 0:
        raise ValueError("teacher features are identically zero; normalised MSE undefined")
    return ad.scale(mse(student_hidden, t), 1.0 / denom)


def squarehead_loss(teacher_hidden, student_hidden, teacher_logits, student_logits,
                    logit_weight: float = 1.0, feat_weight: float = 1.0) -> ad.Tensor:
    if len(teacher_hidden) != len(student_hidden):
        raise DimensionError("teacher and student expose different numbers of layers")
    feat = None
    for th, sh in zip(teacher_hidden, student_hidden):
        term = feature_loss(th, sh)
        feat = term if feat is None else ad.add(feat, term)
    logit = forward_kl_loss(teacher_logits, student_logits)
    if feat is None:
        return ad.scale(logit, logit_weight)
    return ad.add(ad.scale(logit, logit_weight), ad.scale(feat, feat_weight))


def distillation_term(config: DistillConfig, teacher_out, student_out) -> ad.Tensor:
    v = config.variant
    if v == "forward_kl":
        return forward_kl_loss(teacher_out.logits, student_out.logits)
    if v == "reverse_kl":
        return reverse_kl_loss(teacher_out.logits, student_out.logits)
    if v == "tinybert":
        return tinybert_loss(teacher_out, student_out, config.tau)
    if v == "mobilebert":
        return mobilebert_loss(teacher_out, student_out)
    return squarehead_loss(teacher_out.hidden, student_out.hidden, teacher_out.logits, student_out.logits,
                           config.logit_weight, config.feat_weight)
