"""Sparse update rules and schedules.

Three update rules act on a full weight ``w`` given the gradient taken at the
masked weight (straight-through):

* ``step_ste_sgd``      plain STE, every entry moves by ``-lr * g``;
* ``step_srste_sgd``    adds ``lam * w`` on pruned entries only;
* ``step_adamw_decoupled`` the AdamW variant whose decay term is added to
  the first moment after the moment update, so it never enters the
  momentum history.

Note that the AdamW rule has no bias correction on the second moment. That
is intentional and matches the update it implements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class AnnealingSchedule:
    """Decay factor that ramps linearly until ``ramp_steps`` and then holds."""

    alpha: float
    ramp_steps: int
    total_steps: int

    def __post_init__(self):
        if not (0 < self.ramp_steps <= self.total_steps):
            raise ValueError(f"need 0 < ramp_steps <= total_steps, got {self.ramp_steps}, {self.total_steps}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @classmethod
    def from_max_decay(cls, max_decay: float, total_steps: int, ramp_steps: int | None = None):
        ramp = ramp_steps if ramp_steps is not None else max(1, total_steps // 4)
        return cls(max_decay / ramp, ramp, total_steps)

    @property
    def max_decay(self) -> float:
        return self.alpha * self.ramp_steps

    def __call__(self, t: int) -> float:
        return lambda_at(self, t)


@dataclass(frozen=True)
class ConstantDecay:
    """Static SR-STE: the decay factor is fixed for the whole run."""

    value: float
    total_steps: int

    @property
    def max_decay(self) -> float:
        return self.value

    def __call__(self, t: int) -> float:
        if t < 0 or t > self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        return self.value


def lambda_at(schedule: AnnealingSchedule, t: int) -> float:
    if t < 0 or t > schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    if t <= schedule.ramp_steps:
        return schedule.alpha * t
    return schedule.alpha * schedule.ramp_steps


def lr_at(t: int, peak: float, total_steps: int, warmup_frac: float = 0.02, final_frac: float = 0.1) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``final_frac * peak`` at ``total_steps``."""
    if t < 0 or t > total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if t <= warmup:
        return peak * t / warmup
    progress = (t - warmup) / max(1, total_steps - warmup)
    floor = final_frac * peak
    return floor + (peak - floor) * 0.5 * (1 + math.cos(math.pi * progress))


def _check(w, g, mask=None):
    if np.shape(w) != np.shape(g) or (mask is not None and np.shape(mask) != np.shape(w)):
        raise DimensionError("weight, gradient and mask shapes must match")


def _pruned(mask) -> np.ndarray:
    arr = getattr(mask, "array", mask)
    return ~np.asarray(arr, dtype=bool)


def step_ste_sgd(w: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    _check(w, grad)
    return w - lr * grad


def step_srste_sgd(w: np.ndarray, mask, grad: np.ndarray, lr: float, lam: float) -> np.ndarray:
    _check(w, grad, getattr(mask, "array", mask))
    if lam < 0:
        raise ValueError("decay factor must be non-negative")
    decay = np.where(_pruned(mask), w, 0)
    return w - lr * (grad + lam * decay)


@dataclass
class AdamWState:
    u: np.ndarray
    v: np.ndarray
    u_tilde_prev: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, w: np.ndarray) -> "AdamWState":
        return cls(np.zeros_like(w), np.zeros_like(w), np.zeros_like(w), 0)


MOMENT_ORDERS = ("conventional", "verbatim")


def step_adamw_decoupled(
    state: AdamWState,
    w: np.ndarray,
    mask,
    grad: np.ndarray,
    lr: float,
    lam: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    moment_order: str = "conventional",
    out: np.ndarray | None = None,
):
    """One decoupled-decay AdamW step; returns ``(w_next, state)``.

    ``mask=None`` means a dense parameter (no decay term). ``moment_order``
    chooses what feeds the second moment:

    * ``"conventional"``: the current decayed gradient ``g + lam * (~m * w)``;
      at ``lam = 0`` this is AdamW without second-moment bias correction.
    * ``"verbatim"``: the previous step's decayed first moment
      ``u_tilde_{t-1}`` (zero at ``t = 1``), as the recurrence is written.
      The first step then divides by ``eps`` alone and is only useful for
      studying that recurrence.

    If ``out`` is given the new weights are written into it.
    """
    if moment_order not in MOMENT_ORDERS:
        raise ValueError(f"moment_order must be one of {MOMENT_ORDERS}")
    _check(w, grad, None if mask is None else getattr(mask, "array", mask))
    t = state.t + 1
    u = beta1 * state.u + (1 - beta1) * grad
    if mask is not None and lam != 0:
        decay = lam * np.where(_pruned(mask), w, 0)
        u_tilde = u + decay
        g_tilde = grad + decay
    else:
        u_tilde = u
        g_tilde = grad
    if moment_order == "verbatim":
        v = beta2 * state.v + (1 - beta2) * state.u_tilde_prev * state.u_tilde_prev
    else:
        v = beta2 * state.v + (1 - beta2) * g_tilde * g_tilde
    step = (lr / (1 - beta1**t)) * u_tilde / (np.sqrt(v) + eps)
    if out is None:
        w_next = w - step
    else:
        np.subtract(w, step, out=out)
        w_next = out
    new_state = AdamWState(u.astype(w.dtype, copy=False), v.astype(w.dtype, copy=False),
                           u_tilde.astype(w.dtype, copy=False), t)
    return w_next, new_state


@dataclass
class SparseAdamW:
    """Holds one :class:`AdamWState` per named parameter and updates in place."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    moment_order: str = "conventional"
    states: dict = field(default_factory=dict)

    def step(self, name: str, w: np.ndarray, grad: np.ndarray, lr: float, mask=None, lam: float = 0.0) -> None:
        state = self.states.get(name)
        if state is None:
            state = AdamWState.zeros_like(w)
        _, state = step_adamw_decoupled(
            state, w, mask, grad, lr, lam, self.beta1, self.beta2, self.eps, self.moment_order, out=w
        )
        self.states[name] = state


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1))) for g in grads))
    if max_norm > 0 and total > max_norm:
        c = max_norm / (total + 1e-12)
        for g in grads:
            g *= c
    return total
