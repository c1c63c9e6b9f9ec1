"""Flat run configuration.

A run is described by one JSON object whose keys are the fields of
:class:`RunConfig`. Unknown keys and wrongly typed values are rejected, and
``RunConfig.from_json(cfg.to_json())`` is the identity.

Mode-specific overrides are not written into the stored fields; they are
applied by the ``effective_*`` helpers so a dumped config is always the one
that was loaded.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

from .distill import VARIANTS, DistillConfig
from .errors import ConfigError
from .model import ModelConfig
from .optim import MOMENT_ORDERS, AnnealingSchedule, ConstantDecay
from .slorb import INIT_METHODS
from .sparsity import NMPattern

MODES = (
    "dense_pretrain",
    "ast",
    "ast_boosted",
    "fixed_mask",
    "no_distill",
    "static_srste",
    "one_shot",
    "naive",
)
# modes run without a teacher forward; they get extra steps for equal compute
NO_TEACHER_MODES = ("no_distill", "naive")


def normalize_mode(mode: str) -> str:
    m = mode.replace("-", "_")
    if m not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    return m


@dataclass(frozen=True)
class RunConfig:
    mode: str = "ast"
    seed: int = 0
    # model
    vocab_size: int = 256
    context_length: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    mlp_ratio: int = 4
    tie_embeddings: bool = True
    sparsify_lm_head: bool = False
    # data
    batch_size: int = 16
    seq_len: int = 128
    val_fraction: float = 0.1
    # dense pretraining
    pretrain_steps: int = 3000
    pretrain_lr: float = 3e-3
    # sparse retraining
    steps: int = 3000
    pattern: str = "2:4"
    retrain_tokens: int = 0  # retraining draws from the first n training tokens; 0 uses all
    refresh_interval: int = 10
    ramp_steps: int = 0
    max_decay: float = 6e-5
    lr: float = 1e-3
    warmup_frac: float = 0.02
    final_lr_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    moment_order: str = "conventional"
    grad_clip: float = 0.0
    no_teacher_step_factor: float = 4 / 3  # teacher forward ~ 2N vs student fwd+bwd ~ 6N FLOPs per token
    # distillation
    alpha: float = 2 / 3
    distill_variant: str = "forward_kl"
    tau: float = 1.0
    logit_weight: float = 1.0
    feat_weight: float = 1.0
    # SLoRB
    slorb_k: int = 16
    slorb_init: str = "mean"
    slorb_train_projection: bool = False
    # evaluation
    eval_every: int = 200
    eval_batch_size: int = 16

    def __post_init__(self):
        try:
            normalize_mode(self.mode)
            NMPattern.parse(self.pattern)
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        checks = [
            (self.mode == normalize_mode(self.mode), "mode must use underscores, e.g. 'static_srste'"),
            (self.seq_len <= self.context_length, "seq_len exceeds context_length"),
            (self.batch_size >= 1 and self.seq_len >= 1, "batch_size and seq_len must be positive"),
            (0 < self.val_fraction < 1, "val_fraction must lie in (0, 1)"),
            (self.steps >= 1 and self.pretrain_steps >= 1, "step counts must be positive"),
            (self.retrain_tokens >= 0, "retrain_tokens must be >= 0 (0 uses the whole training split)"),
            (self.refresh_interval >= 0, "refresh_interval must be >= 0 (0 disables refresh)"),
            (0 <= self.ramp_steps <= self.steps, "ramp_steps must lie in [0, steps] (0 means steps // 4)"),
            (self.max_decay >= 0, "max_decay must be non-negative"),
            (self.lr > 0 and self.pretrain_lr > 0, "learning rates must be positive"),
            (0 <= self.warmup_frac < 1 and 0 <= self.final_lr_frac <= 1, "bad LR schedule fractions"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0, "bad AdamW hyperparameters"),
            (self.moment_order in MOMENT_ORDERS, f"moment_order must be one of {MOMENT_ORDERS}"),
            (self.grad_clip >= 0, "grad_clip must be >= 0 (0 disables clipping)"),
            (self.no_teacher_step_factor >= 1, "no_teacher_step_factor must be >= 1"),
            (0 <= self.alpha <= 1, "alpha must lie in [0, 1]"),
            (self.distill_variant in VARIANTS, f"distill_variant must be one of {VARIANTS}"),
            (self.tau > 0, "tau must be positive"),
            (self.slorb_k >= 1 and self.d_model % self.slorb_k == 0, "slorb_k must divide d_model"),
            (self.slorb_init in INIT_METHODS, f"slorb_init must be one of {INIT_METHODS}"),
            (self.eval_every >= 1 and self.eval_batch_size >= 1, "eval settings must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # ------------------------------------------------------------ io

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = cls()
        for key, value in data.items():
            expected = type(getattr(defaults, key))
            ok = isinstance(value, expected) and not (expected is not bool and isinstance(value, bool))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                ok = True
            if not ok:
                raise ConfigError(f"config key {key!r} expects {expected.__name__}, got {value!r}")
        coerced = {k: float(v) if isinstance(getattr(defaults, k), float) else v for k, v in data.items()}
        return cls(**coerced)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**self.to_dict(), **changes})

    # ------------------------------------------------------------ derived

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            context_length=self.context_length,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            mlp_ratio=self.mlp_ratio,
            tie_embeddings=self.tie_embeddings,
            sparsify_lm_head=self.sparsify_lm_head,
        )

    def nm_pattern(self) -> NMPattern:
        return NMPattern.parse(self.pattern)

    def effective_steps(self) -> int:
        if self.mode in NO_TEACHER_MODES:
            return int(round(self.steps * self.no_teacher_step_factor))
        if self.mode == "one_shot":
            return 0
        return self.steps

    def effective_refresh(self) -> float:
        """Steps between mask refreshes; ``inf`` when the mask is fixed."""
        if self.mode in ("fixed_mask", "naive", "one_shot") or self.refresh_interval == 0:
            return math.inf
        return self.refresh_interval

    def effective_alpha(self) -> float:
        return 0.0 if self.mode in NO_TEACHER_MODES else self.alpha

    def effective_slorb(self) -> bool:
        return self.mode == "ast_boosted"

    def decay_schedule(self):
        """Decay factor as a function of the step, over the effective step budget."""
        total = max(1, self.effective_steps())
        if self.mode == "naive":
            return ConstantDecay(0.0, total)
        if self.mode == "static_srste":
            return ConstantDecay(self.max_decay, total)
        ramp = self.ramp_steps or max(1, total // 4)
        ramp = min(ramp, total)
        return AnnealingSchedule(self.max_decay / ramp, ramp, total)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.distill_variant, self.effective_alpha(), self.tau,
                             self.logit_weight, self.feat_weight)
