"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an op (strict mode)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while running in verification mode."""


class PatternError(ValueError):
    """A matrix or mask violates its N:M sparsity contract."""


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


class ArchitectureMismatch(ValueError):
    """Teacher and student model configurations disagree."""


class CorruptFileError(ValueError):
    """A checkpoint or packed file failed its magic or CRC check."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries per-layer diagnostics."""

    def __init__(self, step: int, stats: dict):
        self.step = step
        self.stats = stats
        lines = [f"non-finite loss at step {step}"]
        for name, s in stats.items():
            lines.append(f"  {name}: " + ", ".join(f"{k}={v:.4g}" for k, v in s.items()))
        super().__init__("\n".join(lines))
