"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A shape, channel or configuration value is inconsistent."""


class EmptyForeground(ValueError):
    """A frame has no foreground (silhouette) pixels."""


class EmptySequence(ValueError):
    """Every frame of a sequence was dropped during preprocessing."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
