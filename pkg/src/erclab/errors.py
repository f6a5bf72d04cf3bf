"""Exception hierarchy.

``ValidationError`` covers bad inputs (manifests, feature files, configs,
prediction tables); the CLI maps it to exit code 2. Anything else that
escapes a command is a runtime failure (exit code 1).
"""


class ValidationError(ValueError):
    """Input data or configuration failed validation."""


class ManifestError(ValidationError):
    """Malformed or inconsistent dataset manifest."""


class FeatureFormatError(ValidationError):
    """EMF1 feature file is corrupt or contains non-finite values."""


class ConfigError(ValidationError):
    """Experiment configuration failed field validation."""


class NoPositivePairsError(ValueError):
    """Supervised contrastive loss has no anchor with a positive partner."""


class StageOrderError(RuntimeError):
    """A hierarchical training stage was requested before its predecessor."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
