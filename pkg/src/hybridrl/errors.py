class HybridRLError(Exception):
    """Base class for errors raised by this package."""


class EmptyBatch(HybridRLError):
    pass


class NonFiniteLoss(HybridRLError):
    """Regression loss diverged; usually a bad weight or learning rate."""


class NonFiniteIterate(HybridRLError):
    """Conjugate gradient broke down (the operator is not positive definite)."""


class SampleBudgetExceeded(HybridRLError):
    pass


class ConfigError(HybridRLError, ValueError):
    pass
