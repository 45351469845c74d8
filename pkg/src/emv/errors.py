"""Exception hierarchy shared across the package."""


class EMVError(Exception):
    """Base class for all package errors."""


class InputError(EMVError, ValueError):
    """Invalid argument (non-positive price, non-PSD covariance, ...)."""


class DegenerateMarketError(EMVError, ValueError):
    """Volatility matrix singular or ill-conditioned, or zero market price of risk."""


class DomainError(EMVError, ValueError):
    """Time argument outside [0, T]."""


class ConvexityError(EMVError, ValueError):
    """Value function fails v_xx > 0 where the Gaussian improvement needs it."""


class SimulationError(EMVError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DivergenceError(EMVError, RuntimeError):
    """Wealth left the admissible bound during training."""


class IngestionError(EMVError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ConfigError(EMVError, ValueError):
    """Unknown or malformed configuration key."""
