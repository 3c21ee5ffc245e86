class AttemptsExhausted(RuntimeError):
    """Rejection sampling could not assemble a packing family."""


class DimensionMismatch(ValueError):
    pass


class InvalidRegime(ValueError):
    """Requested (variant, n, K, tau) lies outside the construction's regime."""


class StateCorruption(RuntimeError):
    pass


class ScheduleExhausted(IndexError):
    pass


class OutOfRange(ValueError):
    pass


class ConfigError(ValueError):
    pass
