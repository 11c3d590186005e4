"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    pass


class InfeasibleError(ValueError):
    """A pruning target cannot be met under the keep-at-least-one rule."""


class FormatError(ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
