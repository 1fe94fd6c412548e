"""Exception types raised by the library."""


class InvalidArgument(ValueError):
    pass


class Unsupported(NotImplementedError):
    pass


class InsufficientData(ValueError):
    pass


class DegenerateMode(ValueError):
    pass


class CoercivityError(ValueError):
    """The diffusion coefficient is not strictly positive at a collocation point."""

    def __init__(self, message, vertex=None, node=None, value=None):
        super().__init__(message)
        self.vertex = vertex
        self.node = node
        self.value = value


class IterationLimitError(RuntimeError):
    """PCG did not reach its tolerance within the iteration budget."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
