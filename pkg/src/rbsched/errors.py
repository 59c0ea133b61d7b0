"""Exception types shared across modules."""


class RbschedError(Exception):
    pass


class NonIntegerGrid(RbschedError):
    pass


class BadTiling(RbschedError):
    pass


class DimensionMismatch(RbschedError):
    pass


class DegeneratePoint(RbschedError):
    pass


class Infeasible(RbschedError):
    """Raised when a problem (or a precheck) has no feasible point.

    ``state`` optionally carries the best-effort iterate.
    """

    def __init__(self, msg: str = "", state=None):
        super().__init__(msg)
        self.state = state


class IterLimit(RbschedError):
    def __init__(self, msg: str = "", state=None):
        super().__init__(msg)
        self.state = state


class SingularSystem(RbschedError):
    pass


class AsymmetricInstance(RbschedError):
    pass


class ConfigError(RbschedError):
    pass
