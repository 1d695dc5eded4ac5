"""Exception hierarchy shared by all lobcod modules."""


class LobcodError(Exception):
    pass


class ConfigError(LobcodError, ValueError):
    """Invalid parameter or inconsistent shapes."""


class PositionError(LobcodError, IndexError):
    """Needle position outside the valid patch grid."""


class NumericError(LobcodError, ValueError):
    """Non-finite values reached a numeric routine."""


class SolverError(LobcodError, RuntimeError):
    """A local solve did not reach the KKT tolerance.

    ``best`` holds the best iterate found (shape ``(m,)`` or ``(batch, m)``),
    ``position`` the offending needle position when known.
    """

    def __init__(self, message, best=None, position=None):
        super().__init__(message)
        self.best = best
        self.position = position


class DegenerateAtomError(LobcodError, ValueError):
    """A dictionary column collapsed to (near) zero norm."""


class DegenerateAtomWarning(UserWarning):
    pass


class MonotonicityError(LobcodError, AssertionError):
    """An update increased the objective beyond rounding tolerance."""
