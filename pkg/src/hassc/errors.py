"""Exception hierarchy shared by every module."""


class HasscError(Exception):
    """Base class for all library errors."""


class ShapeError(HasscError, ValueError):
    pass


class BoundsError(HasscError, IndexError):
    pass


class ConfigError(HasscError, ValueError):
    pass


class FormatError(HasscError, ValueError):
    """Raised by the voxel codec on malformed or unmappable input."""


class KindError(HasscError, TypeError):
    pass


class StateError(HasscError, RuntimeError):
    pass


class VersionError(HasscError, ValueError):
    """Checkpoint does not match the network it is loaded into."""


class NonFiniteLossError(HasscError, FloatingPointError):
    def __init__(self, term, step=None):
        self.term = term
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite loss term {term!r}{where}")
