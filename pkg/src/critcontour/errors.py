"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/argument problems exit
with 2, numerical failures with 3, and I/O problems (plain ``OSError``)
with 4.
"""


class ArgumentError(ValueError):
    """A caller-supplied argument violates an operation's contract."""


class DomainError(ValueError):
    """A spatial query falls outside the valid (masked) domain."""


class SpecError(ValueError):
    """A rendering specification is malformed or unusable."""


class NumericalError(RuntimeError):
    """An iterative or algebraic kernel failed to reach its tolerance."""
