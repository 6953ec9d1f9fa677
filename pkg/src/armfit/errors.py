"""Exception types shared across the package.

The command line front end maps these onto its exit-code contract:
input validation -> 1, numerical failure -> 2, balance exhaustion -> 3.
"""


class ValidationError(ValueError):
    """Malformed or inconsistent user input (shapes, labels, flags, files)."""


class NumericalError(ArithmeticError):
    """A numerical computation failed beyond the documented tolerances."""


class RankError(NumericalError):
    """A matrix that must be full rank is numerically rank deficient."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class BalanceExhaustedError(RuntimeError):
    """Rerandomization used up its attempt budget without an acceptable draw."""

    def __init__(self, max_tries, threshold):
        super().__init__(
            f"no assignment satisfied the balance threshold {threshold!r} "
            f"within {max_tries} attempts"
        )
        self.max_tries = max_tries
        self.threshold = threshold
