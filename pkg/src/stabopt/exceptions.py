"""Custom exception classes for stabopt.

This module provides domain-specific exception classes for the spectrum,
envelope, polynomial, optimizer, construction and integration layers.
Every class carries the process exit code the CLI reports for it.
"""

# Exit codes for the command-line contract
EXIT_OK = 0
EXIT_USAGE = 2  # Usage, input and format errors
EXIT_INFEASIBLE = 3  # Optimizer found no stable polynomial
EXIT_CONSTRUCTION = 4  # Shu-Osher construction failed
EXIT_INSTABILITY = 5  # Integration diverged or verification failed


class StaboptError(Exception):
    """Base class for all stabopt errors.

    Attributes:
        message: Error message as passed by the caller
        exit_code: Process exit code reported by the CLI
    """

    exit_code = EXIT_USAGE

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class SpectrumFormatError(StaboptError):
    """Exception raised when a spectrum file cannot be parsed.

    Attributes:
        message: Error message describing the parse failure
        path: The file that failed to parse (optional)
        line: 1-based line number of the offending line (optional)
    """

    def __init__(
        self, message: str, path: str | None = None, line: int | None = None
    ) -> None:
        """Initialize the exception.

        Args:
            message: Error message describing the parse failure
            path: The file that failed to parse (optional)
            line: 1-based line number of the offending line (optional)
        """
        if path and line is not None:
            full_message = f"{path}:{line}: {message}"
        elif path:
            full_message = f"{path}: {message}"
        elif line is not None:
            full_message = f"line {line}: {message}"
        else:
            full_message = message
        super().__init__(full_message)
        self.path = path
        self.line = line


class SpectrumValidationError(StaboptError):
    """Exception raised when eigenvalues violate the spectrum invariants."""


class EnvelopeError(StaboptError):
    """Exception raised for degenerate or disconnected enclosing geometry."""


class PolynomialError(StaboptError):
    """Exception raised when a stability polynomial is malformed.

    Covers invalid pseudo-extrema, order-constraint residuals above tolerance
    and the degree guard of the monomial expansion.
    """


class ConfigError(StaboptError):
    """Exception raised when configuration validation fails.

    Attributes:
        message: Error message describing the validation failure
        field: The field that failed validation (optional)
    """

    def __init__(self, message: str, field: str | None = None) -> None:
        """Initialize the exception.

        Args:
            message: Error message describing the validation failure
            field: The field that failed validation (optional)
        """
        if field:
            full_message = f"Validation failed for '{field}': {message}"
        else:
            full_message = f"Validation failed: {message}"
        super().__init__(full_message)
        self.field = field


class InfeasibleError(StaboptError):
    """Exception raised when no stable polynomial could be found.

    Attributes:
        message: Error message describing the failed search
        violation: Smallest maximum violation max|P|-1 reached (optional)
    """

    exit_code = EXIT_INFEASIBLE

    def __init__(self, message: str, violation: float | None = None) -> None:
        if violation is not None:
            full_message = f"{message} (best violation: {violation:.17g})"
        else:
            full_message = message
        super().__init__(full_message)
        self.violation = violation


class ConstructionError(StaboptError):
    """Exception raised when a Shu-Osher submethod cannot be realized.

    Attributes:
        message: Error message describing the failure
        pseudo_extrema: The pseudo-extrema of the offending submethod
    """

    exit_code = EXIT_CONSTRUCTION

    def __init__(
        self, message: str, pseudo_extrema: tuple[complex, ...] | None = None
    ) -> None:
        if pseudo_extrema:
            listed = ", ".join(f"{r:.6g}" for r in pseudo_extrema)
            full_message = f"{message} (pseudo-extrema: {listed})"
        else:
            full_message = message
        super().__init__(full_message)
        self.pseudo_extrema = pseudo_extrema


class TableauFormatError(StaboptError):
    """Exception raised when a tableau file is malformed.

    Attributes:
        message: Error message describing the problem
        location: Dotted path of the offending field (optional)
    """

    def __init__(self, message: str, location: str | None = None) -> None:
        if location:
            full_message = f"Malformed tableau at '{location}': {message}"
        else:
            full_message = f"Malformed tableau: {message}"
        super().__init__(full_message)
        self.location = location


class DivergenceError(StaboptError):
    """Exception raised when time integration produces NaN or Inf.

    Attributes:
        message: Error message describing the divergence
        step: Zero-based index of the step that diverged
    """

    exit_code = EXIT_INSTABILITY

    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"{message} (step {step})")
        self.step = step
