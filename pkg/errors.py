# Exception hierarchy shared by the model loader, the bound engine and the CLI.

from typing import Any, Optional


class VerifierError(Exception):
    """Base class for every error raised by attnverify."""


class ParseError(VerifierError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"cannot parse {path}: {detail}")
        self.path = path


class ShapeError(VerifierError, ValueError):
    def __init__(self, name: str, expected: Any, actual: Any):
        super().__init__(f"{name}: expected shape {tuple(expected)}, got {tuple(actual)}")
        self.name = name
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class NonFiniteError(VerifierError, ValueError):
    def __init__(self, name: str):
        super().__init__(f"{name}: contains NaN or Inf")
        self.name = name


class DomainError(VerifierError, ValueError):
    pass


class UnverifiableError(DomainError):
    """Attention bounds cannot be formed: a softmax denominator lower bound is not positive or
    an intermediate bound is not finite."""

    def __init__(self, layer: int, head: int, lower: float, detail: Optional[str] = None):
        detail = detail or f"softmax denominator lower bound {lower:.6g} <= 0"
        super().__init__(f"layer {layer} head {head}: {detail}")
        self.layer = layer
        self.head = head
        self.lower = lower


class LabelMismatchError(VerifierError, ValueError):
    def __init__(self, label: int, predicted: int):
        super().__init__(f"label {label} does not match the model's prediction {predicted}")
        self.label = label
        self.predicted = predicted


class GradientError(VerifierError):
    def __init__(self, site: Optional[tuple], detail: str = "non-finite gradient"):
        super().__init__(f"{detail} at site {site}")
        self.site = site


class SearchError(VerifierError):
    pass


class SearchCapReached(SearchError):
    def __init__(self, cap: int, eps: float):
        super().__init__(f"still verified after {cap} doublings (eps={eps:.6g})")
        self.cap = cap
        self.eps = eps


class BudgetError(VerifierError):
    def __init__(self, points: int, cap: int):
        super().__init__(f"grid of {points} points exceeds the cap of {cap}")
        self.points = points
        self.cap = cap
