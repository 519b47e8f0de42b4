"""Exception hierarchy.

``ValidationError`` subclasses signal bad input or configuration (CLI exit
code 1); everything else derived from ``ApiGraphError`` is a runtime or
stage failure (exit code 2).
"""


class ApiGraphError(Exception):
    pass


class ValidationError(ApiGraphError):
    pass


# corpus
class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None, path=None, app_id=None):
        self.message = message
        self.line = line
        self.path = path
        self.app_id = app_id
        super().__init__(self._render())

    def _render(self) -> str:
        where = []
        if self.app_id is not None:
            where.append(f"app {self.app_id}")
        if self.path is not None:
            where.append(str(self.path))
        if self.line is not None:
            where.append(f"line {self.line}")
        prefix = ", ".join(where)
        return f"{prefix}: {self.message}" if prefix else self.message

    def with_context(self, app_id=None, path=None):
        if app_id is not None:
            self.app_id = app_id
        if path is not None:
            self.path = path
        self.args = (self._render(),)
        return self


class UnterminatedMethod(ParseError):
    pass


class MalformedInvoke(ParseError):
    pass


class UnknownDirective(ParseError):
    pass


class MissingLabel(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class EmptyApp(ValidationError):
    pass


class SpecInvalid(ValidationError):
    pass


# graphbuild
class DegenerateDesign(ApiGraphError):
    pass


class NonConvergence(ApiGraphError):
    pass


class UnknownNode(ApiGraphError):
    pass


# tensor
class ShapeMismatch(ApiGraphError):
    pass


class NonFinite(ApiGraphError):
    pass


class NonScalarLoss(ApiGraphError):
    pass


class BadLabel(ApiGraphError):
    pass


class BadRate(ApiGraphError):
    pass


class EmptyInput(ApiGraphError):
    pass


class IndexOutOfRange(ApiGraphError):
    pass


# gnn / classifiers
class AsymmetricInput(ApiGraphError):
    pass


class EmptyGraph(ApiGraphError):
    pass


class SingleClassData(ApiGraphError):
    pass


class MissingEmbedding(ApiGraphError):
    pass


class LengthMismatch(ApiGraphError):
    pass


# attack
class EmptyBenignGraph(ApiGraphError):
    pass


class NodeMismatch(ApiGraphError):
    pass


class EmptyBatch(ApiGraphError):
    pass


class DetectorUnavailable(ApiGraphError):
    pass


# cli
class MissingDetector(ValidationError):
    pass


class MissingSamples(ValidationError):
    pass
