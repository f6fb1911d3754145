"""Exceptions raised by imcat.

Everything the CLI should turn into "exit 1 with a diagnostic" derives from
ImcatError.
"""


class ImcatError(Exception):
    """Base class for all domain errors."""


class MissingFile(ImcatError):
    """An input file does not exist."""

    def __init__(self, path):
        super().__init__(f"no such file: {path}")
        self.path = path


class ParseError(ImcatError):
    """A line of an input file does not match its schema."""

    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyAfterFilter(ImcatError):
    """Filtering removed every user, item or tag."""


class NoNegativeAvailable(ImcatError):
    """An anchor row is observed against every column."""


class BundleError(ImcatError):
    """A dataset bundle is missing pieces or has a bad header."""


class CheckpointError(ImcatError):
    """A checkpoint file has a bad header or is truncated."""


class DimError(ImcatError):
    """Embedding size is not divisible by the intent count."""


class DimMismatch(ImcatError):
    """A checkpoint does not fit the dataset it is evaluated against."""


class StaleCache(ImcatError):
    """LightGCN scores requested from an out-of-date propagation."""


class DegenerateCluster(ImcatError):
    """A cluster has no probability mass at all."""

    def __init__(self, clusters):
        super().__init__(f"empty clusters: {list(clusters)}")
        self.clusters = list(clusters)


class NonFiniteLoss(ImcatError):
    """A training step produced NaN or Inf."""

    def __init__(self, diagnostics):
        super().__init__(f"non-finite loss at epoch {diagnostics.get('epoch')}, "
                         f"iteration {diagnostics.get('iteration')}")
        self.diagnostics = diagnostics


class CheckFailed(ImcatError):
    """Analytic and numerical gradients disagree."""

    def __init__(self, report):
        bad = ", ".join(sorted(report.failed))
        super().__init__(f"gradient check failed for: {bad}")
        self.report = report


class EmptySubset(ImcatError):
    """No user qualifies for a restricted evaluation."""


class ConfigError(ImcatError):
    """The run configuration has unknown keys or invalid values."""

    def __init__(self, errors):
        lines = [f"{key}: {'; '.join(msgs)}" for key, msgs in sorted(errors.items())]
        super().__init__("invalid configuration: " + ", ".join(lines))
        self.errors = errors
