"""Exception hierarchy shared by every stage of the benchmark."""


class CxrBenchError(Exception):
    """Base class for all errors raised by cxrbench."""


class ValidationError(CxrBenchError, ValueError):
    """An argument or configuration value violates its contract."""


class IngestionError(CxrBenchError):
    """A data source could not be read into image records."""


class SplitError(CxrBenchError):
    """A cross-validation split cannot be constructed."""


class WeightsUnavailableError(CxrBenchError):
    """Pretrained weights could not be fetched (no network or no cached file)."""


class WeightsCorruptError(CxrBenchError):
    """Pretrained weights were found but could not be decoded or verified."""


class NumericError(CxrBenchError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UndefinedMetricError(CxrBenchError):
    """A metric has no defined value for the supplied counts."""


class DegenerateCurveError(CxrBenchError):
    """A ROC curve was requested for input containing a single class."""


class ReportError(CxrBenchError):
    """Artifacts required to render a report are missing."""


class FoldError(CxrBenchError):
    """A cross-validation fold failed; ``fold_index`` names it."""

    def __init__(self, fold_index: int, message: str):
        super().__init__(f"fold {fold_index}: {message}")
        self.fold_index = fold_index
