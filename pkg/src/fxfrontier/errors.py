"""Exception hierarchy shared by all estimation modules."""


class FxFrontierError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FxFrontierError, ValueError):
    """Invalid configuration value (CLI exit code 2)."""


# -- panel data --------------------------------------------------------------

class MissingColumn(FxFrontierError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"missing column {self.name!r}"


class ParseError(FxFrontierError, ValueError):
    def __init__(self, row, column, value=None):
        super().__init__(row, column, value)
        self.row = row
        self.column = column
        self.value = value

    def __str__(self):
        return f"row {self.row}: cannot parse column {self.column!r} (value {self.value!r})"


class DuplicateBankQuarter(FxFrontierError, ValueError):
    def __init__(self, bank_id, quarter):
        super().__init__(bank_id, quarter)
        self.bank_id = bank_id
        self.quarter = quarter

    def __str__(self):
        return f"duplicate observation for bank {self.bank_id!r} in {self.quarter}"


class InvariantViolation(FxFrontierError, ValueError):
    """A row violates an accounting identity of the panel."""


class EmptyPanel(FxFrontierError, ValueError):
    pass


class NonPositiveTotalCosts(FxFrontierError, ValueError):
    pass


# -- frontier ----------------------------------------------------------------

class NonPositiveValue(FxFrontierError, ValueError):
    def __init__(self, column, row):
        super().__init__(column, row)
        self.column = column
        self.row = row

    def __str__(self):
        return f"non-positive value in column {self.column!r} at row {self.row}"


class UnknownColumn(FxFrontierError, KeyError):
    def __str__(self):
        return f"unknown column {self.args[0]!r}"


class SpecMismatch(FxFrontierError, ValueError):
    pass


class ZeroElasticitySum(FxFrontierError, ZeroDivisionError):
    pass


class NonFiniteLikelihood(FxFrontierError, FloatingPointError):
    def __init__(self, row):
        super().__init__(row)
        self.row = row

    def __str__(self):
        return f"non-finite log-likelihood contribution at observation {self.row}"


class RankDeficientDesign(FxFrontierError, ValueError):
    def __init__(self, columns):
        super().__init__(columns)
        self.columns = list(columns)

    def __str__(self):
        return f"rank-deficient design; dependent columns: {self.columns}"


class DidNotConverge(FxFrontierError, RuntimeError):
    """Optimizer stopped before meeting the convergence criteria.

    The best partial fit is attached as ``fit``.
    """

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class NotConverged(FxFrontierError, ValueError):
    """A downstream operation was handed a fit that did not converge."""


# -- volatility --------------------------------------------------------------

class SeriesTooShort(FxFrontierError, ValueError):
    pass


class DegenerateSeries(FxFrontierError, ValueError):
    pass


# -- two-stage ---------------------------------------------------------------

class InsufficientLags(FxFrontierError, ValueError):
    pass


class CollinearRegressors(FxFrontierError, ValueError):
    def __init__(self, columns, message=None):
        super().__init__(message or f"collinear regressors: {list(columns)}")
        self.columns = list(columns)


# -- regression --------------------------------------------------------------

class Collinear(CollinearRegressors):
    pass


class TooFewObservations(FxFrontierError, ValueError):
    pass


class InsufficientHistory(FxFrontierError, ValueError):
    pass


class WeakInstrumentWarning(UserWarning):
    pass


# -- copula ------------------------------------------------------------------

class LengthMismatch(FxFrontierError, ValueError):
    pass


class BandwidthSelectionFailed(UserWarning):
    """Cross-validation failed; the rule-of-thumb bandwidth was used."""


# -- synthetic data ----------------------------------------------------------

class InvalidConfig(ConfigError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
