"""Exception hierarchy shared by every stage of the pipeline."""


class SacroError(Exception):
    """Base class for all pipeline errors."""


class InvalidSpecError(SacroError, ValueError):
    """A phantom or corpus specification violates its invariants."""


class DomainError(SacroError, ValueError):
    """An argument lies outside the domain of a function (grade, class mix, ...)."""


class ProtocolError(SacroError):
    """A reading protocol was not followed (e.g. missing adjudication read)."""


class SplitError(SacroError, ValueError):
    pass


class ParameterError(SacroError, ValueError):
    pass


class ShapeError(SacroError, ValueError):
    pass


class LocalizationError(SacroError):
    """The SIJ could not be localized from a segmentation."""


class CropError(SacroError):
    pass


class ScheduleError(SacroError, ValueError):
    pass


class DegenerateVarianceError(SacroError, ArithmeticError):
    pass


class CIFailure(SacroError):
    """Bootstrap metric undefined on too many resamples."""


class CoordinateError(SacroError):
    """Heatmap and boxes are not expressed in the same image frame."""


class LayerLookupError(SacroError, LookupError):
    pass


class ConfigError(SacroError):
    exit_code = 2


class UpstreamMissingError(SacroError):
    exit_code = 3


class NumericalError(SacroError, ArithmeticError):
    exit_code = 4
