class DarknightError(ValueError):
    """
    Base class for errors raised by the blinding, coding and training code.

    """


class ShapeError(DarknightError):
    pass


class TensorFormatError(DarknightError):
    pass


class ParameterError(DarknightError):
    pass


class ProtocolError(DarknightError):
    """
    Raised when the trusted/untrusted exchange is used out of order or with
    the wrong number of equations.

    """


class KeyMaterialError(DarknightError):
    pass


class NormalizationError(DarknightError):
    pass
