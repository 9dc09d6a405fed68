"""Exception hierarchy.

Errors split into two families so the command line can map them onto exit
codes: ``ValidationError`` (bad or inconsistent input, exit 1) and
``ProcessingError`` (computation could not complete, exit 2).
"""


class OctQuantError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(OctQuantError):
    pass


class ProcessingError(OctQuantError):
    pass


# -- pairing / schema ---------------------------------------------------------

class DimMismatch(ValidationError):
    pass


class SpacingMismatch(ValidationError):
    pass


class LateralityMismatch(ValidationError):
    pass


class UnknownClass(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


# -- OCTB container -----------------------------------------------------------

class BadMagic(ValidationError):
    pass


class HeaderParse(ValidationError):
    pass


class TruncatedPayload(ValidationError):
    pass


class IllegalLabelValue(ValidationError):
    pass


class IoFailure(ProcessingError):
    pass


class CohortParse(ValidationError):
    pass


# -- preprocessing ------------------------------------------------------------

class DegenerateBScan(ProcessingError):
    pass


# -- thickness ----------------------------------------------------------------

class UnboundedLayer(ValidationError):
    pass


class EmptySurface(ProcessingError):
    pass


class CenterOutOfField(ValidationError):
    pass


# -- statistics ---------------------------------------------------------------

class DegenerateGroup(ValidationError):
    pass


class SingularDesign(ProcessingError):
    pass


class NegativeResponse(ValidationError):
    pass


class NonConvergence(ProcessingError):
    def __init__(self, message, iterates=None):
        super().__init__(message)
        self.iterates = iterates or []


# -- phantom / batch ----------------------------------------------------------

class SpecInfeasible(ValidationError):
    pass


class UnknownMode(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass
