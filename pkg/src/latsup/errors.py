"""Exception types raised across the toolkit."""


class LatsupError(Exception):
    pass


class MalformedLattice(LatsupError):
    pass


class CycleDetected(MalformedLattice):
    pass


class EmptyCorpus(LatsupError):
    pass


class NoPathOfLengthT(LatsupError):
    pass


class AlignmentMismatch(LatsupError):
    pass


class BadConfig(LatsupError):
    pass


class TooShortUtterance(LatsupError):
    pass


class ShapeMismatch(LatsupError):
    pass


class NumeratorEmpty(LatsupError):
    pass


class Diverged(LatsupError):
    pass


class NoAlignment(LatsupError):
    pass


class NoSurvivingToken(LatsupError):
    pass


class CorruptFile(LatsupError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyInput(LatsupError):
    pass


class AllUtterancesFiltered(LatsupError):
    pass


class MissingReference(LatsupError):
    pass
