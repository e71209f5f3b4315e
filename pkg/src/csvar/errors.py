"""Exception types shared across the package."""


class CsvarError(Exception):
    """Base class for every error raised by this package."""


class InputError(CsvarError, ValueError):
    """Bad caller input; the CLI maps these to exit code 2."""


class ShapeMismatch(InputError):
    pass


class NonDivisibleDimensions(InputError):
    pass


class RegionOutOfBounds(InputError):
    pass


class InvalidOverride(InputError):
    pass


class BlockSizeMismatch(InputError):
    pass


class FormatError(InputError):
    """Malformed on-disk data."""


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class CountMismatch(FormatError):
    pass


class LabelOutOfRange(FormatError):
    pass


class MalformedHeader(FormatError):
    pass


class UnsupportedMaxval(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class EmptyClient(InputError):
    pass


class EmptyClientList(InputError):
    pass


class MissingVariant(InputError):
    pass


class EmptyCohort(InputError):
    pass


class NotColorImage(InputError):
    pass
