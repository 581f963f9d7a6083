"""Exception hierarchy shared by every rwplab module."""


class RWPLabError(Exception):
    pass


class ShapeError(RWPLabError, ValueError):
    """Operand shapes are inconsistent with the recorded operation."""


class ContractError(RWPLabError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(RWPLabError, ArithmeticError):
    """A forward value became NaN or infinite.

    ``op_index`` is the position of the offending operation in the active
    graph recording (or the global op counter when nothing is recording).
    """

    def __init__(self, message, op_index=None, op_name=None):
        super().__init__(message)
        self.op_index = op_index
        self.op_name = op_name


class ConfigError(RWPLabError, ValueError):
    pass


class FormatError(RWPLabError, ValueError):
    """Malformed on-disk data."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class RecordCountError(FormatError):
    pass
