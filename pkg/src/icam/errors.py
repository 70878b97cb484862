"""Exception types shared across the package."""


class ICAMError(Exception):
    pass


class DimensionError(ICAMError, ValueError):
    """Operand shapes are not conformal."""


class DomainError(ICAMError, ValueError):
    """An elementwise op was evaluated outside its domain (log of <= 0, division by 0)."""


class NumericError(ICAMError, FloatingPointError):
    """A NaN or Inf appeared in an op output."""


class InfeasibleError(ICAMError, ValueError):
    """No admissible choice remains (fully masked softmax or pooling row)."""


class ContractError(ICAMError, ValueError):
    """Caller violated a documented precondition."""


class SizeError(ICAMError, ValueError):
    """Instance too large for an exact oracle."""


class ParseError(ICAMError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
