"""Exception hierarchy. Every error maps to a stable CLI exit code."""


class PseudoSegError(Exception):
    exit_code = 1


class ValidationError(PseudoSegError, ValueError):
    """Malformed value: bad polygon, out-of-range score, wrong parameter."""


class ParseError(ValidationError):
    def __init__(self, message, byte_offset=None):
        super().__init__(message if byte_offset is None else f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class ReferentialError(ValidationError):
    """A reference (image id, category id) does not resolve."""


class ContractError(PseudoSegError, ValueError):
    """Caller violated an operation precondition."""


class AdapterError(PseudoSegError):
    exit_code = 2

    def __init__(self, message, diagnostics=""):
        super().__init__(message if not diagnostics else f"{message}\n{diagnostics}")
        self.diagnostics = diagnostics
