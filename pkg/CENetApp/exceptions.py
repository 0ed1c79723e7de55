from typing import Any, Dict, Optional, Sequence


class CENetError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class DimensionError(CENetError, ValueError):
    pass


class BoundsError(CENetError, IndexError):
    pass


class ConfigurationError(CENetError, ValueError):
    pass


class ContractError(CENetError, ValueError):
    pass


class LifecycleError(CENetError, RuntimeError):
    pass


class IntegrityError(CENetError, ValueError):
    pass


class VersionMismatchError(IntegrityError):
    def __init__(self, found: Any, expected: Any):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint format version {found!r} is not supported (expected {expected!r})")


class DataError(CENetError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        where = f"{path}: " if path else ""
        at = f" (byte offset {offset})" if offset is not None else ""
        super().__init__(f"{where}{message}{at}")


class ShapeMismatchError(DataError):
    """
    A stored tensor does not fit the tensor the configuration expects.
    `found` is None when the tensor is missing altogether.
    """

    def __init__(self, name: str, expected: Sequence[int], found: Optional[Sequence[int]]):
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found) if found is not None else None
        found_txt = "missing" if self.found is None else str(list(self.found))
        super().__init__(f"tensor {name!r}: expected shape {list(self.expected)}, found {found_txt}")


class NumericError(CENetError, ArithmeticError):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
