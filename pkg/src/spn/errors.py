"""Exception types shared across the package."""


class SpnError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SpnError, ValueError):
    pass


class InvalidValueError(SpnError, ValueError):
    pass


class ConfigError(SpnError, ValueError):
    pass


class ContractError(SpnError, ValueError):
    """A caller broke a documented precondition."""


class RangeError(SpnError, IndexError):
    pass


class ParseError(SpnError, ValueError):
    def __init__(self, path, index, message):
        super().__init__(f"{path}: record {index}: {message}")
        self.path = str(path)
        self.index = index


class VersionError(SpnError):
    pass


class SplitNotFoundError(SpnError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "split not found"
