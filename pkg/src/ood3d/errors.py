"""Exception hierarchy. Every error carries enough context to act on."""


class OodError(Exception):
    """Base class for all toolkit errors."""


class ParseError(OodError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


class SchemaError(OodError, ValueError):
    pass


class ConfigError(OodError, ValueError):
    pass


class MissingOodScore(OodError, ValueError):
    pass


class EmptyPartition(OodError, ValueError):
    pass


class DegenerateInput(OodError, ValueError):
    pass


class EmptyLogits(OodError, ValueError):
    pass


class MissingSamples(OodError, ValueError):
    pass


class OutOfBounds(OodError, ValueError):
    pass


class WidthMismatch(OodError, ValueError):
    pass


class DegenerateDataset(OodError, ValueError):
    pass


class NoMemberPoints(OodError, ValueError):
    pass


class TooFewEligible(OodError, ValueError):
    pass


class NoFreeSpace(OodError, RuntimeError):
    pass
