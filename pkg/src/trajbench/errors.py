"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class DegenerateBearing(InvalidArgument):
    """Bearing requested between two identical points."""


class ProjectionDomainError(ValueError):
    """Point too far from the projection origin for the local hex grid."""


class ParseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


class DanglingRidError(ValueError):
    def __init__(self, offenders):
        super().__init__(f"adjacency references unknown rids: {sorted(offenders)}")
        self.offenders = sorted(offenders)


class UnresolvedSegmentError(ValueError):
    def __init__(self, rids):
        super().__init__(f"rids not in road graph: {sorted(rids)}")
        self.rids = sorted(rids)


class InvalidAssignment(ValueError):
    pass


class SchemaError(ValueError):
    pass


class ProviderError(RuntimeError):
    """Transport or protocol failure while talking to a remote provider."""


class ExtractionFailure(ValueError):
    pass


class NumericFailure(FloatingPointError):
    def __init__(self, msg, batch_index=None):
        super().__init__(msg if batch_index is None else f"{msg} (batch {batch_index})")
        self.batch_index = batch_index


class InvalidState(RuntimeError):
    pass


class ConfigError(ValueError):
    pass
