"""Exception hierarchy."""


class ScenforgeError(Exception):
    """Base class for all library errors."""


class MapError(ScenforgeError):
    pass


class ScenarioFormatError(ScenforgeError):
    """A scenario file is corrupt, truncated or structurally malformed."""


class UnsupportedVersionError(ScenarioFormatError):
    pass


class UnknownObjectError(ScenforgeError, KeyError):
    pass


class TypeConflictError(ScenforgeError):
    pass


class DatabaseError(ScenforgeError):
    pass


class DuplicateIdError(DatabaseError):
    pass


class SimulationError(ScenforgeError):
    pass


class ProtocolError(ScenforgeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
