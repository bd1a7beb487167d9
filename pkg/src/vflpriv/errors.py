"""Exception hierarchy shared across the package."""


class VflError(Exception):
    pass


class ShapeError(VflError, ValueError):
    pass


class DomainError(VflError, ValueError):
    pass


class IngestionError(VflError, ValueError):
    pass


class ProtocolError(VflError, RuntimeError):
    pass


class AttackSetupError(VflError, RuntimeError):
    pass


class DefenseError(VflError, RuntimeError):
    pass


class ConfigError(VflError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ReportingError(VflError, ValueError):
    pass
