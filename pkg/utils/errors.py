"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class TtreftError(Exception):
    """Base class for runtime failures (exit code 1)"""
    exit_code = 1


class ConfigError(TtreftError):
    """Invalid configuration or command-line usage (exit code 2)"""
    exit_code = 2


class ShapeError(TtreftError):
    pass


class ContractError(TtreftError):
    pass


class DegenerateBasisError(TtreftError):
    pass


class AdaptationDivergedError(TtreftError):
    pass


class TrainingError(TtreftError):
    pass


class SplitError(TtreftError):
    pass


class CheckpointError(TtreftError):
    pass


class ForgettingGuardError(TtreftError):
    """The frozen backbone changed during adaptation"""
    pass


class OrthogonalityError(TtreftError):
    pass


class TheoryConstructionError(TtreftError):
    pass


class DatasetFormatError(TtreftError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
