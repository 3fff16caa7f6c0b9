from typing import Any, Dict, Optional


class AfdmError(Exception):
    pass


class InputShapeError(AfdmError, ValueError):
    pass


class DomainError(AfdmError, ValueError):
    pass


class ParameterError(AfdmError, ValueError):
    pass


class ConfigError(AfdmError):
    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        self.message = message
        self.path = path
        self.line = line
        self.column = column
        super().__init__(self.__str__())

    def __str__(self) -> str:
        location = self.path or "<config>"
        if self.line is not None:
            location = f"{location}:{self.line}"
            if self.column is not None:
                location = f"{location}:{self.column}"
        return f"{location}: {self.message}"


class EstimatorDivergedError(AfdmError):
    def __init__(self, message: str, iteration: int, snapshot: Dict[str, Any]):
        self.iteration = iteration
        self.snapshot = snapshot
        super().__init__(f"{message} (iteration {iteration})")


class InfeasibleProblemError(AfdmError):
    pass
