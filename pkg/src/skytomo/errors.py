"""Exception hierarchy shared by every stage of the pipeline.

Each class carries a distinct CLI exit code so scripted runs can branch on
the failure class without parsing messages.
"""


class SkytomoError(Exception):
    exit_code = 1


class GeometryError(SkytomoError):
    pass


class DegenerateProjectionError(GeometryError):
    pass


class NoIntersectionError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class OutOfBoundsError(GeometryError):
    pass


class GenerationError(SkytomoError):
    exit_code = 5

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class InputError(SkytomoError):
    exit_code = 2


class ConfigError(SkytomoError):
    exit_code = 2

    def __init__(self, message, field=None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class DependencyError(SkytomoError):
    exit_code = 3


class FormatError(SkytomoError):
    exit_code = 4


class CorruptFileError(FormatError):
    pass


class BudgetExceededError(SkytomoError):
    exit_code = 5


class DivergenceError(SkytomoError):
    exit_code = 5

    def __init__(self, message, step=None, last_good_step=None):
        super().__init__(message)
        self.step = step
        self.last_good_step = last_good_step
