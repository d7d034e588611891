"""Exception hierarchy and the exit-status mapping used by the command line."""

EXIT_OK = 0
EXIT_CONVERGENCE = 2
EXIT_CONFIG = 3


class CmcDiskError(Exception):
    """Base class; ``config_hash`` is filled in by the CLI before reporting."""

    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context
        self.config_hash = None

    def __str__(self):
        if self.config_hash:
            return f'{self.message} [config {self.config_hash}]'
        return self.message


class ConfigError(CmcDiskError, ValueError):
    exit_code = EXIT_CONFIG


class MeshError(CmcDiskError, ValueError):
    pass


class SurfaceError(CmcDiskError, ValueError):
    pass


class ProjectionError(SurfaceError):
    """Closest-point iteration did not converge; ``point`` is the input."""

    def __init__(self, message, point=None, **context):
        super().__init__(message, **context)
        self.point = point


class TangencyError(CmcDiskError, ValueError):
    pass


class PathError(CmcDiskError, ValueError):
    pass


class SolverError(CmcDiskError):
    exit_code = EXIT_CONVERGENCE


class ConvergenceError(SolverError):
    pass


class DivergenceError(SolverError):
    pass


class ContinuationError(SolverError):
    def __init__(self, message, stages=None, **context):
        super().__init__(message, **context)
        self.stages = stages or []


class DegreeError(SolverError):
    pass


class TrivialPathError(SolverError):
    pass


class SpectrumError(CmcDiskError):
    exit_code = EXIT_CONVERGENCE


class EigenSolverError(SpectrumError):
    pass


class FrameError(SpectrumError):
    pass


class BranchingError(SpectrumError):
    pass


def exit_code_for(error):
    if isinstance(error, CmcDiskError):
        return error.exit_code
    return 1
