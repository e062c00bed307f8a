"""
Exception hierarchy shared by all HybridODE modules. Library code raises these;
only the command entry point turns them into log lines and exit codes.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


from typing import Optional


class HybridOdeError(Exception):
    """
    Base class of every error raised by HybridODE.
    """


class ShapeError(HybridOdeError):
    """
    Operand shapes are incompatible with the requested operation.
    """


class TapeError(HybridOdeError):
    """
    The reverse-mode tape was used incorrectly (e.g. a non-scalar loss).
    """


class NonFiniteError(HybridOdeError):
    """
    A NaN or Inf value appeared in a forward computation.
    """
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class IntegrationError(NonFiniteError):
    """
    The ODE integrator produced a non-finite state; `step` names the grid step.
    """


class ConfigurationError(HybridOdeError):
    """
    A configuration value, parameter table or model descriptor is invalid.
    """


class DataFormatError(HybridOdeError):
    """
    An input file is malformed; `line` is the 1-based line number when known.
    """
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message)
        self.line = line


class WindowSamplingError(HybridOdeError):
    """
    The requested batch composition cannot be satisfied by the dataset.
    """


class TrainingDivergedError(HybridOdeError):
    """
    A training loss became non-finite; `epoch` names the epoch.
    """
    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


class MissingArtifactError(HybridOdeError):
    """
    A required upstream file (dataset, checkpoint, config) does not exist.
    """
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class CheckpointError(HybridOdeError):
    """
    A checkpoint cannot be read or does not match the expected architecture.
    """
