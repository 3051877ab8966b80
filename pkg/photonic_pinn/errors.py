"""
Exception types shared across the simulator
"""


class PhotonicPinnError(Exception):
    """Base class for all simulator errors"""


class DimensionMismatchError(PhotonicPinnError, ValueError):
    """Input length does not match what a layer or chip expects"""


class NonOrthogonalError(PhotonicPinnError, ValueError):
    """Matrix handed to the mesh decomposer is not orthogonal"""

    def __init__(self, defect):
        self.defect = float(defect)
        super().__init__(f"Matrix is not orthogonal: max|Q^T Q - I| = {self.defect:.3e}")


class FDSafetyError(PhotonicPinnError, ValueError):
    """Collocation point too close to the domain edge for the FD stencil"""


class ConfigError(PhotonicPinnError, ValueError):
    """Invalid run configuration"""


class CheckpointError(PhotonicPinnError, ValueError):
    """Checkpoint file is unreadable or does not match the schema"""


class NonFiniteLossError(PhotonicPinnError, RuntimeError):
    """A loss evaluation returned NaN or inf"""


class EpochAbortedError(PhotonicPinnError, RuntimeError):
    """Training epoch could not complete; phases were left untouched"""


class TrainingDivergedError(PhotonicPinnError, RuntimeError):
    """Off-chip training loss blew up"""

    def __init__(self, message, history):
        self.history = list(history)
        super().__init__(message)
