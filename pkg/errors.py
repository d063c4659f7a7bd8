#!/usr/bin/env python3
"""
Error types shared across the qdiff runtime.

The CLI maps these onto exit codes: ConfigError and CheckpointError exit
with 2, everything else derived from QDiffError exits with 3.
"""


class QDiffError(Exception):
    """Base class for all runtime errors raised by qdiff."""

    kind = "runtime"


class ConfigError(QDiffError, ValueError):
    """Invalid or unknown configuration value."""

    kind = "config"

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


class ShapeError(QDiffError, ValueError):
    """Operand shapes do not line up."""

    kind = "shape"


class TapeError(QDiffError, ValueError):
    """Misuse of the gradient tape (non-scalar loss, loss from another tape)."""

    kind = "tape"


class CalibrationError(QDiffError, RuntimeError):
    """An INT8 path was requested for a layer without frozen QuantParams."""

    kind = "calibration"


class NumericalError(QDiffError, ArithmeticError):
    """A loss or statistic went non-finite or out of tolerance."""

    kind = "numerical"


class CheckpointError(QDiffError, IOError):
    """Checkpoint file missing, corrupt or of an unknown format version."""

    kind = "checkpoint"
