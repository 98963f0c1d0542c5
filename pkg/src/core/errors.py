#!/usr/bin/env python3
"""
Error hierarchy shared by the numerical core, the harness and the CLI.
"""


class SpectralMoeError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(SpectralMoeError, ValueError):
    """A precondition on shapes, values or configuration was violated."""


class InsufficientRank(InvalidInput):
    """The requested experts do not fit inside the available spectrum (N·d > h)."""


class DegenerateSegment(InvalidInput):
    """A spectral segment carries zero mass, so scale alignment is undefined."""


class SchemaError(InvalidInput):
    """An experiment config or an emitted artifact does not match its schema."""


class NumericalFailure(SpectralMoeError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


class TrainingDiverged(SpectralMoeError):
    """The training loss became non-finite."""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")
