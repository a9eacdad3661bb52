"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary argument validation; the classes
here mark conditions callers may want to handle specifically (and that the
CLI maps onto exit codes: config problems exit 2, runtime failures exit 1).
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad key, bad value, bad combo)."""


class FormatError(ValueError):
    """Malformed field file (bad magic, bad header field, truncated payload)."""


class DegenerateSimilarityError(ValueError):
    """Similarity undefined: an input is (near-)constant."""


class DegenerateWeightsError(ValueError):
    """Jacobian-weighted average undefined: weight sum vanished at some voxel."""


class DegenerateIntensityError(ValueError):
    """Intensity normalization undefined: image is (near-)constant."""


class SequencingError(RuntimeError):
    """Operation called out of order (e.g. atlas update mid-epoch)."""


class NumericError(RuntimeError):
    """Non-finite value encountered during optimization; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonInvertibleMapError(RuntimeError):
    """Numeric inversion failed; carries the final mean squared residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConfigInfeasibleError(RuntimeError):
    """Rejection sampling exhausted: the requested cohort cannot be generated."""
