"""Exception hierarchy shared by the registration pipeline.

The command-line layer maps these onto its exit codes, so every
algorithmic failure derives from :class:`AlgorithmError`.
"""

from __future__ import annotations


class AlgorithmError(RuntimeError):
    """Base class for failures of a numerical procedure (exit code 3)."""


class DegenerateGeometryError(AlgorithmError, ValueError):
    """Too few or (near-)collinear correspondences for a rigid fit."""


class GenerationFailedError(AlgorithmError):
    """Synthetic pair generation could not hit its overlap target."""


class EstimatorFailedError(AlgorithmError):
    """Every pose hypothesis of a robust estimator was degenerate.

    ``verdict`` carries the best partial result, which may be ``None``.
    """

    def __init__(self, message: str, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class MissingClassError(AlgorithmError, ValueError):
    """Anchor computation needs at least one inlier and one outlier."""


class EmptySeedError(AlgorithmError):
    """No correspondence passed the seed similarity threshold."""


class MiningFailedError(AlgorithmError):
    """Pseudo-label mining failed for a pair."""


class RejectedBatchError(AlgorithmError):
    """A loss batch had nothing to classify and was skipped."""


class DivergedError(AlgorithmError):
    """Training loss blew up past the divergence guard."""
