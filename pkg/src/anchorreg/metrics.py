"""Registration metrics: rotation/translation error, recall per distance bin, inlier ratio."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .correspondences import CorrespondenceSet
from .geometry import DistanceBin, PointCloud, RigidTransform

log = logging.getLogger(__name__)

DEFAULT_BINS: tuple[DistanceBin, ...] = tuple(
    DistanceBin(lo, hi) for lo, hi in ((5, 10), (10, 20), (20, 30), (30, 40), (40, 50))
)
DEFAULT_RRE_THRESH = 5.0
DEFAULT_RTE_THRESH = 2.0
DEFAULT_IR_THRESH = 0.6


def rre(T_est: RigidTransform, T_gt: RigidTransform) -> float:
    """Geodesic angle in degrees between the two rotations.

    Evaluated as ``atan2(sin, cos)`` of the relative rotation rather than
    ``arccos`` of the trace: both give the same angle, but ``arccos`` loses
    about half the significant digits near zero.
    """
    R = T_est.rotation.T @ T_gt.rotation
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    skew = R - R.T
    sin = 0.5 * math.sqrt(skew[2, 1] ** 2 + skew[0, 2] ** 2 + skew[1, 0] ** 2)
    return math.degrees(math.atan2(sin, cos))


def rte(T_est: RigidTransform, T_gt: RigidTransform) -> float:
    """Raw translation discrepancy ``||t_est - t_gt||`` in meters."""
    return float(np.linalg.norm(T_est.translation - T_gt.translation))


def pair_distance(T_gt: RigidTransform) -> float:
    """Sensor distance used for binning synthetic pairs: ``||t_gt||``."""
    return float(np.linalg.norm(T_gt.translation))


def find_bin(distance: float, bins: Sequence[DistanceBin]) -> DistanceBin | None:
    for b in bins:
        if b.contains(distance):
            return b
    return None


@dataclass(frozen=True)
class MetricsReport:
    rre_deg: float
    rte_m: float
    success: bool
    bin: DistanceBin
    pair_id: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.rre_deg <= 180.0:
            raise ValueError(f"rre_deg out of range: {self.rre_deg}")
        if not self.rte_m >= 0.0:
            raise ValueError(f"rte_m must be non-negative: {self.rte_m}")

    @classmethod
    def evaluate(
        cls,
        T_est: RigidTransform,
        T_gt: RigidTransform,
        bin: DistanceBin,
        pair_id: str = "",
        rre_thresh: float = DEFAULT_RRE_THRESH,
        rte_thresh: float = DEFAULT_RTE_THRESH,
    ) -> "MetricsReport":
        r, t = rre(T_est, T_gt), rte(T_est, T_gt)
        return cls(r, t, is_success(r, t, rre_thresh, rte_thresh), bin, pair_id)

    @classmethod
    def failure(cls, bin: DistanceBin, pair_id: str = "") -> "MetricsReport":
        """A pair whose registration produced no pose at all."""
        return cls(180.0, math.inf, False, bin, pair_id)


def is_success(rre_deg: float, rte_m: float, rre_thresh: float, rte_thresh: float) -> bool:
    return rre_deg <= rre_thresh and rte_m <= rte_thresh


@dataclass
class BenchmarkSummary:
    rr_per_bin: dict[DistanceBin, float | None]
    n_per_bin: dict[DistanceBin, int]
    mrr: float
    mean_rre: float
    mean_rte: float
    teacher_ir: float | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        for v in [*self.rr_per_bin.values(), self.mrr, self.teacher_ir]:
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"fraction out of range: {v}")


def registration_recall(
    reports: Sequence[MetricsReport],
    rre_thresh: float = DEFAULT_RRE_THRESH,
    rte_thresh: float = DEFAULT_RTE_THRESH,
    bins: Sequence[DistanceBin] = DEFAULT_BINS,
    teacher_ir: float | None = None,
) -> BenchmarkSummary:
    """Recall per bin and its mean over the non-empty bins.

    Success is recomputed from the thresholds, so the stored ``success`` flag
    of a report does not matter here. Mean RRE/RTE run over successes only
    and are NaN when there are none.
    """
    if len(reports) == 0:
        raise ValueError("no reports to summarize")
    bins = list(bins)
    index = {b: k for k, b in enumerate(bins)}
    ok = np.zeros(len(bins))
    n = np.zeros(len(bins), dtype=np.int64)
    rres, rtes = [], []
    for rep in reports:
        if rep.bin not in index:
            raise ValueError(f"report {rep.pair_id!r} has bin {rep.bin} outside the bin list")
        k = index[rep.bin]
        n[k] += 1
        if is_success(rep.rre_deg, rep.rte_m, rre_thresh, rte_thresh):
            ok[k] += 1
            rres.append(rep.rre_deg)
            rtes.append(rep.rte_m)
    warnings = []
    rr: dict[DistanceBin, float | None] = {}
    for b, k in index.items():
        if n[k] == 0:
            rr[b] = None
            warnings.append(f"bin {b} is empty and excluded from mRR")
        else:
            rr[b] = float(ok[k] / n[k])
    for w in warnings:
        log.warning(w)
    filled = [v for v in rr.values() if v is not None]
    return BenchmarkSummary(
        rr,
        {b: int(n[k]) for b, k in index.items()},
        float(np.mean(filled)),
        float(np.mean(rres)) if rres else math.nan,
        float(np.mean(rtes)) if rtes else math.nan,
        teacher_ir,
        warnings,
    )


def inlier_ratio(
    corrs: CorrespondenceSet,
    P: PointCloud,
    Q: PointCloud,
    T_gt: RigidTransform,
    residual_thresh: float = DEFAULT_IR_THRESH,
) -> float:
    """Fraction of correspondences with ``||T_gt p_i - q_j|| < residual_thresh``."""
    if not residual_thresh > 0:
        raise ValueError("residual_thresh must be positive")
    if len(corrs) == 0:
        log.warning("inlier ratio of an empty correspondence set is taken as 0")
        return 0.0
    corrs.check_bounds(len(P), len(Q))
    res = np.linalg.norm(T_gt.apply(P.points[corrs.i]) - Q.points[corrs.j], axis=1)
    return float(np.mean(res < residual_thresh))
