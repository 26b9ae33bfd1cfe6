"""Spatial-compatibility outlier rejection.

Rigid motions preserve pairwise distances, so two correspondences are
compatible when the distance between their source points matches the distance
between their target points. The second-order measure multiplies that hard
compatibility by the number of correspondences compatible with both, which
separates the inlier clique from accidental outlier agreements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .correspondences import CorrespondenceSet
from .errors import DegenerateGeometryError, EstimatorFailedError
from .geometry import PointCloud, RigidTransform, kabsch


@dataclass(eq=False)
class CompatibilityMatrix:
    values: np.ndarray
    tau_c: float

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("compatibility matrix must be square")
        self.values = v

    def __len__(self) -> int:
        return len(self.values)


@dataclass(eq=False)
class EstimatorVerdict:
    inlier_flags: np.ndarray
    pose: RigidTransform
    score: float

    def __post_init__(self) -> None:
        self.inlier_flags = np.asarray(self.inlier_flags, dtype=bool).reshape(-1)
        if self.score < 0:
            raise ValueError("score must be non-negative")

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_flags.sum())


class Estimator(Protocol):
    """Anything that splits a correspondence set into inliers and outliers."""

    def filter(self, P: PointCloud, Q: PointCloud, corrs: CorrespondenceSet) -> EstimatorVerdict: ...


def _endpoints(P: PointCloud, Q: PointCloud, corrs: CorrespondenceSet):
    corrs.check_bounds(len(P), len(Q))
    return P.points[corrs.i], Q.points[corrs.j]


def _pairwise(x: np.ndarray) -> np.ndarray:
    return cdist(x, x)


def first_order_compat(
    P: PointCloud, Q: PointCloud, corrs: CorrespondenceSet, tau_c: float = 0.6
) -> CompatibilityMatrix:
    if not tau_c > 0:
        raise ValueError("tau_c must be positive")
    if len(corrs) < 2:
        raise ValueError("need at least 2 correspondences")
    src, dst = _endpoints(P, Q, corrs)
    M = (np.abs(_pairwise(src) - _pairwise(dst)) < tau_c).astype(np.float64)
    np.fill_diagonal(M, 1.0)
    return CompatibilityMatrix(M, tau_c)


def second_order_compat(M: CompatibilityMatrix) -> CompatibilityMatrix:
    """``M * (M @ M) / N``: compatibility weighted by shared compatible neighbours."""
    A = M.values
    n = len(A)
    return CompatibilityMatrix(A * (A @ A) / n, M.tau_c)


def sc2_filter(
    P: PointCloud,
    Q: PointCloud,
    corrs: CorrespondenceSet,
    tau_c: float = 0.6,
    n_seeds: int | None = None,
) -> EstimatorVerdict:
    """Seed-and-verify inlier selection on second-order compatibility.

    The ``n_seeds`` correspondences with the largest second-order row sums
    (ties to the lower index) each grow a consensus set: the seed plus every
    compatible correspondence whose second-order score with the seed is at
    least the mean of the seed's non-zero scores. A rigid fit on the
    consensus set is scored by its inlier count under ``tau_c`` (ties: lower
    mean inlier residual, then earlier seed). The winning pose is then refit on
    its own inliers until the inlier set stops changing.
    """
    if len(corrs) < 3:
        raise ValueError("sc2_filter needs at least 3 correspondences")
    src, dst = _endpoints(P, Q, corrs)
    n = len(corrs)
    M = sparse.csr_matrix(first_order_compat(P, Q, corrs, tau_c).values)
    # integer counts of common compatible neighbours; M is mostly zeros
    counts = M.multiply(M @ M).tocsr()
    n_seeds = min(20, n) if n_seeds is None else min(n_seeds, n)
    row_sums = np.asarray(counts.sum(axis=1)).reshape(-1)
    seeds = np.argsort(-row_sums, kind="stable")[:n_seeds]

    best = None
    best_key = None
    for s in seeds:
        row = counts.getrow(s).toarray().reshape(-1)
        pos = row > 0
        consensus = pos & (row * pos.sum() >= row[pos].sum())
        consensus[s] = True
        if consensus.sum() < 3:
            continue
        try:
            T = kabsch(src[consensus], dst[consensus])
        except DegenerateGeometryError:
            continue
        res = np.linalg.norm(T.apply(src) - dst, axis=1)
        flags = res < tau_c
        k = int(flags.sum())
        key = (k, -float(res[flags].mean()) if k else 0.0)
        if best_key is None or key > best_key:
            best_key, best = key, (T, flags)
    if best is None:
        empty = EstimatorVerdict(np.zeros(n, dtype=bool), RigidTransform.identity(), 0.0)
        raise EstimatorFailedError("all SC2 hypotheses were degenerate", empty)

    T, flags = _refine(src, dst, *best, tau_c)
    return EstimatorVerdict(flags, T, float(flags.sum()))


def _refine(src, dst, T, flags, tau_c, max_rounds: int = 10):
    """Refit on the inliers until the inlier set is a fixed point.

    At a fixed point the pose is the least-squares fit of exactly the
    correspondences it accepts. Rounds that would leave fewer than three
    inliers are not taken.
    """
    for _ in range(max_rounds):
        if flags.sum() < 3:
            break
        try:
            T2 = kabsch(src[flags], dst[flags])
        except DegenerateGeometryError:
            break
        flags2 = np.linalg.norm(T2.apply(src) - dst, axis=1) < tau_c
        if flags2.sum() < 3:
            break
        T, converged = T2, np.array_equal(flags2, flags)
        flags = flags2
        if converged:
            break
    return T, flags


@dataclass
class SC2Estimator:
    tau_c: float = 0.6
    n_seeds: int | None = None

    def filter(self, P, Q, corrs, params=None) -> EstimatorVerdict:
        if len(corrs) == 0:
            raise ValueError("empty correspondence set")
        return sc2_filter(P, Q, corrs, self.tau_c, self.n_seeds)


@dataclass
class RansacEstimator:
    """Minimal-sample RANSAC over correspondences, for comparison runs.

    Triplets are drawn in batches of ``batch`` and fitted together; drawing
    stops once the usual confidence bound ``log(1 - confidence) /
    log(1 - w**3)`` for the best inlier fraction ``w`` so far is met, or at
    ``max_iters``. The hypothesis with the most inliers (ties: lower mean
    inlier residual, then earlier draw) is refined like the SC2 winner.
    """

    tau_c: float = 0.6
    max_iters: int = 50_000
    rng_seed: int = 0
    confidence: float = 0.999
    batch: int = 512

    def filter(self, P, Q, corrs, params=None) -> EstimatorVerdict:
        if len(corrs) == 0:
            raise ValueError("empty correspondence set")
        if len(corrs) < 3:
            raise ValueError("RANSAC needs at least 3 correspondences")
        src, dst = _endpoints(P, Q, corrs)
        rng = np.random.default_rng(self.rng_seed)
        n = len(corrs)
        best_key, best = None, None
        drawn, needed = 0, self.max_iters
        while drawn < min(needed, self.max_iters):
            k = min(self.batch, self.max_iters - drawn)
            idx = rng.integers(0, n, size=(k, 3))
            distinct = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
            R, t, ok = _batched_kabsch(src[idx], dst[idx])
            ok &= distinct
            # one matmul for all k hypotheses: (n, 3) @ (3, 3k)
            moved = (src @ R.transpose(2, 0, 1).reshape(3, -1)).reshape(n, k, 3)
            moved += t[None] - dst[:, None, :]
            res = np.sqrt(np.einsum("nki,nki->kn", moved, moved))
            inl = res < self.tau_c
            cnt = np.where(ok, inl.sum(axis=1), -1)
            mean = np.where(inl, res, 0.0).sum(axis=1) / np.maximum(cnt, 1)
            r = int(np.lexsort((np.arange(k), mean, -cnt))[0])
            key = (int(cnt[r]), -float(mean[r]))
            if cnt[r] >= 0 and (best_key is None or key > best_key):
                best_key, best = key, (R[r], t[r])
            drawn += k
            if best_key is not None:
                w = best_key[0] / n
                if w >= 1.0:
                    break
                p_hit = w**3
                if p_hit > 0:
                    needed = int(np.ceil(np.log(1.0 - self.confidence) / np.log1p(-p_hit)))
        if best is None:
            empty = EstimatorVerdict(np.zeros(n, dtype=bool), RigidTransform.identity(), 0.0)
            raise EstimatorFailedError("all RANSAC samples were degenerate", empty)
        T = RigidTransform(*best)
        flags = np.linalg.norm(T.apply(src) - dst, axis=1) < self.tau_c
        T, flags = _refine(src, dst, T, flags, self.tau_c)
        return EstimatorVerdict(flags, T, float(flags.sum()))


def _batched_kabsch(src: np.ndarray, dst: np.ndarray):
    """Unweighted Kabsch over a ``(K, m, 3)`` stack; returns ``R, t, ok``."""
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    H = np.einsum("kmi,kmj->kij", src - mu_s, dst - mu_d)
    U, S, Vt = np.linalg.svd(H)
    ok = (S[:, 0] > 0) & (S[:, 1] >= 1e-12 * S[:, 0])
    V, Ut = np.swapaxes(Vt, 1, 2), np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    t = mu_d[:, 0] - np.einsum("kij,kj->ki", R, mu_s[:, 0])
    return R, t, ok
