"""Point clouds, rigid transforms, sampling and closed-form pose estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from .correspondences import CorrespondenceSet
from .errors import DegenerateGeometryError, GenerationFailedError

SO3_TOL = 1e-9
BRUTE_FORCE_LIMIT = 256


@dataclass(eq=False)
class PointCloud:
    """``(N, 3)`` float64 coordinates in meters plus an optional per-point scalar."""

    points: np.ndarray
    attribute: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        self.points = pts
        if self.attribute is not None:
            attr = np.asarray(self.attribute, dtype=np.float64).reshape(-1)
            if len(attr) != len(pts):
                raise ValueError("attribute length must equal point count")
            self.attribute = attr

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_index) -> "PointCloud":
        idx = np.asarray(mask_or_index)
        attr = None if self.attribute is None else self.attribute[idx]
        return PointCloud(self.points[idx], attr)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation in SO(3) and translation; maps ``p`` to ``R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > SO3_TOL:
            raise ValueError("rotation is not orthogonal within tolerance")
        if abs(np.linalg.det(R) - 1.0) > SO3_TOL:
            raise ValueError("rotation determinant is not +1 within tolerance")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape not in ((3, 4), (4, 4)):
            raise ValueError("expected a 3x4 or 4x4 matrix")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


@dataclass(frozen=True)
class SyntheticPairSpec:
    """Parameters for cutting a registration pair out of a single scan.

    ``pose_magnitude`` is ``(max rotation in degrees, max translation in m)``;
    ``min_translation`` lets a caller target a sensor-distance bin.
    """

    overlap_target: float = 0.5
    crop_mode: Literal["half-space", "spherical"] = "half-space"
    periodic_period: float = 10.0
    periodic_duty: float = 0.7
    pose_magnitude: tuple[float, float] = (30.0, 10.0)
    noise_sigma: float = 0.01
    min_translation: float = 0.0
    overlap_tolerance: float = 0.1
    overlap_radius: float = 0.5
    max_retries: int = 8

    def __post_init__(self) -> None:
        if not 0.0 < self.overlap_target <= 1.0:
            raise ValueError("overlap_target must lie in (0, 1]")
        if not 0.0 < self.periodic_duty <= 1.0:
            raise ValueError("periodic_duty must lie in (0, 1]")
        if self.periodic_period <= 0:
            raise ValueError("periodic_period must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.crop_mode not in ("half-space", "spherical"):
            raise ValueError(f"unknown crop_mode {self.crop_mode!r}")
        max_rot, max_trans = self.pose_magnitude
        if max_rot < 0 or max_trans < 0 or not 0 <= self.min_translation <= max_trans:
            raise ValueError("pose magnitudes must satisfy 0 <= min_translation <= max")


@dataclass(frozen=True)
class DistanceBin:
    d_min: float
    d_max: float

    def __post_init__(self) -> None:
        if not 0 <= self.d_min < self.d_max:
            raise ValueError(f"invalid distance bin [{self.d_min}, {self.d_max})")

    def contains(self, d: float) -> bool:
        return self.d_min <= d < self.d_max

    def __str__(self) -> str:
        return f"[{self.d_min:g},{self.d_max:g})"


# --------------------------------------------------------------------------
# transforms


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues' formula; ``axis`` need not be normalized."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle_rad) * K + (1.0 - math.cos(angle_rad)) * (K @ K)


def rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points), cloud.attribute)


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``T1`` first, then ``T2``."""
    R = T2.rotation @ T1.rotation
    t = T2.rotation @ T1.translation + T2.translation
    return RigidTransform(R, t)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-12:
        v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_transform(
    rng: np.random.Generator,
    max_rotation_deg: float,
    max_translation: float,
    min_translation: float = 0.0,
) -> RigidTransform:
    """Axis uniform on the sphere, angle uniform in ``[0, max]``; same for translation."""
    axis = random_unit_vector(rng)
    angle = math.radians(rng.uniform(0.0, max_rotation_deg))
    direction = random_unit_vector(rng)
    norm = rng.uniform(min_translation, max_translation)
    return RigidTransform(rotation_about_axis(axis, angle), direction * norm)


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid transform mapping ``src`` onto ``dst``.

    Raises :class:`DegenerateGeometryError` for fewer than three pairs or when
    the centered points do not span a plane (second singular value of the
    cross-covariance below ``1e-12`` times the largest).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("src and dst must have the same length")
    if len(src) < 3:
        raise DegenerateGeometryError(f"need at least 3 pairs, got {len(src)}")
    if weights is None:
        w = np.ones(len(src))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(w) != len(src):
            raise ValueError("weights length must match pair count")
        if np.any(w < 0) or not np.isfinite(w).all():
            raise ValueError("weights must be finite and non-negative")
    w_sum = w.sum()
    if w_sum <= 0:
        raise DegenerateGeometryError("weights sum to zero")
    w = w / w_sum
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0 or S[1] < 1e-12 * S[0]:
        raise DegenerateGeometryError("correspondences are collinear or coincident")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    return RigidTransform(R, t)


# --------------------------------------------------------------------------
# sampling


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    Voxel index is ``floor(coord / voxel_size)`` on a grid anchored at the
    origin. Output order follows the lexicographic voxel index.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), None if cloud.attribute is None else np.zeros(0))
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    n = len(counts)
    centroids = np.stack(
        [np.bincount(inv, weights=cloud.points[:, k], minlength=n) for k in range(3)], axis=1
    ) / counts[:, None]
    attr = None
    if cloud.attribute is not None:
        attr = np.bincount(inv, weights=cloud.attribute, minlength=n) / counts
    return PointCloud(centroids, attr)


def periodic_sample(
    cloud: PointCloud,
    center=None,
    period: float = 10.0,
    duty: float = 0.7,
    rng_seed: int | None = None,
) -> PointCloud:
    """Keep points whose radial phase ``fract(|p - center| / period)`` is below ``duty``.

    When ``center`` is None it is drawn uniformly inside the cloud's bounding
    box from ``rng_seed``.
    """
    if not period > 0:
        raise ValueError("period must be positive")
    if not 0.0 < duty <= 1.0:
        raise ValueError("duty must lie in (0, 1]")
    return cloud.select(periodic_mask(cloud.points, center, period, duty, rng_seed))


def periodic_mask(points, center, period, duty, rng_seed=None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if center is None:
        rng = np.random.default_rng(rng_seed)
        lo, hi = points.min(axis=0), points.max(axis=0)
        center = rng.uniform(lo, hi)
    r = np.linalg.norm(points - np.asarray(center, dtype=np.float64), axis=1)
    phase = r / period
    return (phase - np.floor(phase)) < duty


# --------------------------------------------------------------------------
# nearest neighbours


def nearest_neighbors(reference: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact 1-NN of each query row among ``reference`` rows: (distances, indices).

    Three-dimensional data with at least :data:`BRUTE_FORCE_LIMIT` reference
    points goes through a KD-tree; everything else (small sets and
    feature-space data, where trees degrade) is a chunked exhaustive scan
    whose ties resolve to the lowest index.
    """
    reference = np.asarray(reference, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if len(reference) == 0 or len(query) == 0:
        return np.zeros(len(query)), np.full(len(query), -1, dtype=np.int64)
    if reference.shape[1] <= 3 and len(reference) >= BRUTE_FORCE_LIMIT:
        dist, idx = cKDTree(reference).query(query, k=1)
        return dist, idx.astype(np.int64)
    ref_sq = (reference**2).sum(1)
    idx = np.empty(len(query), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(len(reference), 1))
    for start in range(0, len(query), chunk):
        q = query[start : start + chunk]
        d2 = ref_sq[None, :] - 2.0 * q @ reference.T
        idx[start : start + chunk] = np.argmin(d2, axis=1)
    dist = np.linalg.norm(query - reference[idx], axis=1)
    return dist, idx


def nn_correspondences_under_T(
    P: PointCloud, Q: PointCloud, T: RigidTransform, radius: float
) -> CorrespondenceSet:
    """Pair each ``p`` with its nearest ``q`` to ``T p`` when closer than ``radius``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if len(P) == 0 or len(Q) == 0:
        return CorrespondenceSet.empty()
    dist, idx = nearest_neighbors(Q.points, T.apply(P.points))
    keep = dist < radius
    pairs = np.stack([np.flatnonzero(keep), idx[keep]], axis=1)
    return CorrespondenceSet(pairs)


# --------------------------------------------------------------------------
# synthetic pairs


def measure_overlap(P_points: np.ndarray, Q_points: np.ndarray, radius: float = 0.5) -> float:
    """Fraction of ``P`` points with a ``Q`` neighbour within ``radius`` (same frame)."""
    if len(P_points) == 0 or len(Q_points) == 0:
        return 0.0
    dist, _ = cKDTree(Q_points).query(P_points, k=1, distance_upper_bound=radius)
    return float(np.mean(dist < radius))


def make_synthetic_pair(
    scan: PointCloud, spec: SyntheticPairSpec | None = None, rng_seed: int = 0
) -> tuple[PointCloud, PointCloud, RigidTransform]:
    """Cut two partially overlapping fragments out of ``scan``.

    Returns ``(P, Q, T_gt)`` where ``Q`` lives in a frame moved by ``T_gt``:
    the fragments overlap where ``T_gt`` applied to ``P`` lands on ``Q``.
    The crop extent is bisected until the measured overlap (fraction of P
    points with a Q neighbour within ``spec.overlap_radius``, before the pose
    is applied) is within ``spec.overlap_tolerance`` of the target.
    """
    spec = spec or SyntheticPairSpec()
    if len(scan) == 0:
        raise ValueError("scan must be non-empty")
    rng = np.random.default_rng(rng_seed)
    pts = scan.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)

    for _ in range(spec.max_retries):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        u = np.array([math.cos(theta), math.sin(theta), 0.0])
        centers = rng.uniform(lo, hi, size=(2, 3))
        noise = rng.normal(size=(2, len(pts), 3)) * spec.noise_sigma
        keep_p = periodic_mask(pts, centers[0], spec.periodic_period, spec.periodic_duty)
        keep_q = periodic_mask(pts, centers[1], spec.periodic_period, spec.periodic_duty)
        crop = _crop_family(pts, u, spec.crop_mode)

        def build(w: float):
            in_p, in_q = crop(w)
            ip = np.flatnonzero(in_p & keep_p)
            iq = np.flatnonzero(in_q & keep_q)
            return ip, iq

        def overlap(w: float) -> float:
            ip, iq = build(w)
            return measure_overlap(pts[ip] + noise[0, ip], pts[iq] + noise[1, iq], spec.overlap_radius)

        w_hi = crop.w_max
        if spec.overlap_target >= 1.0:
            w = w_hi
        else:
            a, b = 0.0, w_hi
            for _ in range(30):
                mid = 0.5 * (a + b)
                if overlap(mid) < spec.overlap_target:
                    a = mid
                else:
                    b = mid
            w = b
        if abs(overlap(w) - spec.overlap_target) > spec.overlap_tolerance:
            continue
        ip, iq = build(w)
        if len(ip) < 3 or len(iq) < 3:
            continue
        attr = scan.attribute
        P = PointCloud(pts[ip] + noise[0, ip], None if attr is None else attr[ip])
        Q0 = PointCloud(pts[iq] + noise[1, iq], None if attr is None else attr[iq])
        T_gt = random_transform(
            rng, spec.pose_magnitude[0], spec.pose_magnitude[1], spec.min_translation
        )
        return P, apply_transform(Q0, T_gt), T_gt
    raise GenerationFailedError(
        f"could not reach overlap {spec.overlap_target} within "
        f"{spec.max_retries} attempts"
    )


class _crop_family:
    """One-parameter family of crops; ``w = w_max`` keeps the whole scan in both."""

    def __init__(self, pts: np.ndarray, u: np.ndarray, mode: str):
        self.mode = mode
        if mode == "half-space":
            self.s = pts @ u
            self.mid = float(np.median(self.s))
            self.w_max = float(np.abs(self.s - self.mid).max()) + 1e-9
        else:
            self.center = np.median(pts, axis=0)
            self.u = u
            self.reach = float(np.linalg.norm(pts - self.center, axis=1).max()) + 1e-9
            self.pts = pts
            self.w_max = 1.0

    def __call__(self, w: float):
        if self.mode == "half-space":
            return self.s <= self.mid + w, self.s >= self.mid - w
        # spherical: two balls of radius ``reach`` whose centres approach as w grows
        shift = (1.0 - w) * self.reach * self.u
        dp = np.linalg.norm(self.pts - (self.center - shift), axis=1)
        dq = np.linalg.norm(self.pts - (self.center + shift), axis=1)
        return dp <= self.reach, dq <= self.reach
