"""Per-point descriptors, the linear projection head and feature matching.

The descriptor is an FPFH-style histogram: for every neighbour pair inside a
radius it bins three angles built from the two normals and the connecting
direction, then blends each point's histogram with its neighbours'. All three
angles use absolute dot products, so descriptors do not depend on normal sign
and a rigid motion of the cloud leaves them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .correspondences import CorrespondenceSet
from .geometry import PointCloud


@dataclass(eq=False)
class FeatureField:
    """``(N, D)`` descriptor rows, one per point, plus a validity mask."""

    vectors: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("feature vectors must be finite")
        self.vectors = v
        if self.valid is None:
            self.valid = np.ones(len(v), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
            if len(self.valid) != len(v):
                raise ValueError("valid mask length must equal vector count")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def scaled(self, alpha: float) -> "FeatureField":
        return FeatureField(self.vectors * alpha, self.valid)


@dataclass(frozen=True)
class DescriptorConfig:
    radius: float = 1.0
    normal_k: int = 10
    bins: int = 11
    min_neighbors: int = 3
    viewpoint: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def dim(self) -> int:
        return 3 * self.bins


def estimate_normals(points: np.ndarray, k: int = 10, viewpoint=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Unit normals from k-nearest-neighbour PCA, flipped to face ``viewpoint``."""
    n = len(points)
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1))
    k = min(k, n)
    _, idx = cKDTree(points).query(points, k=k)
    nbrs = points[idx]
    centred = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, np.asarray(viewpoint) - points) < 0
    normals[flip] *= -1
    return normals


def extract_descriptors(cloud: PointCloud, config: DescriptorConfig | None = None) -> FeatureField:
    """Histogram descriptor per point, L2-normalized.

    Points with fewer than ``config.min_neighbors`` neighbours inside the
    radius get a zero vector and ``valid = False``.
    """
    cfg = config or DescriptorConfig()
    if len(cloud) == 0:
        raise ValueError("cloud must be non-empty")
    if not cfg.radius > 0:
        raise ValueError("descriptor radius must be positive")
    pts = cloud.points
    n, b = len(pts), cfg.bins
    normals = estimate_normals(pts, cfg.normal_k, cfg.viewpoint)

    pairs = cKDTree(pts).query_pairs(cfg.radius, output_type="ndarray")
    if len(pairs) == 0:
        return FeatureField(np.zeros((n, cfg.dim)), np.zeros(n, dtype=bool))
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    d = pts[dst] - pts[src]
    dist = np.linalg.norm(d, axis=1)
    d_hat = d / np.maximum(dist, 1e-12)[:, None]
    ns, nt = normals[src], normals[dst]
    half_pi = np.pi / 2
    a_normals = np.arccos(np.clip(np.abs((ns * nt).sum(1)), 0.0, 1.0))
    a_src = np.arcsin(np.clip(np.abs((ns * d_hat).sum(1)), 0.0, 1.0))
    a_dst = np.arcsin(np.clip(np.abs((nt * d_hat).sum(1)), 0.0, 1.0))

    def bin_of(angle):
        return np.minimum((angle / half_pi * b).astype(np.int64), b - 1)

    count = np.bincount(src, minlength=n).astype(np.float64)
    spfh = np.zeros((n, cfg.dim))
    for k, angle in enumerate((a_normals, a_src, a_dst)):
        flat = src * cfg.dim + k * b + bin_of(angle)
        spfh += np.bincount(flat, minlength=n * cfg.dim).reshape(n, cfg.dim)
    valid = count >= cfg.min_neighbors
    spfh[valid] /= count[valid, None]
    spfh[~valid] = 0.0

    w = 1.0 / np.maximum(dist, 0.05 * cfg.radius)
    w = np.where(valid[dst], w, 0.0)
    W = sparse.csr_matrix((w, (src, dst)), shape=(n, n))
    wsum = np.asarray(W.sum(axis=1)).reshape(-1)
    nbr_mean = np.asarray(W @ spfh)
    has = wsum > 0
    nbr_mean[has] /= wsum[has, None]
    fpfh = 0.5 * spfh + 0.5 * nbr_mean
    fpfh[~valid] = 0.0
    norms = np.linalg.norm(fpfh, axis=1)
    ok = valid & (norms > 0)
    fpfh[ok] /= norms[ok, None]
    fpfh[~ok] = 0.0
    return FeatureField(fpfh, ok)


# --------------------------------------------------------------------------
# projection head


@dataclass(eq=False)
class ProjectionHead:
    """Affine map ``W f + b`` with optional row-wise L2 normalization."""

    weight: np.ndarray
    bias: np.ndarray
    normalize_output: bool = True

    def __post_init__(self) -> None:
        W = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if W.ndim != 2 or W.shape[0] != len(b):
            raise ValueError("weight must be (D_out, D_in) and bias (D_out,)")
        if W.shape[0] < 2:
            raise ValueError("D_out must be at least 2")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise ValueError("head parameters must be finite")
        self.weight = W
        self.bias = b

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def initial(
        cls, d_in: int, d_out: int = 16, rng_seed: int = 0, noise: float = 0.01
    ) -> "ProjectionHead":
        """Truncated identity plus Gaussian noise, i.e. close to a no-op."""
        rng = np.random.default_rng(rng_seed)
        W = np.eye(d_out, d_in) + rng.normal(scale=noise, size=(d_out, d_in))
        return cls(W, np.zeros(d_out), True)

    @classmethod
    def random(cls, d_in: int, d_out: int = 16, rng_seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(rng_seed)
        return cls(rng.normal(size=(d_out, d_in)) / np.sqrt(d_in), np.zeros(d_out), True)

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weight.copy(), self.bias.copy(), self.normalize_output)

    def step(self, grads: dict[str, np.ndarray], lr: float) -> "ProjectionHead":
        """Plain gradient-descent update, returning a new head."""
        W = self.weight - lr * grads.get("weight", 0.0)
        b = self.bias - lr * grads.get("bias", 0.0)
        return ProjectionHead(W, b, self.normalize_output)


def project(field: FeatureField, head: ProjectionHead) -> FeatureField:
    if head.d_in != field.dim:
        raise ValueError(f"head expects dim {head.d_in}, field has dim {field.dim}")
    z = field.vectors @ head.weight.T + head.bias
    if head.normalize_output:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z = np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)
    return FeatureField(z, field.valid)


def project_backward(
    field: FeatureField, head: ProjectionHead, grad_out: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. head parameters given ``dL/d project(field)``."""
    x = field.vectors
    g = np.asarray(grad_out, dtype=np.float64)
    if head.normalize_output:
        z = x @ head.weight.T + head.bias
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        y = z / safe
        g = (g - y * (y * g).sum(1, keepdims=True)) / safe
        g = np.where(norms > 0, g, 0.0)
    return {"weight": g.T @ x, "bias": g.sum(axis=0)}


# --------------------------------------------------------------------------
# matching


def match_features(
    F_P: FeatureField,
    F_Q: FeatureField,
    mode: str = "mutual",
    max_pairs: int | None = None,
    *,
    rows: np.ndarray | None = None,
    cols: np.ndarray | None = None,
) -> CorrespondenceSet:
    """Nearest-neighbour matching in feature space (L2).

    ``rows``/``cols`` restrict matching to a subset of P / Q indices; output
    indices stay global. Invalid descriptors never take part. With
    ``max_pairs`` only the pairs with the smallest feature distance survive.
    Output is ordered by P index.
    """
    pairs, _ = match_with_distances(F_P, F_Q, mode, max_pairs, rows=rows, cols=cols)
    return pairs


def match_with_distances(F_P, F_Q, mode="mutual", max_pairs=None, *, rows=None, cols=None):
    """Like :func:`match_features` but also returns the feature distance of each pair."""
    matcher = FeatureMatcher(F_P, F_Q)
    if rows is not None or cols is not None:
        matcher.restrict(rows, cols)
    return matcher.match(mode, max_pairs)


class FeatureMatcher:
    """Exhaustive L2 matcher between two fixed fields.

    The squared-distance matrix is built once together with every row's and
    column's nearest neighbour. :meth:`exclude` drops points from the
    candidate pool and only recomputes the neighbours that pointed at them,
    so repeated matching over a shrinking pool stays cheap. Ties resolve to
    the lowest index.
    """

    def __init__(self, F_P: FeatureField, F_Q: FeatureField):
        if F_P.dim != F_Q.dim:
            raise ValueError("feature dimensions differ")
        self.F_P, self.F_Q = F_P, F_Q
        A, B = F_P.vectors, F_Q.vectors
        d2 = A @ B.T
        d2 *= -2.0
        d2 += (A**2).sum(1)[:, None]
        d2 += (B**2).sum(1)[None, :]
        np.maximum(d2, 0.0, out=d2)
        d2[~F_P.valid, :] = np.inf
        d2[:, ~F_Q.valid] = np.inf
        self.d2 = d2
        self.row_ok = F_P.valid.copy()
        self.col_ok = F_Q.valid.copy()
        self._row_pen = np.where(self.row_ok, 0.0, np.inf)
        self._col_pen = np.where(self.col_ok, 0.0, np.inf)
        self.nn_q = np.argmin(d2, axis=1) if d2.size else np.zeros(len(A), dtype=np.int64)
        self.nn_p = np.argmin(d2, axis=0) if d2.size else np.zeros(len(B), dtype=np.int64)
        self._nn_q0, self._nn_p0 = self.nn_q.copy(), self.nn_p.copy()

    def fresh(self) -> "FeatureMatcher":
        """A matcher with the full candidate pool that shares the distance matrix."""
        twin = object.__new__(FeatureMatcher)
        twin.F_P, twin.F_Q, twin.d2 = self.F_P, self.F_Q, self.d2
        twin.row_ok = self.F_P.valid.copy()
        twin.col_ok = self.F_Q.valid.copy()
        twin._row_pen = np.where(twin.row_ok, 0.0, np.inf)
        twin._col_pen = np.where(twin.col_ok, 0.0, np.inf)
        twin._nn_q0, twin._nn_p0 = self._nn_q0, self._nn_p0
        twin.nn_q, twin.nn_p = self._nn_q0.copy(), self._nn_p0.copy()
        return twin

    def exclude(self, rows=(), cols=()) -> None:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        rows = rows[self.row_ok[rows]]
        cols = cols[self.col_ok[cols]]
        self.row_ok[rows] = False
        self.col_ok[cols] = False
        self._row_pen[rows] = np.inf
        self._col_pen[cols] = np.inf
        if len(cols) and self.col_ok.any():
            hit = np.flatnonzero(self.row_ok & ~self.col_ok[self.nn_q])
            if len(hit):
                self.nn_q[hit] = np.argmin(self.d2[hit] + self._col_pen, axis=1)
        if len(rows) and self.row_ok.any():
            hit = np.flatnonzero(self.col_ok & ~self.row_ok[self.nn_p])
            if len(hit):
                self.nn_p[hit] = np.argmin(self.d2[:, hit] + self._row_pen[:, None], axis=0)

    def restrict(self, rows=None, cols=None) -> None:
        """Keep only the given P rows and Q columns as candidates."""
        if rows is not None:
            keep = np.zeros(len(self.row_ok), dtype=bool)
            keep[np.asarray(rows, dtype=np.int64)] = True
            self.exclude(rows=np.flatnonzero(~keep))
        if cols is not None:
            keep = np.zeros(len(self.col_ok), dtype=bool)
            keep[np.asarray(cols, dtype=np.int64)] = True
            self.exclude(cols=np.flatnonzero(~keep))

    def match(self, mode: str = "mutual", max_pairs: int | None = None):
        if mode not in ("nn", "mutual"):
            raise ValueError(f"unknown matching mode {mode!r}")
        i = np.flatnonzero(self.row_ok)
        if len(i) == 0 or not self.col_ok.any():
            return CorrespondenceSet.empty(), np.zeros(0)
        if mode == "mutual":
            i = i[self.nn_p[self.nn_q[i]] == i]
        j = self.nn_q[i]
        dist = np.linalg.norm(self.F_P.vectors[i] - self.F_Q.vectors[j], axis=1)
        if max_pairs is not None and len(i) > max_pairs:
            order = np.sort(np.argsort(dist, kind="stable")[:max_pairs])
            i, j, dist = i[order], j[order], dist[order]
        return CorrespondenceSet(np.stack([i, j], axis=1)), dist


def correspondence_features(
    F_P: FeatureField, F_Q: FeatureField, corrs: CorrespondenceSet
) -> np.ndarray:
    """``F_P[i] - F_Q[j]`` for every pair, in order."""
    if F_P.dim != F_Q.dim:
        raise ValueError("feature dimensions differ")
    corrs.check_bounds(len(F_P), len(F_Q))
    return F_P.vectors[corrs.i] - F_Q.vectors[corrs.j]
