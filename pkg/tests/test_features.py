from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorreg.correspondences import CorrespondenceSet, Label
from anchorreg.features import (
    DescriptorConfig,
    FeatureField,
    FeatureMatcher,
    ProjectionHead,
    correspondence_features,
    extract_descriptors,
    match_features,
    match_with_distances,
    project,
    project_backward,
)
from anchorreg.geometry import (
    PointCloud,
    RigidTransform,
    SyntheticPairSpec,
    make_synthetic_pair,
    rot_z,
)
from anchorreg.losses import check_gradient
from anchorreg.scenes import synthetic_scan

seeds = st.integers(0, 2**31 - 1)


def brute_nn(A, B):
    d = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1))
    return d, d.argmin(1), d.argmin(0)


# --- types


def test_feature_field_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureField(np.array([[np.inf, 0.0]]))


def test_projection_head_needs_two_outputs():
    with pytest.raises(ValueError):
        ProjectionHead(np.ones((1, 3)), np.zeros(1))


def test_correspondence_set_rejects_duplicates():
    with pytest.raises(ValueError):
        CorrespondenceSet(np.array([[0, 1], [0, 1]]))


def test_correspondence_partition_views_cover_pairs():
    labels = np.array([Label.INLIER, Label.OUTLIER, Label.UNCLASSIFIED])
    C = CorrespondenceSet(np.array([[0, 0], [1, 1], [2, 2]]), labels)
    parts = [C.inliers, C.outliers, C.unclassified]
    assert sum(len(p) for p in parts) == 3
    assert set().union(*(p.pair_set() for p in parts)) == C.pair_set()
    assert C.inliers.labels.tolist() == [Label.INLIER]


def test_correspondence_bounds_checked():
    with pytest.raises(IndexError):
        CorrespondenceSet(np.array([[5, 0]])).check_bounds(3, 3)


# --- extract_descriptors


def test_planar_patch_descriptors_agree():
    g = np.stack(np.meshgrid(np.linspace(0, 6, 31), np.linspace(0, 6, 31)), -1).reshape(-1, 2)
    pts = np.column_stack([g, np.zeros(len(g))])
    F = extract_descriptors(PointCloud(pts))
    # interior points see a full neighbourhood
    inner = np.all((g > 1.2) & (g < 4.8), axis=1)
    V = F.vectors[inner]
    assert np.sqrt(((V[:, None] - V[None]) ** 2).sum(-1)).max() < 0.05


def test_descriptors_are_deterministic():
    cloud = synthetic_scan(1, n_points=1500)
    a, b = extract_descriptors(cloud), extract_descriptors(cloud)
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_descriptors_rotation_invariant():
    cloud = synthetic_scan(2, n_points=2000)
    T = RigidTransform(rot_z(45), np.zeros(3))
    a = extract_descriptors(cloud)
    b = extract_descriptors(PointCloud(T.apply(cloud.points)))
    assert np.linalg.norm(a.vectors - b.vectors, axis=1).max() < 0.1


def test_isolated_points_flagged_invalid():
    pts = np.array([[0.0, 0, 0], [50, 0, 0], [0, 50, 0], [0, 0, 50]])
    F = extract_descriptors(PointCloud(pts), DescriptorConfig(radius=1.0))
    assert not F.valid.any() and not F.vectors.any()


def test_descriptor_dimension_and_norm():
    F = extract_descriptors(synthetic_scan(3, n_points=1000))
    assert F.dim == 33
    assert np.allclose(np.linalg.norm(F.vectors[F.valid], axis=1), 1.0)


def test_raw_descriptor_matching_sanity():
    spec = SyntheticPairSpec(overlap_target=1.0, noise_sigma=0.0, periodic_duty=1.0)

    P, Q, T = make_synthetic_pair(synthetic_scan(4, n_points=3000), spec, 4)
    C = match_features(extract_descriptors(P), extract_descriptors(Q))
    res = np.linalg.norm(T.apply(P.points[C.i]) - Q.points[C.j], axis=1)
    assert np.mean(res < 0.5) >= 0.8


# --- project


def test_identity_head_without_normalization():
    x = np.random.default_rng(0).normal(size=(5, 4))
    head = ProjectionHead(np.eye(4), np.zeros(4), normalize_output=False)
    assert np.array_equal(project(FeatureField(x), head).vectors, x)


def test_scaled_identity_head_normalizes():
    x = np.random.default_rng(1).normal(size=(5, 4))
    head = ProjectionHead(2 * np.eye(4), np.zeros(4), normalize_output=True)
    expected = x / np.linalg.norm(x, axis=1, keepdims=True)
    assert np.allclose(project(FeatureField(x), head).vectors, expected, atol=1e-15)


def test_project_matches_matmul_oracle():
    rng = np.random.default_rng(2)
    x, W, b = rng.normal(size=(5, 6)), rng.normal(size=(3, 6)), rng.normal(size=3)
    out = project(FeatureField(x), ProjectionHead(W, b, normalize_output=False)).vectors
    oracle = np.array([[sum(W[r, c] * x[n, c] for c in range(6)) + b[r] for r in range(3)] for n in range(5)])
    assert np.allclose(out, oracle, atol=1e-12)


def test_project_dimension_mismatch():
    with pytest.raises(ValueError):
        project(FeatureField(np.zeros((2, 5))), ProjectionHead.initial(4, 2))


def test_initial_head_is_near_identity():
    head = ProjectionHead.initial(33, 16, 0)
    assert np.abs(head.weight - np.eye(16, 33)).max() < 0.06 and not head.bias.any()


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_project_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = FeatureField(rng.normal(size=(6, 5)))
    head = ProjectionHead(rng.normal(size=(3, 5)), rng.normal(size=3))
    G = rng.normal(size=(6, 3))
    grads = project_backward(x, head, G)

    def f(W):
        return float((project(x, ProjectionHead(W, head.bias)).vectors * G).sum())

    assert check_gradient(f, head.weight, grads["weight"]) < 1e-6


# --- matching


def test_mutual_matching_identical_fields():
    F = FeatureField(np.random.default_rng(0).normal(size=(30, 8)))
    C = match_features(F, F, "mutual")
    assert np.array_equal(C.i, np.arange(30)) and np.array_equal(C.j, np.arange(30))


def test_matching_equals_brute_force():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(50, 6)), rng.normal(size=(50, 6))
    d, fwd, back = brute_nn(A, B)
    nn = match_features(FeatureField(A), FeatureField(B), "nn")
    assert np.array_equal(nn.j, fwd) and np.array_equal(nn.i, np.arange(50))
    mutual = match_features(FeatureField(A), FeatureField(B), "mutual")
    keep = back[fwd] == np.arange(50)
    assert np.array_equal(mutual.i, np.flatnonzero(keep)) and np.array_equal(mutual.j, fwd[keep])


def test_max_pairs_keeps_smallest_distances():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(100, 4)), rng.normal(size=(100, 4))
    full, dist = match_with_distances(FeatureField(A), FeatureField(B), "nn")
    top = match_features(FeatureField(A), FeatureField(B), "nn", max_pairs=5)
    order = np.argsort(dist, kind="stable")[:5]
    assert top.pair_set() == full.select(order).pair_set()


def test_matching_empty_field():
    C = match_features(FeatureField(np.zeros((0, 3))), FeatureField(np.ones((4, 3))))
    assert len(C) == 0


def test_invalid_descriptors_never_match():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(10, 3))
    valid = np.ones(10, bool)
    valid[[2, 5]] = False
    C = match_features(FeatureField(A, valid), FeatureField(A))
    assert not set(C.i.tolist()) & {2, 5}


@given(seeds)
@settings(max_examples=25)
def test_mutual_matching_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    A, B = FeatureField(rng.normal(size=(20, 3))), FeatureField(rng.normal(size=(25, 3)))
    ab = match_features(A, B, "mutual").pair_set()
    ba = match_features(B, A, "mutual").pair_set()
    assert ab == {(j, i) for i, j in ba}


@given(seeds)
@settings(max_examples=25)
def test_matcher_exclusion_equals_restriction(seed):
    rng = np.random.default_rng(seed)
    A, B = FeatureField(rng.normal(size=(30, 4))), FeatureField(rng.normal(size=(30, 4)))
    drop_r, drop_c = rng.choice(30, 8, replace=False), rng.choice(30, 8, replace=False)
    m = FeatureMatcher(A, B)
    m.exclude(drop_r, drop_c)
    got = m.match("mutual")[0].pair_set()
    rows = np.setdiff1d(np.arange(30), drop_r)
    cols = np.setdiff1d(np.arange(30), drop_c)
    want = match_features(A, B, "mutual", rows=rows, cols=cols).pair_set()
    assert got == want
    # a fresh twin starts from the full pool again
    assert m.fresh().match("mutual")[0].pair_set() == match_features(A, B, "mutual").pair_set()


# --- correspondence_features


def test_correspondence_feature_of_equal_vectors_is_zero():
    F = FeatureField(np.array([[0.3, 0.4]]))
    assert not correspondence_features(F, F, CorrespondenceSet(np.array([[0, 0]]))).any()


def test_correspondence_feature_subtraction():
    out = correspondence_features(
        FeatureField(np.array([[1.0, 0.0]])), FeatureField(np.array([[0.0, 1.0]])),
        CorrespondenceSet(np.array([[0, 0]])),
    )
    assert out.tolist() == [[1.0, -1.0]]


def test_correspondence_features_oracle():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(30, 5)), rng.normal(size=(30, 5))
    pairs = np.stack([rng.permutation(30)[:20], rng.permutation(30)[:20]], 1)
    out = correspondence_features(FeatureField(A), FeatureField(B), CorrespondenceSet(pairs))
    assert np.array_equal(out, np.array([A[i] - B[j] for i, j in pairs]))


def test_correspondence_features_out_of_bounds():
    F = FeatureField(np.zeros((2, 2)))
    with pytest.raises(IndexError):
        correspondence_features(F, F, CorrespondenceSet(np.array([[0, 3]])))


@given(seeds, st.floats(-5, 5))
@settings(max_examples=25)
def test_correspondence_features_linear(seed, alpha):
    rng = np.random.default_rng(seed)
    A, B = FeatureField(rng.normal(size=(6, 3))), FeatureField(rng.normal(size=(6, 3)))
    C = CorrespondenceSet(np.array([[0, 1], [2, 3], [5, 5]]))
    assert np.allclose(
        correspondence_features(A.scaled(alpha), B.scaled(alpha), C),
        alpha * correspondence_features(A, B, C),
    )
