from __future__ import annotations

import numpy as np
import pytest

from anchorreg import fgcm
from anchorreg.compat import EstimatorVerdict
from anchorreg.correspondences import CorrespondenceSet
from anchorreg.errors import EmptySeedError, MissingClassError
from anchorreg.features import (
    FeatureField,
    ProjectionHead,
    correspondence_features,
    extract_descriptors,
    project,
)
from anchorreg.fgcm import (
    AnchorPair,
    ClusteringConfig,
    MiningConfig,
    adaption_loss,
    anchor_similarities,
    anchor_similarity,
    build_mixed_density_views,
    compute_anchors,
    feature_geometry_clustering,
    mine_hard_samples,
    mine_pseudo_labels,
    per_batch_self_adaption,
    run_mining,
    seed_proposals,
)
from anchorreg.geometry import (
    PointCloud,
    RigidTransform,
    SyntheticPairSpec,
    make_synthetic_pair,
    rotation_about_axis,
    voxel_downsample,
)
from anchorreg.metrics import inlier_ratio, rre, rte
from anchorreg.scenes import synthetic_scan


class GroundTruthEstimator:
    def __init__(self, T: RigidTransform, tau: float = 0.6):
        self.T = T
        self.tau = tau

    def filter(self, P, Q, corrs):
        res = np.linalg.norm(self.T.apply(P.points[corrs.i]) - Q.points[corrs.j], axis=1)
        flags = res < self.tau
        return EstimatorVerdict(flags, self.T, float(flags.sum()))


def twin_instance(seed: int, n: int = 30, n_bad: int = 10, dim: int = 8):
    """Points with matching features; ``n_bad`` of them have their feature twin at the wrong place."""
    rng = np.random.default_rng(seed)
    P = rng.uniform(-10, 10, (n, 3))
    T = RigidTransform(rotation_about_axis([0, 0, 1], 0.3), np.array([1.0, 2.0, 0.0]))
    perm = rng.permutation(n)
    Q = np.empty_like(P)
    Q[perm] = T.apply(P)
    F_P = rng.normal(size=(n, dim)) * 0.3
    partner = perm.copy()
    bad = rng.choice(n, n_bad, replace=False)
    partner[bad] = perm[np.roll(bad, 1)]
    F_Q = np.empty_like(F_P)
    F_Q[partner] = F_P + rng.normal(size=(n, dim)) * 0.05
    return P, Q, F_P, F_Q, perm, partner, bad, T


def planted_ambiguity(seed: int, n_in: int = 40, n_hard: int = 10, dim: int = 33):
    rng = np.random.default_rng(seed)
    n = n_in + n_hard
    raw_P = np.abs(rng.normal(size=(n, dim)))
    offset = rng.normal(size=dim)
    offset /= np.linalg.norm(offset)
    extra = rng.normal(size=dim)
    extra -= (extra @ offset) * offset
    extra /= np.linalg.norm(extra)
    raw_Q = raw_P - offset + rng.normal(size=(n, dim)) * 0.05
    raw_Q[n_in:] -= 0.3 * extra
    inliers = CorrespondenceSet(np.stack([np.arange(n_in)] * 2, axis=1))
    hard = CorrespondenceSet(np.stack([np.arange(n_in, n)] * 2, axis=1))
    return FeatureField(raw_P), FeatureField(raw_Q), inliers, hard


# --- anchors


def test_anchor_means():
    a = compute_anchors([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], [True, True, False])
    assert np.array_equal(a.positive, [0.5, 0.5]) and np.array_equal(a.negative, [-1.0, 0.0])


def test_single_inlier_is_its_own_anchor():
    v = np.array([0.2, -0.7, 0.1])
    a = compute_anchors([v, [1.0, 1.0, 1.0]], [True, False])
    assert np.array_equal(a.positive, v)


def test_anchors_match_summation_oracle():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(200, 16))
    flags = np.r_[np.ones(100, bool), np.zeros(100, bool)]
    rng.shuffle(flags)
    a = compute_anchors(feats, flags)
    pos = sum(feats[k] for k in range(200) if flags[k]) / 100
    neg = sum(feats[k] for k in range(200) if not flags[k]) / 100
    assert np.abs(a.positive - pos).max() < 1e-12 and np.abs(a.negative - neg).max() < 1e-12


@pytest.mark.parametrize("flags", [[True, True], [False, False]])
def test_missing_class(flags):
    with pytest.raises(MissingClassError):
        compute_anchors(np.ones((2, 3)), flags)


def test_anchor_dimensions_must_agree():
    with pytest.raises(ValueError):
        AnchorPair(np.zeros(3), np.zeros(4))


# --- similarity


def test_similarity_of_anchor_itself_is_one():
    a = AnchorPair(np.array([0.3, 0.4, 0.0]), np.array([-1.0, 0.0, 0.0]))
    assert anchor_similarity(a, a.positive)[0] == pytest.approx(1.0, abs=1e-15)


def test_similarity_of_opposite_unit_vector_is_zero():
    u = np.array([0.6, 0.8])
    assert anchor_similarity(AnchorPair(u, -u), -u)[0] == 0.0


def test_similarity_of_orthogonal_unit_vector_is_zero():
    a = AnchorPair(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert anchor_similarity(a, np.array([0.0, 1.0]))[0] == 0.0


def test_zero_vector_uses_half_cosine_and_is_counted():
    before = fgcm.diagnostics["zero_norm_cosine"]
    a = AnchorPair(np.array([0.5, 0.0]), np.array([0.0, 0.0]))
    s_plus, s_minus = anchor_similarity(a, np.zeros(2))
    # D_E = 1 - 0.5 and D_C = 0.5 against A+; D_E = 1 and D_C = 0.5 against A-
    assert s_plus == 0.5 and s_minus == 0.5
    assert fgcm.diagnostics["zero_norm_cosine"] > before


def test_similarities_lie_in_unit_interval():
    rng = np.random.default_rng(1)
    a = AnchorPair(rng.normal(size=5), rng.normal(size=5))
    s_plus, s_minus = anchor_similarities(a, rng.normal(size=(100, 5)) * 3)
    assert ((0 <= s_plus) & (s_plus <= 1) & (0 <= s_minus) & (s_minus <= 1)).all()


# --- seed proposals


def test_identical_fields_give_all_self_pairs():
    F = FeatureField(np.random.default_rng(0).normal(size=(20, 6)))
    C = seed_proposals(F, F, 0.7)
    assert C.pair_set() == {(k, k) for k in range(20)}


def test_extreme_threshold_leaves_nothing():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 8))
    with pytest.raises(EmptySeedError):
        seed_proposals(FeatureField(x), FeatureField(x + rng.normal(size=x.shape) * 0.1), 0.999)


def test_seed_proposals_equal_oracle_filter():
    P0, Q0, _ = make_synthetic_pair(synthetic_scan(5), SyntheticPairSpec(), 5)
    P, Q = voxel_downsample(P0, 0.3), voxel_downsample(Q0, 0.3)
    head = ProjectionHead.initial(33, 16, 0)
    F_P, F_Q = project(extract_descriptors(P), head), project(extract_descriptors(Q), head)
    A, B = F_P.vectors, F_Q.vectors
    d = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1))
    # descriptors without enough neighbours never take part in matching
    d[~F_P.valid] = 1e9
    d[:, ~F_Q.valid] = 1e9
    fwd, back = d.argmin(1), d.argmin(0)
    want = {(i, int(fwd[i])) for i in range(len(A)) if F_P.valid[i] and back[fwd[i]] == i and 1 - min(d[i, fwd[i]], 1) > 0.7}
    # repeated descriptors tie exactly; which twin wins is arbitrary, so leave them out
    srow, scol = np.sort(d, axis=1), np.sort(d, axis=0)
    tied_i = set(np.flatnonzero(srow[:, 1] - srow[:, 0] < 1e-9).tolist())
    tied_j = set(np.flatnonzero(scol[1] - scol[0] < 1e-9).tolist())

    def clear(pairs):
        return {(i, j) for i, j in pairs if i not in tied_i and j not in tied_j}

    got = seed_proposals(F_P, F_Q, 0.7).pair_set()
    assert len(clear(want)) > 20 and clear(got) == clear(want)


def test_seed_threshold_must_be_open_unit_interval():
    F = FeatureField(np.eye(3))
    with pytest.raises(ValueError):
        seed_proposals(F, F, 1.0)


# --- clustering


def test_complete_seed_set_is_a_fixed_point():
    P, Q, F_P, F_Q, perm, partner, bad, T = twin_instance(2)
    # every point already matched: 20 true pairs and 10 swapped ones
    C0 = CorrespondenceSet(np.stack([np.arange(30), partner], axis=1))
    res = feature_geometry_clustering(
        PointCloud(P), PointCloud(Q), FeatureField(F_P), FeatureField(F_Q), C0,
        ClusteringConfig(), GroundTruthEstimator(T),
    )
    assert len(res.history) == 1 and len(res.history[0].selected) == 0
    assert res.correspondences.pair_set() == res.initial.inliers.pair_set()
    assert res.correspondences.pair_set() == {(k, int(perm[k])) for k in range(30) if k not in bad}


def test_clustering_does_not_lower_inlier_ratio():
    spec = SyntheticPairSpec(overlap_target=0.5, noise_sigma=0.01)
    for seed in range(3):
        P0, Q0, T = make_synthetic_pair(synthetic_scan(seed), spec, seed)
        P, Q = voxel_downsample(P0, 0.3), voxel_downsample(Q0, 0.3)
        head = ProjectionHead.initial(33, 16, seed)
        F_P, F_Q = project(extract_descriptors(P), head), project(extract_descriptors(Q), head)
        C0 = seed_proposals(F_P, F_Q, 0.7)
        C, _ = feature_geometry_clustering(P, Q, F_P, F_Q, C0)
        n0 = round(inlier_ratio(C0, P, Q, T) * len(C0))
        n1 = round(inlier_ratio(C, P, Q, T) * len(C))
        assert n1 >= n0
        assert inlier_ratio(C, P, Q, T) >= inlier_ratio(C0, P, Q, T)


def test_clustering_history_obeys_selection_rule_and_anchor_means():
    P, Q, F_P, F_Q, perm, partner, bad, T = twin_instance(3)
    good = [k for k in range(30) if k not in bad]
    C0 = CorrespondenceSet(np.array(sorted([k, partner[k]] for k in good[:4] + list(bad[:2]))))
    res = feature_geometry_clustering(
        PointCloud(P), PointCloud(Q), FeatureField(F_P), FeatureField(F_Q), C0,
        ClusteringConfig(top_k=3, max_iters=10), GroundTruthEstimator(T),
    )
    assert 1 <= len(res.history) <= 10
    prev_total = len(C0)
    for rec in res.history:
        keys = {p: k for k, p in enumerate(map(tuple, rec.candidates.pairs.tolist()))}
        chosen = [keys[p] for p in map(tuple, rec.selected.pairs.tolist())]
        assert len(chosen) <= 3
        assert all(rec.s_plus[k] > rec.s_minus[k] for k in chosen)
        eligible = np.flatnonzero(rec.s_plus > rec.s_minus)
        if len(chosen):
            assert min(rec.s_plus[chosen]) >= np.sort(rec.s_plus[eligible])[::-1][len(chosen) - 1]
        assert len(rec.expanded) >= prev_total
        prev_total = len(rec.expanded)
        feats = correspondence_features(FeatureField(F_P), FeatureField(F_Q), rec.expanded)
        flags = rec.expanded.labels == 1
        if flags.any() and not flags.all():
            assert np.abs(rec.anchors.positive - feats[flags].mean(0)).max() < 1e-12
            assert np.abs(rec.anchors.negative - feats[~flags].mean(0)).max() < 1e-12


def test_empty_seed_set_rejected():
    P = PointCloud(np.zeros((3, 3)))
    F = FeatureField(np.eye(3))
    with pytest.raises(ValueError):
        feature_geometry_clustering(P, P, F, F, CorrespondenceSet.empty())


# --- hard samples


def test_no_rejections_means_no_hard_samples():
    P, Q, F_P, F_Q, perm, partner, bad, T = twin_instance(2)
    C0 = CorrespondenceSet(np.stack([np.arange(30), partner], axis=1))
    res = feature_geometry_clustering(
        PointCloud(P), PointCloud(Q), FeatureField(F_P), FeatureField(F_Q), C0,
        ClusteringConfig(), GroundTruthEstimator(T),
    )
    assert len(mine_hard_samples(res)) == 0


def test_planted_ambiguities_become_hard_samples():
    P, Q, F_P, F_Q, perm, partner, bad, T = twin_instance(0)
    good = [k for k in range(30) if k not in bad]
    C0 = CorrespondenceSet(np.array(sorted([k, partner[k]] for k in good[:4] + list(bad[:2]))))
    res = feature_geometry_clustering(
        PointCloud(P), PointCloud(Q), FeatureField(F_P), FeatureField(F_Q), C0,
        ClusteringConfig(top_k=4, max_iters=5), GroundTruthEstimator(T),
    )
    hard = mine_hard_samples(res).pair_set()
    planted = {(int(k), int(partner[k])) for k in bad}
    assert hard and hard <= planted
    rejected = set().union(*(rec.rejected.pair_set() for rec in res.history))
    assert hard <= rejected
    # listing the same run twice does not duplicate anything
    assert len(mine_hard_samples([res, res])) == len(hard)


# --- self-adaption


def test_adaption_needs_a_step():
    raw_P, raw_Q, inliers, hard = planted_ambiguity(0)
    head = ProjectionHead.initial(33, 16, 0)
    with pytest.raises(ValueError):
        per_batch_self_adaption(head, raw_P, raw_Q, hard, AnchorPair(np.zeros(16), np.zeros(16)), inliers, steps=0)


def test_zero_learning_rate_leaves_head_unchanged():
    raw_P, raw_Q, inliers, hard = planted_ambiguity(1)
    head = ProjectionHead.initial(33, 16, 1)
    out = per_batch_self_adaption(
        head, raw_P, raw_Q, hard, AnchorPair(np.zeros(16), np.zeros(16)), inliers, steps=1, lr=0.0
    )
    assert np.array_equal(out.weight, head.weight) and np.array_equal(out.bias, head.bias)


def test_empty_hard_set_is_identity():
    raw_P, raw_Q, inliers, _ = planted_ambiguity(2)
    head = ProjectionHead.initial(33, 16, 2)
    out = per_batch_self_adaption(
        head, raw_P, raw_Q, CorrespondenceSet.empty(), AnchorPair(np.zeros(16), np.zeros(16)), inliers
    )
    assert out is head


def test_adaption_loss_is_non_increasing():
    ok = 0
    for seed in range(20):
        raw_P, raw_Q, inliers, hard = planted_ambiguity(100 + seed)
        head = ProjectionHead.initial(33, 16, seed)
        anchors = AnchorPair(np.zeros(16), np.zeros(16))
        curve = [adaption_loss(head, raw_P, raw_Q, hard, inliers)]
        for _ in range(10):
            head = per_batch_self_adaption(head, raw_P, raw_Q, hard, anchors, inliers, steps=1, lr=1e-3)
            curve.append(adaption_loss(head, raw_P, raw_Q, hard, inliers))
        ok += bool(np.all(np.diff(curve) <= 1e-12))
    assert ok >= 18


# --- two-pass mining


def test_noiseless_full_overlap_pair_is_recovered():
    P = voxel_downsample(synthetic_scan(11), 0.3)
    T = RigidTransform(rotation_about_axis([0.2, 0.1, 1.0], 0.5), np.array([6.0, -3.0, 0.4]))
    Q = PointCloud(T.apply(P.points))
    rp, rq = extract_descriptors(P), extract_descriptors(Q)
    res = run_mining(P, Q, rp, rq, ProjectionHead.initial(33, 16, 0))
    label = res.label
    assert rre(label.pose, T) < 1e-3 and rte(label.pose, T) < 1e-3
    assert inlier_ratio(label.dense, P, Q, T) == 1.0
    sp = label.sparse
    sp.check_bounds(len(res.sparse_P), len(res.sparse_Q))
    residual = np.linalg.norm(label.pose.apply(res.sparse_P.points[sp.i]) - res.sparse_Q.points[sp.j], axis=1)
    assert len(sp) and (residual < MiningConfig().sparse_radius).all()
    assert (label.dense.labels == 1).all()


def test_mine_pseudo_labels_returns_the_mining_label():
    P = voxel_downsample(synthetic_scan(12), 0.3)
    T = RigidTransform(rotation_about_axis([0, 0, 1], 0.2), np.array([5.0, 0.0, 0.0]))
    Q = PointCloud(T.apply(P.points))
    rp, rq = extract_descriptors(P), extract_descriptors(Q)
    head = ProjectionHead.initial(33, 16, 0)
    a = mine_pseudo_labels(P, Q, rp, rq, head, pair_id="x")
    b = run_mining(P, Q, rp, rq, head, pair_id="x").label
    assert a.dense.pair_set() == b.dense.pair_set() and a.pair_id == "x"


# --- mixed-density views


def uniform_cloud(seed: int, side: float = 3.0, n: int = 30000) -> PointCloud:
    return PointCloud(np.random.default_rng(seed).uniform(0, side, (n, 3)))


def test_sparse_factor_near_one_keeps_counts():
    P = uniform_cloud(0)
    dense, _, sparse, _ = build_mixed_density_views(P, P, 0.3, 1.01)
    assert abs(len(sparse) - len(dense)) <= 0.05 * len(dense)


def test_doubling_the_voxel_leaves_an_eighth():
    P = uniform_cloud(1)
    dense, _, sparse, _ = build_mixed_density_views(P, P, 0.3, 2.0)
    assert abs(len(sparse) - len(dense) / 8) <= 0.3 * len(dense) / 8


def test_views_are_deterministic():
    P, Q = uniform_cloud(2, n=5000), uniform_cloud(3, n=5000)
    a = build_mixed_density_views(P, Q, 0.3, 2.0)
    b = build_mixed_density_views(P, Q, 0.3, 2.0)
    assert all(x.points.tobytes() == y.points.tobytes() for x, y in zip(a, b))
    assert len(a[2]) <= len(a[0]) and len(a[3]) <= len(a[1])


@pytest.mark.parametrize("voxel,factor", [(0.0, 2.0), (0.3, 1.0), (-1.0, 2.0)])
def test_views_reject_bad_parameters(voxel, factor):
    P = uniform_cloud(4, n=10)
    with pytest.raises(ValueError):
        build_mixed_density_views(P, P, voxel, factor)
