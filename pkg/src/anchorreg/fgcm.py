"""Feature-geometry coherence mining of pseudo-labels.

Correspondence features ``F_P[i] - F_Q[j]`` of current inliers and outliers
are averaged into a positive and a negative anchor. Clustering then grows a
seed correspondence set: unclassified points are matched in feature space,
the candidates most similar to the positive anchor (and more similar to it
than to the negative one) are admitted, and a spatial-compatibility estimator
repartitions everything into inliers and outliers. Candidates the estimator
throws out right after admission are hard samples; they drive a short
InfoNCE adaption of the teacher head before a second mining pass.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .compat import Estimator, EstimatorVerdict, SC2Estimator
from .correspondences import CorrespondenceSet, Label
from .errors import (
    DegenerateGeometryError,
    EmptySeedError,
    EstimatorFailedError,
    MiningFailedError,
    MissingClassError,
)
from .features import (
    FeatureField,
    ProjectionHead,
    FeatureMatcher,
    correspondence_features,
    project,
    project_backward,
)
from .geometry import PointCloud, RigidTransform, kabsch, nn_correspondences_under_T, voxel_downsample
from .losses import ContrastBatch, info_nce

log = logging.getLogger(__name__)

#: incremented whenever a cosine similarity meets a zero-norm vector
diagnostics: Counter = Counter()


@dataclass(frozen=True, eq=False)
class AnchorPair:
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.positive, dtype=np.float64).reshape(-1)
        neg = np.asarray(self.negative, dtype=np.float64).reshape(-1)
        if pos.shape != neg.shape:
            raise ValueError("anchors must share a dimension")
        if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
            raise ValueError("anchors must be finite")
        object.__setattr__(self, "positive", pos)
        object.__setattr__(self, "negative", neg)

    @property
    def dim(self) -> int:
        return len(self.positive)


@dataclass(eq=False)
class PseudoLabel:
    """Teacher supervision for one pair.

    ``dense`` indexes the dense views, ``sparse`` the sparse (coarser voxel)
    views; ``pose`` is the transform estimated while mining.
    """

    dense: CorrespondenceSet
    sparse: CorrespondenceSet
    anchors: AnchorPair
    pose: RigidTransform
    pair_id: str = ""


@dataclass(frozen=True)
class ClusteringConfig:
    top_k: int = 50
    max_iters: int = 8
    seed_similarity_threshold: float = 0.7
    n_p: int = 128
    match_mode: str = "mutual"

    def __post_init__(self) -> None:
        if self.top_k < 1 or self.max_iters < 1:
            raise ValueError("top_k and max_iters must be at least 1")
        if not 0.0 < self.seed_similarity_threshold < 1.0:
            raise ValueError("seed_similarity_threshold must lie in (0, 1)")


# --------------------------------------------------------------------------
# anchors and similarity


def compute_anchors(corr_feats, inlier_flags) -> AnchorPair:
    """Mean correspondence feature of the inliers and of the outliers."""
    feats = np.asarray(corr_feats, dtype=np.float64)
    flags = np.asarray(inlier_flags, dtype=bool).reshape(-1)
    if feats.ndim != 2 or len(feats) != len(flags):
        raise ValueError("one flag per correspondence feature is required")
    if not flags.any() or flags.all():
        raise MissingClassError("anchors need at least one inlier and one outlier")
    return AnchorPair(feats[flags].mean(axis=0), feats[~flags].mean(axis=0))


def _similarity(anchor: np.ndarray, feats: np.ndarray) -> np.ndarray:
    d_e = 1.0 - np.minimum(np.linalg.norm(feats - anchor, axis=1), 1.0)
    na = np.linalg.norm(anchor)
    nf = np.linalg.norm(feats, axis=1)
    degenerate = (nf == 0) | (na == 0)
    cos = np.zeros(len(feats))
    ok = ~degenerate
    cos[ok] = feats[ok] @ anchor / (nf[ok] * na)
    d_c = (np.clip(cos, -1.0, 1.0) + 1.0) / 2.0
    d_c[degenerate] = 0.5
    if degenerate.any():
        diagnostics["zero_norm_cosine"] += int(degenerate.sum())
    return np.minimum(d_e, d_c)


def anchor_similarities(anchors: AnchorPair, corr_feats) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``(S_plus, S_minus)`` for a stack of correspondence features.

    ``S = min(1 - min(L2, 1), (cos + 1) / 2)`` against each anchor; a zero
    vector makes the cosine term 0.5.
    """
    feats = np.atleast_2d(np.asarray(corr_feats, dtype=np.float64))
    if feats.shape[1] != anchors.dim:
        raise ValueError("feature and anchor dimensions differ")
    return _similarity(anchors.positive, feats), _similarity(anchors.negative, feats)


def anchor_similarity(anchors: AnchorPair, corr_feat) -> tuple[float, float]:
    s_plus, s_minus = anchor_similarities(anchors, np.reshape(corr_feat, (1, -1)))
    return float(s_plus[0]), float(s_minus[0])


def seed_proposals(
    F_P: FeatureField,
    F_Q: FeatureField,
    threshold: float = 0.7,
    max_pairs: int | None = None,
    matcher: FeatureMatcher | None = None,
) -> CorrespondenceSet:
    """Mutual matches whose similarity ``1 - min(L2, 1)`` exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    matcher = matcher.fresh() if matcher is not None else FeatureMatcher(F_P, F_Q)
    pairs, dist = matcher.match("mutual", max_pairs)
    keep = 1.0 - np.minimum(dist, 1.0) > threshold
    if not keep.any():
        raise EmptySeedError(f"no mutual match above similarity {threshold}")
    return pairs.select(keep)


# --------------------------------------------------------------------------
# clustering


@dataclass(eq=False)
class IterationRecord:
    iteration: int
    candidates: CorrespondenceSet
    s_plus: np.ndarray
    s_minus: np.ndarray
    selected: CorrespondenceSet
    expanded: CorrespondenceSet  # C^i with inlier/outlier labels
    anchors: AnchorPair
    rejected: CorrespondenceSet  # selected this iteration, then labelled outlier
    anchors_reused: bool = False

    @property
    def n_plus(self) -> int:
        return int((self.expanded.labels == Label.INLIER).sum())

    @property
    def n_minus(self) -> int:
        return int((self.expanded.labels == Label.OUTLIER).sum())


@dataclass(eq=False)
class ClusteringResult:
    correspondences: CorrespondenceSet  # final inliers
    anchors: AnchorPair
    initial: CorrespondenceSet  # C0 with the estimator's partition
    initial_anchors: AnchorPair
    history: list[IterationRecord] = field(default_factory=list)
    pose: RigidTransform | None = None
    warning: str | None = None

    def __iter__(self):
        yield self.correspondences
        yield self.anchors

    @property
    def final_partition(self) -> CorrespondenceSet:
        return self.history[-1].expanded if self.history else self.initial


def _partition(estimator: Estimator, P, Q, corrs: CorrespondenceSet) -> EstimatorVerdict:
    try:
        return estimator.filter(P, Q, corrs)
    except (ValueError, DegenerateGeometryError) as err:
        raise EstimatorFailedError(str(err)) from err


def _anchors_or_previous(feats, flags, previous: AnchorPair | None):
    try:
        return compute_anchors(feats, flags), False
    except MissingClassError:
        if previous is not None:
            return previous, True
        if flags.any():
            # no outlier seen yet: the negative anchor carries no information
            pos = feats[flags].mean(axis=0)
            return AnchorPair(pos, np.zeros_like(pos)), False
        raise


def feature_geometry_clustering(
    P: PointCloud,
    Q: PointCloud,
    F_P: FeatureField,
    F_Q: FeatureField,
    C0: CorrespondenceSet,
    config: ClusteringConfig | None = None,
    estimator: Estimator | None = None,
    matcher: FeatureMatcher | None = None,
) -> ClusteringResult:
    """Grow ``C0`` by anchor-guided feature matching and geometric filtering.

    The estimator first partitions ``C0`` so the anchors exist. Each round
    matches the still-unclassified points of P and Q, admits the ``top_k``
    candidates by positive similarity among those with ``S+ > S-``,
    repartitions the union with the estimator and refreshes the anchors.
    Rounds stop once the inlier or the outlier count repeats, or after
    ``max_iters``. An estimator failure mid-way returns the last consistent
    state with ``warning`` set. ``matcher`` may carry a precomputed distance
    matrix for ``F_P``, ``F_Q``.
    """
    cfg = config or ClusteringConfig()
    est = estimator or SC2Estimator()
    if len(C0) == 0:
        raise ValueError("C0 must be non-empty")
    C0 = C0.with_labels(np.zeros(len(C0), dtype=np.int8))

    verdict = _partition(est, P, Q, C0)
    current = C0.with_flags(verdict.inlier_flags)
    feats = correspondence_features(F_P, F_Q, current)
    anchors, _ = _anchors_or_previous(feats, verdict.inlier_flags, None)
    result = ClusteringResult(current.inliers, anchors, current, anchors, pose=verdict.pose)
    n_plus_prev = int(verdict.inlier_flags.sum())
    n_minus_prev = len(current) - n_plus_prev

    matcher = matcher.fresh() if matcher is not None else FeatureMatcher(F_P, F_Q)
    for it in range(1, cfg.max_iters + 1):
        # unclassified points: not an endpoint of any correspondence in C^(i-1)
        matcher.exclude(current.i, current.j)
        candidates, _ = matcher.match(cfg.match_mode)
        if len(candidates):
            s_plus, s_minus = anchor_similarities(anchors, correspondence_features(F_P, F_Q, candidates))
        else:
            s_plus = s_minus = np.zeros(0)
        eligible = np.flatnonzero(s_plus > s_minus)
        order = eligible[np.argsort(-s_plus[eligible], kind="stable")][: cfg.top_k]
        selected = candidates.select(np.sort(order))

        expanded = current.union(selected.with_labels(np.zeros(len(selected), dtype=np.int8)))
        try:
            verdict = _partition(est, P, Q, expanded)
        except EstimatorFailedError as err:
            result.warning = f"estimator failed at iteration {it}: {err}"
            log.warning(result.warning)
            break
        expanded = expanded.with_flags(verdict.inlier_flags)
        feats = correspondence_features(F_P, F_Q, expanded)
        anchors, reused = _anchors_or_previous(feats, verdict.inlier_flags, anchors)
        in_expanded = dict(zip(map(tuple, expanded.pairs.tolist()), expanded.labels.tolist()))
        rejected_mask = np.array(
            [in_expanded[p] == Label.OUTLIER for p in map(tuple, selected.pairs.tolist())], dtype=bool
        )
        record = IterationRecord(
            it, candidates, s_plus, s_minus, selected, expanded, anchors,
            selected.select(rejected_mask) if len(selected) else CorrespondenceSet.empty(),
            reused,
        )
        result.history.append(record)
        result.correspondences = expanded.inliers
        result.anchors = anchors
        result.pose = verdict.pose
        current = expanded
        if record.n_plus == n_plus_prev or record.n_minus == n_minus_prev:
            break
        n_plus_prev, n_minus_prev = record.n_plus, record.n_minus
    return result


def mine_hard_samples(history) -> CorrespondenceSet:
    """Deduplicated union of candidates admitted by similarity then rejected geometrically.

    ``history`` may be a :class:`ClusteringResult`, a list of them, or a list
    of :class:`IterationRecord`.
    """
    if isinstance(history, ClusteringResult):
        records = history.history
    else:
        records = []
        for item in history:
            records.extend(item.history if isinstance(item, ClusteringResult) else [item])
    out = CorrespondenceSet.empty()
    for rec in records:
        if len(rec.rejected):
            out = out.union(rec.rejected.with_labels(np.zeros(len(rec.rejected), dtype=np.int8)))
    return out


# --------------------------------------------------------------------------
# self-adaption


def per_batch_self_adaption(
    head: ProjectionHead,
    raw_P: FeatureField,
    raw_Q: FeatureField,
    hard: CorrespondenceSet,
    anchors: AnchorPair,
    inliers: CorrespondenceSet | None = None,
    steps: int = 10,
    lr: float = 0.05,
    temperature: float = 0.07,
    n_p: int = 128,
    rng_seed: int = 0,
) -> ProjectionHead:
    """Adapt the head so hard samples move away from the positive anchor.

    Each step scores InfoNCE with the (sampled) inlier correspondence
    features as positives, the hard samples as negatives and the positive
    anchor as stop-gradient reference. When ``inliers`` is given the anchor
    is recomputed from them under the current head before every step;
    otherwise ``anchors.positive`` stays fixed. Only the head changes.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(hard) == 0:
        log.info("no hard samples, teacher head left unchanged")
        return head
    pos_corrs = inliers if inliers is not None else CorrespondenceSet.empty()
    if len(pos_corrs) > n_p:
        rng = np.random.default_rng(rng_seed)
        pos_corrs = pos_corrs.select(np.sort(rng.choice(len(pos_corrs), n_p, replace=False)))
    adapted = head.copy()
    for _ in range(steps):
        F_P, F_Q = project(raw_P, adapted), project(raw_Q, adapted)
        neg = correspondence_features(F_P, F_Q, hard)
        if len(pos_corrs):
            pos = correspondence_features(F_P, F_Q, pos_corrs)
            reference = (
                correspondence_features(F_P, F_Q, inliers).mean(axis=0)
                if inliers is not None and len(inliers)
                else anchors.positive
            )
            batch = ContrastBatch(pos, neg, reference, temperature)
        else:
            # the anchor itself is the only positive and carries no gradient
            batch = ContrastBatch(anchors.positive[None], neg, anchors.positive, temperature, [False])
            pos = np.zeros((0, neg.shape[1]))
        lv = info_nce(batch)
        gP = np.zeros_like(F_P.vectors)
        gQ = np.zeros_like(F_Q.vectors)
        if len(pos_corrs):
            np.add.at(gP, pos_corrs.i, lv.gradients["positives"])
            np.add.at(gQ, pos_corrs.j, -lv.gradients["positives"])
        np.add.at(gP, hard.i, lv.gradients["negatives"])
        np.add.at(gQ, hard.j, -lv.gradients["negatives"])
        gp = project_backward(raw_P, adapted, gP)
        gq = project_backward(raw_Q, adapted, gQ)
        adapted = adapted.step(
            {"weight": gp["weight"] + gq["weight"], "bias": gp["bias"] + gq["bias"]}, lr
        )
    return adapted


def adaption_loss(head, raw_P, raw_Q, hard, inliers, temperature=0.07) -> float:
    """InfoNCE value optimised by :func:`per_batch_self_adaption` (anchor recomputed)."""
    F_P, F_Q = project(raw_P, head), project(raw_Q, head)
    pos = correspondence_features(F_P, F_Q, inliers)
    neg = correspondence_features(F_P, F_Q, hard)
    return info_nce(ContrastBatch(pos, neg, pos.mean(axis=0), temperature)).value


# --------------------------------------------------------------------------
# two-pass mining


@dataclass(frozen=True)
class MiningConfig:
    clustering: ClusteringConfig = ClusteringConfig()
    adapt_steps: int = 10
    adapt_lr: float = 0.05
    temperature: float = 0.07
    base_voxel: float = 0.3
    sparse_factor: float = 2.0
    sparse_radius: float = 0.6
    seed_max_pairs: int | None = 400
    rng_seed: int = 0


@dataclass(eq=False)
class MiningResult:
    label: PseudoLabel
    seeds_pass1: CorrespondenceSet | None
    pass1: ClusteringResult | None
    hard: CorrespondenceSet
    adapted_head: ProjectionHead
    seeds_pass2: CorrespondenceSet
    pass2: ClusteringResult
    sparse_P: PointCloud
    sparse_Q: PointCloud


def build_mixed_density_views(
    P: PointCloud, Q: PointCloud, base_voxel: float = 0.3, sparse_factor: float = 2.0
) -> tuple[PointCloud, PointCloud, PointCloud, PointCloud]:
    """Dense views at ``base_voxel`` and sparse views at ``base_voxel * sparse_factor``."""
    if not base_voxel > 0:
        raise ValueError("base_voxel must be positive")
    if not sparse_factor > 1:
        raise ValueError("sparse_factor must exceed 1")
    sparse_voxel = base_voxel * sparse_factor
    return (
        voxel_downsample(P, base_voxel),
        voxel_downsample(Q, base_voxel),
        voxel_downsample(P, sparse_voxel),
        voxel_downsample(Q, sparse_voxel),
    )


def run_mining(
    P: PointCloud,
    Q: PointCloud,
    raw_P: FeatureField,
    raw_Q: FeatureField,
    head: ProjectionHead,
    config: MiningConfig | None = None,
    estimator: Estimator | None = None,
    pair_id: str = "",
) -> MiningResult:
    """Two-pass mining on the dense views ``P``, ``Q`` with their raw descriptors.

    Pass 1 seeds and clusters with the given head, collects hard samples and
    adapts the head. Pass 2 repeats seeding and clustering with the adapted
    head; its inliers fix the pose, under which the sparse views are paired
    by nearest neighbour. Pass-1 failures only skip the adaption; pass-2
    failures raise :class:`MiningFailedError`.
    """
    cfg = config or MiningConfig()
    est = estimator or SC2Estimator()
    ccfg = cfg.clustering

    seeds1 = pass1 = None
    hard = CorrespondenceSet.empty()
    adapted = head
    try:
        F_P, F_Q = project(raw_P, head), project(raw_Q, head)
        matcher = FeatureMatcher(F_P, F_Q)
        seeds1 = seed_proposals(F_P, F_Q, ccfg.seed_similarity_threshold, cfg.seed_max_pairs, matcher)
        pass1 = feature_geometry_clustering(P, Q, F_P, F_Q, seeds1, ccfg, est, matcher)
        hard = mine_hard_samples(pass1)
        adapted = per_batch_self_adaption(
            head, raw_P, raw_Q, hard, pass1.anchors, pass1.correspondences,
            cfg.adapt_steps, cfg.adapt_lr, cfg.temperature, ccfg.n_p, cfg.rng_seed,
        )
    except (EmptySeedError, EstimatorFailedError, MissingClassError) as err:
        log.info("pair %s: first pass failed (%s); skipping adaption", pair_id, err)

    try:
        F_P, F_Q = project(raw_P, adapted), project(raw_Q, adapted)
        matcher = FeatureMatcher(F_P, F_Q)
        seeds2 = seed_proposals(F_P, F_Q, ccfg.seed_similarity_threshold, cfg.seed_max_pairs, matcher)
        pass2 = feature_geometry_clustering(P, Q, F_P, F_Q, seeds2, ccfg, est, matcher)
        C = pass2.correspondences
        pose = kabsch(P.points[C.i], Q.points[C.j])
    except (EmptySeedError, EstimatorFailedError, MissingClassError, DegenerateGeometryError) as err:
        raise MiningFailedError(f"pair {pair_id}: {err}") from err

    sparse_P = voxel_downsample(P, cfg.base_voxel * cfg.sparse_factor)
    sparse_Q = voxel_downsample(Q, cfg.base_voxel * cfg.sparse_factor)
    sparse = nn_correspondences_under_T(sparse_P, sparse_Q, pose, cfg.sparse_radius)
    sparse = sparse.with_labels(np.full(len(sparse), Label.INLIER, dtype=np.int8))
    label = PseudoLabel(C, sparse, pass2.anchors, pose, pair_id)
    return MiningResult(label, seeds1, pass1, hard, adapted, seeds2, pass2, sparse_P, sparse_Q)


def mine_pseudo_labels(P, Q, raw_P, raw_Q, head, config=None, estimator=None, pair_id="") -> PseudoLabel:
    return run_mining(P, Q, raw_P, raw_Q, head, config, estimator, pair_id).label
