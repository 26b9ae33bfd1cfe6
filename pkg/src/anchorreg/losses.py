"""Contrastive and registration losses with hand-derived gradients.

Every loss returns a :class:`LossValue` whose ``gradients`` map names to
arrays shaped like the inputs they differentiate. Feature-level gradients are
pushed onto the projection head with :func:`head_gradients`. ``check_gradient``
is the finite-difference oracle used by the test-suite.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .correspondences import CorrespondenceSet
from .errors import DivergedError, RejectedBatchError
from .features import (
    FeatureField,
    ProjectionHead,
    correspondence_features,
    match_features,
    project,
    project_backward,
)

log = logging.getLogger(__name__)


@dataclass
class LossValue:
    value: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    terms: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise ValueError(f"loss value is not finite: {self.value}")

    def scaled(self, alpha: float) -> "LossValue":
        return LossValue(
            alpha * self.value,
            {k: alpha * g for k, g in self.gradients.items()},
            {k: alpha * v for k, v in self.terms.items()},
        )


@dataclass
class ContrastBatch:
    """Positives and negatives scored against a fixed reference vector.

    ``*_grad`` masks mark which rows receive gradient; rows with ``False``
    (stop-gradient entries such as anchors) always get exact zeros.
    """

    positives: np.ndarray
    negatives: np.ndarray
    reference: np.ndarray
    temperature: float = 0.07
    positive_grad: np.ndarray | None = None
    negative_grad: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.positives = np.atleast_2d(np.asarray(self.positives, dtype=np.float64))
        self.negatives = np.atleast_2d(np.asarray(self.negatives, dtype=np.float64))
        self.reference = np.asarray(self.reference, dtype=np.float64).reshape(-1)
        if self.positives.size == 0 or self.negatives.size == 0:
            raise ValueError("a contrast batch needs at least one positive and one negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.positive_grad is None:
            self.positive_grad = np.ones(len(self.positives), dtype=bool)
        if self.negative_grad is None:
            self.negative_grad = np.ones(len(self.negatives), dtype=bool)
        self.positive_grad = np.asarray(self.positive_grad, dtype=bool)
        self.negative_grad = np.asarray(self.negative_grad, dtype=bool)


def _dist_and_unit(x: np.ndarray, ref: np.ndarray):
    diff = x - ref
    d = np.linalg.norm(diff, axis=1)
    unit = np.divide(diff, d[:, None], out=np.zeros_like(diff), where=d[:, None] > 0)
    return d, unit


def info_nce(batch: ContrastBatch) -> LossValue:
    """InfoNCE with logits ``beta = -|x - reference| / temperature``.

    ``L = -(1/n_p) sum_i log(exp(bp_i) / (exp(bp_i) + sum_j exp(bn_j)))``,
    evaluated with max subtraction.
    """
    tau = batch.temperature
    d_p, u_p = _dist_and_unit(batch.positives, batch.reference)
    d_n, u_n = _dist_and_unit(batch.negatives, batch.reference)
    bp = -d_p / tau
    bn = -d_n / tau
    n_p = len(bp)

    m = np.maximum(bp, bn.max())
    neg_sum = np.exp(bn[None, :] - m[:, None]).sum(axis=1)  # (n_p,)
    denom = np.exp(bp - m) + neg_sum
    log_denom = m + np.log(denom)
    value = float(np.mean(log_denom - bp))

    # dL/dbp_i = (softmax_i - 1)/n_p ; dL/dbn_j = (1/n_p) sum_i exp(bn_j - logden_i)
    soft_p = np.exp(bp - log_denom)
    g_bp = (soft_p - 1.0) / n_p
    g_bn = np.exp(bn[None, :] - log_denom[:, None]).sum(axis=0) / n_p
    # dbeta/dx = -(x - ref)/(tau |x - ref|)
    g_pos = (-g_bp / tau)[:, None] * u_p
    g_neg = (-g_bn / tau)[:, None] * u_n
    g_pos[~batch.positive_grad] = 0.0
    g_neg[~batch.negative_grad] = 0.0
    return LossValue(
        value,
        {"positives": g_pos, "negatives": g_neg, "reference": np.zeros_like(batch.reference)},
    )


@dataclass
class AugmentedSet:
    vectors: np.ndarray
    requires_grad: np.ndarray

    def __len__(self) -> int:
        return len(self.vectors)


def abcont_augment(C_plus, C_minus, anchors) -> tuple[AugmentedSet, AugmentedSet]:
    """Append the anchors as a universal inlier / outlier carrying no gradient."""
    A_pos = np.asarray(anchors.positive, dtype=np.float64).reshape(1, -1)
    A_neg = np.asarray(anchors.negative, dtype=np.float64).reshape(1, -1)
    if not (np.isfinite(A_pos).all() and np.isfinite(A_neg).all()):
        raise ValueError("anchors must be finite")
    d = A_pos.shape[1]

    def aug(rows, anchor):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, d)
        vecs = np.concatenate([rows, anchor])
        flags = np.concatenate([np.ones(len(rows), dtype=bool), [False]])
        return AugmentedSet(vecs, flags)

    return aug(C_plus, A_pos), aug(C_minus, A_neg)


def _scatter_corr_grad(grad_corr, corrs: CorrespondenceSet, n_p: int, n_q: int, dim: int):
    """Gradients w.r.t. both fields of a loss on ``F_P[i] - F_Q[j]``."""
    gP = np.zeros((n_p, dim))
    gQ = np.zeros((n_q, dim))
    np.add.at(gP, corrs.i, grad_corr)
    np.add.at(gQ, corrs.j, -grad_corr)
    return gP, gQ


def classify_matches(matches: CorrespondenceSet, teacher: CorrespondenceSet, index_tol: int = 0):
    """True where a student match agrees with a teacher correspondence.

    A match ``(i, j)`` agrees when the teacher pairs ``i`` with some ``j'``
    such that ``|j - j'| <= index_tol``.
    """
    if len(matches) == 0:
        return np.zeros(0, dtype=bool)
    if index_tol == 0:
        tset = teacher.pair_set()
        return np.array([(i, j) in tset for i, j in matches.pairs.tolist()], dtype=bool)
    by_i: dict[int, list[int]] = {}
    for i, j in teacher.pairs.tolist():
        by_i.setdefault(i, []).append(j)
    return np.array(
        [any(abs(j - jj) <= index_tol for jj in by_i.get(i, ())) for i, j in matches.pairs.tolist()],
        dtype=bool,
    )


def corr_loss(
    student_P: FeatureField,
    student_Q: FeatureField,
    teacher_corrs: CorrespondenceSet,
    anchors,
    n_p: int = 128,
    rng_seed: int = 0,
    temperature: float = 0.07,
    index_tol: int = 0,
    matches: CorrespondenceSet | None = None,
) -> LossValue:
    """Anchor-based correspondence loss on the student's own matches.

    Student mutual matches are split into positives (agreeing with the
    teacher) and negatives; up to ``n_p`` of each are sampled without
    replacement, the teacher anchors join as stop-gradient universal
    inlier / outlier, and InfoNCE is scored against the positive anchor.
    Gradients are returned for both student fields as ``F_P`` / ``F_Q``.
    """
    if matches is None:
        matches = match_features(student_P, student_Q, "mutual")
    if len(matches) == 0:
        raise RejectedBatchError("no student matches to classify")
    positive = classify_matches(matches, teacher_corrs, index_tol)
    rng = np.random.default_rng(rng_seed)
    pos_idx = np.flatnonzero(positive)
    neg_idx = np.flatnonzero(~positive)
    pos_idx = np.sort(rng.choice(pos_idx, size=min(n_p, len(pos_idx)), replace=False))
    neg_idx = np.sort(rng.choice(neg_idx, size=min(n_p, len(neg_idx)), replace=False))

    feats = correspondence_features(student_P, student_Q, matches)
    c_plus, c_minus = abcont_augment(feats[pos_idx], feats[neg_idx], anchors)
    batch = ContrastBatch(
        c_plus.vectors,
        c_minus.vectors,
        np.asarray(anchors.positive, dtype=np.float64),
        temperature,
        c_plus.requires_grad,
        c_minus.requires_grad,
    )
    lv = info_nce(batch)
    used = np.concatenate([pos_idx, neg_idx])
    g = np.concatenate([lv.gradients["positives"][:-1], lv.gradients["negatives"][:-1]])
    gP, gQ = _scatter_corr_grad(g, matches.select(used), len(student_P), len(student_Q), student_P.dim)
    return LossValue(
        lv.value,
        {"F_P": gP, "F_Q": gQ},
        {"corr": lv.value, "n_pos": float(len(pos_idx)), "n_neg": float(len(neg_idx))},
    )


def registration_loss(
    student_P: FeatureField,
    student_Q: FeatureField,
    dense_corrs: CorrespondenceSet,
    margin_pos: float = 0.1,
    margin_neg: float = 1.4,
    max_pairs: int = 1024,
    rng_seed: int = 0,
    points_P: np.ndarray | None = None,
    points_Q: np.ndarray | None = None,
    safe_radius: float = 0.0,
) -> LossValue:
    """Hardest-contrastive loss over a set of positive correspondences.

    Positive term: ``mean(relu(|f_i - g_j| - margin_pos)^2)``. Negative term:
    for each side, the nearest non-matching feature among the batch's other
    correspondences is pushed beyond ``margin_neg``; the two sides are
    averaged. A single correspondence yields the positive term only.

    With point coordinates and ``safe_radius > 0``, candidates lying within
    ``safe_radius`` of the true partner are not used as negatives.
    """
    if len(dense_corrs) == 0:
        raise ValueError("registration loss needs at least one correspondence")
    dense_corrs.check_bounds(len(student_P), len(student_Q))
    corrs = dense_corrs
    if len(corrs) > max_pairs:
        rng = np.random.default_rng(rng_seed)
        corrs = corrs.select(np.sort(rng.choice(len(corrs), max_pairs, replace=False)))
    f = student_P.vectors[corrs.i]
    g = student_Q.vectors[corrs.j]
    m = len(corrs)
    grad_f = np.zeros_like(f)
    grad_g = np.zeros_like(g)

    diff = f - g
    d_pos = np.linalg.norm(diff, axis=1)
    h_pos = np.maximum(d_pos - margin_pos, 0.0)
    pos_term = float(np.mean(h_pos**2))
    coef = np.divide(2.0 * h_pos, d_pos, out=np.zeros_like(d_pos), where=d_pos > 0) / m
    grad_f += coef[:, None] * diff
    grad_g -= coef[:, None] * diff

    neg_term = 0.0
    if m >= 2:
        D = cdist(f, g)
        i_idx, j_idx = corrs.i, corrs.j
        # f_a against g_b needs a different target point; g_b against f_a a different source
        valid_f = j_idx[None, :] != j_idx[:, None]
        valid_g = i_idx[:, None] != i_idx[None, :]
        if safe_radius > 0 and points_P is not None and points_Q is not None:
            valid_f &= cdist(points_Q[j_idx], points_Q[j_idx]) > safe_radius
            valid_g &= cdist(points_P[i_idx], points_P[i_idx]) > safe_radius
        parts = []
        for side, valid in (("f", valid_f), ("g", valid_g)):
            Dm = np.where(valid, D, np.inf)
            if side == "f":
                hard = np.argmin(Dm, axis=1)
                rows = np.arange(m)
                dist = Dm[rows, hard]
                a_idx, b_idx = rows, hard
            else:
                hard = np.argmin(Dm, axis=0)
                cols = np.arange(m)
                dist = Dm[hard, cols]
                a_idx, b_idx = hard, cols
            ok = np.isfinite(dist)
            if not ok.any():
                continue
            h = np.maximum(margin_neg - dist[ok], 0.0)
            parts.append(float(np.mean(h**2)))
            n_ok = ok.sum()
            a, b = a_idx[ok], b_idx[ok]
            delta = f[a] - g[b]
            c = np.divide(-2.0 * h, dist[ok], out=np.zeros_like(h), where=dist[ok] > 0)
            c = c / n_ok / 2.0
            np.add.at(grad_f, a, c[:, None] * delta)
            np.add.at(grad_g, b, -c[:, None] * delta)
        neg_term = float(np.sum(parts)) / 2.0

    gP = np.zeros_like(student_P.vectors)
    gQ = np.zeros_like(student_Q.vectors)
    np.add.at(gP, corrs.i, grad_f)
    np.add.at(gQ, corrs.j, grad_g)
    return LossValue(pos_term + neg_term, {"F_P": gP, "F_Q": gQ}, {"pos": pos_term, "neg": neg_term})


def abcont_loss(reg: LossValue, corr: LossValue | None, lambda_corr: float) -> LossValue:
    """``L_reg + lambda_corr * L_corr`` with linearly combined gradients."""
    if corr is None or lambda_corr == 0:
        return reg
    return _combine([(1.0, reg), (lambda_corr, corr)])


def total_loss(
    dense_terms: tuple[LossValue, LossValue | None],
    sparse_terms: tuple[LossValue, LossValue | None] | None,
    lambda_corr: float = 1.0,
    lambda_1: float = 0.5,
) -> LossValue:
    """Mixed-density objective ``L_ABCont(dense) + lambda_1 * L_ABCont(sparse)``.

    Gradient maps are summed key by key, so terms must be expressed in a
    common parameter space (see :func:`head_gradients`).
    """
    if lambda_corr < 0 or lambda_1 < 0:
        raise ValueError("loss weights must be non-negative")
    dense = abcont_loss(dense_terms[0], dense_terms[1], lambda_corr)
    if sparse_terms is None or lambda_1 == 0:
        out = _combine([(1.0, dense)])
        out.terms = {"dense": dense.value, "sparse": 0.0}
        return out
    sparse = abcont_loss(sparse_terms[0], sparse_terms[1], lambda_corr)
    out = _combine([(1.0, dense), (lambda_1, sparse)])
    out.terms = {"dense": dense.value, "sparse": lambda_1 * sparse.value}
    return out


def _combine(weighted: Sequence[tuple[float, LossValue]]) -> LossValue:
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for w, lv in weighted:
        value += w * lv.value
        for k, g in lv.gradients.items():
            grads[k] = grads[k] + w * g if k in grads else w * g
    return LossValue(value, grads)


def head_gradients(
    loss: LossValue, raw_P: FeatureField, raw_Q: FeatureField, head: ProjectionHead
) -> LossValue:
    """Chain ``F_P`` / ``F_Q`` gradients through the head onto ``weight`` / ``bias``."""
    gp = project_backward(raw_P, head, loss.gradients["F_P"])
    gq = project_backward(raw_Q, head, loss.gradients["F_Q"])
    return LossValue(
        loss.value,
        {"weight": gp["weight"] + gq["weight"], "bias": gp["bias"] + gq["bias"]},
        dict(loss.terms),
    )


def check_gradient(
    fn: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, h: float = 1e-5
) -> float:
    """Relative error between ``analytic`` and a central-difference gradient of ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn(x)
        flat[k] = orig - h
        down = fn(x)
        flat[k] = orig
        nflat[k] = (up - down) / (2 * h)
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


# --------------------------------------------------------------------------
# student training


@dataclass
class TrainingExample:
    """Raw descriptors of the dense and sparse views of one pair plus its label.

    ``gt_pose`` and the clouds are optional and only feed the benchmark IR.
    """

    raw_P: FeatureField
    raw_Q: FeatureField
    raw_P_sparse: FeatureField
    raw_Q_sparse: FeatureField
    label: object  # fgcm.PseudoLabel
    P: object = None
    Q: object = None
    gt_pose: object = None
    pair_id: str = ""
    P_sparse: object = None
    Q_sparse: object = None


@dataclass
class TrainingConfig:
    epochs: int = 20
    lr: float = 1e-3
    lambda_corr: float = 1.0
    lambda_1: float = 0.5
    n_p: int = 128
    temperature: float = 0.07
    margin_pos: float = 0.1
    margin_neg: float = 1.4
    ir_threshold: float = 0.6
    safe_radius: float = 0.0
    rng_seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    benchmark_ir: float
    wall_ms: float


def example_loss(
    head: ProjectionHead, ex: TrainingExample, cfg: TrainingConfig, seed: int
) -> LossValue:
    """Mixed-density ABCont objective of one example, with head-parameter gradients."""
    label = ex.label

    def terms(raw_P, raw_Q, teacher, P, Q):
        if len(teacher) == 0:
            return None
        sP, sQ = project(raw_P, head), project(raw_Q, head)
        reg = registration_loss(
            sP, sQ, teacher, cfg.margin_pos, cfg.margin_neg, rng_seed=seed,
            points_P=None if P is None else P.points, points_Q=None if Q is None else Q.points,
            safe_radius=cfg.safe_radius,
        )
        reg = head_gradients(reg, raw_P, raw_Q, head)
        corr = None
        if cfg.lambda_corr > 0:
            try:
                corr = head_gradients(
                    corr_loss(sP, sQ, teacher, label.anchors, cfg.n_p, seed, cfg.temperature),
                    raw_P, raw_Q, head,
                )
            except RejectedBatchError:
                log.info("pair %s: student produced no matches, corr term skipped", ex.pair_id)
        return reg, corr

    dense = terms(ex.raw_P, ex.raw_Q, label.dense, ex.P, ex.Q)
    if dense is None:
        raise RejectedBatchError(f"pair {ex.pair_id}: empty dense label")
    sparse = None
    if cfg.lambda_1 > 0:
        sparse = terms(ex.raw_P_sparse, ex.raw_Q_sparse, label.sparse, ex.P_sparse, ex.Q_sparse)
    return total_loss(dense, sparse, cfg.lambda_corr, cfg.lambda_1)


def student_inlier_ratio(head: ProjectionHead, ex: TrainingExample, threshold: float) -> float | None:
    if ex.gt_pose is None or ex.P is None or ex.Q is None:
        return None
    m = match_features(project(ex.raw_P, head), project(ex.raw_Q, head), "mutual")
    if len(m) == 0:
        return 0.0
    res = np.linalg.norm(ex.gt_pose.apply(ex.P.points[m.i]) - ex.Q.points[m.j], axis=1)
    return float(np.mean(res < threshold))


def train_student_head(
    head: ProjectionHead,
    examples: Sequence[TrainingExample],
    config: TrainingConfig | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[ProjectionHead, list[EpochLog]]:
    """Plain gradient descent on the student head, one update per example.

    Raises :class:`DivergedError` (with ``partial_log``) when an epoch's mean
    loss exceeds ten times the first epoch's.
    """
    cfg = config or TrainingConfig()
    if len(examples) == 0:
        raise ValueError("training stream is empty")
    logs: list[EpochLog] = []
    initial = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for k, ex in enumerate(examples):
            try:
                lv = example_loss(head, ex, cfg, cfg.rng_seed * 1_000_003 + k)
            except RejectedBatchError as err:
                log.info("skipping example: %s", err)
                continue
            losses.append(lv.value)
            head = head.step(lv.gradients, cfg.lr)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        irs = [student_inlier_ratio(head, ex, cfg.ir_threshold) for ex in examples]
        irs = [v for v in irs if v is not None]
        entry = EpochLog(
            epoch + 1, mean_loss, float(np.mean(irs)) if irs else float("nan"),
            (time.perf_counter() - t0) * 1000.0,
        )
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if initial is None:
            initial = mean_loss
        elif not np.isfinite(mean_loss) or mean_loss > 10.0 * initial:
            err = DivergedError(f"mean loss {mean_loss:.4g} exceeded 10x initial {initial:.4g}")
            err.partial_log = logs
            raise err
    return head, logs
