"""End-to-end building blocks shared by the command-line tools and the demos.

A corpus is a directory holding ``manifest.csv`` plus, per pair, two clouds
and a one-line pose file. Commands work pair by pair; with ``jobs > 1`` the
pairs are spread over worker processes and the results are collected back in
manifest order, so outputs never depend on scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import formats
from .config import RunConfig
from .correspondences import CorrespondenceSet
from .errors import (
    AlgorithmError,
    EmptySeedError,
    EstimatorFailedError,
    GenerationFailedError,
    MiningFailedError,
)
from .features import FeatureField, ProjectionHead, extract_descriptors, match_features, project
from .fgcm import PseudoLabel, build_mixed_density_views, run_mining
from .geometry import (
    PointCloud,
    RigidTransform,
    inverse,
    make_synthetic_pair,
    measure_overlap,
    voxel_downsample,
)
from .losses import TrainingExample, train_student_head
from .metrics import (
    MetricsReport,
    find_bin,
    inlier_ratio,
    pair_distance,
    registration_recall,
    rre,
    rte,
)
from .scenes import synthetic_scan

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 33


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally over worker processes, in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def initial_head(cfg: RunConfig) -> ProjectionHead:
    return ProjectionHead.initial(DESCRIPTOR_DIM, cfg.d_out, cfg.seed)


# --------------------------------------------------------------------------
# registration


@dataclass(eq=False)
class RegistrationResult:
    pose: RigidTransform
    correspondences: CorrespondenceSet  # mutual matches fed to the estimator, labelled
    P: PointCloud  # downsampled views the indices refer to
    Q: PointCloud


def register_clouds(
    cloud_p: PointCloud, cloud_q: PointCloud, head: ProjectionHead, cfg: RunConfig
) -> RegistrationResult:
    """Estimate ``T`` with ``T p ~ q``.

    Raises :class:`EmptySeedError` when fewer than three mutual matches exist
    and :class:`EstimatorFailedError` when the estimator cannot produce a pose.
    """
    P = voxel_downsample(cloud_p, cfg.voxel)
    Q = voxel_downsample(cloud_q, cfg.voxel)
    raw_P = extract_descriptors(P, cfg.descriptor())
    raw_Q = extract_descriptors(Q, cfg.descriptor())
    return register_features(P, Q, raw_P, raw_Q, head, cfg)


def register_features(
    P: PointCloud,
    Q: PointCloud,
    raw_P: FeatureField,
    raw_Q: FeatureField,
    head: ProjectionHead,
    cfg: RunConfig,
) -> RegistrationResult:
    """:func:`register_clouds` on already downsampled views with their raw descriptors."""
    F_P, F_Q = project(raw_P, head), project(raw_Q, head)
    corrs = match_features(F_P, F_Q, "mutual", cfg.max_matches)
    if len(corrs) < 3:
        raise EmptySeedError(f"only {len(corrs)} mutual feature matches")
    try:
        verdict = cfg.make_estimator().filter(P, Q, corrs)
    except ValueError as err:
        raise EstimatorFailedError(str(err)) from err
    return RegistrationResult(verdict.pose, corrs.with_flags(verdict.inlier_flags), P, Q)


# --------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    cloud_p: Path
    cloud_q: Path
    pose: Path | None
    distance: float | None

    def load(self) -> tuple[PointCloud, PointCloud, RigidTransform | None]:
        P = formats.read_cloud(self.cloud_p)
        Q = formats.read_cloud(self.cloud_q)
        T = formats.read_poses(self.pose)[0] if self.pose is not None else None
        return P, Q, T


def read_manifest(corpus) -> list[PairRecord]:
    corpus = Path(corpus)
    path = corpus / "manifest.csv" if corpus.is_dir() else corpus
    header, rows = formats.read_csv(path, "manifest")
    if tuple(header) != formats.MANIFEST_HEADER:
        raise formats.FormatError(f"{path}: unexpected header {header}")
    base = path.parent
    out = []
    for row in rows:
        pair_id, cp, cq, pose, dist, _ = row
        out.append(
            PairRecord(
                pair_id, base / cp, base / cq, base / pose if pose else None,
                float(dist) if dist else None,
            )
        )
    return out


def _synth_one(args) -> tuple | None:
    k, cfg, scans = args
    seed = cfg.seed * 100_003 + k
    if scans:
        scan = formats.read_cloud(scans[k % len(scans)])
    else:
        scan = synthetic_scan(rng_seed=seed, n_points=cfg.scene_points)
    try:
        P, Q, T = make_synthetic_pair(scan, cfg.pair_spec(), rng_seed=seed)
    except GenerationFailedError as err:
        log.warning("pair %d skipped: %s", k, err)
        return None
    # overlap in P's frame, i.e. after undoing the pose on Q
    overlap = measure_overlap(P.points, inverse(T).apply(Q.points))
    return P, Q, T, overlap


def synth_corpus(out_dir, cfg: RunConfig, scans: Sequence[Path] = ()) -> tuple[int, int]:
    """Write ``cfg.count`` pairs plus ``manifest.csv``; returns ``(written, skipped)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scans = sorted(Path(s) for s in scans)
    results = parallel_map(_synth_one, [(k, cfg, scans) for k in range(cfg.count)], cfg.jobs)
    rows, skipped = [], 0
    for k, res in enumerate(results):
        if res is None:
            skipped += 1
            continue
        P, Q, T, overlap = res
        pid = f"pair_{k:05d}"
        formats.write_kitti_bin(out / f"{pid}_p.bin", P)
        formats.write_kitti_bin(out / f"{pid}_q.bin", Q)
        formats.write_poses(out / f"{pid}_pose.txt", [T])
        rows.append((pid, f"{pid}_p.bin", f"{pid}_q.bin", f"{pid}_pose.txt", pair_distance(T), overlap))
    formats.write_csv(out / "manifest.csv", "manifest", formats.MANIFEST_HEADER, rows)
    return len(rows), skipped


# --------------------------------------------------------------------------
# mining


@dataclass(eq=False)
class MiningRow:
    pair_id: str
    status: str
    seed_ir: float | None = None
    pass1_ir: float | None = None
    final_ir: float | None = None
    rre_deg: float | None = None
    rte_m: float | None = None
    n_dense: int | None = None
    n_sparse: int | None = None
    n_hard: int | None = None
    label: PseudoLabel | None = None

    def csv_row(self) -> tuple:
        return (
            self.pair_id, self.status, self.seed_ir, self.pass1_ir, self.final_ir,
            self.rre_deg, self.rte_m, self.n_dense, self.n_sparse, self.n_hard,
        )


def mine_pair(record: PairRecord, cfg: RunConfig, head: ProjectionHead) -> MiningRow:
    try:
        cloud_p, cloud_q, T_gt = record.load()
    except (OSError, ValueError) as err:
        log.error("pair %s unreadable: %s", record.pair_id, err)
        return MiningRow(record.pair_id, "error")
    P, Q = voxel_downsample(cloud_p, cfg.voxel), voxel_downsample(cloud_q, cfg.voxel)
    raw_P = extract_descriptors(P, cfg.descriptor())
    raw_Q = extract_descriptors(Q, cfg.descriptor())
    try:
        res = run_mining(P, Q, raw_P, raw_Q, head, cfg.mining(), cfg.make_estimator(), record.pair_id)
    except (MiningFailedError, AlgorithmError) as err:
        log.warning("pair %s: %s", record.pair_id, err)
        return MiningRow(record.pair_id, "mining_failed")
    row = MiningRow(
        record.pair_id, "ok", n_dense=len(res.label.dense), n_sparse=len(res.label.sparse),
        n_hard=len(res.hard), label=res.label,
    )
    if T_gt is not None:
        thr = cfg.ir_thresh
        if res.seeds_pass1 is not None:
            row.seed_ir = inlier_ratio(res.seeds_pass1, P, Q, T_gt, thr)
        if res.pass1 is not None:
            row.pass1_ir = inlier_ratio(res.pass1.correspondences, P, Q, T_gt, thr)
        row.final_ir = inlier_ratio(res.label.dense, P, Q, T_gt, thr)
        row.rre_deg, row.rte_m = rre(res.label.pose, T_gt), rte(res.label.pose, T_gt)
    return row


def _mine_job(args) -> MiningRow:
    return mine_pair(*args)


def mine_corpus(records: Sequence[PairRecord], cfg: RunConfig, head: ProjectionHead) -> list[MiningRow]:
    return parallel_map(_mine_job, [(r, cfg, head) for r in records], cfg.jobs)


# --------------------------------------------------------------------------
# training


def training_example(record: PairRecord, label: PseudoLabel, cfg: RunConfig) -> TrainingExample:
    cloud_p, cloud_q, T_gt = record.load()
    P, Q, P_s, Q_s = build_mixed_density_views(cloud_p, cloud_q, cfg.voxel, cfg.sparse_factor)
    desc = cfg.descriptor()
    try:
        label.dense.check_bounds(len(P), len(Q))
        label.sparse.check_bounds(len(P_s), len(Q_s))
    except IndexError as err:
        raise formats.FormatError(f"label for {record.pair_id} does not fit its views: {err}") from err
    return TrainingExample(
        extract_descriptors(P, desc), extract_descriptors(Q, desc),
        extract_descriptors(P_s, desc), extract_descriptors(Q_s, desc),
        label, P, Q, T_gt, record.pair_id, P_s, Q_s,
    )


def train_head(examples: Sequence[TrainingExample], cfg: RunConfig, on_epoch=None):
    return train_student_head(initial_head(cfg), examples, cfg.training(), on_epoch)


# --------------------------------------------------------------------------
# benchmark


@dataclass(eq=False)
class BenchRow:
    pair_id: str
    status: str
    distance: float
    report: MetricsReport | None
    ir: float | None
    n_corr: int

    def csv_row(self) -> tuple:
        rep = self.report
        return (
            self.pair_id, self.status, self.distance,
            None if rep is None else rep.rre_deg, None if rep is None else rep.rte_m,
            None if rep is None else rep.success, self.ir, self.n_corr,
        )


def bench_pair(record: PairRecord, cfg: RunConfig, head: ProjectionHead) -> BenchRow:
    bins = cfg.distance_bins()
    try:
        cloud_p, cloud_q, T_gt = record.load()
    except (OSError, ValueError) as err:
        log.error("pair %s unreadable: %s", record.pair_id, err)
        return BenchRow(record.pair_id, "error", record.distance or 0.0, None, None, 0)
    if T_gt is None:
        return BenchRow(record.pair_id, "no_ground_truth", 0.0, None, None, 0)
    d = pair_distance(T_gt)
    b = find_bin(d, bins)
    if b is None:
        return BenchRow(record.pair_id, "unbinned", d, None, None, 0)
    try:
        res = register_clouds(cloud_p, cloud_q, head, cfg)
    except AlgorithmError as err:
        log.warning("pair %s: %s", record.pair_id, err)
        return BenchRow(record.pair_id, "failed", d, MetricsReport.failure(b, record.pair_id), None, 0)
    rep = MetricsReport.evaluate(res.pose, T_gt, b, record.pair_id, cfg.rre_thresh, cfg.rte_thresh)
    ir = inlier_ratio(res.correspondences, res.P, res.Q, T_gt, cfg.ir_thresh)
    return BenchRow(record.pair_id, "ok", d, rep, ir, len(res.correspondences))


def _bench_job(args) -> BenchRow:
    return bench_pair(*args)


def bench_corpus(records: Sequence[PairRecord], cfg: RunConfig, head: ProjectionHead):
    """Per-pair rows and the recall summary over the binned pairs.

    ``teacher_ir`` in the summary is the mean inlier ratio of the mutual
    matches the head produced, over pairs that reached the estimator.
    """
    rows = parallel_map(_bench_job, [(r, cfg, head) for r in records], cfg.jobs)
    reports = [r.report for r in rows if r.report is not None]
    irs = [r.ir for r in rows if r.ir is not None]
    unbinned = sum(r.status == "unbinned" for r in rows)
    if unbinned:
        log.warning("%d pairs fall outside every distance bin and are not scored", unbinned)
    if not reports:
        return rows, None
    summary = registration_recall(
        reports, cfg.rre_thresh, cfg.rte_thresh, cfg.distance_bins(),
        float(np.mean(irs)) if irs else None,
    )
    return rows, summary


__all__ = [
    "BenchRow", "MiningRow", "PairRecord", "RegistrationResult", "bench_corpus", "bench_pair",
    "initial_head", "mine_corpus", "mine_pair", "parallel_map", "read_manifest",
    "register_clouds", "register_features", "synth_corpus", "train_head", "training_example",
]
