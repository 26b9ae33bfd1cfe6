"""On-disk formats: scans, poses, feature dumps, head binaries, pseudo-labels and CSVs.

Every CSV starts with a schema line ``# anchorreg.<name> v<version>`` followed
by an ordinary header row. Floats are written with ``repr`` so values
round-trip exactly and reruns produce identical bytes.

Pseudo-label files are line-oriented text, one or more records per file::

    anchorreg-pseudolabel v1
    pair <pair_id>
    pose <12 numbers, row-major [R | t]>
    dim <D>
    anchor_pos <D numbers>
    anchor_neg <D numbers>
    dense <N>
    <i> <j>            (N lines)
    sparse <M>
    <i> <j>            (M lines)
    end
"""

from __future__ import annotations

import csv
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .correspondences import CorrespondenceSet, Label
from .features import FeatureField, ProjectionHead
from .geometry import DistanceBin, PointCloud, RigidTransform
from .metrics import BenchmarkSummary

FEATURE_MAGIC = b"AFF1"
HEAD_MAGIC = b"AHD1"
LABEL_HEADER = "anchorreg-pseudolabel v1"
CSV_VERSION = 1


class FormatError(ValueError):
    """A file exists but its contents do not follow the expected layout."""


# --------------------------------------------------------------------------
# point clouds and poses


def read_kitti_bin(path) -> PointCloud:
    """Little-endian float32 records ``(x, y, z, intensity)``."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.isfinite(rec).all():
        raise FormatError(f"{path}: non-finite values")
    return PointCloud(rec[:, :3], rec[:, 3])


def write_kitti_bin(path, cloud: PointCloud) -> None:
    attr = cloud.attribute if cloud.attribute is not None else np.zeros(len(cloud))
    rec = np.column_stack([cloud.points, attr]).astype("<f4")
    Path(path).write_bytes(rec.tobytes())


def read_ply(path) -> PointCloud:
    """ASCII PLY with a vertex element whose first three properties are x, y, z."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic")
    n_vertex, props, end = None, [], None
    for k, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format" and tok[1:2] != ["ascii"]:
            raise FormatError(f"{path}: only ascii PLY is supported")
        if tok[0] == "element":
            if tok[1] != "vertex" and n_vertex is None:
                raise FormatError(f"{path}: vertex element must come first")
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
        if tok[0] == "property" and n_vertex is not None and len(props) < 64:
            props.append(tok[-1])
        if tok[0] == "end_header":
            end = k
            break
    if end is None or n_vertex is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: malformed header")
    body = lines[end + 1 : end + 1 + n_vertex]
    if len(body) != n_vertex:
        raise FormatError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    try:
        pts = np.array([[float(v) for v in row.split()[:3]] for row in body]).reshape(-1, 3)
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from err
    return PointCloud(pts)


def write_ply(path, cloud: PointCloud) -> None:
    out = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    out += ["property double x", "property double y", "property double z", "end_header"]
    out += [" ".join(repr(float(v)) for v in p) for p in cloud.points]
    Path(path).write_text("\n".join(out) + "\n")


def read_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".bin":
        return read_kitti_bin(path)
    if suffix == ".ply":
        return read_ply(path)
    raise FormatError(f"{path}: unknown cloud extension {suffix!r}")


def write_cloud(path, cloud: PointCloud) -> None:
    if Path(path).suffix.lower() == ".ply":
        write_ply(path, cloud)
    else:
        write_kitti_bin(path, cloud)


def format_pose(T: RigidTransform) -> str:
    return " ".join(repr(float(v)) for v in T.matrix[:3].reshape(-1))


def parse_pose(text: str) -> RigidTransform:
    vals = text.split()
    if len(vals) != 12:
        raise FormatError(f"pose needs 12 numbers, got {len(vals)}")
    try:
        M = np.array([float(v) for v in vals]).reshape(3, 4)
    except ValueError as err:
        raise FormatError(str(err)) from err
    return RigidTransform.from_matrix(M)


def read_poses(path) -> list[RigidTransform]:
    return [parse_pose(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_poses(path, poses: Iterable[RigidTransform]) -> None:
    Path(path).write_text("".join(format_pose(T) + "\n" for T in poses))


# --------------------------------------------------------------------------
# binaries


def write_features(path, field: FeatureField) -> None:
    """Header ``magic, count, dim`` (uint32 LE after the 4-byte magic), then float32 rows.

    The validity mask is not stored; invalid rows are written as zeros.
    """
    v = np.where(field.valid[:, None], field.vectors, 0.0).astype("<f4")
    header = FEATURE_MAGIC + struct.pack("<II", *v.shape)
    Path(path).write_bytes(header + v.tobytes())


def read_features(path) -> FeatureField:
    """Rows that are entirely zero come back marked invalid."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not a feature dump")
    n, d = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * n * d:
        raise FormatError(f"{path}: expected {n}x{d} floats")
    v = np.frombuffer(raw[12:], dtype="<f4").reshape(n, d).astype(np.float64)
    return FeatureField(v, np.any(v != 0, axis=1))


def write_head(path, head: ProjectionHead) -> None:
    """Header ``magic, d_out, d_in, normalize`` then weight rows and bias as float32."""
    header = HEAD_MAGIC + struct.pack("<III", head.d_out, head.d_in, int(head.normalize_output))
    body = np.concatenate([head.weight.reshape(-1), head.bias]).astype("<f4")
    Path(path).write_bytes(header + body.tobytes())


def read_head(path) -> ProjectionHead:
    raw = Path(path).read_bytes()
    if raw[:4] != HEAD_MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not a head file")
    d_out, d_in, norm = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * (d_out * d_in + d_out):
        raise FormatError(f"{path}: size does not match {d_out}x{d_in} head")
    body = np.frombuffer(raw[16:], dtype="<f4").astype(np.float64)
    return ProjectionHead(body[: d_out * d_in].reshape(d_out, d_in), body[d_out * d_in :], bool(norm))


# --------------------------------------------------------------------------
# pseudo-labels


def _floats(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def format_pseudo_label(label) -> str:
    out = [LABEL_HEADER, f"pair {label.pair_id}", f"pose {format_pose(label.pose)}"]
    out += [f"dim {label.anchors.dim}", f"anchor_pos {_floats(label.anchors.positive)}"]
    out += [f"anchor_neg {_floats(label.anchors.negative)}"]
    for name, corrs in (("dense", label.dense), ("sparse", label.sparse)):
        out.append(f"{name} {len(corrs)}")
        out += [f"{i} {j}" for i, j in corrs.pairs]
    out.append("end")
    return "\n".join(out) + "\n"


def write_pseudo_labels(path, labels: Sequence) -> None:
    Path(path).write_text("".join(format_pseudo_label(lb) for lb in labels))


def read_pseudo_labels(path) -> list:
    from .fgcm import AnchorPair, PseudoLabel

    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    records, k = [], 0

    def take(key: str) -> str:
        nonlocal k
        if k >= len(lines):
            raise FormatError(f"{path}: truncated before {key!r}")
        head, _, rest = lines[k].partition(" ")
        if head != key:
            raise FormatError(f"{path}:{k + 1}: expected {key!r}, got {head!r}")
        k += 1
        return rest

    def pairs(n: int) -> CorrespondenceSet:
        nonlocal k
        if k + n > len(lines):
            raise FormatError(f"{path}: truncated index list")
        arr = np.array([ln.split() for ln in lines[k : k + n]], dtype=np.int64).reshape(-1, 2)
        k += n
        return CorrespondenceSet(arr, np.full(n, Label.INLIER, dtype=np.int8))

    try:
        while k < len(lines):
            if lines[k].strip() != LABEL_HEADER:
                raise FormatError(f"{path}:{k + 1}: expected header {LABEL_HEADER!r}")
            k += 1
            pair_id = take("pair")
            pose = parse_pose(take("pose"))
            dim = int(take("dim"))
            pos = np.array(take("anchor_pos").split(), dtype=np.float64)
            neg = np.array(take("anchor_neg").split(), dtype=np.float64)
            if len(pos) != dim or len(neg) != dim:
                raise FormatError(f"{path}: anchor length differs from dim {dim}")
            dense = pairs(int(take("dense")))
            sparse = pairs(int(take("sparse")))
            take("end")
            records.append(PseudoLabel(dense, sparse, AnchorPair(pos, neg), pose, pair_id))
    except ValueError as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(f"{path}: {err}") from err
    return records


# --------------------------------------------------------------------------
# CSV


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_float(s: str) -> float | None:
    return None if s == "" else float(s)


def write_csv(path, schema: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# anchorreg.{schema} v{CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def read_csv(path, schema: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        expected = f"# anchorreg.{schema} v{CSV_VERSION}"
        if first != expected:
            raise FormatError(f"{path}: schema line {first!r}, expected {expected!r}")
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: missing header row")
    return rows[0], rows[1:]


TRAINING_LOG_HEADER = ("epoch", "mean_loss", "benchmark_IR", "wall_ms")
SUMMARY_HEADER = ("bin_lo", "bin_hi", "rr", "n_pairs")
SUMMARY_TRAILER = ("mrr", "mean_rre", "mean_rte", "teacher_ir")
MINING_HEADER = (
    "pair_id", "status", "seed_IR", "pass1_IR", "final_IR",
    "rre_deg", "rte_m", "n_dense", "n_sparse", "n_hard",
)
MANIFEST_HEADER = ("pair_id", "cloud_p", "cloud_q", "pose", "distance", "overlap")
PAIRS_HEADER = ("pair_id", "status", "distance", "rre_deg", "rte_m", "success", "ir", "n_corr")


def write_training_log(path, logs) -> None:
    rows = [(e.epoch, e.mean_loss, e.benchmark_ir, e.wall_ms) for e in logs]
    write_csv(path, "training_log", TRAINING_LOG_HEADER, rows)


def write_summary(path, summary: BenchmarkSummary) -> None:
    """Bin rows, then a second header and one trailer row with the aggregates."""
    rows: list[Sequence] = [
        (b.d_min, b.d_max, summary.rr_per_bin[b], summary.n_per_bin[b]) for b in summary.rr_per_bin
    ]
    rows.append(SUMMARY_TRAILER)
    rows.append((summary.mrr, summary.mean_rre, summary.mean_rte, summary.teacher_ir))
    write_csv(path, "summary", SUMMARY_HEADER, rows)


def read_summary(path) -> BenchmarkSummary:
    header, rows = read_csv(path, "summary")
    if tuple(header) != SUMMARY_HEADER:
        raise FormatError(f"{path}: unexpected header {header}")
    try:
        split = [tuple(r) for r in rows].index(SUMMARY_TRAILER)
    except ValueError:
        raise FormatError(f"{path}: missing trailer") from None
    if len(rows) != split + 2:
        raise FormatError(f"{path}: trailer must be the last two rows")
    rr, n = {}, {}
    for lo, hi, r, cnt in rows[:split]:
        b = DistanceBin(float(lo), float(hi))
        rr[b] = parse_float(r)
        n[b] = int(cnt)
    mrr, mean_rre, mean_rte, tir = (parse_float(v) for v in rows[split + 1])
    return BenchmarkSummary(
        rr, n, mrr, math.nan if mean_rre is None else mean_rre,
        math.nan if mean_rte is None else mean_rte, tir,
    )
