from __future__ import annotations

import math
import shutil

import numpy as np
import pytest

from anchorreg import cli, formats, pipeline
from anchorreg.config import load_config
from anchorreg.errors import DivergedError
from anchorreg.features import ProjectionHead
from anchorreg.geometry import PointCloud, RigidTransform
from anchorreg.losses import EpochLog
from anchorreg.metrics import rre, rte
from anchorreg.scenes import synthetic_scan

SMALL = ["--set", "scene_points=3000"]


def rows(path, schema):
    return formats.read_csv(path, schema)[1]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "corpus"
    assert cli.main(["synth", "--count", "4", "--out", str(out), "--seed", "1", "--set", "noise_sigma=0", *SMALL]) == 0
    assert cli.main(["mine", str(out), "--out", str(root / "mine"), "--seed", "1"]) == 0
    return root


# --- synth


def test_synth_count_zero(tmp_path):
    assert cli.main(["synth", "--count", "0", "--out", str(tmp_path / "c")]) == 0
    assert rows(tmp_path / "c" / "manifest.csv", "manifest") == []


def test_synth_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--count", "2", "--out", str(tmp_path / name), "--seed", "5", *SMALL]) == 0
    for f in ("manifest.csv", "pair_00000_p.bin", "pair_00001_pose.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_accounts_for_skipped_pairs(tmp_path):
    # full overlap cannot be reached with gaps in the scan, so every pair is skipped
    cfg = load_config(overrides={"count": 3, "overlap": 0.99, "scene_points": 2000})
    written, skipped = pipeline.synth_corpus(tmp_path / "x", cfg)
    assert (written, skipped) == (0, 3)
    cfg = load_config(overrides={"count": 3, "scene_points": 2000})
    written, skipped = pipeline.synth_corpus(tmp_path / "y", cfg)
    assert written + skipped == 3
    assert len(rows(tmp_path / "y" / "manifest.csv", "manifest")) == written


def test_synth_missing_scan_dir(tmp_path):
    assert cli.main(["synth", "--scans", str(tmp_path / "none"), "--out", str(tmp_path / "c")]) == 2


def test_synth_from_scan_files(tmp_path):
    scans = tmp_path / "scans"
    scans.mkdir()
    formats.write_ply(scans / "s.ply", synthetic_scan(0, n_points=3000))
    assert cli.main(["synth", "--scans", str(scans), "--count", "2", "--out", str(tmp_path / "c")]) == 0
    assert len(rows(tmp_path / "c" / "manifest.csv", "manifest")) == 2


# --- mine


def test_mine_report(corpus):
    report = rows(corpus / "mine" / "mining_report.csv", "mining_report")
    assert len(report) == len(rows(corpus / "corpus" / "manifest.csv", "manifest")) == 4
    ok = [r for r in report if r[1] == "ok"]
    assert ok and all(float(r[4]) >= 0.99 for r in ok)
    assert len(list((corpus / "mine" / "labels").glob("*.label"))) == len(ok)


def test_mine_isolates_corrupt_pair(corpus, tmp_path):
    c = tmp_path / "c"
    shutil.copytree(corpus / "corpus", c)
    (c / "pair_00001_q.bin").write_bytes(b"\0" * 5)
    assert cli.main(["mine", str(c), "--out", str(tmp_path / "m"), "--seed", "1"]) == 0
    status = {r[0]: r[1] for r in rows(tmp_path / "m" / "mining_report.csv", "mining_report")}
    assert status["pair_00001"] == "error" and len(status) == 4
    assert sum(s == "ok" for s in status.values()) >= 1


def test_mine_missing_corpus(tmp_path):
    assert cli.main(["mine", str(tmp_path / "nothing"), "--out", str(tmp_path / "m")]) == 2


# --- register


def test_register_self_is_identity(corpus, capsys):
    cloud = str(corpus / "corpus" / "pair_00000_p.bin")
    capsys.readouterr()
    assert cli.main(["register", cloud, cloud]) == 0
    T = formats.parse_pose(capsys.readouterr().out)
    assert np.abs(T.matrix - np.eye(4)).max() < 1e-6


def test_register_synthetic_pair(corpus, capsys, tmp_path):
    c = corpus / "corpus"
    capsys.readouterr()
    report = tmp_path / "r.csv"
    assert cli.main(["register", str(c / "pair_00002_p.bin"), str(c / "pair_00002_q.bin"), "--report", str(report)]) == 0
    T = formats.parse_pose(capsys.readouterr().out.strip())
    T_gt = formats.read_poses(c / "pair_00002_pose.txt")[0]
    assert rre(T, T_gt) <= 5.0 and rte(T, T_gt) <= 2.0
    (row,) = rows(report, "register")
    assert int(row[3]) <= int(row[2])


def test_register_unreadable_file(tmp_path):
    bad = tmp_path / "a.bin"
    bad.write_bytes(b"\0" * 7)
    assert cli.main(["register", str(bad), str(bad)]) == 2
    assert cli.main(["register", str(tmp_path / "missing.bin"), str(bad)]) == 2


def test_register_without_matches_has_its_own_code(tmp_path):
    lonely = tmp_path / "a.ply"
    formats.write_ply(lonely, PointCloud(np.array([[0.0, 0, 0], [40.0, 0, 0]])))
    assert cli.main(["register", str(lonely), str(lonely)]) == 4


# --- train


def test_train_zero_epochs_keeps_initial_head(corpus, tmp_path):
    out = tmp_path / "t"
    code = cli.main(["train", str(corpus / "corpus"), str(corpus / "mine" / "labels"), "--out", str(out),
                     "--seed", "2", "--set", "epochs=0"])
    assert code == 0
    head = formats.read_head(out / "head.bin")
    init = pipeline.initial_head(load_config(overrides={"seed": 2}))
    assert np.array_equal(head.weight, init.weight.astype(np.float32))
    assert rows(out / "training_log.csv", "training_log") == []


def test_train_log_has_one_finite_row_per_epoch(corpus, tmp_path):
    out = tmp_path / "t"
    code = cli.main(["train", str(corpus / "corpus"), str(corpus / "mine" / "labels"), "--out", str(out),
                     "--set", "epochs=3"])
    assert code == 0
    log = formats.read_csv(out / "training_log.csv", "training_log")
    assert tuple(log[0]) == formats.TRAINING_LOG_HEADER
    assert [int(r[0]) for r in log[1]] == [1, 2, 3]
    assert all(math.isfinite(float(r[1])) for r in log[1])


def test_train_divergence_keeps_partial_log(corpus, tmp_path, monkeypatch):
    def explode(examples, cfg, on_epoch=None):
        err = DivergedError("mean loss exploded")
        err.partial_log = [EpochLog(1, 0.5, 0.1, 1.0), EpochLog(2, 50.0, 0.1, 1.0)]
        raise err

    monkeypatch.setattr(pipeline, "train_head", explode)
    out = tmp_path / "t"
    code = cli.main(["train", str(corpus / "corpus"), str(corpus / "mine" / "labels"), "--out", str(out)])
    assert code == 3
    assert len(rows(out / "training_log.csv", "training_log")) == 2 and not (out / "head.bin").exists()


def test_train_without_labels(corpus, tmp_path):
    empty = tmp_path / "labels"
    empty.mkdir()
    assert cli.main(["train", str(corpus / "corpus"), str(empty), "--out", str(tmp_path / "t")]) == 2


# --- bench


def test_bench_summary_round_trips(corpus):
    out = corpus / "bench"
    assert cli.main(["bench", str(corpus / "corpus"), "--out", str(out)]) == 0
    summary = formats.read_summary(out / "summary.csv")
    assert 0.0 <= summary.mrr <= 1.0
    assert len(rows(out / "pairs.csv", "bench_pairs")) == 4


def test_trained_head_beats_random_head(corpus, tmp_path):
    c, labels = str(corpus / "corpus"), str(corpus / "mine" / "labels")
    assert cli.main(["train", c, labels, "--out", str(tmp_path / "t"), "--set", "epochs=3"]) == 0
    formats.write_head(tmp_path / "random.bin", ProjectionHead.random(33, 16, 0))
    # harder pairs than the training corpus, so that some registrations fail
    hard = str(tmp_path / "hard")
    flags = ["--set", "overlap=0.4", "--set", "max_translation=30", "--set", "noise_sigma=0.02", *SMALL]
    assert cli.main(["synth", "--count", "8", "--seed", "2", "--out", hard, *flags]) == 0
    mrr = {}
    for name, head in (("trained", tmp_path / "t" / "head.bin"), ("random", tmp_path / "random.bin")):
        assert cli.main(["bench", hard, "--head", str(head), "--out", str(tmp_path / name)]) in (0, 3)
        path = tmp_path / name / "summary.csv"
        mrr[name] = formats.read_summary(path).mrr if path.exists() else 0.0
    assert mrr["trained"] >= mrr["random"]


# --- usage and configuration


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["synth", "--count", "many"],
        ["synth", "--no-such-flag"],
        ["register", "only-one.bin"],
    ],
)
def test_usage_errors_exit_one(argv, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 1


@pytest.mark.parametrize(
    "flags",
    [["--voxel", "-1"], ["--set", "bogus=1"], ["--set", "novalue"], ["--lambda-1", "-0.5"], ["--top-k", "0"]],
)
def test_invalid_config_fails_fast(tmp_path, flags):
    out = tmp_path / "c"
    assert cli.main(["synth", "--count", "1", "--out", str(out), *flags]) == 1
    assert not out.exists()


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("voxel = fast\n")
    assert cli.main(["synth", "--count", "0", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 1
    assert cli.main(["synth", "--count", "0", "--config", str(tmp_path / "no.cfg"), "--out", str(tmp_path / "c")]) == 2


def test_config_file_and_flags_combine(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count = 0\nvoxel = 0.5\n")
    args = cli.build_parser().parse_args(["synth", "--config", str(cfg), "--voxel", "0.4"])
    resolved = cli.resolve_config(args)
    assert resolved.count == 0 and resolved.voxel == 0.4


def test_every_documented_flag_is_accepted():
    flags = [
        "--config", "x", "--seed", "1", "--jobs", "1", "--out", "o", "--rre-thresh", "5", "--rte-thresh", "2",
        "--voxel", "0.3", "--sparse-factor", "2", "--top-k", "5", "--max-iters", "3", "--tau-c", "0.6",
        "--lambda-corr", "1", "--lambda-1", "0.5",
    ]
    for cmd in (["synth"], ["mine", "c"], ["register", "a", "b"], ["train", "c", "l"], ["bench", "c"]):
        args = cli.build_parser().parse_args([*cmd, *flags])
        assert args.seed == 1 and args.lambda_1 == 0.5


def test_identity_pose_format():
    assert formats.format_pose(RigidTransform.identity()).split() == [
        "1.0", "0.0", "0.0", "0.0", "0.0", "1.0", "0.0", "0.0", "0.0", "0.0", "1.0", "0.0",
    ]
