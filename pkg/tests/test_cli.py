"""End-to-end tests for the command-line interface and project manifest."""

import csv
import json
import select
import subprocess
import sys
import urllib.request

import numpy as np
import pytest

from calcquant.cli import (
    MANIFEST_ENV,
    default_manifest_path,
    load_manifest,
    main,
    save_manifest,
)
from calcquant.lesions import read_lesion_table_csv
from calcquant.volgrid import Grid3, Mask, Volume, read_grid_file, write_grid_file


def run_cli(capsys, manifest, *argv):
    """Run one command in-process; returns (exit code, stdout JSON, stderr JSON)."""
    code = main(["--manifest", str(manifest), *map(str, argv)])
    captured = capsys.readouterr()
    out = json.loads(captured.out) if captured.out.strip() else None
    err = json.loads(captured.err) if captured.err.strip() else None
    return code, out, err


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    """One shared project: phantom scan generated and fused to a segmentation."""
    root = tmp_path_factory.mktemp("project")
    manifest = root / "calcquant.json"
    data = root / "data"
    phantom_args = [
        "--manifest", str(manifest), "phantom", "--seed", "7",
        "--dims", "64,64,48", "--spacing", "1,1,1", "--lesions", "4",
        "--out-dir", str(data),
    ]
    assert main(phantom_args) == 0
    fuse_args = [
        "--manifest", str(manifest), "fuse", "--scan", "phantom7",
        "--probmap", str(data / "phantom7_indicator.vgf"),
        "--out-dir", str(root / "derived"),
    ]
    assert main(fuse_args) == 0
    truth = json.loads((data / "phantom7_truth.json").read_text())
    return {"root": root, "manifest": manifest, "data": data, "truth": truth}


class TestManifest:
    def test_missing_file_yields_defaults(self, tmp_path):
        manifest = load_manifest(tmp_path / "nope.json")
        config = manifest["config"]
        assert config["hu_threshold"] == 130.0
        assert config["prob_threshold"] == 0.5
        assert config["failure_threshold_hu"] == 300.0
        assert config["smooth_sigma"] == 0.6
        assert manifest["scans"] == {}

    def test_save_is_atomic_json_with_sidecar(self, tmp_path):
        path = tmp_path / "m.json"
        manifest = load_manifest(path)
        save_manifest(manifest, path, "unit")
        save_manifest(manifest, path, "unit")
        assert json.loads(path.read_text())["scans"] == {}
        runs = (tmp_path / "m.json.runs.jsonl").read_text().splitlines()
        assert len(runs) == 2
        assert all(json.loads(line)["command"] == "unit" for line in runs)
        assert "utc" not in path.read_text()

    def test_volume_without_segmentation_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"scans": {"s": {"volume_mm3": 5.0}}}))
        with pytest.raises(ValueError, match="volume"):
            load_manifest(path)

    def test_env_var_sets_default_path(self, monkeypatch):
        monkeypatch.setenv(MANIFEST_ENV, "/elsewhere/m.json")
        assert str(default_manifest_path()) == "/elsewhere/m.json"


class TestPhantomFuse:
    def test_fused_volume_matches_ground_truth_exactly(self, project, capsys):
        manifest = json.loads(project["manifest"].read_text())
        entry = manifest["scans"]["phantom7"]
        assert entry["volume_mm3"] == project["truth"]["truth_volume_mm3"]
        seg = read_grid_file(entry["segmentation_path"])
        truth = read_grid_file(project["data"] / "phantom7_truth.vgf")
        np.testing.assert_array_equal(seg.data, truth.data)

    def test_fuse_emits_spec_record(self, project, capsys):
        code, out, _ = run_cli(
            capsys, project["manifest"], "fuse", "--scan", "phantom7",
            "--out-dir", project["root"] / "derived",
        )
        assert code == 0
        (record,) = out["results"]
        assert set(record) == {"scan_id", "volume_mm3", "threshold", "hu_threshold"}
        assert record["threshold"] == 0.5
        assert record["hu_threshold"] == 130.0

    def test_refuse_is_byte_identical(self, project, capsys):
        manifest_before = project["manifest"].read_bytes()
        seg_path = json.loads(manifest_before)["scans"]["phantom7"][
            "segmentation_path"
        ]
        seg_before = open(seg_path, "rb").read()
        code, _, _ = run_cli(
            capsys, project["manifest"], "fuse", "--scan", "phantom7",
            "--out-dir", project["root"] / "derived",
        )
        assert code == 0
        assert project["manifest"].read_bytes() == manifest_before
        assert open(seg_path, "rb").read() == seg_before

    def test_prob_threshold_one_empties_segmentation(self, project, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, project["manifest"], "fuse", "--scan", "phantom7",
            "--prob-threshold", "1.0", "--out-dir", tmp_path,
        )
        assert code == 0
        assert out["results"][0]["volume_mm3"] == 0.0
        # Restore the manifest-recorded segmentation for later tests.
        run_cli(
            capsys, project["manifest"], "fuse", "--scan", "phantom7",
            "--out-dir", project["root"] / "derived",
        )

    def test_unknown_scan_is_machine_readable_error(self, project, capsys):
        code, out, err = run_cli(
            capsys, project["manifest"], "fuse", "--scan", "ghost"
        )
        assert code == 1
        assert out is None
        assert "not in manifest" in err["error"]
        assert err["command"] == "fuse"

    def test_probmap_flag_requires_single_scan(self, project, capsys):
        code, _, err = run_cli(
            capsys, project["manifest"], "fuse", "--scan", "a", "--scan", "b",
            "--probmap", "x.vgf",
        )
        assert code == 1
        assert "exactly one" in err["error"]


class TestPreprocessCmd:
    def test_all_air_scan_reports_no_positive_voxels(self, tmp_path, capsys):
        grid = Grid3((24, 24, 16), (1.0, 1.0, 1.0))
        air = Volume(grid, np.full(grid.dims, -1024.0))
        air_path = tmp_path / "air.vgf"
        write_grid_file(air, air_path)
        ref_path = tmp_path / "ref.vgf"
        ramp = np.linspace(0, 400, grid.voxel_count).reshape(grid.dims)
        write_grid_file(Volume(grid, ramp), ref_path)
        code, _, err = run_cli(
            capsys, tmp_path / "m.json", "preprocess", air_path,
            "--reference", ref_path, "--out-dir", tmp_path / "derived",
        )
        assert code == 1
        assert err["error"] == "no positive-HU voxels"

    def test_reference_required_on_first_run(self, tmp_path, capsys):
        grid = Grid3((8, 8, 8), (1.0, 1.0, 1.0))
        scan = tmp_path / "s.vgf"
        write_grid_file(Volume(grid, np.zeros(grid.dims)), scan)
        code, _, err = run_cli(
            capsys, tmp_path / "m.json", "preprocess", scan,
            "--out-dir", tmp_path / "derived",
        )
        assert code == 1
        assert "no reference space configured" in err["error"]

    def test_self_preprocess_standardizes_to_canonical_grid(self, tmp_path, capsys):
        manifest = tmp_path / "m.json"
        code, out, _ = run_cli(
            capsys, manifest, "phantom", "--seed", "3", "--dims", "48,48,32",
            "--spacing", "1,1,1", "--lesions", "3", "--out-dir", tmp_path / "data",
        )
        assert code == 0
        scan_path = out["volume_path"]
        code, out, _ = run_cli(
            capsys, manifest, "preprocess", scan_path, "--reference", scan_path,
            "--recenter", "--out-dir", tmp_path / "derived",
        )
        assert code == 0
        report = out["scans"]["phantom3"]
        assert report["failed"] is False
        assert report["mae_hu"] < 300.0
        pre = read_grid_file(report["preprocessed_path"])
        assert pre.grid.dims == (240, 240, 100)
        assert pre.grid.spacing == (0.5, 0.5, 0.5)
        saved = json.loads(manifest.read_text())
        assert saved["config"]["reference_space"]["grid"]["dims"] == [240, 240, 100]
        reg = saved["scans"]["phantom3"]["registration"]
        assert np.asarray(reg["transform"]["linear"]).shape == (3, 3)


TABLE_3_ALL = {2: 14, 1: 117, 0: 69, -1: 86, -2: 8}


class TestEvalCmd:
    def test_grade_counts_give_published_p_value(self, tmp_path, capsys):
        path = tmp_path / "grades.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["region_id", "grade"])
            row = 0
            for grade, count in TABLE_3_ALL.items():
                for _ in range(count):
                    writer.writerow([f"r{row:03d}", grade])
                    row += 1
        code, out, _ = run_cli(
            capsys, tmp_path / "m.json", "eval", "--grades", path
        )
        assert code == 0
        assert out["wilcoxon"]["p_two_sided"] == pytest.approx(0.012, abs=0.005)

    def test_paired_volumes_agreement_report(self, tmp_path, capsys):
        path = tmp_path / "volumes.csv"
        rng = np.random.default_rng(0)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "manual_mm3", "auto_mm3"])
            for k in range(12):
                v = rng.uniform(10, 400)
                writer.writerow([f"p{k}", repr(v), repr(v * 1.05 + 1)])
        code, out, _ = run_cli(
            capsys, tmp_path / "m.json", "eval", "--volumes", path,
            "--replications", "200", "--seed", "1",
        )
        assert code == 0
        agreement = out["agreement"]
        assert 0.9 < agreement["icc21"]["estimate"] <= 1.0
        assert agreement["spearman"]["estimate"] == 1.0
        assert len(agreement["bland_altman"]) == 2

    def test_threshold_sweep_writes_curve_csv(self, project, capsys, tmp_path):
        out_csv = tmp_path / "curves.csv"
        code, out, _ = run_cli(
            capsys, project["manifest"], "eval", "--curves",
            "--truth", f"phantom7={project['data'] / 'phantom7_truth.vgf'}",
            "--thresholds", "0,0.5,1", "--out", out_csv,
        )
        assert code == 0
        assert out["curves"]["points"] == 3
        with open(out_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["threshold"]) for r in rows] == [0.0, 0.5, 1.0]
        assert float(rows[0]["recall"]) == 1.0
        assert float(rows[0]["precision"]) == 1.0
        assert float(rows[2]["recall"]) == 0.0
        assert rows[2]["precision"] == ""

    def test_exactly_one_mode_required(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, tmp_path / "m.json", "eval")
        assert code == 1
        assert "exactly one" in err["error"]
        code, _, err = run_cli(
            capsys, tmp_path / "m.json", "eval", "--grades", "a", "--curves"
        )
        assert code == 1


class TestLesionsCmd:
    def test_tables_against_truth_mask(self, project, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, project["manifest"], "lesions", "--scan", "phantom7",
            "--manual", project["data"] / "phantom7_truth.vgf",
            "--out-dir", tmp_path,
        )
        assert code == 0
        n_lesions = len(project["truth"]["lesions"])
        assert out["automated"]["lesions"] == n_lesions
        assert out["automated"]["overlapping"] == n_lesions
        assert out["automated"]["false_positive"] == 0
        assert out["manual"]["false_negative"] == 0
        records = read_lesion_table_csv(out["manual"]["path"])
        assert all(r.category == "overlapping" for r in records)
        total = sum(r.volume_mm3 for r in records)
        assert total == pytest.approx(project["truth"]["truth_volume_mm3"])

    def test_histogram_fractions_sum_to_hundred(self, project, capsys, tmp_path):
        run_cli(
            capsys, project["manifest"], "lesions", "--scan", "phantom7",
            "--manual", project["data"] / "phantom7_truth.vgf",
            "--out-dir", tmp_path,
        )
        table = tmp_path / "phantom7_lesions_manual.csv"
        out_json = tmp_path / "hist.json"
        code, out, _ = run_cli(
            capsys, project["manifest"], "lesions", "--hist", "--table", table,
            "--percentiles", "50,100", "--out", out_json,
        )
        assert code == 0
        matrix = np.asarray(out["hist2d"]["matrix_percent"])
        assert matrix.shape == (2, 2)
        assert matrix.sum() == pytest.approx(100.0)
        assert json.loads(out_json.read_text())["matrix_percent"] is not None


class TestCoxCmd:
    def test_simulate_then_fit_presence_model(self, tmp_path, capsys):
        cohort = tmp_path / "cohort.csv"
        code, out, _ = run_cli(
            capsys, tmp_path / "m.json", "cox", "--simulate", "400",
            "--seed", "3", "--out", cohort,
        )
        assert code == 0
        assert out["simulated"]["n"] == 400
        assert 0 < out["simulated"]["events"] < 400
        code, out, _ = run_cli(
            capsys, tmp_path / "m.json", "cox", "--survival", cohort,
            "--exposure", "presence",
        )
        assert code == 0
        fit = out["fit"]
        assert fit["converged"] is True
        assert 1.0 < fit["exposure_hr"] < 4.0
        lo, hi = fit["exposure_hr_ci"]
        assert lo < fit["exposure_hr"] < hi

    def test_exclusion_grid_reference_cell(self, tmp_path, capsys):
        from calcquant.lesions import LesionRecord, write_lesion_table_csv

        cohort = tmp_path / "cohort.csv"
        run_cli(
            capsys, tmp_path / "m.json", "cox", "--simulate", "150",
            "--seed", "4", "--out", cohort,
        )
        lesion_dir = tmp_path / "lesions"
        lesion_dir.mkdir()
        rng = np.random.default_rng(8)
        for pid in ("s00000", "s00001", "s00002", "s00003"):
            records = [
                LesionRecord(
                    lesion_id=k + 1,
                    participant_id=pid,
                    source="automated",
                    voxel_count=10 * (k + 1),
                    volume_mm3=float(rng.uniform(0.5, 8.0)),
                    median_hu=float(rng.uniform(140, 400)),
                    overlap_voxels=0,
                    category="false_positive",
                )
                for k in range(3)
            ]
            write_lesion_table_csv(records, lesion_dir / f"{pid}.csv")
        out_json = tmp_path / "grid.json"
        code, out, _ = run_cli(
            capsys, tmp_path / "m.json", "cox", "--survival", cohort,
            "--exclusion-grid", "--lesion-dir", lesion_dir,
            "--vol-edges", "0,1", "--att-edges", "0,250",
            "--replications", "30", "--seed", "0", "--out", out_json,
        )
        assert code == 0
        grid = out["grid"]
        assert grid["kind"] == "exclusion"
        assert len(grid["cells"]) == 2 and len(grid["cells"][0]) == 2
        origin = grid["cells"][0][0]
        assert origin["hr"] == grid["reference_hr"]
        assert json.loads(out_json.read_text())["kind"] == "exclusion"

    def test_inclusion_grid_requires_reference_volumes(self, tmp_path, capsys):
        cohort = tmp_path / "cohort.csv"
        run_cli(
            capsys, tmp_path / "m.json", "cox", "--simulate", "50",
            "--seed", "5", "--out", cohort,
        )
        code, _, err = run_cli(
            capsys, tmp_path / "m.json", "cox", "--survival", cohort,
            "--inclusion-grid", "--lesion-dir", tmp_path,
            "--vol-edges", "0,1", "--att-edges", "0,250",
        )
        assert code == 1
        assert "reference-volumes" in err["error"] or "lesion table" in err["error"]


def _largest_lesion_clear_mask(project):
    """Manual mask = truth with the largest deposit erased (a big symdiff)."""
    truth = read_grid_file(project["data"] / "phantom7_truth.vgf")
    lesion = max(project["truth"]["lesions"], key=lambda l: l["radius_mm"])
    grid = truth.grid
    data = truth.data.copy()
    center = np.asarray(lesion["center_mm"])
    radius = lesion["radius_mm"] + 1e-9
    axes = [
        grid.origin[a] + grid.spacing[a] * np.arange(grid.dims[a])
        for a in range(3)
    ]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    inside = (
        (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    ) <= radius**2
    data[inside] = 0
    assert data.sum() < truth.data.sum()
    return Mask(grid, data)


class TestSampleAndServe:
    def test_sample_builds_complete_session(self, project, capsys, tmp_path):
        manual_path = tmp_path / "manual.vgf"
        write_grid_file(_largest_lesion_clear_mask(project), manual_path)
        session_dir = tmp_path / "session"
        code, out, _ = run_cli(
            capsys, project["manifest"], "sample", "--session", session_dir,
            "--manual", f"phantom7={manual_path}", "--n", "1", "--seed", "0",
        )
        assert code == 0
        assert len(out["regions"]) == 1
        rid = out["regions"][0]
        assert (session_dir / "session.json").exists()
        assert (session_dir / "key.json").exists()
        assert (session_dir / "grades.jsonl").exists()
        frames = list((session_dir / "frames" / rid).glob("*.png"))
        assert len(frames) == 21 * 4

    def test_serve_subprocess_round_trip(self, project, capsys, tmp_path):
        manual_path = tmp_path / "manual.vgf"
        write_grid_file(_largest_lesion_clear_mask(project), manual_path)
        session_dir = tmp_path / "session"
        code, out, _ = run_cli(
            capsys, project["manifest"], "sample", "--session", session_dir,
            "--manual", f"phantom7={manual_path}", "--n", "1", "--seed", "0",
        )
        assert code == 0
        proc = subprocess.Popen(
            [
                sys.executable, "-m", "calcquant.cli",
                "--manifest", str(project["manifest"]),
                "serve", "--session", str(session_dir), "--port", "0",
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        try:
            ready, _, _ = select.select([proc.stdout], [], [], 30)
            assert ready, "server never printed its address"
            banner = json.loads(proc.stdout.readline())
            base = banner["url"]
            with urllib.request.urlopen(f"{base}/session") as resp:
                info = json.loads(resp.read())
            assert info["regions"] == 1
            rid = info["region_ids"][0]
            req = urllib.request.Request(
                f"{base}/regions/{rid}/grade",
                data=json.dumps(
                    {"grade": "equal", "gradable": True,
                     "at_least_one_accurate": True}
                ).encode(),
                headers={"Content-Type": "application/json"},
            )
            with urllib.request.urlopen(req) as resp:
                assert json.loads(resp.read())["accepted"]
            with urllib.request.urlopen(f"{base}/summary?unblind=true") as resp:
                summary = json.loads(resp.read())
            assert summary["n_graded"] == 1
        finally:
            proc.terminate()
            proc.wait(timeout=10)


class TestParsing:
    def test_unknown_command_exits_2_with_json(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["bogus"])
        assert excinfo.value.code == 2
        err = json.loads(capsys.readouterr().err)
        assert "error" in err

    def test_unknown_flag_exits_2_with_json(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["phantom", "--frobnicate"])
        assert excinfo.value.code == 2
        assert "error" in json.loads(capsys.readouterr().err)
