"""Command-line front door for the calcification pipeline and analyses.

Subcommands wire the library into the full flow — preprocess scans into
a shared reference space, fuse ensemble probability maps into volumes,
evaluate agreement and grading statistics, tabulate lesions, fit
proportional-hazards models, and run the blinded reader study — around
one JSON project manifest. The manifest is rewritten atomically
(write-temp-rename) and contains no timestamps, so identical inputs and
seeds reproduce identical artifacts; each mutating run is logged to a
`.runs.jsonl` sidecar instead. Errors are emitted as machine-readable
JSON on stderr with a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .evaluate import (
    agreement_report,
    read_grades_csv,
    read_paired_volumes_csv,
    sweep_curves,
    wilcoxon_signed_rank,
    write_curve_csv,
)
from .lesions import (
    extract_lesions,
    hist2d_to_json,
    hist2d_volume_fraction,
    read_lesion_table_csv,
    volume_adjusted_percentiles,
    write_lesion_table_csv,
)
from .losses import LOSS_NAMES, make_separable_patches, toy_fit, write_trace_csv
from .phantom import make_head_phantom
from .preprocess import (
    ReferenceSpace,
    RegistrationConfig,
    canonical_grid_like,
    gaussian_smooth,
    recenter_axial,
    reference_space_from_json,
    reference_space_to_json,
    register,
    standardize_grid,
)
from .quantify import (
    HU_THRESHOLD,
    PROB_THRESHOLD,
    EnsembleOutput,
    candidate_mask,
    fuse_mean,
    quantify_scan,
)
from .readerstudy import (
    GradingSession,
    ParticipantScan,
    assign_blinding,
    render_frames,
    sample_regions,
    serve_session,
    write_frames,
)
from .survival import (
    cox_fit,
    exclusion_grid,
    grid_to_json,
    inclusion_grid,
    read_survival_csv,
    simulate_cohort,
    write_survival_csv,
)
from .volgrid import Mask, ProbMap, Volume, read_grid_file, write_grid_file

MANIFEST_ENV = "CALCQUANT_MANIFEST"
DEFAULT_CONFIG = {
    "hu_threshold": HU_THRESHOLD,
    "prob_threshold": PROB_THRESHOLD,
    "failure_threshold_hu": 300.0,
    "smooth_sigma": 0.6,
    "seed": 0,
    "reference_space": None,
}

_manifest_lock = threading.Lock()


# --------------------------------------------------------------------------
# Project manifest


def default_manifest_path() -> Path:
    return Path(os.environ.get(MANIFEST_ENV, "calcquant.json"))


def _check_invariants(manifest: dict) -> None:
    for sid, entry in manifest["scans"].items():
        has_volume = entry.get("volume_mm3") is not None
        has_seg = entry.get("segmentation_path") is not None
        if has_volume != has_seg:
            raise ValueError(
                f"manifest entry {sid!r} must record a volume exactly when a "
                "segmentation exists"
            )


def load_manifest(path: Path) -> dict:
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.setdefault("config", {})
    for key, value in DEFAULT_CONFIG.items():
        manifest["config"].setdefault(key, value)
    manifest.setdefault("scans", {})
    _check_invariants(manifest)
    return manifest


def save_manifest(manifest: dict, path: Path, command: str) -> None:
    """Atomic write-temp-rename plus a timestamped sidecar log entry."""
    _check_invariants(manifest)
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(
        dir=str(path.parent or "."), prefix=path.name, suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    entry = {
        "utc": datetime.now(timezone.utc).isoformat(),
        "command": command,
    }
    with open(f"{path}.runs.jsonl", "a") as fh:
        fh.write(json.dumps(entry) + "\n")


def _scan_entry(manifest: dict, scan_id: str) -> dict:
    if scan_id not in manifest["scans"]:
        raise KeyError(f"scan {scan_id!r} not in manifest")
    return manifest["scans"][scan_id]


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValueError(f"{what} not found: {p}")
    return p


def _load_typed(path, kind, what: str):
    obj = read_grid_file(_existing(path, what))
    if not isinstance(obj, kind):
        raise ValueError(
            f"{what} {path} holds a {type(obj).__name__}, expected {kind.__name__}"
        )
    return obj


def _hu_source(entry: dict, scan_id: str) -> Volume:
    """The scan's attenuation volume: preprocessed when present, else raw."""
    path = entry.get("preprocessed_path") or entry.get("raw_path")
    if path is None:
        raise ValueError(f"scan {scan_id!r} has no recorded volume file")
    return _load_typed(path, Volume, f"volume for scan {scan_id!r}")


def _map_jobs(fn, items, jobs: int) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# Subcommands


def cmd_preprocess(args) -> dict:
    manifest = load_manifest(args.manifest)
    config = manifest["config"]
    if args.reference is not None:
        ref_path = _existing(args.reference, "reference volume")
        reference = _load_typed(ref_path, Volume, "reference volume")
        space = ReferenceSpace(
            grid=canonical_grid_like(reference.grid),
            failure_threshold_hu=float(args.failure_threshold),
            reference_path=str(ref_path),
            registration=RegistrationConfig(rng_seed=int(config["seed"])),
        )
        config["reference_space"] = json.loads(reference_space_to_json(space))
    elif config["reference_space"] is not None:
        space = reference_space_from_json(json.dumps(config["reference_space"]))
        reference = _load_typed(
            space.reference_path, Volume, "configured reference volume"
        )
    else:
        raise ValueError(
            "no reference space configured; pass --reference on the first run"
        )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def process(path_str: str) -> tuple[str, dict]:
        path = _existing(path_str, "scan")
        scan_id = path.stem
        vol = _load_typed(path, Volume, f"scan {scan_id!r}")
        if not (vol.data > 0.0).any():
            raise ValueError("no positive-HU voxels")
        if args.recenter:
            vol = recenter_axial(vol)
        report = register(
            vol, reference, space.registration, space.failure_threshold_hu
        )
        preprocessed = standardize_grid(vol, report.transform, space.grid)
        out_path = out_dir / f"{scan_id}_pre.vgf"
        write_grid_file(preprocessed, out_path)
        entry = {
            "raw_path": str(path),
            "preprocessed_path": str(out_path),
            "registration": {
                "mae_hu": report.mae_hu,
                "failed": report.failed,
                "final_metric": report.final_metric,
                "transform": {
                    "linear": report.transform.linear.tolist(),
                    "translation": report.transform.translation.tolist(),
                },
            },
        }
        return scan_id, entry

    results = _map_jobs(process, args.scans, args.jobs)
    summary = {}
    with _manifest_lock:
        for scan_id, entry in results:
            manifest["scans"].setdefault(scan_id, {}).update(entry)
            summary[scan_id] = {
                "preprocessed_path": entry["preprocessed_path"],
                "mae_hu": entry["registration"]["mae_hu"],
                "failed": entry["registration"]["failed"],
            }
        save_manifest(manifest, args.manifest, "preprocess")
    return {"command": "preprocess", "scans": summary}


def cmd_fuse(args) -> dict:
    manifest = load_manifest(args.manifest)
    config = manifest["config"]
    prob_thr = config["prob_threshold"] if args.prob_threshold is None else args.prob_threshold
    hu_thr = config["hu_threshold"] if args.hu_threshold is None else args.hu_threshold
    sigma = config["smooth_sigma"] if args.smooth_sigma is None else args.smooth_sigma

    if args.probmap and len(args.scan) != 1:
        raise ValueError("--probmap requires exactly one --scan")
    scan_ids = args.scan or [
        sid
        for sid, entry in manifest["scans"].items()
        if entry.get("probmap_paths")
    ]
    if not scan_ids:
        raise ValueError("no scans with probability maps to fuse")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def process(scan_id: str):
        entry = _scan_entry(manifest, scan_id)
        paths = [str(p) for p in args.probmap] or entry.get("probmap_paths") or []
        if not paths:
            raise ValueError(f"scan {scan_id!r} has no probability maps")
        maps = tuple(
            _load_typed(p, ProbMap, f"probability map for {scan_id!r}")
            for p in paths
        )
        ens = EnsembleOutput(maps, labels=tuple(Path(p).stem for p in paths))
        hu = _hu_source(entry, scan_id)
        smoothed = gaussian_smooth(hu, sigma) if args.dual else None
        result = quantify_scan(ens, hu, smoothed, prob_thr, hu_thr)
        seg_path = out_dir / f"{scan_id}_seg.vgf"
        write_grid_file(result.segmentation, seg_path)
        return scan_id, paths, str(seg_path), result.volume_mm3

    results = _map_jobs(process, scan_ids, args.jobs)
    records = []
    with _manifest_lock:
        for scan_id, paths, seg_path, volume in results:
            entry = manifest["scans"][scan_id]
            entry["probmap_paths"] = paths
            entry["segmentation_path"] = seg_path
            entry["volume_mm3"] = volume
            records.append(
                {
                    "scan_id": scan_id,
                    "volume_mm3": volume,
                    "threshold": prob_thr,
                    "hu_threshold": hu_thr,
                }
            )
        save_manifest(manifest, args.manifest, "fuse")
    return {"command": "fuse", "results": records}


def cmd_eval(args) -> dict:
    modes = [args.grades is not None, args.volumes is not None, args.curves]
    if sum(modes) != 1:
        raise ValueError("pass exactly one of --grades, --volumes, --curves")

    if args.grades is not None:
        grades = read_grades_csv(_existing(args.grades, "grades CSV"))
        result = wilcoxon_signed_rank(grades)
        return {
            "command": "eval",
            "wilcoxon": {
                "n_nonzero": result.n_nonzero,
                "w_plus": result.w_plus,
                "z": result.z,
                "p_two_sided": result.p_two_sided,
            },
        }

    if args.volumes is not None:
        pairs = read_paired_volumes_csv(_existing(args.volumes, "volumes CSV"))
        report = agreement_report(pairs, args.replications, args.seed)
        return {"command": "eval", "agreement": report.to_dict()}

    manifest = load_manifest(args.manifest)
    hu_thr = (
        manifest["config"]["hu_threshold"]
        if args.hu_threshold is None
        else args.hu_threshold
    )
    if not args.truth:
        raise ValueError("--curves requires at least one --truth ID=PATH")
    scans = []
    for scan_id, truth_path in args.truth:
        entry = _scan_entry(manifest, scan_id)
        maps = tuple(
            _load_typed(p, ProbMap, f"probability map for {scan_id!r}")
            for p in entry.get("probmap_paths") or ()
        )
        if not maps:
            raise ValueError(f"scan {scan_id!r} has no probability maps")
        hu = _hu_source(entry, scan_id)
        ref = _load_typed(truth_path, Mask, f"truth mask for {scan_id!r}")
        scans.append((fuse_mean(EnsembleOutput(maps)), candidate_mask(hu, hu_thr), ref))
    points = sweep_curves(scans, args.thresholds)
    write_curve_csv(points, args.out)
    return {
        "command": "eval",
        "curves": {"path": str(args.out), "points": len(points)},
    }


def cmd_lesions(args) -> dict:
    if args.hist:
        records = read_lesion_table_csv(_existing(args.table, "lesion table"))
        subset = (
            read_lesion_table_csv(_existing(args.subset, "subset table"))
            if args.subset
            else records
        )
        vol_bins = volume_adjusted_percentiles(records, "volume", args.percentiles)
        att_bins = volume_adjusted_percentiles(
            records, "attenuation", args.percentiles
        )
        matrix = hist2d_volume_fraction(subset, vol_bins, att_bins)
        text = hist2d_to_json(matrix, vol_bins, att_bins)
        if args.out:
            Path(args.out).write_text(text + "\n")
        return {"command": "lesions", "hist2d": json.loads(text)}

    if not args.scan or args.manual is None:
        raise ValueError("table mode requires --scan and --manual")
    manifest = load_manifest(args.manifest)
    entry = _scan_entry(manifest, args.scan)
    if not entry.get("segmentation_path"):
        raise ValueError(f"scan {args.scan!r} has no segmentation; run fuse first")
    seg = _load_typed(
        entry["segmentation_path"], Mask, f"segmentation for {args.scan!r}"
    )
    manual = _load_typed(args.manual, Mask, "manual mask")
    hu = _hu_source(entry, args.scan)
    auto_records = extract_lesions(
        seg, hu, manual, "automated", args.scan, args.connectivity
    )
    manual_records = extract_lesions(
        manual, hu, seg, "manual", args.scan, args.connectivity
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    auto_path = out_dir / f"{args.scan}_lesions_automated.csv"
    manual_path = out_dir / f"{args.scan}_lesions_manual.csv"
    write_lesion_table_csv(auto_records, auto_path)
    write_lesion_table_csv(manual_records, manual_path)

    def count(records, category):
        return sum(1 for r in records if r.category == category)

    return {
        "command": "lesions",
        "automated": {
            "path": str(auto_path),
            "lesions": len(auto_records),
            "false_positive": count(auto_records, "false_positive"),
            "overlapping": count(auto_records, "overlapping"),
        },
        "manual": {
            "path": str(manual_path),
            "lesions": len(manual_records),
            "false_negative": count(manual_records, "false_negative"),
            "overlapping": count(manual_records, "overlapping"),
        },
    }


def _read_volume_column_csv(path) -> dict:
    import csv

    with open(path, newline="") as fh:
        return {
            row["id"]: float(row["volume_mm3"]) for row in csv.DictReader(fh)
        }


def _lesion_tables(directory, what: str) -> dict:
    directory = _existing(directory, what)
    tables = {}
    for path in sorted(Path(directory).glob("*.csv")):
        try:
            tables[path.stem] = read_lesion_table_csv(path)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path} is not a lesion table: {exc}") from exc
    if not tables:
        raise ValueError(f"{what} {directory} contains no CSV lesion tables")
    return tables


def cmd_cox(args) -> dict:
    if args.simulate is not None:
        rng = np.random.default_rng(args.seed)
        records = simulate_cohort(
            rng,
            n=args.simulate,
            hr_presence=args.hr,
            with_covariates=args.covariates,
        )
        if args.out is None:
            raise ValueError("--simulate requires --out for the cohort CSV")
        write_survival_csv(records, args.out)
        return {
            "command": "cox",
            "simulated": {
                "path": str(args.out),
                "n": len(records),
                "events": sum(1 for r in records if r.event),
            },
        }

    if args.survival is None:
        raise ValueError("pass --survival CSV (or --simulate N --out PATH)")
    records = read_survival_csv(_existing(args.survival, "survival CSV"))

    if args.exclusion_grid or args.inclusion_grid:
        if args.vol_edges is None or args.att_edges is None:
            raise ValueError("grid mode requires --vol-edges and --att-edges")
        if args.inclusion_grid and args.reference_volumes is None:
            raise ValueError("--inclusion-grid requires --reference-volumes")
        tables = _lesion_tables(args.lesion_dir, "lesion table directory")
        if args.exclusion_grid:
            grid = exclusion_grid(
                records,
                tables,
                args.vol_edges,
                args.att_edges,
                predicate=args.predicate,
                replications=args.replications,
                seed=args.seed,
                ties=args.ties,
            )
        else:
            if args.reference_volumes is None:
                raise ValueError("--inclusion-grid requires --reference-volumes")
            by_id = _read_volume_column_csv(
                _existing(args.reference_volumes, "reference volumes CSV")
            )
            missing = [r.participant_id for r in records if r.participant_id not in by_id]
            if missing:
                raise ValueError(
                    f"reference volumes missing for {len(missing)} participants, "
                    f"first {missing[0]!r}"
                )
            reference = [by_id[r.participant_id] for r in records]
            grid = inclusion_grid(
                records,
                tables,
                reference,
                args.vol_edges,
                args.att_edges,
                replications=args.replications,
                seed=args.seed,
                ties=args.ties,
            )
        text = grid_to_json(grid)
        if args.out:
            Path(args.out).write_text(text + "\n")
        return {"command": "cox", "grid": json.loads(text)}

    fit = cox_fit(records, exposure_mode=args.exposure, ties=args.ties)
    lo, hi = fit.hr_ci_wald()
    return {
        "command": "cox",
        "fit": {
            "names": list(fit.names),
            "coef": [float(c) for c in fit.coef],
            "se": [float(s) for s in fit.se],
            "exposure_hr": fit.exposure_hr,
            "exposure_hr_ci": [lo, hi],
            "loglik": fit.loglik,
            "converged": fit.converged,
            "n_iter": fit.n_iter,
        },
    }


def cmd_sample(args) -> dict:
    manifest = load_manifest(args.manifest)
    scans = []
    for scan_id, manual_path in args.manual:
        entry = _scan_entry(manifest, scan_id)
        if not entry.get("segmentation_path"):
            raise ValueError(
                f"scan {scan_id!r} has no segmentation; run fuse first"
            )
        volume = _hu_source(entry, scan_id)
        automated = _load_typed(
            entry["segmentation_path"], Mask, f"segmentation for {scan_id!r}"
        )
        manual = _load_typed(manual_path, Mask, f"manual mask for {scan_id!r}")
        scans.append(ParticipantScan(scan_id, volume, manual, automated))

    regions = sample_regions(scans, args.n, args.seed, args.min_symdiff)
    blind_seed = args.seed if args.blind_seed is None else args.blind_seed
    key = assign_blinding(regions, blind_seed)
    session = GradingSession.create(args.session, regions, key, args.seed)
    by_id = {scan.participant_id: scan for scan in scans}
    for region in regions:
        scan = by_id[region.participant_id]
        frames = render_frames(
            region,
            scan.volume,
            scan.manual,
            scan.automated,
            key.entries[region.region_id],
        )
        write_frames(frames, session.frames_dir(region.region_id))
    return {
        "command": "sample",
        "directory": str(session.directory),
        "regions": [r.region_id for r in regions],
    }


def cmd_serve(args):
    server = serve_session(args.session, host=args.host, port=args.port)
    host, port = server.server_address[:2]
    print(
        json.dumps(
            {
                "command": "serve",
                "url": f"http://{host}:{port}",
                "session": str(args.session),
            },
            sort_keys=True,
        ),
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return None


def cmd_phantom(args) -> dict:
    manifest = load_manifest(args.manifest)
    phantom = make_head_phantom(
        seed=args.seed,
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
        n_lesions=args.lesions,
    )
    scan_id = args.scan_id or f"phantom{args.seed}"
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    volume_path = out_dir / f"{scan_id}.vgf"
    truth_path = out_dir / f"{scan_id}_truth.vgf"
    indicator_path = out_dir / f"{scan_id}_indicator.vgf"
    write_grid_file(phantom.volume, volume_path)
    write_grid_file(phantom.truth_mask, truth_path)
    write_grid_file(phantom.indicator_map(), indicator_path)
    truth = {
        "scan_id": scan_id,
        "seed": args.seed,
        "truth_volume_mm3": phantom.truth_volume_mm3,
        "lesions": [
            {
                "center_mm": list(lesion.center_mm),
                "radius_mm": lesion.radius_mm,
                "mean_hu": lesion.mean_hu,
                "voxel_count": lesion.voxel_count,
                "volume_mm3": lesion.volume_mm3,
            }
            for lesion in phantom.lesions
        ],
    }
    truth_json = out_dir / f"{scan_id}_truth.json"
    truth_json.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    manifest["scans"].setdefault(scan_id, {})["raw_path"] = str(volume_path)
    save_manifest(manifest, args.manifest, "phantom")
    return {
        "command": "phantom",
        "scan_id": scan_id,
        "volume_path": str(volume_path),
        "truth_mask_path": str(truth_path),
        "indicator_path": str(indicator_path),
        "truth_json": str(truth_json),
        "truth_volume_mm3": phantom.truth_volume_mm3,
        "lesions": len(phantom.lesions),
    }


def cmd_demo_losses(args) -> dict:
    rng = np.random.default_rng(args.seed)
    patches = make_separable_patches(rng, count=args.patches)
    result = toy_fit(
        patches,
        loss=args.loss,
        steps=args.steps,
        learning_rate=args.learning_rate,
        gamma=args.gamma,
    )
    payload = {
        "command": "demo-losses",
        "loss": args.loss,
        "steps": args.steps,
        "initial_loss": float(result.trace[0]),
        "final_loss": float(result.trace[-1]),
        "accuracy": result.accuracy,
        "weight": result.weight,
        "bias": result.bias,
    }
    if args.out:
        write_trace_csv(result, args.out)
        payload["trace_path"] = str(args.out)
    return payload


# --------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as JSON on stderr."""

    def error(self, message):
        json.dump({"error": message, "command": self.prog}, sys.stderr)
        sys.stderr.write("\n")
        sys.exit(2)


def _id_path(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected ID=PATH, got {text!r}")
    return name, path


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats: {text!r}")


def _int_triplet(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got {text!r}")
    return tuple(int(p) for p in parts)


def _float_triplet(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got {text!r}")
    return tuple(float(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="calcquant",
        description="Intracranial calcification quantification pipeline.",
    )
    parser.add_argument(
        "--manifest",
        type=Path,
        default=default_manifest_path(),
        help=f"project manifest JSON (default: ${MANIFEST_ENV} or ./calcquant.json)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="register and standardize scans")
    p.add_argument("scans", nargs="+", metavar="PATH", help="raw scan grid files")
    p.add_argument("--reference", help="reference scan; configures the space")
    p.add_argument("--out-dir", default="derived", help="output directory")
    p.add_argument("--recenter", action="store_true",
                   help="axially recenter positive-HU mass before registration")
    p.add_argument("--failure-threshold", type=float, default=300.0,
                   help="registration failure MAE threshold in HU")
    p.add_argument("--jobs", type=int, default=1, help="concurrent scans")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fuse", help="fuse probability maps into a segmentation")
    p.add_argument("--scan", action="append", default=[], help="scan id (repeatable)")
    p.add_argument("--probmap", action="append", default=[], type=Path,
                   help="probability map file (repeatable; single --scan only)")
    p.add_argument("--prob-threshold", type=float, default=None,
                   help="probability cut (default: manifest config)")
    p.add_argument("--hu-threshold", type=float, default=None,
                   help="attenuation cut in HU (default: manifest config)")
    p.add_argument("--dual", action="store_true",
                   help="also require the smoothed volume to clear the HU cut")
    p.add_argument("--smooth-sigma", type=float, default=None,
                   help="smoothing sigma in voxels for --dual (default: config)")
    p.add_argument("--out-dir", default="derived", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="concurrent scans")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="agreement, grading, and curve evaluation")
    p.add_argument("--grades", help="CSV region_id,grade -> signed-rank test")
    p.add_argument("--volumes", help="CSV id,manual_mm3,auto_mm3 -> agreement")
    p.add_argument("--curves", action="store_true",
                   help="threshold sweep over manifest scans")
    p.add_argument("--truth", action="append", type=_id_path, default=[],
                   help="ID=PATH reference mask for --curves (repeatable)")
    p.add_argument("--thresholds", type=_float_list,
                   default=[i / 10 for i in range(11)],
                   help="comma-separated probability thresholds for --curves")
    p.add_argument("--hu-threshold", type=float, default=None,
                   help="attenuation cut for --curves candidates")
    p.add_argument("--replications", type=int, default=10000,
                   help="bootstrap replications for --volumes")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--out", default="curves.csv", help="curve CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lesions", help="per-lesion tables and histograms")
    p.add_argument("--scan", help="scan id (table mode)")
    p.add_argument("--manual", help="manual mask file (table mode)")
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 26))
    p.add_argument("--out-dir", default="derived", help="output directory")
    p.add_argument("--hist", action="store_true",
                   help="volume-fraction histogram over binned lesions")
    p.add_argument("--table", help="binning lesion table CSV (--hist)")
    p.add_argument("--subset", help="lesion subset CSV to histogram (--hist)")
    p.add_argument("--percentiles", type=_float_list,
                   default=[25.0, 50.0, 75.0, 100.0],
                   help="volume-adjusted percentile edges (--hist)")
    p.add_argument("--out", default=None, help="histogram JSON path (--hist)")
    p.set_defaults(func=cmd_lesions)

    p = sub.add_parser("cox", help="proportional-hazards fits and threshold grids")
    p.add_argument("--survival", help="cohort CSV")
    p.add_argument("--exposure", default="volume_per_sd",
                   choices=("volume_per_sd", "presence"))
    p.add_argument("--ties", default="efron", choices=("efron", "breslow"))
    p.add_argument("--exclusion-grid", action="store_true",
                   help="HR grid excluding small/faint lesions per cell")
    p.add_argument("--inclusion-grid", action="store_true",
                   help="HR grid adding missed lesions per cell")
    p.add_argument("--lesion-dir",
                   help="directory of per-participant lesion CSVs (<id>.csv)")
    p.add_argument("--reference-volumes",
                   help="CSV id,volume_mm3 comparison exposure (--inclusion-grid)")
    p.add_argument("--vol-edges", type=_float_list, default=None,
                   help="comma-separated lesion-volume thresholds in mm3")
    p.add_argument("--att-edges", type=_float_list, default=None,
                   help="comma-separated attenuation thresholds in HU")
    p.add_argument("--predicate", default="and", choices=("and", "or"),
                   help="exclusion rule combining the two thresholds")
    p.add_argument("--replications", type=int, default=1000,
                   help="bootstrap replications for grid p-values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--simulate", type=int, default=None, metavar="N",
                   help="write a synthetic cohort CSV instead of fitting")
    p.add_argument("--hr", type=float, default=2.0,
                   help="simulated presence hazard ratio")
    p.add_argument("--covariates", action="store_true",
                   help="simulate with covariate columns")
    p.add_argument("--out", default=None, help="output path (grid JSON / cohort CSV)")
    p.set_defaults(func=cmd_cox)

    p = sub.add_parser("sample", help="sample and render a blinded grading session")
    p.add_argument("--session", required=True, help="session directory to create")
    p.add_argument("--manual", action="append", type=_id_path, required=True,
                   help="ID=PATH manual mask per scan (repeatable)")
    p.add_argument("--n", type=int, required=True, help="number of regions")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--blind-seed", type=int, default=None,
                   help="blinding-coin seed (default: --seed)")
    p.add_argument("--min-symdiff", type=float, default=2.0,
                   help="disagreement floor in mm2")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("serve", help="serve a grading session over HTTP")
    p.add_argument("--session", required=True, help="session directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0,
                   help="TCP port (0 picks a free one, printed on stdout)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("phantom", help="generate a synthetic test scan")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_int_triplet, default=(96, 96, 48))
    p.add_argument("--spacing", type=_float_triplet, default=(0.5, 0.5, 0.5))
    p.add_argument("--lesions", type=int, default=5)
    p.add_argument("--scan-id", default=None, help="manifest id (default phantom<seed>)")
    p.add_argument("--out-dir", default="data", help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("demo-losses", help="toy logistic fit on one training loss")
    p.add_argument("--loss", default="cross_entropy", choices=LOSS_NAMES)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=2.0, help="focal exponent")
    p.add_argument("--patches", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="loss-trace CSV path")
    p.set_defaults(func=cmd_demo_losses)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        payload = args.func(args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        json.dump({"error": str(message), "command": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    if payload is not None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
