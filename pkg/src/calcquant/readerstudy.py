"""Blinded comparison protocol for manual vs automated contours.

Half-slice regions where the two segmentations disagree by at least
2 mm² are sampled (at most one per participant), rendered as 50×50 mm
grayscale windows with contour overlays for the target slice and its
±10-slice neighborhood, and served over HTTP for grading. Contour
provenance is hidden behind a per-region random color (blue/red) and
panel side assignment; the key never leaves the server's disk. Grades
land in an append-only JSON-lines log, and the summary unblinds them
into five provenance categories with a signed-rank test.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .evaluate import wilcoxon_signed_rank
from .volgrid import Mask, Volume

WINDOW_LEVEL_HU = 40.0
WINDOW_WIDTH_HU = 850.0
WINDOW_SIZE_MM = 50.0
MIN_SYMDIFF_MM2 = 2.0
NEIGHBORHOOD_SLICES = 10

GRADE_CATEGORIES = (
    "blue_substantially_better",
    "blue_slightly_better",
    "equal",
    "red_slightly_better",
    "red_substantially_better",
)
UNBLINDED_CATEGORIES = (
    "automated_substantially_better",
    "automated_slightly_better",
    "equal",
    "manual_slightly_better",
    "manual_substantially_better",
)
_CATEGORY_SCORE = {
    "automated_substantially_better": 2,
    "automated_slightly_better": 1,
    "equal": 0,
    "manual_slightly_better": -1,
    "manual_substantially_better": -2,
}

PANEL_VARIANTS = ("plain", "blue", "red", "superimposed")
_BLUE_RGB = (70, 110, 245)
_RED_RGB = (235, 70, 60)

_SESSION_FILE = "session.json"
_KEY_FILE = "key.json"
_GRADES_FILE = "grades.jsonl"
_FRAMES_DIR = "frames"


def hu_to_gray(hu):
    """Window/level grayscale in [0, 1]; level 40, width 850.

    Monotone in HU, exactly 0.5 at 40 HU, clamped to black at and below
    level - width/2 and to white at and above level + width/2.
    """
    lo = WINDOW_LEVEL_HU - WINDOW_WIDTH_HU / 2.0
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / WINDOW_WIDTH_HU, 0.0, 1.0)


class ParticipantScan(NamedTuple):
    """One participant's volume with both segmentations on its grid."""

    participant_id: str
    volume: Volume
    manual: Mask
    automated: Mask


@dataclass(frozen=True)
class Region:
    """One sampled half-slice comparison region.

    `fp_area_mm2`/`fn_area_mm2` split the disagreement by direction
    (automated-only vs manual-only area); they stay server-side because
    revealing which contour is the larger one would unblind the pair.
    """

    region_id: str
    participant_id: str
    slice_index: int
    side: str
    center_mm: tuple[float, float]
    symdiff_area_mm2: float
    fp_area_mm2: float
    fn_area_mm2: float

    def served_payload(self) -> dict:
        return {
            "region_id": self.region_id,
            "slice_index": self.slice_index,
            "side": self.side,
            "window_mm": WINDOW_SIZE_MM,
        }

    def to_dict(self) -> dict:
        return {
            "region_id": self.region_id,
            "participant_id": self.participant_id,
            "slice_index": self.slice_index,
            "side": self.side,
            "center_mm": list(self.center_mm),
            "symdiff_area_mm2": self.symdiff_area_mm2,
            "fp_area_mm2": self.fp_area_mm2,
            "fn_area_mm2": self.fn_area_mm2,
        }

    @staticmethod
    def from_dict(obj: dict) -> "Region":
        return Region(
            region_id=obj["region_id"],
            participant_id=obj["participant_id"],
            slice_index=int(obj["slice_index"]),
            side=obj["side"],
            center_mm=tuple(obj["center_mm"]),
            symdiff_area_mm2=float(obj["symdiff_area_mm2"]),
            fp_area_mm2=float(obj["fp_area_mm2"]),
            fn_area_mm2=float(obj["fn_area_mm2"]),
        )


@dataclass(frozen=True)
class KeyEntry:
    blue_is: str  # "automated" or "manual"
    left_panel: str  # "blue" or "red"


@dataclass(frozen=True)
class BlindingKey:
    """Provenance/color/side assignment; written to its own file, never served."""

    seed: int
    entries: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "entries": {
                rid: {"blue_is": e.blue_is, "left_panel": e.left_panel}
                for rid, e in self.entries.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "BlindingKey":
        obj = json.loads(text)
        entries = {
            rid: KeyEntry(blue_is=e["blue_is"], left_panel=e["left_panel"])
            for rid, e in obj.get("entries", {}).items()
        }
        return BlindingKey(seed=int(obj["seed"]), entries=entries)


@dataclass(frozen=True)
class GradeRecord:
    """One submitted grade; `grade` is None when the region was ungradable."""

    region_id: str
    grade: str | None
    gradable: bool
    at_least_one_accurate: bool
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "region_id": self.region_id,
            "grade": self.grade,
            "gradable": self.gradable,
            "at_least_one_accurate": self.at_least_one_accurate,
            "timestamp": self.timestamp,
        }

    @staticmethod
    def from_dict(obj: dict) -> "GradeRecord":
        return GradeRecord(
            region_id=obj["region_id"],
            grade=obj.get("grade"),
            gradable=bool(obj["gradable"]),
            at_least_one_accurate=bool(obj["at_least_one_accurate"]),
            timestamp=float(obj.get("timestamp", 0.0)),
        )


def _validate_record(record: GradeRecord) -> None:
    if record.gradable:
        if record.grade not in GRADE_CATEGORIES:
            raise ValueError(f"grade must be one of {GRADE_CATEGORIES}")
    elif record.grade is not None:
        raise ValueError("ungradable record must not carry a grade")


def sample_regions(
    scans,
    n: int,
    seed: int,
    min_symdiff_mm2: float = MIN_SYMDIFF_MM2,
) -> list[Region]:
    """Sample `n` disagreement regions, at most one per participant.

    Every axial slice of every scan is cut in half along the sagittal
    plane; halves whose contours disagree by at least `min_symdiff_mm2`
    are eligible. The draw is uniform without replacement over eligible
    halves, re-drawing any participant already represented, and is
    deterministic for a given seed.
    """
    eligible: list[Region] = []
    for scan in scans:
        grid = scan.volume.grid
        if scan.manual.grid != grid or scan.automated.grid != grid:
            raise ValueError(
                f"masks for {scan.participant_id!r} are not on the scan grid"
            )
        px_area = grid.spacing[0] * grid.spacing[1]
        nx = grid.dims[0]
        halves = (("left", slice(0, nx // 2), 0), ("right", slice(nx // 2, nx), nx // 2))
        man = scan.manual.data != 0
        auto = scan.automated.data != 0
        for z in range(grid.dims[2]):
            for side, xs, x0 in halves:
                m = man[xs, :, z]
                a = auto[xs, :, z]
                union = m | a
                if not union.any():
                    continue
                fp = float(np.count_nonzero(a & ~m) * px_area)
                fn = float(np.count_nonzero(m & ~a) * px_area)
                if fp + fn < min_symdiff_mm2:
                    continue
                ix, iy = np.nonzero(union)
                center = (
                    grid.origin[0] + (float(ix.mean()) + x0) * grid.spacing[0],
                    grid.origin[1] + float(iy.mean()) * grid.spacing[1],
                )
                eligible.append(
                    Region(
                        region_id=f"{scan.participant_id}-z{z:03d}-{side}",
                        participant_id=scan.participant_id,
                        slice_index=z,
                        side=side,
                        center_mm=center,
                        symdiff_area_mm2=fp + fn,
                        fp_area_mm2=fp,
                        fn_area_mm2=fn,
                    )
                )
    rng = np.random.default_rng(seed)
    chosen: list[Region] = []
    used_participants: set[str] = set()
    for idx in rng.permutation(len(eligible)):
        region = eligible[idx]
        if region.participant_id in used_participants:
            continue
        chosen.append(region)
        used_participants.add(region.participant_id)
        if len(chosen) == n:
            return chosen
    raise ValueError(
        f"only {len(chosen)} eligible regions across distinct participants, need {n}"
    )


def assign_blinding(regions, seed: int) -> BlindingKey:
    """Independent fair coins per region for contour color and panel side."""
    rng = np.random.default_rng(seed)
    entries = {}
    for region in regions:
        entries[region.region_id] = KeyEntry(
            blue_is="automated" if rng.integers(2) else "manual",
            left_panel="blue" if rng.integers(2) else "red",
        )
    return BlindingKey(seed=seed, entries=entries)


def _window_axis(grid, axis: int, center_mm: float):
    """Pixel-to-voxel index map for one in-plane window axis.

    Pixel k sits at `center - 25 mm + k * step`, so when the window
    center lies on the voxel lattice every pixel coincides with a voxel
    center and the crop is an exact gather (no rounding ambiguity).
    """
    spacing = grid.spacing[axis]
    npx = int(round(WINDOW_SIZE_MM / spacing))
    xs = center_mm - WINDOW_SIZE_MM / 2.0 + np.arange(npx) * (WINDOW_SIZE_MM / npx)
    idx = np.floor((xs - grid.origin[axis]) / spacing + 0.5).astype(np.intp)
    valid = (idx >= 0) & (idx < grid.dims[axis])
    return np.clip(idx, 0, grid.dims[axis] - 1), valid, npx


def _half_bounds(grid, side: str) -> tuple[int, int]:
    nx = grid.dims[0]
    return (0, nx // 2) if side == "left" else (nx // 2, nx)


def _window_slice(volume_data, grid, region: Region, z: int) -> np.ndarray:
    """HU values of the region's 50×50 mm window on slice z (air outside)."""
    ix, vx, _ = _window_axis(grid, 0, region.center_mm[0])
    iy, vy, _ = _window_axis(grid, 1, region.center_mm[1])
    patch = volume_data[:, :, z][np.ix_(ix, iy)]
    return np.where(vx[:, None] & vy[None, :], patch, -1024.0)


def _window_mask(mask_data, grid, region: Region, z: int) -> np.ndarray:
    """Mask pixels inside the window, clipped to the region's half-slice."""
    ix, vx, _ = _window_axis(grid, 0, region.center_mm[0])
    iy, vy, _ = _window_axis(grid, 1, region.center_mm[1])
    lo, hi = _half_bounds(grid, region.side)
    in_half = (ix >= lo) & (ix < hi)
    patch = mask_data[:, :, z][np.ix_(ix, iy)] != 0
    return patch & (vx & in_half)[:, None] & vy[None, :]


def _contour(mask2d: np.ndarray) -> np.ndarray:
    """Boundary pixels: set pixels with at least one 4-neighbor outside."""
    padded = np.pad(mask2d, 1, mode="constant")
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return mask2d & ~interior


@dataclass(frozen=True)
class RegionFrames:
    """Rendered frames: images[(slice_offset, variant)] -> RGB uint8 array."""

    region_id: str
    offsets: tuple[int, ...]
    panel_order: tuple[str, str]
    images: dict


def render_frames(
    region: Region,
    volume: Volume,
    manual: Mask,
    automated: Mask,
    entry: KeyEntry,
) -> RegionFrames:
    """Render the 21-frame neighborhood in all four panel variants.

    Slice offsets outside the volume clamp to the boundary slice so the
    frame count is always 21. The blue/red overlays follow the key
    entry; nothing in the output identifies which contour is which.
    """
    grid = volume.grid
    nz = grid.dims[2]
    if not (0 <= region.slice_index < nz):
        raise ValueError(
            f"region slice {region.slice_index} outside volume with {nz} slices"
        )
    blue_mask, red_mask = (
        (automated, manual) if entry.blue_is == "automated" else (manual, automated)
    )
    images = {}
    offsets = tuple(range(-NEIGHBORHOOD_SLICES, NEIGHBORHOOD_SLICES + 1))
    for offset in offsets:
        z = min(max(region.slice_index + offset, 0), nz - 1)
        gray = hu_to_gray(_window_slice(volume.data, grid, region, z))
        base = np.repeat(
            np.rint(gray * 255.0).astype(np.uint8)[:, :, None], 3, axis=2
        )
        blue_edge = _contour(_window_mask(blue_mask.data, grid, region, z))
        red_edge = _contour(_window_mask(red_mask.data, grid, region, z))
        variants = {
            "plain": (),
            "blue": ((blue_edge, _BLUE_RGB),),
            "red": ((red_edge, _RED_RGB),),
            "superimposed": ((blue_edge, _BLUE_RGB), (red_edge, _RED_RGB)),
        }
        for name, overlays in variants.items():
            img = base.copy()
            for edge, color in overlays:
                img[edge] = color
            images[(offset, name)] = img
    left = entry.left_panel
    right = "red" if left == "blue" else "blue"
    return RegionFrames(
        region_id=region.region_id,
        offsets=offsets,
        panel_order=(left, right),
        images=images,
    )


def _frame_name(offset: int, variant: str) -> str:
    return f"{offset:+03d}_{variant}.png"


def write_frames(frames: RegionFrames, directory) -> list[str]:
    """Write one lossless PNG per (offset, variant); returns file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for (offset, variant), img in sorted(frames.images.items()):
        name = _frame_name(offset, variant)
        Image.fromarray(img).save(directory / name, format="PNG")
        names.append(name)
    return names


@dataclass(frozen=True)
class SubsetSummary:
    """Unblinded grade counts and signed-rank test for one region subset.

    When the test is undefined (no non-zero grades, or all grades tie at
    one magnitude) `wilcoxon_error` says why and z/p are None.
    """

    n_regions: int
    counts: dict
    wilcoxon_z: float | None
    wilcoxon_p: float | None
    wilcoxon_error: str | None = None


@dataclass(frozen=True)
class SessionSummary:
    n_regions: int
    n_graded: int
    ungradable: int
    both_inaccurate: int
    ungraded: int
    subsets: dict
    partial: bool

    def to_dict(self) -> dict:
        return {
            "n_regions": self.n_regions,
            "n_graded": self.n_graded,
            "ungradable": self.ungradable,
            "both_inaccurate": self.both_inaccurate,
            "ungraded": self.ungraded,
            "partial": self.partial,
            "subsets": {
                name: {
                    "n_regions": sub.n_regions,
                    "counts": sub.counts,
                    "wilcoxon_z": sub.wilcoxon_z,
                    "wilcoxon_p": sub.wilcoxon_p,
                    "wilcoxon_error": sub.wilcoxon_error,
                }
                for name, sub in self.subsets.items()
            },
        }


class GradingSession:
    """On-disk session: region list, blinding key file, and grade log.

    The key lives in its own file so the serving layer can expose
    everything else without ever reading it; `grades.jsonl` is append
    only, and replaying it reconstructs the current grade per region
    (resubmissions require the overwrite flag and replace the record).
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        session = json.loads((self.directory / _SESSION_FILE).read_text())
        self.seed = int(session["seed"])
        self.regions = [Region.from_dict(r) for r in session["regions"]]
        self._by_id = {r.region_id: r for r in self.regions}
        self._lock = threading.Lock()

    @staticmethod
    def create(directory, regions, key: BlindingKey, seed: int) -> "GradingSession":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = {"seed": seed, "regions": [r.to_dict() for r in regions]}
        (directory / _SESSION_FILE).write_text(json.dumps(payload, indent=2))
        (directory / _KEY_FILE).write_text(key.to_json())
        (directory / _GRADES_FILE).touch()
        return GradingSession(directory)

    @property
    def key_path(self) -> Path:
        return self.directory / _KEY_FILE

    def frames_dir(self, region_id: str) -> Path:
        return self.directory / _FRAMES_DIR / region_id

    def region(self, region_id: str) -> Region:
        if region_id not in self._by_id:
            raise KeyError(f"unknown region {region_id!r}")
        return self._by_id[region_id]

    def grades(self) -> dict:
        """Current grade per region after replaying the append-only log."""
        records: dict[str, GradeRecord] = {}
        path = self.directory / _GRADES_FILE
        if not path.exists():
            return records
        with path.open() as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = GradeRecord.from_dict(json.loads(line))
                    records[rec.region_id] = rec
        return records

    def submit(self, record: GradeRecord, overwrite: bool = False) -> None:
        if record.region_id not in self._by_id:
            raise KeyError(f"unknown region {record.region_id!r}")
        _validate_record(record)
        with self._lock:
            if not overwrite and record.region_id in self.grades():
                raise ValueError(f"region {record.region_id!r} already graded")
            with (self.directory / _GRADES_FILE).open("a") as fh:
                fh.write(json.dumps(record.to_dict()) + "\n")

    def next_ungraded(self) -> str | None:
        graded = self.grades()
        for region in self.regions:
            if region.region_id not in graded:
                return region.region_id
        return None

    def progress(self) -> dict:
        graded = self.grades()
        ungradable = sum(1 for rec in graded.values() if not rec.gradable)
        return {
            "regions": len(self.regions),
            "graded": len(graded),
            "ungradable": ungradable,
            "pending": len(self.regions) - len(graded),
        }


def _unblind(record: GradeRecord, entry: KeyEntry) -> str:
    swap = {
        "blue_substantially_better": "red_substantially_better",
        "blue_slightly_better": "red_slightly_better",
        "equal": "equal",
        "red_slightly_better": "blue_slightly_better",
        "red_substantially_better": "blue_substantially_better",
    }
    grade = record.grade if entry.blue_is == "automated" else swap[record.grade]
    return grade.replace("blue", "automated").replace("red", "manual")


def summarize(session: GradingSession, key: BlindingKey) -> SessionSummary:
    """Unblind grades into provenance categories with Table-style subsets.

    Subsets: all regions, regions whose disagreement is purely
    automated-only area (no missed manual pixels), and purely
    manual-only area. The signed-rank test runs on the +2..-2 scores
    (positive favors the automated contour); subsets where the test is
    undefined report None.
    """
    graded = session.grades()
    unblinded: dict[str, str] = {}
    ungradable = 0
    both_inaccurate = 0
    for rid, rec in graded.items():
        if rid not in key.entries:
            raise ValueError(f"key is missing region {rid!r}")
        if not rec.at_least_one_accurate:
            both_inaccurate += 1
        if not rec.gradable:
            ungradable += 1
            continue
        unblinded[rid] = _unblind(rec, key.entries[rid])

    def subset(region_ids) -> SubsetSummary:
        counts = {cat: 0 for cat in UNBLINDED_CATEGORIES}
        scores = []
        n_regions = 0
        for rid in region_ids:
            n_regions += 1
            cat = unblinded.get(rid)
            if cat is None:
                continue
            counts[cat] += 1
            scores.append(_CATEGORY_SCORE[cat])
        z = p = error = None
        if not any(scores):
            error = "no non-zero grades"
        else:
            try:
                result = wilcoxon_signed_rank(scores)
            except ValueError as exc:
                error = str(exc)
            else:
                z, p = result.z, result.p_two_sided
        return SubsetSummary(
            n_regions=n_regions,
            counts=counts,
            wilcoxon_z=z,
            wilcoxon_p=p,
            wilcoxon_error=error,
        )

    by_id = {r.region_id: r for r in session.regions}
    all_ids = list(by_id)
    pure_fp = [rid for rid, r in by_id.items() if r.fn_area_mm2 == 0.0]
    pure_fn = [rid for rid, r in by_id.items() if r.fp_area_mm2 == 0.0]
    subsets = {
        "all": subset(all_ids),
        "pure_false_positive": subset(pure_fp),
        "pure_false_negative": subset(pure_fn),
    }
    n_graded = len(graded)
    return SessionSummary(
        n_regions=len(session.regions),
        n_graded=n_graded,
        ungradable=ungradable,
        both_inaccurate=both_inaccurate,
        ungraded=len(session.regions) - n_graded,
        subsets=subsets,
        partial=n_graded < len(session.regions),
    )


_FRAME_URL = re.compile(
    r"^/regions/([^/]+)/frames/([+-]\d+)/([a-z]+)\.png$"
)


class _SessionHandler(BaseHTTPRequestHandler):
    """HTTP façade over a GradingSession directory.

    The provenance half of the key (which color is which contour) never
    appears in any response; the frames manifest exposes only its layout
    half (which color sits on which panel), which the observer sees on
    screen anyway. The unblinded summary requires the key file on the
    server's own disk and reports categories, never per-region colors.
    """

    server_version = "calcquant-readerstudy"

    # Set by serve_session:
    session: GradingSession = None

    def log_message(self, *args):  # quiet by default; hook point for tests
        pass

    def _send_json(self, obj, status=200):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_png(self, data: bytes):
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        path, _, query = self.path.partition("?")
        try:
            if path == "/session":
                info = self.session.progress()
                info["region_ids"] = [r.region_id for r in self.session.regions]
                self._send_json(info)
            elif path == "/regions/next":
                self._send_json({"region_id": self.session.next_ungraded()})
            elif path.startswith("/regions/") and path.endswith("/frames"):
                rid = path[len("/regions/") : -len("/frames")]
                self._send_json(self._frame_manifest(rid))
            elif m := _FRAME_URL.match(path):
                rid, offset, variant = m.group(1), int(m.group(2)), m.group(3)
                self.session.region(rid)
                if variant not in PANEL_VARIANTS:
                    raise KeyError(f"unknown panel variant {variant!r}")
                frame = self.session.frames_dir(rid) / _frame_name(offset, variant)
                if not frame.exists():
                    raise KeyError(f"no frame {frame.name!r}")
                self._send_png(frame.read_bytes())
            elif path == "/summary":
                self._send_summary(query)
            else:
                self._send_json({"error": f"unknown path {path!r}"}, status=404)
        except KeyError as exc:
            self._send_json({"error": str(exc.args[0])}, status=404)
        except ValueError as exc:
            self._send_json({"error": str(exc)}, status=400)

    def _frame_manifest(self, rid: str) -> dict:
        region = self.session.region(rid)
        key = BlindingKey.from_json(self.session.key_path.read_text())
        entry = key.entries[rid]
        left = entry.left_panel
        offsets = list(range(-NEIGHBORHOOD_SLICES, NEIGHBORHOOD_SLICES + 1))
        frames = {
            variant: [
                f"/regions/{rid}/frames/{offset:+03d}/{variant}.png"
                for offset in offsets
            ]
            for variant in PANEL_VARIANTS
        }
        payload = region.served_payload()
        payload.update(
            {
                "offsets": offsets,
                "panel_order": [left, "red" if left == "blue" else "blue"],
                "frames": frames,
            }
        )
        return payload

    def _send_summary(self, query: str) -> None:
        params = dict(
            part.split("=", 1) for part in query.split("&") if "=" in part
        )
        if params.get("unblind") != "true":
            self._send_json(self.session.progress())
            return
        if not self.session.key_path.exists():
            self._send_json({"error": "blinding key unavailable"}, status=403)
            return
        key = BlindingKey.from_json(self.session.key_path.read_text())
        self._send_json(summarize(self.session, key).to_dict())

    def do_POST(self):
        path = self.path.partition("?")[0]
        if not (path.startswith("/regions/") and path.endswith("/grade")):
            self._send_json({"error": f"unknown path {path!r}"}, status=404)
            return
        rid = path[len("/regions/") : -len("/grade")]
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
            record = GradeRecord(
                region_id=rid,
                grade=body.get("grade"),
                gradable=bool(body.get("gradable", True)),
                at_least_one_accurate=bool(body.get("at_least_one_accurate", True)),
                timestamp=time.time(),
            )
            self.session.submit(record, overwrite=bool(body.get("overwrite", False)))
        except KeyError as exc:
            self._send_json({"error": str(exc.args[0])}, status=404)
        except ValueError as exc:
            status = 409 if "already graded" in str(exc) else 400
            self._send_json({"error": str(exc)}, status=status)
        except json.JSONDecodeError as exc:
            self._send_json({"error": f"bad JSON body: {exc}"}, status=400)
        else:
            self._send_json({"accepted": True, "region_id": rid})


def serve_session(directory, host: str = "127.0.0.1", port: int = 0):
    """Build an HTTP server for a session directory (caller runs it).

    Returns the server; `server.server_address` carries the bound port
    when `port=0`. Writes to the grade log are serialized inside
    GradingSession, so the threading server is safe.
    """
    session = GradingSession(directory)
    handler = type("Handler", (_SessionHandler,), {"session": session})
    return ThreadingHTTPServer((host, port), handler)
