"""Configuration, orchestration and artifact writing for a full run.

A run is split into a frame-parallel phase (normalize, denoise, detect)
and a sequential phase (filter, link, velocities, profiles, envelopes,
correlations).  Frames are independent in the first phase, so results do
not depend on the worker count.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import tifffile

from .denoise import CffParams, auto_epsilon, auto_k, curvature_flow_filter
from .imagestack import (
    CalibrationSet,
    Frame,
    Roi,
    SequenceMeta,
    build_calibration,
    crop,
    crop_calibration,
    frames_from_arrays,
    normalize,
    read_stack,
)
from .segment import Detection, SegmentParams, segment_frame
from .track import (
    EnvelopeStats,
    FilterPolicy,
    GateParams,
    Trajectory,
    VelocityProfile,
    bin_velocity_profile,
    compute_velocities,
    correlate_parameters,
    envelope_stats,
    filter_detections,
    link_trajectories,
)

log = logging.getLogger("bubbleflow")

DETECTION_COLUMNS = [
    "frame_index", "time_s", "x_mm", "y_mm", "a_mm", "b_mm", "theta_rad", "area_mm2", "aspect", "quality",
]


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


def diag(stage: str, message: str, frame: int | None = None, level: int = logging.INFO) -> None:
    log.log(level, message, extra={"stage": stage, "frame": "-" if frame is None else frame})


class _DiagFormatter(logging.Formatter):
    def format(self, record):
        stage = getattr(record, "stage", record.name)
        frame = getattr(record, "frame", "-")
        return f"{record.levelname.lower()} stage={stage} frame={frame} {record.getMessage()}"


def setup_logging(level: int = logging.INFO) -> None:
    """Structured diagnostics on stderr: ``level stage=... frame=... message``."""
    handler = logging.StreamHandler()
    handler.setFormatter(_DiagFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DenoiseConfig:
    enabled: bool = True
    k: float | None = None  # None: percentile of the gradient magnitude of the first frame
    k_percentile: float = 60.0
    tau: float = 10.0
    dt: float = 0.2
    epsilon: float | None = None  # None: 1e-4 of the first frame's range
    control: str = "exponential"

    def params(self, first: Frame | None = None) -> CffParams:
        k = self.k if self.k is not None else (auto_k(first, self.k_percentile) if first is not None else 1.0)
        eps = self.epsilon if self.epsilon is not None else (auto_epsilon(first) if first is not None else 1e-4)
        return CffParams(k=k, tau=self.tau, dt=self.dt, epsilon=eps, control=self.control)


@dataclass
class PipelineConfig:
    raw: Path
    output: Path
    dark: Path | None = None
    flat: Path | None = None
    calibration: Path | None = None  # .npz written by ``calibrate``; replaces dark/flat
    fmt: str = "tiff_stack"
    raw_shape: tuple[int, int] | None = None  # (height, width) for raw_u16
    meta: SequenceMeta = field(default_factory=SequenceMeta)
    origin: tuple[float, float] | None = None  # inlet (col, row) px after cropping
    hot_sigma: float = 5.0
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    segment: SegmentParams = field(default_factory=SegmentParams)
    filter: FilterPolicy = field(default_factory=FilterPolicy)
    gate: GateParams = field(default_factory=GateParams)
    bin_height: float = 2.0  # mm
    snip_m: int = 12
    workers: int = 1
    dump_intermediate: bool = False

    def validate(self) -> None:
        """Check file references and numeric ranges; raises ``ValueError``."""
        if self.denoise.enabled:
            self.denoise.params()  # parameter ranges, before any I/O
        if self.fmt not in ("tiff_stack", "raw_u16"):
            raise ValueError(f"unknown format {self.fmt!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.bin_height > 0:
            raise ValueError("bin_height must be > 0")
        if self.snip_m < 1:
            raise ValueError("snip_m must be >= 1")
        if self.gate.frame_rate != self.meta.frame_rate:
            raise ValueError("gate frame rate must equal the sequence frame rate")
        if not self.raw.exists():
            raise ValueError(f"raw input {self.raw} does not exist")
        if self.calibration is not None:
            if not self.calibration.exists():
                raise ValueError(f"calibration file {self.calibration} does not exist")
        else:
            for name in ("dark", "flat"):
                p = getattr(self, name)
                if p is None:
                    raise ValueError(f"need either a calibration file or {name} frames")
                if not p.exists():
                    raise ValueError(f"{name} input {p} does not exist")


def _floats(text: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.replace(" ", "").split(","))
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _opt_float(sec, key):
    v = sec.get(key, fallback="auto").strip().lower()
    return None if v in ("auto", "none", "") else float(v)


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Read an INI configuration; relative paths resolve against its folder."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path):
        raise ValueError(f"cannot read config {path}")
    for name in ("paths", "sequence", "calibration", "denoise", "segment", "filter", "track", "stats", "run"):
        if not cp.has_section(name):
            cp.add_section(name)
    base = path.parent

    def p(key, required=False):
        v = cp["paths"].get(key)
        if v is None or not v.strip():
            if required:
                raise ValueError(f"[paths] {key} is required")
            return None
        q = Path(v.strip())
        return q if q.is_absolute() else base / q

    seq = cp["sequence"]
    roi = seq.get("roi")
    meta = SequenceMeta(
        frame_rate=seq.getfloat("frame_rate", 100.0),
        flow_rate=seq.getfloat("flow_rate", 0.0),
        field_applied=seq.getboolean("field_applied", False),
        field_magnitude=seq.getfloat("field_magnitude", 0.0),
        slab_thickness=seq.getfloat("slab_thickness", 20.0),
        roi=Roi.parse(roi) if roi else None,
        pixel_pitch=seq.getfloat("pixel_pitch", 0.0551),
    )
    origin = seq.get("origin")
    shape = cp["paths"].get("raw_shape")

    den = cp["denoise"]
    denoise = DenoiseConfig(
        enabled=den.getboolean("enabled", True),
        k=_opt_float(den, "k"),
        k_percentile=den.getfloat("k_percentile", 60.0),
        tau=den.getfloat("tau", 10.0),
        dt=den.getfloat("dt", 0.2),
        epsilon=_opt_float(den, "epsilon"),
        control=den.get("control", "exponential"),
    )

    sg = cp["segment"]
    d = SegmentParams()
    grow = sg.get("grow_fraction", str(d.grow_fraction)).strip().lower()
    segment = SegmentParams(
        method=sg.get("method", d.method),
        blur_sigma=sg.getfloat("blur_sigma", d.blur_sigma),
        histogram_bins=sg.getint("histogram_bins", d.histogram_bins),
        min_area=sg.getint("min_area", d.min_area),
        max_aspect=sg.getfloat("max_aspect", d.max_aspect),
        contrast_sigma=sg.getfloat("contrast_sigma", d.contrast_sigma),
        grow_fraction=None if grow in ("none", "off") else float(grow),
        grow_sigma=sg.getfloat("grow_sigma", d.grow_sigma),
        adaptive_window=sg.getint("adaptive_window", d.adaptive_window),
        adaptive_offset=sg.getfloat("adaptive_offset", d.adaptive_offset),
        free_surface=sg.getboolean("free_surface", d.free_surface),
        surface_gradient_floor=sg.getfloat("surface_gradient_floor", d.surface_gradient_floor),
        surface_margin=sg.getfloat("surface_margin", d.surface_margin),
    )

    fl = cp["filter"]
    f = FilterPolicy()
    inlet = fl.get("inlet_exclusion")
    surface_y = _opt_float(fl, "surface_y")
    policy = FilterPolicy(
        area_mad_k=fl.getfloat("area_mad_k", f.area_mad_k),
        max_aspect=fl.getfloat("max_aspect", f.max_aspect),
        inlet_exclusion=_floats(inlet, 4) if inlet else None,
        surface_y=surface_y,
        surface_margin=fl.getfloat("surface_margin", f.surface_margin),
        duplicate_radius=fl.getfloat("duplicate_radius", meta.pixel_pitch),
        drop_edge_touching=fl.getboolean("drop_edge_touching", f.drop_edge_touching),
    )

    tr = cp["track"]
    gate = GateParams(
        v_max=tr.getfloat("v_max", 400.0),
        max_coast=tr.getint("max_coast", 2),
        frame_rate=meta.frame_rate,
        surface_y=surface_y,
        surface_margin=policy.surface_margin,
    )

    cfg = PipelineConfig(
        raw=p("raw", required=True),
        output=p("output") or base / "out",
        dark=p("dark"),
        flat=p("flat"),
        calibration=p("calibration"),
        fmt=cp["paths"].get("format", "tiff_stack"),
        raw_shape=tuple(int(v) for v in _floats(shape, 2)) if shape else None,
        meta=meta,
        origin=_floats(origin, 2) if origin else None,
        hot_sigma=cp["calibration"].getfloat("hot_sigma", 5.0),
        denoise=denoise,
        segment=segment,
        filter=policy,
        gate=gate,
        bin_height=cp["stats"].getfloat("bin_height", 2.0),
        snip_m=cp["stats"].getint("snip_m", 12),
        workers=cp["run"].getint("workers", 1),
        dump_intermediate=cp["run"].getboolean("dump_intermediate", False),
    )
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "roi":
            cfg.meta = replace(cfg.meta, roi=value)
        else:
            setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# frame-parallel phase

# Inputs for worker processes; set before the pool forks so pages are shared
# copy-on-write instead of pickled per task.
_STATE: dict = {}


def _process(index: int):
    st = _STATE
    frame = st["frames"][index]
    if st["roi"] is not None:
        frame = crop(frame, st["roi"])
    norm = normalize(frame, st["cal"])
    den = curvature_flow_filter(norm, st["cff"]) if st["cff"] is not None else norm
    seg = segment_frame(den, st["segment"], st["origin"])
    extra = None
    if st["dump"]:
        extra = (norm.pixels.astype(np.float32), den.pixels.astype(np.float32), seg.mask.astype(np.uint8))
    return seg.detections, extra


def _run_frames(n: int, workers: int) -> list:
    if workers == 1 or n < 2:
        return [_process(i) for i in range(n)]
    ctx = multiprocessing.get_context("fork")
    chunk = max(1, n // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_process, range(n), chunksize=chunk))


def load_calibration(cfg: PipelineConfig) -> CalibrationSet:
    if cfg.calibration is not None:
        return CalibrationSet.load(cfg.calibration)
    meta = cfg.meta
    dark = frames_from_arrays(read_stack(cfg.dark, cfg.fmt, cfg.raw_shape), meta)
    flat = frames_from_arrays(read_stack(cfg.flat, cfg.fmt, cfg.raw_shape), meta)
    return build_calibration(dark, flat, cfg.hot_sigma)


def prepare(cfg: PipelineConfig):
    """Load frames and calibration, crop, and fix the denoise parameters.

    Returns ``(frames, cal_cropped, cff_params, origin)``; ``frames`` are
    uncropped raw frames.
    """
    frames = frames_from_arrays(read_stack(cfg.raw, cfg.fmt, cfg.raw_shape), cfg.meta)
    cal = load_calibration(cfg)
    roi = cfg.meta.roi
    if roi is not None:
        roi.check(frames[0].width, frames[0].height)
        cal = crop_calibration(cal, roi)
    h, w = cal.shape
    origin = cfg.origin if cfg.origin is not None else (w / 2.0, float(h))
    cff = None
    if cfg.denoise.enabled:
        first = normalize(crop(frames[0], roi) if roi is not None else frames[0], cal)
        cff = cfg.denoise.params(first)
    return frames, cal, cff, origin


# ---------------------------------------------------------------------------
# artifacts


def _f(v: float, digits: int = 6) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def detection_row(d: Detection) -> list:
    return [d.frame_index, _f(d.time), _f(d.x), _f(d.y), _f(d.a), _f(d.b), _f(d.theta), _f(d.area), _f(d.aspect), d.quality]


def write_detections_csv(path: str | Path, dets: Sequence[Detection], extra: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_COLUMNS + (["reason"] if extra is not None else []))
        for i, d in enumerate(dets):
            w.writerow(detection_row(d) + ([extra[i]] if extra is not None else []))


def read_detections_csv(path: str | Path) -> list[Detection]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                Detection(
                    int(row["frame_index"]), float(row["time_s"]), float(row["x_mm"]), float(row["y_mm"]),
                    float(row["a_mm"]), float(row["b_mm"]), float(row["theta_rad"]), float(row["area_mm2"]),
                    row.get("quality") or "ok",
                )
            )
    return out


def _write_trajectories(path: Path, trajs: Sequence[Trajectory], frame_rate: float) -> list:
    samples = []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory_id"] + DETECTION_COLUMNS[:-1] + ["vx_mm_s", "vy_mm_s"])
        for tr in trajs:
            vel = compute_velocities(tr, frame_rate)
            samples.extend(vel)
            for i, d in enumerate(tr.detections):
                vx, vy = (vel[i].vx, vel[i].vy) if vel else (math.nan, math.nan)
                w.writerow([tr.id] + detection_row(d)[:-1] + [_f(vx), _f(vy)])
    return samples


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, artifacts: Sequence[Path], status: str, failed_stage: str | None = None, error: str | None = None) -> Path:
    entries = [
        {"path": str(p.relative_to(out)), "sha256": sha256(p), "bytes": p.stat().st_size}
        for p in sorted(artifacts)
        if p.exists()
    ]
    doc = {"status": status, "failed_stage": failed_stage, "error": error, "artifacts": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# run


@dataclass
class RunResult:
    status: int
    manifest: Path
    detections: list[Detection] = field(default_factory=list)
    trajectories: list[Trajectory] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    profile: VelocityProfile | None = None
    envelope: EnvelopeStats | None = None
    failed_stage: str | None = None


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    """Run every stage and write artifacts plus ``manifest.json`` to ``cfg.output``.

    Never raises for stage failures: the failing stage is logged, a partial
    manifest is written and ``status`` is 1.
    """
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: list[Path] = []
    result = RunResult(status=0, manifest=out / "manifest.json")
    stage = "config"
    try:
        try:
            cfg.validate()
        except ValueError as exc:
            raise StageError("config", str(exc)) from exc

        stage = "load"
        t0 = time.perf_counter()
        frames, cal, cff, origin = prepare(cfg)
        diag(stage, f"{len(frames)} frames {frames[0].width}x{frames[0].height}")
        if cff is not None:
            diag(stage, f"k={cff.k:.6g} epsilon={cff.epsilon:.3g} steps={cff.n_steps}")

        stage = "detect"
        _STATE.update(frames=frames, cal=cal, cff=cff, segment=cfg.segment, origin=origin, roi=cfg.meta.roi, dump=cfg.dump_intermediate)
        try:
            per_frame = _run_frames(len(frames), cfg.workers)
        finally:
            _STATE.clear()
        raw_dets = [d for dets, _ in per_frame for d in dets]
        diag(stage, f"{len(raw_dets)} raw detections with {cfg.workers} worker(s) in {time.perf_counter() - t0:.1f} s")
        if cfg.dump_intermediate:
            inter = out / "intermediate"
            inter.mkdir(exist_ok=True)
            for k, name in enumerate(("normalized", "denoised", "mask")):
                p = inter / f"{name}.tif"
                tifffile.imwrite(p, np.stack([e[k] for _, e in per_frame]), metadata=None)
                artifacts.append(p)

        stage = "filter"
        kept, rejected = filter_detections(raw_dets, cfg.filter)
        kept.sort(key=lambda d: (d.frame_index, -d.y, d.x))
        p = out / "detections.csv"
        write_detections_csv(p, kept)
        artifacts.append(p)
        p = out / "rejected.csv"
        write_detections_csv(p, [r.detection for r in rejected], [r.reason for r in rejected])
        artifacts.append(p)
        diag(stage, f"kept {len(kept)}, rejected {len(rejected)}")
        if not kept:
            raise StageError(stage, "no detections survived filtering")

        stage = "link"
        trajs = link_trajectories(kept, cfg.gate)
        p = out / "trajectories.csv"
        samples = _write_trajectories(p, trajs, cfg.meta.frame_rate)
        artifacts.append(p)
        diag(stage, f"{len(trajs)} trajectories, {len(samples)} velocity samples")

        stage = "profile"
        if not samples:
            raise StageError(stage, "no trajectory long enough for velocities")
        prof = bin_velocity_profile(samples, cfg.bin_height)
        p = out / "velocity_profile.csv"
        _write_rows(
            p,
            ["y_lo_mm", "y_hi_mm", "y_mm", "count", "vx_mean_mm_s", "vx_err_mm_s", "vy_mean_mm_s", "vy_err_mm_s"],
            [
                [_f(prof.edges[k]), _f(prof.edges[k + 1]), _f(prof.centers[k]), int(prof.count[k]),
                 _f(prof.vx_mean[k]), _f(prof.vx_err[k]), _f(prof.vy_mean[k]), _f(prof.vy_err[k])]
                for k in range(len(prof))
            ],
        )
        artifacts.append(p)

        stage = "envelope"
        env = envelope_stats(kept, cfg.bin_height, cfg.snip_m)
        p = out / "envelope.csv"
        _write_rows(
            p,
            ["y_mm", "left_mm", "right_mm", "width_mm"],
            [[_f(y), _f(l), _f(r), _f(r - l)] for y, l, r in zip(env.y, env.left, env.right)],
        )
        artifacts.append(p)

        stage = "correlate"
        corr = correlate_parameters(kept, samples)
        reasons: dict[str, int] = {}
        for r in rejected:
            reasons[r.reason] = reasons.get(r.reason, 0) + 1
        stats = {
            "frames": len(frames),
            "detections_raw": len(raw_dets),
            "detections_kept": len(kept),
            "rejections": dict(sorted(reasons.items())),
            "trajectories": len(trajs),
            "velocity_samples": len(samples),
            "delta_x_mm": env.delta_x,
            "Delta_x_mm": env.Delta_x,
            "correlations": corr,
            "cff": asdict(cff) if cff is not None else None,
            "meta": {
                "frame_rate": cfg.meta.frame_rate,
                "pixel_pitch": cfg.meta.pixel_pitch,
                "flow_rate": cfg.meta.flow_rate,
                "field_applied": cfg.meta.field_applied,
                "field_magnitude": cfg.meta.field_magnitude,
                "slab_thickness": cfg.meta.slab_thickness,
            },
        }
        p = out / "stats.json"
        p.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        artifacts.append(p)
        result.detections, result.trajectories, result.stats = kept, trajs, stats
        result.profile, result.envelope = prof, env
        result.manifest = write_manifest(out, artifacts, "ok")
        diag("done", f"{len(artifacts)} artifacts in {time.perf_counter() - t0:.1f} s")
    except Exception as exc:  # noqa: BLE001  any failure is reported against its stage
        name = exc.stage if isinstance(exc, StageError) else stage
        msg = exc.message if isinstance(exc, StageError) else str(exc)
        diag(name, msg, level=logging.ERROR)
        result.status = 1
        result.failed_stage = name
        result.manifest = write_manifest(out, artifacts, "failed", name, msg)
    return result
