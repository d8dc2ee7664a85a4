"""Command line entry point: ``bubbleflow {run,synth,score,calibrate,inspect}``.

Diagnostics go to stderr as ``level stage=... frame=... message`` lines;
results go to files (``score`` also prints its metrics as JSON).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .denoise import curvature_flow_filter
from .imagestack import (
    DEFAULT_PITCH_MM,
    Roi,
    SequenceMeta,
    build_calibration,
    crop,
    frames_from_arrays,
    normalize,
    read_stack,
    write_tiff_stack,
)
from .pipeline import diag, load_config, prepare, read_detections_csv, run_pipeline, setup_logging
from .segment import segment_frame
from .synth import ScenarioSpec, read_truth_csv, render_sequence, score_detections, write_truth_csv

EXAMPLE_CONFIG = """\
# bubbleflow pipeline configuration.  Relative paths resolve against this file.

[paths]
raw = raw.tif               # multi-page TIFF, or a directory of frames in name order
dark = dark.tif             # dark-current stack (averaged)
flat = flat.tif             # open-beam stack (averaged)
# calibration = cal.npz     # from `bubbleflow calibrate`; replaces dark and flat
format = tiff_stack         # tiff_stack | raw_u16
# raw_shape = 512,512       # height,width; required for raw_u16
output = out

[sequence]
frame_rate = {frame_rate}          # frames per second
pixel_pitch = {pitch}   # mm per pixel
origin = {origin}           # inlet position col,row in pixels (after cropping); default bottom centre
flow_rate = 0               # gas flow rate, cm^3/min
field_applied = false
field_magnitude = 0         # T
slab_thickness = {slab}        # mm
# roi = 0,0,512,512         # x,y,w,h crop applied to frames and calibration

[calibration]
hot_sigma = 5               # open-beam pixels this many robust sigmas above the median are hot

[denoise]
enabled = true
k = auto                    # control scale; auto = k_percentile of the first frame's gradient magnitude
k_percentile = 60
tau = 10                    # total diffusion time
dt = 0.2                    # explicit step, must be <= 0.25
epsilon = auto              # gradient regularizer; auto = 1e-4 of the first frame's range
control = exponential       # exponential | none

[segment]
method = otsu               # otsu | adaptive
blur_sigma = 1.5            # px
histogram_bins = 256
min_area = 20               # px
max_aspect = 4
contrast_sigma = 3          # component mean must exceed background by this many sigmas
grow_fraction = 0.12        # grow cores down to this fraction of their peak contrast; none disables
grow_sigma = 3              # growth never goes below this many background sigmas
adaptive_window = 51
adaptive_offset = 0
free_surface = true         # exclude everything above a detected liquid surface
surface_gradient_floor = 0.3
surface_margin = 3          # bubbles within this many semi-major axes of the surface are dropped

[filter]
area_mad_k = 3
max_aspect = 4
# inlet_exclusion = -5,0,5,4   # x0,y0,x1,y1 in mm
# surface_y = 90               # mm
surface_margin = 0
drop_edge_touching = true

[track]
v_max = 400                 # mm/s
max_coast = 2               # frames a track may miss

[stats]
bin_height = 2              # mm
snip_m = 12

[run]
workers = 1
dump_intermediate = false
"""


def example_config(pitch: float = DEFAULT_PITCH_MM, frame_rate: float = 100.0, origin=None, slab: float = 20.0) -> str:
    text = EXAMPLE_CONFIG.format(
        pitch=f"{pitch:.9g}",
        frame_rate=f"{frame_rate:g}",
        origin="" if origin is None else f"{origin[0]:g},{origin[1]:g}",
        slab=f"{slab:g}",
    )
    if origin is None:
        text = text.replace("origin = ", "# origin = ", 1)
    return text


def _cmd_run(args) -> int:
    overrides = {"roi": Roi.parse(args.roi) if args.roi else None, "workers": args.workers}
    if args.dump_intermediate:
        overrides["dump_intermediate"] = True
    if args.out:
        overrides["output"] = Path(args.out)
    try:
        cfg = load_config(args.config, overrides)
    except ValueError as exc:
        diag("config", str(exc), level=logging.ERROR)
        return 2
    res = run_pipeline(cfg)
    return res.status


def _cmd_synth(args) -> int:
    spec = ScenarioSpec.load(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seq = render_sequence(spec, args.seed)
    if args.format == "raw_u16":
        for name, arr in (("raw", seq.raw), ("dark", seq.dark), ("flat", seq.flat)):
            arr.astype("<u2").tofile(out / f"{name}.raw")
    else:
        for name, arr in (("raw", seq.raw), ("dark", seq.dark), ("flat", seq.flat)):
            write_tiff_stack(out / f"{name}.tif", arr)
    write_truth_csv(out / "truth.csv", seq.truth)
    spec.save(out / "scenario.json")
    cfg = example_config(spec.pitch, spec.frame_rate, spec.origin, spec.slab_thickness)
    if args.format == "raw_u16":
        cfg = (
            cfg.replace("raw.tif ", "raw.raw ").replace("dark.tif ", "dark.raw ").replace("flat.tif ", "flat.raw ")
            .replace("format = tiff_stack", "format = raw_u16")
            .replace("# raw_shape = 512,512", f"raw_shape = {spec.height},{spec.width}")
        )
    (out / "pipeline.ini").write_text(cfg)
    diag("synth", f"{spec.n_frames} frames, {len(seq.truth.states)} truth states written to {out}")
    return 0


def _cmd_score(args) -> int:
    pitch = ScenarioSpec.load(args.spec).pitch if args.spec else args.pitch
    dets = read_detections_csv(args.detections)
    truth = read_truth_csv(args.truth)
    score = score_detections(dets, truth, args.match_radius, pitch)
    text = json.dumps(score.as_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _cmd_calibrate(args) -> int:
    meta = SequenceMeta(pixel_pitch=args.pitch)
    shape = tuple(int(v) for v in args.raw_shape.split(",")) if args.raw_shape else None
    dark = frames_from_arrays(read_stack(args.dark, args.format, shape), meta)
    flat = frames_from_arrays(read_stack(args.flat, args.format, shape), meta)
    cal = build_calibration(dark, flat, args.hot_sigma)
    cal.save(args.out)
    diag("calibrate", f"{len(dark)} dark, {len(flat)} flat frames; {int(cal.hot_pixel_mask.sum())} hot pixels")
    return 0


def _parse_range(text: str) -> tuple[int, int]:
    if ":" in text:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    return int(text), int(text) + 1


def draw_overlay(img: np.ndarray, mask: np.ndarray, detections, pitch: float) -> np.ndarray:
    """RGB overlay: stretched frame, mask outline in red, fitted ellipses in green."""
    lo, hi = np.percentile(img, [0.5, 99.5])
    grey = np.clip((img - lo) / (hi - lo if hi > lo else 1.0), 0, 1)
    rgb = np.repeat((grey * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    inner = mask.copy()
    inner[1:-1, 1:-1] &= mask[:-2, 1:-1] & mask[2:, 1:-1] & mask[1:-1, :-2] & mask[1:-1, 2:]
    rgb[mask & ~inner] = (255, 0, 0)
    h, w = img.shape
    t = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    for d in detections:
        a, b = d.a / pitch, d.b / pitch
        ct, st = math.cos(d.theta), math.sin(d.theta)
        # theta is measured with y up, rows grow downwards
        cols = d.col + a * np.cos(t) * ct - b * np.sin(t) * st
        rows = d.row - (a * np.cos(t) * st + b * np.sin(t) * ct)
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        rgb[rows[ok].astype(int), cols[ok].astype(int)] = (0, 255, 0)
    return rgb


def _cmd_inspect(args) -> int:
    cfg = load_config(args.config, {"roi": Roi.parse(args.roi) if args.roi else None})
    cfg.validate()
    frames, cal, cff, origin = prepare(cfg)
    lo, hi = _parse_range(args.frames)
    if not (0 <= lo < hi <= len(frames)):
        diag("inspect", f"frame range {lo}:{hi} outside 0:{len(frames)}", level=logging.ERROR)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(lo, hi):
        f = frames[i] if cfg.meta.roi is None else crop(frames[i], cfg.meta.roi)
        norm = normalize(f, cal)
        den = curvature_flow_filter(norm, cff) if cff is not None else norm
        seg = segment_frame(den, cfg.segment, origin)
        Image.fromarray(draw_overlay(norm.pixels, seg.mask, seg.detections, f.pixel_pitch)).save(out / f"frame_{i:05d}.png")
        diag("inspect", f"{len(seg.detections)} detections", frame=i)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bubbleflow", description="Bubble detection and tracking in radiograph sequences.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug diagnostics")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dump-intermediate", action="store_true", help="also write normalized/denoised/mask stacks")
    p.add_argument("--roi", help="x,y,w,h crop")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("synth", help="render a synthetic scenario with ground truth")
    p.add_argument("--spec", required=True, help="scenario JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("tiff_stack", "raw_u16"), default="tiff_stack")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("score", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--match-radius", type=float, default=5.0, help="px")
    p.add_argument("--spec", help="scenario JSON supplying the pixel pitch")
    p.add_argument("--pitch", type=float, default=DEFAULT_PITCH_MM, help="mm/px when no --spec is given")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("calibrate", help="build dark/flat references and the hot pixel mask")
    p.add_argument("--dark", required=True)
    p.add_argument("--flat", required=True)
    p.add_argument("--out", required=True, help=".npz output")
    p.add_argument("--format", choices=("tiff_stack", "raw_u16"), default="tiff_stack")
    p.add_argument("--raw-shape", help="height,width for raw_u16")
    p.add_argument("--hot-sigma", type=float, default=5.0)
    p.add_argument("--pitch", type=float, default=DEFAULT_PITCH_MM)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("inspect", help="write overlay PNGs for a frame range")
    p.add_argument("--config", required=True)
    p.add_argument("--frames", default="0", help="index or start:stop")
    p.add_argument("--out", required=True)
    p.add_argument("--roi")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("example-config", help="print the annotated example configuration")
    p.set_defaults(func=lambda a: print(example_config(), end="") or 0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        diag(args.command, str(exc), level=logging.ERROR)
        return 2


if __name__ == "__main__":
    sys.exit(main())
