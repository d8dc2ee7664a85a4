"""Radiograph sequence loading and flat-field calibration.

Raw detector frames are converted to transmission images with

    T = (raw - dark) / (flat - dark)

where ``dark`` and ``flat`` are per-pixel means of dark-current and
open-beam reference stacks.  Hot pixels are found on the open-beam mean
and patched after normalization so the grid stays dense.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import tifffile

log = logging.getLogger(__name__)

DEFAULT_PITCH_MM = 0.0551
DEFAULT_FRAME_RATE = 100.0
MAD_TO_SIGMA = 1.4826

TIFF_SUFFIXES = (".tif", ".tiff")
RAW_SUFFIXES = (".raw", ".bin")


class ImageStackError(ValueError):
    """Raised for unreadable, empty or inconsistent frame stacks."""


class CalibrationError(ValueError):
    """Raised when dark/flat references cannot normalize a frame."""


@dataclass(frozen=True)
class Frame:
    """A single 2-D intensity grid with its acquisition metadata."""

    pixels: np.ndarray
    pixel_pitch: float = DEFAULT_PITCH_MM
    frame_index: int = 0
    time: float = 0.0

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"frame pixels must be 2-D, got shape {self.pixels.shape}")
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be > 0")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "Frame":
        return replace(self, pixels=pixels)


@dataclass(frozen=True)
class Roi:
    """Pixel rectangle: column ``x``, row ``y``, width ``w``, height ``h``."""

    x: int
    y: int
    w: int
    h: int

    @classmethod
    def parse(cls, text: str) -> "Roi":
        parts = [int(p) for p in text.replace(" ", "").split(",")]
        if len(parts) != 4:
            raise ValueError(f"roi must be 'x,y,w,h', got {text!r}")
        return cls(*parts)

    def check(self, width: int, height: int) -> None:
        if self.w < 1 or self.h < 1 or self.x < 0 or self.y < 0:
            raise ValueError(f"invalid roi {self}")
        if self.x + self.w > width or self.y + self.h > height:
            raise ValueError(f"roi {self} exceeds frame bounds {width}x{height}")


@dataclass(frozen=True)
class SequenceMeta:
    frame_rate: float = DEFAULT_FRAME_RATE
    flow_rate: float = 0.0  # cm^3/min
    field_applied: bool = False
    field_magnitude: float = 0.0  # T
    slab_thickness: float = 20.0  # mm
    roi: Roi | None = None
    pixel_pitch: float = DEFAULT_PITCH_MM

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise ValueError("SequenceMeta.frame_rate must be > 0")
        if self.flow_rate < 0:
            raise ValueError("SequenceMeta.flow_rate must be >= 0")
        if not self.pixel_pitch > 0:
            raise ValueError("SequenceMeta.pixel_pitch must be > 0")


@dataclass(frozen=True)
class CalibrationSet:
    dark: Frame
    flat: Frame
    hot_pixel_mask: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.dark.shape

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path,
            dark=self.dark.pixels,
            flat=self.flat.pixels,
            hot_pixel_mask=self.hot_pixel_mask,
            pixel_pitch=self.dark.pixel_pitch,
        )

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationSet":
        with np.load(path) as data:
            pitch = float(data["pixel_pitch"])
            return cls(
                dark=Frame(data["dark"].astype(np.float64), pitch),
                flat=Frame(data["flat"].astype(np.float64), pitch),
                hot_pixel_mask=data["hot_pixel_mask"].astype(bool),
            )


def _check_depth(arr: np.ndarray, source) -> np.ndarray:
    if arr.dtype not in (np.uint8, np.uint16):
        raise ImageStackError(f"{source}: unsupported pixel type {arr.dtype} (need 8 or 16 bit)")
    return arr


def _read_tiff(path: Path) -> list[np.ndarray]:
    try:
        data = tifffile.imread(path)
    except Exception as exc:  # tifffile raises a zoo of types for bad files
        raise ImageStackError(f"{path}: cannot read TIFF ({exc})") from exc
    _check_depth(data, path)
    if data.ndim == 2:
        return [data]
    if data.ndim == 3:
        return list(data)
    raise ImageStackError(f"{path}: expected 2-D pages, got shape {data.shape}")


def _read_raw(path: Path, shape: tuple[int, int]) -> list[np.ndarray]:
    h, w = shape
    try:
        flat = np.fromfile(path, dtype="<u2")
    except OSError as exc:
        raise ImageStackError(f"{path}: cannot read raw file ({exc})") from exc
    if flat.size == 0 or flat.size % (h * w):
        raise ImageStackError(
            f"{path}: size {flat.size} samples is not a multiple of {w}x{h} frames"
        )
    return list(flat.reshape(-1, h, w))


def read_stack(
    path: str | Path, fmt: str = "tiff_stack", shape: tuple[int, int] | None = None
) -> list[np.ndarray]:
    """Read raw pages from a file or a directory of files, in name order."""
    path = Path(path)
    if fmt not in ("tiff_stack", "raw_u16"):
        raise ImageStackError(f"unknown format {fmt!r}")
    if fmt == "raw_u16" and shape is None:
        raise ImageStackError("raw_u16 input needs frame dimensions (height, width)")
    if not path.exists():
        raise ImageStackError(f"{path}: no such file or directory")

    suffixes = TIFF_SUFFIXES if fmt == "tiff_stack" else RAW_SUFFIXES
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in suffixes)
    else:
        files = [path]
    if not files:
        raise ImageStackError(f"{path}: no frames found")

    pages: list[np.ndarray] = []
    for f in files:
        pages.extend(_read_tiff(f) if fmt == "tiff_stack" else _read_raw(f, shape))
    if not pages:
        raise ImageStackError(f"{path}: no frames found")
    ref = pages[0].shape
    for i, page in enumerate(pages):
        if page.shape != ref:
            raise ImageStackError(
                f"{path}: frame {i} has shape {page.shape}, expected {ref}"
            )
    return pages


def frames_from_arrays(
    pages: Iterable[np.ndarray], meta: SequenceMeta, start_index: int = 0
) -> list[Frame]:
    return [
        Frame(
            np.asarray(p, dtype=np.float64),
            meta.pixel_pitch,
            start_index + i,
            (start_index + i) / meta.frame_rate,
        )
        for i, p in enumerate(pages)
    ]


def load_sequence(
    path: str | Path,
    fmt: str = "tiff_stack",
    meta: SequenceMeta | None = None,
    shape: tuple[int, int] | None = None,
) -> list[Frame]:
    """Load a radiograph sequence as float frames ordered by index.

    ``path`` is either a multi-page file or a directory whose files are
    taken in lexical order.  ``shape`` (height, width) is required for
    headerless ``raw_u16`` data.
    """
    meta = meta or SequenceMeta()
    frames = frames_from_arrays(read_stack(path, fmt, shape), meta)
    log.debug("loaded %d frames from %s", len(frames), path)
    return frames


def _mean_stack(frames: Sequence[Frame], what: str) -> np.ndarray:
    if not frames:
        raise CalibrationError(f"no {what} frames given")
    ref = frames[0].shape
    acc = np.zeros(ref, dtype=np.float64)
    for f in frames:
        if f.shape != ref:
            raise CalibrationError(f"{what} frame {f.frame_index} has shape {f.shape}, expected {ref}")
        acc += f.pixels
    return acc / len(frames)


def robust_sigma(values: np.ndarray) -> tuple[float, float]:
    """Median and MAD-based standard deviation estimate."""
    med = float(np.median(values))
    return med, MAD_TO_SIGMA * float(np.median(np.abs(values - med)))


def build_calibration(
    dark_frames: Sequence[Frame], flat_frames: Sequence[Frame], hot_sigma: float = 5.0
) -> CalibrationSet:
    """Average dark and open-beam stacks and flag hot pixels.

    A pixel is hot when its open-beam mean exceeds the global median by
    more than ``hot_sigma`` robust standard deviations.
    """
    dark = _mean_stack(dark_frames, "dark")
    flat = _mean_stack(flat_frames, "flat")
    if dark.shape != flat.shape:
        raise CalibrationError(f"dark shape {dark.shape} differs from flat shape {flat.shape}")

    med, sigma = robust_sigma(flat)
    mask = flat > med + hot_sigma * sigma

    bad = (flat - dark <= 0) & ~mask
    if bad.any():
        raise CalibrationError(
            f"flat <= dark at {int(bad.sum())} non-masked pixels; cannot normalize"
        )
    pitch = flat_frames[0].pixel_pitch
    return CalibrationSet(Frame(dark, pitch), Frame(flat, pitch), mask)


def _patch_masked(img: np.ndarray, mask: np.ndarray) -> None:
    """Replace masked pixels in place by the median of valid 3x3 neighbours."""
    h, w = img.shape
    fallback = float(np.median(img[~mask])) if (~mask).any() else 0.0
    for r, c in zip(*np.nonzero(mask)):
        r0, r1 = max(r - 1, 0), min(r + 2, h)
        c0, c1 = max(c - 1, 0), min(c + 2, w)
        vals = img[r0:r1, c0:c1][~mask[r0:r1, c0:c1]]
        img[r, c] = np.median(vals) if vals.size else fallback


def normalize(raw: Frame, cal: CalibrationSet, clamp_max: float = 2.0) -> Frame:
    """Flat-field correct ``raw``; output is clamped to ``[0, clamp_max]``."""
    if raw.shape != cal.shape:
        raise CalibrationError(f"frame shape {raw.shape} does not match calibration {cal.shape}")
    mask = cal.hot_pixel_mask
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (raw.pixels - cal.dark.pixels) / (cal.flat.pixels - cal.dark.pixels)
    out[mask] = 0.0
    np.clip(out, 0.0, clamp_max, out=out)
    if mask.any():
        _patch_masked(out, mask)
    return raw.with_pixels(out)


def crop(frame: Frame, roi: Roi) -> Frame:
    roi.check(frame.width, frame.height)
    sub = frame.pixels[roi.y : roi.y + roi.h, roi.x : roi.x + roi.w].copy()
    return frame.with_pixels(sub)


def crop_calibration(cal: CalibrationSet, roi: Roi) -> CalibrationSet:
    roi.check(cal.dark.width, cal.dark.height)
    sl = (slice(roi.y, roi.y + roi.h), slice(roi.x, roi.x + roi.w))
    return CalibrationSet(crop(cal.dark, roi), crop(cal.flat, roi), cal.hot_pixel_mask[sl].copy())


def write_tiff_stack(path: str | Path, pages: Sequence[np.ndarray] | np.ndarray) -> None:
    """Write 16-bit pages as one multi-page TIFF."""
    arr = np.asarray(pages)
    if arr.dtype != np.uint16:
        raise ValueError("write_tiff_stack expects uint16 data")
    tifffile.imwrite(path, arr, photometric="minisblack", metadata=None)
