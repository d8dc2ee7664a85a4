"""Bubble segmentation: thresholding, morphology, contours and ellipse fits.

Two routes turn a denoised transmission frame into bubble silhouettes:

* global: Gaussian blur, Otsu threshold, hole filling, labelling;
* local: adaptive (moving-mean) binarization and hole filling, intended
  for clean simulation-style frames.

Each accepted component is summarised by its equivalent ellipse, the
ellipse with the same first and second moments as the filled region.
Coordinates in :class:`Detection` are millimetres relative to the inlet,
``x`` to the right and ``y`` upwards (elevation).  Pixel centroids are
kept alongside for overlays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, signal
from skimage import morphology

from .denoise import gaussian_blur
from .imagestack import Frame, robust_sigma

QUALITY_OK = "ok"
QUALITY_EDGE = "edge_touching"
QUALITY_LOW = "low_contrast"

# variance of a unit square pixel along one axis
_PIXEL_VAR = 1.0 / 12.0


class DegenerateHistogramError(ValueError):
    pass


class SurfaceNotFoundError(ValueError):
    pass


def _pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)


# ---------------------------------------------------------------------------
# thresholding


def otsu_bin(counts: Sequence[int]) -> int:
    """Index of the last bin of the lower class maximizing between-class variance.

    Bin values are taken as bin indices; the maximizer is invariant to the
    affine map onto bin centres.  Scores are compared as exact integer
    ratios, so ties resolve to the first maximizing split.
    """
    counts = [int(c) for c in counts]
    total_n = sum(counts)
    total_s = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = -1, 0, 1
    n0 = s0 = 0
    for k in range(len(counts) - 1):
        n0 += counts[k]
        s0 += k * counts[k]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_B^2 * N^2 = (N*S0 - n0*S)^2 / (n0*n1)
        num = (total_n * s0 - n0 * total_s) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    if best_k < 0 or best_num == 0:
        raise DegenerateHistogramError("degenerate histogram")
    return best_k


def otsu_threshold(frame, histogram_bins: int = 256, mask: np.ndarray | None = None) -> float:
    """Otsu threshold of ``frame`` (optionally restricted to ``mask``).

    Returns the centre of the last bin of the lower class; pixels strictly
    above it belong to the upper class.
    """
    vals = _pixels(frame)
    if mask is not None:
        vals = vals[mask]
    vals = vals.ravel()
    if vals.size == 0:
        raise DegenerateHistogramError("degenerate histogram")
    lo, hi = float(vals.min()), float(vals.max())
    if not hi > lo:
        raise DegenerateHistogramError("degenerate histogram")
    counts, edges = np.histogram(vals, bins=histogram_bins, range=(lo, hi))
    k = otsu_bin(counts)
    return 0.5 * (edges[k] + edges[k + 1])


def binarize(frame, threshold: float, polarity: str = "above") -> np.ndarray:
    img = _pixels(frame)
    if polarity == "above":
        return img > threshold
    if polarity == "below":
        return img < threshold
    raise ValueError(f"polarity must be 'above' or 'below', got {polarity!r}")


def adaptive_binarize(frame, window: int, offset: float = 0.0) -> np.ndarray:
    """Set pixels brighter than their ``window`` x ``window`` mean plus ``offset``."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    img = _pixels(frame).astype(np.float64)
    local = ndimage.uniform_filter(img, size=window, mode="reflect")
    return img > local + offset


# ---------------------------------------------------------------------------
# morphology


def morphological_thin(mask: np.ndarray) -> np.ndarray:
    """Two-subiteration parallel thinning to a one-pixel-wide 8-connected skeleton.

    Topology is preserved: a 2x2 block shrinks to one pixel instead of vanishing.
    """
    return morphology.thin(np.asarray(mask, dtype=bool))


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Set every background region that is not connected to the border."""
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


@dataclass(frozen=True)
class Component:
    label: int
    pixel_count: int
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)
    touches_border: bool


def connected_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, list[Component]]:
    if connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    elif connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    else:
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return labels, []
    h, w = mask.shape
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    comps = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        r0, r1 = sl[0].start, sl[0].stop
        c0, c1 = sl[1].start, sl[1].stop
        comps.append(
            Component(lab, int(sizes[lab]), (r0, c0, r1, c1), r0 == 0 or c0 == 0 or r1 == h or c1 == w)
        )
    return labels, comps


# ---------------------------------------------------------------------------
# contours


@dataclass(frozen=True)
class Contour:
    """Closed boundary as ``(row, col)`` points, counterclockwise on screen."""

    points: np.ndarray
    degenerate: bool = False

    def __len__(self) -> int:
        return len(self.points)

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        d = np.diff(np.vstack([self.points, self.points[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    @property
    def is_simple(self) -> bool:
        return len({tuple(p) for p in self.points}) == len(self.points)

    def signed_area(self) -> float:
        """Shoelace area with x = col and y = -row (positive when counterclockwise)."""
        x = self.points[:, 1].astype(float)
        y = -self.points[:, 0].astype(float)
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


# clockwise on screen, starting west
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))


def trace_contour(region: np.ndarray) -> Contour:
    """Moore-neighbour boundary trace of the region's first raster pixel's component."""
    region = np.asarray(region, dtype=bool)
    pts = np.argwhere(region)
    if len(pts) == 0:
        raise ValueError("trace_contour needs a non-empty region")
    h, w = region.shape
    start = (int(pts[0][0]), int(pts[0][1]))
    path = [start]
    cur, back = start, 0  # west of the first raster pixel is background
    first_step = None
    while True:
        for k in range(1, 9):
            d = (back + k) % 8
            r, c = cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1]
            if 0 <= r < h and 0 <= c < w and region[r, c]:
                break
        else:
            return Contour(np.array(path), degenerate=True)
        nxt = (r, c)
        if cur == start and first_step is not None and nxt == first_step:
            break
        if first_step is None:
            first_step = nxt
        bd = _MOORE[(d - 1) % 8]
        br, bc = cur[0] + bd[0] - nxt[0], cur[1] + bd[1] - nxt[1]
        back = _MOORE.index((br, bc))
        path.append(nxt)
        cur = nxt
    if len(path) > 1 and path[-1] == start:
        path.pop()
    # the Moore walk runs clockwise on screen
    pts = np.array(path[::-1])
    pts = np.roll(pts, 1, axis=0)
    return Contour(pts, degenerate=len(pts) < 3)


# ---------------------------------------------------------------------------
# ellipse fitting


@dataclass(frozen=True)
class Detection:
    """One fitted bubble ellipse; lengths in mm, angle in radians from +x."""

    frame_index: int
    time: float
    x: float
    y: float
    a: float
    b: float
    theta: float
    area: float
    quality: str = QUALITY_OK
    col: float = field(default=math.nan, compare=False)
    row: float = field(default=math.nan, compare=False)

    @property
    def aspect(self) -> float:
        return self.a / self.b


def _wrap_half_pi(theta: float) -> float:
    # map onto (-pi/2, pi/2]
    t = math.fmod(theta, math.pi)
    if t <= -math.pi / 2:
        t += math.pi
    elif t > math.pi / 2:
        t -= math.pi
    return t


def fit_ellipse(
    region,
    pitch: float,
    origin: tuple[float, float] = (0.0, 0.0),
    frame_index: int = 0,
    time: float = 0.0,
    touches_border: bool = False,
) -> Detection:
    """Equivalent-ellipse fit of a filled region.

    ``region`` is a boolean mask or a ``(rows, cols)`` pair of index arrays.
    ``origin`` is the inlet position as ``(col, row)`` in pixels.  Semi-axes
    are ``2 * sqrt(eigenvalue)`` of the second central moments of the union
    of unit pixel squares.
    """
    if isinstance(region, tuple):
        rows, cols = (np.asarray(v, dtype=np.float64) for v in region)
    else:
        rows, cols = (v.astype(np.float64) for v in np.nonzero(region))
    n = rows.size
    if n == 0:
        raise ValueError("fit_ellipse needs a non-empty region")
    cr, cc = rows.mean(), cols.mean()
    dx = cols - cc
    dy = -(rows - cr)
    sxx = float(np.dot(dx, dx)) / n
    syy = float(np.dot(dy, dy)) / n
    sxy = float(np.dot(dx, dy)) / n

    half_tr = 0.5 * (sxx + syy)
    disc = math.hypot(0.5 * (sxx - syy), sxy)
    lam1, lam2 = half_tr + disc, max(half_tr - disc, 0.0)
    theta = 0.5 * math.atan2(2.0 * sxy, sxx - syy) if disc > 0 else 0.0

    a = 2.0 * math.sqrt(lam1 + _PIXEL_VAR) * pitch
    b = 2.0 * math.sqrt(lam2 + _PIXEL_VAR) * pitch
    quality = QUALITY_EDGE if touches_border else QUALITY_OK
    if lam2 < 1e-12:
        quality = QUALITY_LOW
        b = max(b, 0.5 * pitch)
    return Detection(
        frame_index=frame_index,
        time=time,
        x=(cc - origin[0]) * pitch,
        y=(origin[1] - cr) * pitch,
        a=a,
        b=b,
        theta=_wrap_half_pi(theta),
        area=n * pitch * pitch,
        quality=quality,
        col=cc,
        row=cr,
    )


# ---------------------------------------------------------------------------
# Shen-Castan


def isef_smooth(img: np.ndarray, b: float) -> np.ndarray:
    """Infinite symmetric exponential filter, applied along both axes.

    Causal and anticausal first-order recursions, each started in steady
    state with the border value; the combined impulse response is
    ``(1 - b) / (1 + b) * b**|n|``.
    """
    num, den = [1.0 - b], [1.0, -b]
    zi = signal.lfilter_zi(num, den)[0]
    out = np.asarray(img, dtype=np.float64)
    for axis in (0, 1):
        x = np.moveaxis(out, axis, -1)
        causal, _ = signal.lfilter(num, den, x, axis=-1, zi=zi * x[..., :1])
        xr = x[..., ::-1]
        anti, _ = signal.lfilter(num, den, xr, axis=-1, zi=zi * xr[..., :1])
        y = (causal + anti[..., ::-1] - (1.0 - b) * x) / (1.0 + b)
        out = np.moveaxis(y, -1, axis)
    return np.ascontiguousarray(out)


def shen_castan_edges(frame, smoothing: float = 0.8, rel_threshold: float = 0.2) -> np.ndarray:
    """Zero crossings of the band-limited Laplacian, thinned to 1 px.

    ``smoothing`` is the ISEF pole ``b`` in (0, 1).  Crossings are kept when
    the smoothed gradient there exceeds ``rel_threshold`` times its maximum;
    the pixel on the positive (darker) side of each crossing is marked.
    """
    if not 0.0 < smoothing < 1.0:
        raise ValueError("smoothing must lie in (0, 1)")
    img = _pixels(frame).astype(np.float64)
    edges = np.zeros(img.shape, dtype=bool)
    if not np.ptp(img) > 0:
        return edges
    smooth = isef_smooth(img, smoothing)
    blli = smooth - img
    gy, gx = np.gradient(smooth)
    grad = np.hypot(gx, gy)
    thresh = rel_threshold * float(grad.max())
    tol = 1e-12 * float(np.abs(img).max())

    pos = blli > tol
    neg = blli < -tol
    strong = grad > thresh
    # horizontal pairs
    cross = (pos[:, :-1] & neg[:, 1:]) | (neg[:, :-1] & pos[:, 1:])
    cross &= strong[:, :-1] | strong[:, 1:]
    edges[:, :-1] |= cross & pos[:, :-1]
    edges[:, 1:] |= cross & pos[:, 1:]
    # vertical pairs
    cross = (pos[:-1, :] & neg[1:, :]) | (neg[:-1, :] & pos[1:, :])
    cross &= strong[:-1, :] | strong[1:, :]
    edges[:-1, :] |= cross & pos[:-1, :]
    edges[1:, :] |= cross & pos[1:, :]
    return morphological_thin(edges)


# ---------------------------------------------------------------------------
# free surface


def surface_row(frame, gradient_floor: float = 0.3, min_fraction: float = 0.5) -> float:
    """Row coordinate of the bright-over-dark interface (air above liquid).

    Per column the strongest downward intensity drop is located between two
    rows; the median over columns whose drop exceeds ``gradient_floor`` is
    returned as a half-integer row position.
    """
    img = _pixels(frame)
    if img.shape[0] < 2:
        raise SurfaceNotFoundError("surface not found")
    drop = img[:-1, :] - img[1:, :]
    rows = np.argmax(drop, axis=0)
    strength = drop[rows, np.arange(img.shape[1])]
    valid = strength >= gradient_floor
    if valid.sum() < max(1, min_fraction * img.shape[1]):
        raise SurfaceNotFoundError("surface not found")
    return float(np.median(rows[valid])) + 0.5


def detect_free_surface(
    frame: Frame,
    origin_row: float | None = None,
    gradient_floor: float = 0.3,
    min_fraction: float = 0.5,
) -> float:
    """Free-surface elevation in mm above the inlet row (default: frame bottom)."""
    row = surface_row(frame, gradient_floor, min_fraction)
    origin_row = frame.height if origin_row is None else origin_row
    return (origin_row - row) * frame.pixel_pitch


# ---------------------------------------------------------------------------
# full detector


@dataclass(frozen=True)
class SegmentParams:
    method: str = "otsu"  # or "adaptive"
    blur_sigma: float = 1.5
    histogram_bins: int = 256
    min_area: int = 20
    max_aspect: float = 4.0
    contrast_sigma: float = 3.0
    grow_fraction: float | None = 0.12  # of each core's peak contrast; None disables
    grow_sigma: float = 3.0  # growth never goes below this many background sigmas
    adaptive_window: int = 51
    adaptive_offset: float = 0.0
    free_surface: bool = True
    surface_gradient_floor: float = 0.3
    surface_margin: float = 3.0  # in units of the largest semi-major axis

    def __post_init__(self):
        if self.method not in ("otsu", "adaptive"):
            raise ValueError("SegmentParams.method must be 'otsu' or 'adaptive'")
        if self.min_area < 1:
            raise ValueError("SegmentParams.min_area must be >= 1")
        if self.max_aspect < 1:
            raise ValueError("SegmentParams.max_aspect must be >= 1")
        if self.blur_sigma < 0:
            raise ValueError("SegmentParams.blur_sigma must be >= 0")


@dataclass
class Segmentation:
    mask: np.ndarray
    labels: np.ndarray
    detections: list[Detection]
    kept_labels: list[int]
    threshold: float | None = None
    surface_row: float | None = None


def grow_regions(
    seeds: np.ndarray,
    img: np.ndarray,
    background: float,
    fraction: float,
    floor: float = 0.0,
    region: np.ndarray | None = None,
    peak_img: np.ndarray | None = None,
) -> np.ndarray:
    """Grow each seed component down to a fraction of its own peak contrast.

    A seed with peak ``p`` above ``background`` absorbs the 8-connected
    pixels of ``img`` brighter than ``background + max(fraction * p, floor)``.
    Peaks are read from ``peak_img`` (default ``img``).  A global threshold
    cuts a smooth dome well inside its outline; this puts the outline back
    without merging unrelated faint blobs.
    """
    out = seeds.copy()
    allowed = np.ones(img.shape, bool) if region is None else region
    labels, n = ndimage.label(seeds, structure=np.ones((3, 3), bool))
    if n == 0:
        return out
    peaks = ndimage.maximum(img if peak_img is None else peak_img, labels, np.arange(1, n + 1))
    # group seeds by growth level so each level needs one labelling pass
    levels = background + np.maximum(fraction * (np.asarray(peaks) - background), floor)
    for level in np.unique(levels):
        ids = np.nonzero(levels == level)[0] + 1
        cand, _ = ndimage.label((img > level) & allowed | np.isin(labels, ids), structure=np.ones((3, 3), bool))
        hit = np.unique(cand[np.isin(labels, ids)])
        out |= np.isin(cand, hit[hit > 0])
    return out


def segment_frame(frame: Frame, params: SegmentParams = SegmentParams(), origin=None) -> Segmentation:
    """Run the detector and keep the intermediate masks for inspection."""
    h, w = frame.shape
    origin = (w / 2.0, float(h)) if origin is None else origin
    img = gaussian_blur(frame.pixels, params.blur_sigma)

    region = np.ones(img.shape, dtype=bool)
    surf = None
    if params.free_surface:
        try:
            surf = surface_row(frame.pixels, params.surface_gradient_floor)
            # the blur carries the bright air band a few rows into the liquid
            region[: int(math.ceil(surf + 3.0 * params.blur_sigma)), :] = False
        except SurfaceNotFoundError:
            surf = None

    empty = Segmentation(np.zeros(img.shape, bool), np.zeros(img.shape, np.int32), [], [], None, surf)
    if not region.any() or not np.ptp(img[region]) > 0:
        return empty

    threshold = None
    if params.method == "otsu":
        threshold = otsu_threshold(img, params.histogram_bins, mask=region)
        mask = binarize(img, threshold, "above")
    else:
        mask = adaptive_binarize(img, params.adaptive_window, params.adaptive_offset)
    mask &= region
    bg_med, bg_sigma = robust_sigma(img[region])
    if threshold is not None and params.grow_fraction is not None:
        # grow on the unblurred pixels so the detection blur does not widen outlines
        raw_med, raw_sigma = robust_sigma(frame.pixels[region])
        mask = grow_regions(
            mask, frame.pixels, raw_med, params.grow_fraction, params.grow_sigma * raw_sigma, region, img
        )
    mask = fill_holes(mask)

    labels, comps = connected_components(mask, 8)
    found: list[tuple[Detection, int]] = []
    slices = ndimage.find_objects(labels)
    for comp in comps:
        if comp.pixel_count < params.min_area:
            continue
        sl = slices[comp.label - 1]
        sub = labels[sl] == comp.label
        if img[sl][sub].mean() - bg_med < params.contrast_sigma * bg_sigma:
            continue
        rr, cc = np.nonzero(sub)
        det = fit_ellipse(
            (rr + sl[0].start, cc + sl[1].start),
            frame.pixel_pitch,
            origin,
            frame.frame_index,
            frame.time,
            comp.touches_border,
        )
        if det.aspect > params.max_aspect:
            continue
        found.append((det, comp.label))

    if surf is not None and found:
        margin = params.surface_margin * max(d.a for d, _ in found) / frame.pixel_pitch
        found = [(d, lab) for d, lab in found if d.row >= surf + margin]

    found.sort(key=lambda t: (t[0].row, t[0].col))
    return Segmentation(
        mask, labels, [d for d, _ in found], [lab for _, lab in found], threshold, surf
    )


def detect_bubbles(frame: Frame, params: SegmentParams = SegmentParams(), origin=None) -> list[Detection]:
    """Bubble ellipses in a normalized, denoised frame, sorted by row then column.

    ``origin`` is the inlet pixel position ``(col, row)``; by default the
    bottom centre of the frame.
    """
    return segment_frame(frame, params, origin).detections
