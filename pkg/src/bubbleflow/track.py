"""Detection filtering, trajectory linking and flow statistics.

All positions are in mm (x horizontal, y elevation above the inlet) and
velocities in mm/s.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .imagestack import robust_sigma
from .segment import QUALITY_EDGE, Detection


@dataclass(frozen=True)
class FilterPolicy:
    area_mad_k: float = 3.0
    max_aspect: float = 4.0
    inlet_exclusion: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1 in mm
    surface_y: float | None = None  # mm
    surface_margin: float = 0.0  # mm below the surface that is discarded
    duplicate_radius: float = 0.0551  # mm, one pixel at the default pitch
    drop_edge_touching: bool = True


@dataclass(frozen=True)
class Rejection:
    detection: Detection
    reason: str


def _dedup(dets: list[Detection], radius: float) -> tuple[list[Detection], list[Detection]]:
    # keep the largest of any group closer than ``radius``; ties by position
    order = sorted(dets, key=lambda d: (-d.area, d.y, d.x))
    kept: list[Detection] = []
    dropped: list[Detection] = []
    for d in order:
        if any(math.hypot(d.x - k.x, d.y - k.y) <= radius for k in kept):
            dropped.append(d)
        else:
            kept.append(d)
    return kept, dropped


def filter_detections(
    detections: Iterable[Detection], policy: FilterPolicy = FilterPolicy()
) -> tuple[list[Detection], list[Rejection]]:
    """Drop artefacts by logical and statistical rules.

    Rules, in order: within-frame duplicates, border-truncated shapes,
    inlet exclusion box, free-surface margin, aspect ceiling, and area
    outliers beyond ``median +- k * 1.4826 * MAD`` over the survivors.
    """
    by_frame: dict[int, list[Detection]] = defaultdict(list)
    for d in detections:
        by_frame[d.frame_index].append(d)

    rejected: list[Rejection] = []
    survivors: list[Detection] = []
    for fi in sorted(by_frame):
        kept, dropped = _dedup(by_frame[fi], policy.duplicate_radius)
        rejected.extend(Rejection(d, "duplicate") for d in dropped)
        survivors.extend(sorted(kept, key=lambda d: (-d.y, d.x)))

    def reason(d: Detection) -> str | None:
        if policy.drop_edge_touching and d.quality == QUALITY_EDGE:
            return "edge_touching"
        if policy.inlet_exclusion is not None:
            x0, y0, x1, y1 = policy.inlet_exclusion
            if x0 <= d.x <= x1 and y0 <= d.y <= y1:
                return "inlet"
        if policy.surface_y is not None and d.y > policy.surface_y - policy.surface_margin:
            return "surface"
        if d.aspect > policy.max_aspect:
            return "aspect"
        return None

    stage = []
    for d in survivors:
        r = reason(d)
        if r is None:
            stage.append(d)
        else:
            rejected.append(Rejection(d, r))

    kept = stage
    if stage:
        areas = np.array([d.area for d in stage])
        med, sigma = robust_sigma(areas)
        limit = policy.area_mad_k * sigma
        kept = []
        for d in stage:
            if abs(d.area - med) > limit:
                rejected.append(Rejection(d, "area_outlier"))
            else:
                kept.append(d)
    return kept, rejected


# ---------------------------------------------------------------------------
# linking


@dataclass(frozen=True)
class GateParams:
    v_max: float = 400.0  # mm/s
    max_coast: int = 2  # frames
    frame_rate: float = 100.0
    surface_y: float | None = None  # mm; tracks reaching it terminate
    surface_margin: float = 0.0

    @property
    def step_distance(self) -> float:
        """Largest admissible displacement per frame, mm."""
        return self.v_max / self.frame_rate


@dataclass
class Trajectory:
    id: int
    detections: list[Detection] = field(default_factory=list)

    @property
    def birth(self) -> int:
        return self.detections[0].frame_index

    @property
    def death(self) -> int:
        return self.detections[-1].frame_index

    def __len__(self) -> int:
        return len(self.detections)


def _frame_key(d: Detection):
    return (-d.y, d.x, d.area, d.a, d.b, d.theta)


def link_trajectories(detections: Iterable[Detection], gate: GateParams = GateParams()) -> list[Trajectory]:
    """Greedy nearest-neighbour linking between consecutive frames.

    Candidate (track, detection) pairs within the gate are accepted in order
    of distance, then area difference.  A track may miss up to
    ``max_coast`` frames; its gate grows with the number of frames elapsed.
    """
    by_frame: dict[int, list[Detection]] = defaultdict(list)
    for d in detections:
        by_frame[d.frame_index].append(d)

    active: list[Trajectory] = []
    finished: list[Trajectory] = []
    next_id = 0
    for fi in sorted(by_frame):
        dets = sorted(by_frame[fi], key=_frame_key)

        still = []
        for tr in active:
            if fi - tr.death > gate.max_coast + 1:
                finished.append(tr)
            else:
                still.append(tr)
        active = still

        pairs = []
        for ti, tr in enumerate(active):
            last = tr.detections[-1]
            reach = gate.step_distance * (fi - last.frame_index)
            for di, d in enumerate(dets):
                dist = math.hypot(d.x - last.x, d.y - last.y)
                if dist <= reach:
                    pairs.append((dist, abs(d.area - last.area), tr.id, di, ti))
        pairs.sort()
        used_t: set[int] = set()
        used_d: set[int] = set()
        for _, _, _, di, ti in pairs:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            active[ti].detections.append(dets[di])

        for di, d in enumerate(dets):
            if di not in used_d:
                active.append(Trajectory(next_id, [d]))
                next_id += 1

        if gate.surface_y is not None:
            still = []
            for tr in active:
                if tr.detections[-1].y >= gate.surface_y - gate.surface_margin:
                    finished.append(tr)
                else:
                    still.append(tr)
            active = still

    finished.extend(active)
    finished.sort(key=lambda t: t.id)
    return finished


# ---------------------------------------------------------------------------
# velocities


@dataclass(frozen=True)
class VelocitySample:
    y: float
    vx: float
    vy: float
    trajectory_id: int
    time: float
    frame_index: int = 0
    aspect: float = math.nan
    area: float = math.nan


def compute_velocities(traj: Trajectory, frame_rate: float) -> list[VelocitySample]:
    """Finite-difference velocities along one trajectory.

    Central differences inside, one-sided at the ends; the time base uses
    actual frame indices, so coasted gaps are handled.
    """
    dets = traj.detections
    n = len(dets)
    if n < 3:
        return []
    t = np.array([d.frame_index for d in dets], dtype=np.float64) / frame_rate
    x = np.array([d.x for d in dets])
    y = np.array([d.y for d in dets])
    out = []
    for i in range(n):
        lo, hi = max(i - 1, 0), min(i + 1, n - 1)
        dt = t[hi] - t[lo]
        out.append(
            VelocitySample(
                y=float(y[i]),
                vx=float((x[hi] - x[lo]) / dt),
                vy=float((y[hi] - y[lo]) / dt),
                trajectory_id=traj.id,
                time=float(t[i]),
                frame_index=dets[i].frame_index,
                aspect=dets[i].aspect,
                area=dets[i].area,
            )
        )
    return out


@dataclass
class VelocityProfile:
    edges: np.ndarray
    vx_mean: np.ndarray
    vx_err: np.ndarray
    vy_mean: np.ndarray
    vy_err: np.ndarray
    count: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def empty(self) -> np.ndarray:
        return self.count == 0

    def __len__(self) -> int:
        return len(self.count)


def _bin_edges(y: np.ndarray, bin_height: float) -> np.ndarray:
    lo = math.floor(y.min() / bin_height)
    hi = math.floor(y.max() / bin_height) + 1
    return np.arange(lo, hi + 1) * bin_height


def bin_velocity_profile(samples: Sequence[VelocitySample], bin_height: float = 2.0) -> VelocityProfile:
    """Elevation-binned mean velocities with standard errors of the mean."""
    if not samples:
        raise ValueError("bin_velocity_profile needs at least one sample")
    if not bin_height > 0:
        raise ValueError("bin_height must be > 0")
    y = np.array([s.y for s in samples])
    vx = np.array([s.vx for s in samples])
    vy = np.array([s.vy for s in samples])
    edges = _bin_edges(y, bin_height)
    idx = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, len(edges) - 2)

    nb = len(edges) - 1
    count = np.bincount(idx, minlength=nb)
    stats = np.full((4, nb), np.nan)
    for k in range(nb):
        sel = idx == k
        n = count[k]
        if n == 0:
            continue
        stats[0, k] = vx[sel].mean()
        stats[2, k] = vy[sel].mean()
        if n >= 2:
            stats[1, k] = vx[sel].std(ddof=1) / math.sqrt(n)
            stats[3, k] = vy[sel].std(ddof=1) / math.sqrt(n)
    return VelocityProfile(edges, stats[0], stats[1], stats[2], stats[3], count)


# ---------------------------------------------------------------------------
# envelopes


def snip_baseline(series, m: int) -> np.ndarray:
    """SNIP peak clipping with a decreasing window.

    For ``p = m, m-1, ..., 1`` every point with ``p`` neighbours on both
    sides is replaced by ``min(v[i], (v[i-p] + v[i+p]) / 2)``; the first
    and last ``p`` points of each pass are left as they are.
    """
    v = np.array(series, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("snip_baseline expects a 1-D series")
    if m < 1:
        raise ValueError("SNIP window m must be >= 1")
    if v.size < 2 * m + 1:
        raise ValueError(f"series of length {v.size} is shorter than 2*m+1 = {2 * m + 1}")
    if not np.isfinite(v).all():
        raise ValueError("snip_baseline needs a finite series")
    for p in range(m, 0, -1):
        mid = 0.5 * (v[: -2 * p] + v[2 * p :])
        v[p:-p] = np.minimum(v[p:-p], mid)
    return v


@dataclass
class EnvelopeStats:
    y: np.ndarray  # bin centres of populated bins, mm
    left: np.ndarray
    right: np.ndarray
    delta_x: float  # mean envelope width
    Delta_x: float  # maximum envelope width


def envelope_stats(detections: Sequence[Detection], bin_height: float = 2.0, snip_m: int = 12) -> EnvelopeStats:
    """Envelope of the detection cloud across elevation bins.

    Per populated bin the extreme x positions are taken; SNIP clipping of
    the minimum series (and of the negated maximum series) pushes both
    envelopes outward over sparsely sampled bins.
    """
    if not detections:
        raise ValueError("envelope_stats needs detections")
    y = np.array([d.y for d in detections])
    x = np.array([d.x for d in detections])
    edges = _bin_edges(y, bin_height)
    idx = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, len(edges) - 2)
    populated = np.unique(idx)
    if populated.size < 2 * snip_m + 1:
        raise ValueError(
            f"only {populated.size} populated elevation bins; SNIP with m={snip_m} needs {2 * snip_m + 1}"
        )
    min_x = np.array([x[idx == k].min() for k in populated])
    max_x = np.array([x[idx == k].max() for k in populated])
    left = snip_baseline(min_x, snip_m)
    right = -snip_baseline(-max_x, snip_m)
    width = right - left
    centers = 0.5 * (edges[populated] + edges[populated + 1])
    return EnvelopeStats(centers, left, right, float(width.mean()), float(width.max()))


# ---------------------------------------------------------------------------
# correlations


def pearson(a, b) -> tuple[float | None, int]:
    """Pearson r and sample count; ``None`` when either column is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    n = int(a.size)
    if n < 2:
        return None, n
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(np.dot(da, da)), float(np.dot(db, db))
    if sa == 0 or sb == 0:
        return None, n
    r = float(np.dot(da, db) / math.sqrt(sa * sb))
    return max(-1.0, min(1.0, r)), n


def correlate_parameters(
    detections: Sequence[Detection],
    samples: Sequence[VelocitySample],
    flow_rates: Sequence[float] | None = None,
) -> dict[str, dict]:
    """Pearson table: area vs elevation, aspect vs vy, size vs flow rate.

    ``flow_rates`` gives the gas flow rate attached to each detection when
    several sequences are pooled; with a single sequence it is constant and
    that pair is reported as undefined.
    """
    if not detections:
        raise ValueError("correlate_parameters needs detections")
    table = {}

    def put(name, a, b):
        r, n = pearson(a, b)
        table[name] = {"r": r, "n": n, "status": "ok" if r is not None else "undefined"}

    put("area_vs_elevation", [d.area for d in detections], [d.y for d in detections])
    put("aspect_vs_vy", [s.aspect for s in samples], [s.vy for s in samples])
    rates = list(flow_rates) if flow_rates is not None else [math.nan] * len(detections)
    if len(rates) != len(detections):
        raise ValueError("flow_rates must align with detections")
    put("area_vs_flow_rate", [d.area for d in detections], rates)
    return table
