"""Synthetic radiograph sequences with exact ground truth.

A liquid slab of thickness ``slab_thickness`` attenuates the beam with
coefficient ``mu``; each bubble removes a chord of liquid equal to the
path length through a prolate spheroid whose silhouette is the bubble
ellipse (depth semi-axis = semi-minor axis).  Detector counts are

    counts = Poisson(photon_scale * beam(x, y) * exp(-mu * (slab - chord)))
             + dark_level + Normal(0, read_noise)

with hot pixels stuck at ``hot_value`` in every exposure.  Open-beam
(flat) exposures use the same beam without the slab.

Every exposure draws from its own child of one ``SeedSequence``, so a
sequence is reproducible for a fixed seed regardless of the order in
which frames are rendered.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .segment import Detection
from .track import VelocityProfile

FOV_MM = 112.8
BINNED_PITCH = FOV_MM / 512  # 4x4-binned detector covering the full field of view
DEFAULT_MU = math.log(4.0) / 20.0  # background transmission 0.25 through 20 mm


@dataclass
class BubbleTrack:
    """Analytic bubble path; times in s, lengths in mm, angles in rad.

    ``y(t) = y0 + vy0*s + ay*s**2/2`` and
    ``x(t) = x0 + vx_drift*s + amp_x*(sin(omega*s + phase) - sin(phase))``
    with ``s = t - t0``.
    """

    t0: float
    t1: float
    x0: float
    y0: float
    vy0: float
    a: float
    b: float
    ay: float = 0.0
    amp_x: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    vx_drift: float = 0.0
    theta0: float = 0.0
    theta_amp: float = 0.0

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError("bubble semi-axes must satisfy a >= b > 0")

    def alive(self, t: float) -> bool:
        return self.t0 <= t <= self.t1

    def position(self, t: float) -> tuple[float, float]:
        s = t - self.t0
        x = self.x0 + self.vx_drift * s + self.amp_x * (math.sin(self.omega * s + self.phase) - math.sin(self.phase))
        y = self.y0 + self.vy0 * s + 0.5 * self.ay * s * s
        return x, y

    def velocity(self, t: float) -> tuple[float, float]:
        s = t - self.t0
        vx = self.vx_drift + self.amp_x * self.omega * math.cos(self.omega * s + self.phase)
        return vx, self.vy0 + self.ay * s

    def theta(self, t: float) -> float:
        return self.theta0 + self.theta_amp * math.sin(self.omega * (t - self.t0) + self.phase)


@dataclass
class ScenarioSpec:
    n_frames: int = 300
    width: int = 512
    height: int = 512
    pitch: float = BINNED_PITCH  # mm/px
    frame_rate: float = 100.0
    slab_thickness: float = 20.0  # mm
    mu: float = DEFAULT_MU  # 1/mm
    # beam(u, v) = c0 + c1 u + c2 v + c3 u^2 + c4 u v + c5 v^2 on [-1, 1]^2
    beam: list[float] = field(default_factory=lambda: [1.0, 0.05, -0.03, -0.10, 0.02, -0.08])
    dark_level: float = 100.0
    read_noise: float = 2.0
    photon_scale: float = 1000.0
    noise: bool = True  # False: expected counts, rounded, without shot or read noise
    hot_pixels: list[tuple[int, int]] = field(default_factory=list)
    hot_value: int = 65535
    n_dark: int = 20
    n_flat: int = 40
    origin: tuple[float, float] | None = None  # inlet (col, row) px; default bottom centre
    surface_row: int | None = None  # rows above are air
    bubbles: list[BubbleTrack] = field(default_factory=list)

    def __post_init__(self):
        if self.n_frames < 1 or self.width < 2 or self.height < 2:
            raise ValueError("scenario needs >= 1 frame of at least 2x2 pixels")
        if not (self.pitch > 0 and self.frame_rate > 0 and self.mu >= 0 and self.photon_scale > 0):
            raise ValueError("pitch, frame_rate, photon_scale must be > 0 and mu >= 0")
        if len(self.beam) != 6:
            raise ValueError("beam needs 6 polynomial coefficients")
        self.hot_pixels = [tuple(int(v) for v in p) for p in self.hot_pixels]
        if self.origin is None:
            self.origin = (self.width / 2.0, self.height - 24.0)
        self.origin = tuple(float(v) for v in self.origin)
        for i, bub in enumerate(self.bubbles):
            x, y = bub.position(bub.t0)
            col, row = self.to_pixel(x, y)
            if not (0 <= col < self.width and 0 <= row < self.height):
                raise ValueError(f"bubble {i} is born outside the field of view")

    @property
    def background_transmission(self) -> float:
        return math.exp(-self.mu * self.slab_thickness)

    def to_pixel(self, x: float, y: float) -> tuple[float, float]:
        return self.origin[0] + x / self.pitch, self.origin[1] - y / self.pitch

    def beam_map(self) -> np.ndarray:
        rows, cols = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        u = (cols - (self.width - 1) / 2) / (self.width / 2)
        v = (rows - (self.height - 1) / 2) / (self.height / 2)
        c = self.beam
        out = c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v
        if not (out > 0).all():
            raise ValueError("beam profile must be positive over the frame")
        return out

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["hot_pixels"] = [list(p) for p in self.hot_pixels]
        d["origin"] = list(self.origin)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        chain = d.pop("chain", None)
        seed = d.pop("seed", 0)
        if chain is not None:
            base = chain_scenario(seed=seed, **chain)
            merged = base.to_dict()
            merged.update(d)
            d = merged
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d["bubbles"] = [b if isinstance(b, BubbleTrack) else BubbleTrack(**b) for b in d.get("bubbles", [])]
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def photon_scale_for_snr(snr: float, minor_axis: float, mu: float = DEFAULT_MU, slab: float = 20.0) -> float:
    """Open-beam photon count giving the requested single-frame SNR.

    SNR is the peak bubble contrast in transmission (a bubble with the given
    semi-minor axis, chord ``2 * minor_axis``) over the shot-noise standard
    deviation of the background transmission.
    """
    t_bg = math.exp(-mu * slab)
    contrast = t_bg * (math.exp(mu * 2.0 * minor_axis) - 1.0)
    return t_bg * (snr / contrast) ** 2


REGIMES = {
    # field off: wide lateral wandering, slight deceleration
    "off": dict(vy0=250.0, ay=-60.0, amp=(3.0, 5.0), theta_amp=0.15),
    # field on: lateral motion damped, bubbles accelerate upwards
    "on": dict(vy0=230.0, ay=250.0, amp=(0.6, 1.0), theta_amp=0.05),
}


def chain_scenario(
    regime: str = "off",
    n_frames: int = 300,
    n_concurrent: int = 5,
    width: int = 512,
    height: int = 512,
    pitch: float = BINNED_PITCH,
    frame_rate: float = 100.0,
    snr: float = 3.0,
    a_range: tuple[float, float] = (2.8, 3.4),
    aspect_range: tuple[float, float] = (1.2, 1.5),
    surface_row: int | None = None,
    seed: int = 0,
    **overrides,
) -> ScenarioSpec:
    """Bubble chain rising from an inlet at the bottom centre.

    Bubbles are released at even intervals so that about ``n_concurrent``
    are in view at once; releases start one lifetime before the first
    frame so the chain is already developed at frame 0.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {sorted(REGIMES)}")
    reg = REGIMES[regime]
    rng = np.random.default_rng(seed)
    origin = (width / 2.0, height - 24.0)
    top = origin[1] * pitch  # elevation of the top frame edge
    if surface_row is not None:
        top = (origin[1] - surface_row) * pitch
    vy0, ay = reg["vy0"], reg["ay"]
    # time to rise one bubble diameter past the top edge
    climb = top + 2 * a_range[1]
    if ay == 0:
        life = climb / vy0
    else:
        life = (-vy0 + math.sqrt(vy0 * vy0 + 2 * ay * climb)) / ay
    interval = life / n_concurrent
    duration = n_frames / frame_rate

    bubbles = []
    t = -life
    while t < duration:
        a = rng.uniform(*a_range)
        b = a / rng.uniform(*aspect_range)
        bubbles.append(
            BubbleTrack(
                t0=t,
                t1=t + life,
                x0=0.0,
                y0=0.0,
                vy0=vy0,
                ay=ay,
                a=a,
                b=b,
                amp_x=rng.uniform(*reg["amp"]),
                omega=2 * math.pi * rng.uniform(2.0, 3.0),
                phase=rng.uniform(0, 2 * math.pi),
                theta_amp=reg["theta_amp"],
            )
        )
        t += interval
    typical_b = float(np.median([bb.b for bb in bubbles]))
    spec = dict(
        n_frames=n_frames,
        width=width,
        height=height,
        pitch=pitch,
        frame_rate=frame_rate,
        photon_scale=photon_scale_for_snr(snr, typical_b),
        origin=origin,
        surface_row=surface_row,
        bubbles=bubbles,
        hot_pixels=[(int(r), int(c)) for r, c in rng.integers(0, [height, width], size=(8, 2))],
    )
    spec.update(overrides)
    return ScenarioSpec(**spec)


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class TruthState:
    bubble_id: int
    frame_index: int
    time: float
    x: float
    y: float
    a: float
    b: float
    theta: float
    vx: float
    vy: float
    visible: bool

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b


@dataclass
class GroundTruth:
    states: list[TruthState]
    bubbles: list[BubbleTrack] = field(default_factory=list)

    def by_frame(self) -> dict[int, list[TruthState]]:
        out: dict[int, list[TruthState]] = {}
        for s in self.states:
            out.setdefault(s.frame_index, []).append(s)
        return out


def _ellipse_extent(a: float, b: float, theta: float) -> tuple[float, float]:
    """Half width and half height of the bounding box of a rotated ellipse."""
    c, s = math.cos(theta), math.sin(theta)
    return math.hypot(a * c, b * s), math.hypot(a * s, b * c)


def ground_truth(spec: ScenarioSpec) -> GroundTruth:
    states = []
    for fi in range(spec.n_frames):
        t = fi / spec.frame_rate
        for bid, bub in enumerate(spec.bubbles):
            if not bub.alive(t):
                continue
            x, y = bub.position(t)
            vx, vy = bub.velocity(t)
            th = bub.theta(t)
            col, row = spec.to_pixel(x, y)
            hw, hh = _ellipse_extent(bub.a / spec.pitch, bub.b / spec.pitch, th)
            top_limit = spec.surface_row if spec.surface_row is not None else 0
            on_screen = col + hw > 0 and col - hw < spec.width - 1 and row + hh > top_limit and row - hh < spec.height - 1
            if not on_screen:
                continue
            visible = col - hw >= 1 and col + hw <= spec.width - 2 and row - hh >= top_limit + 1 and row + hh <= spec.height - 2
            states.append(TruthState(bid, fi, t, x, y, bub.a, bub.b, th, vx, vy, visible))
    return GroundTruth(states, list(spec.bubbles))


def chord_map(spec: ScenarioSpec, t: float) -> np.ndarray:
    """Liquid path length removed by bubbles at time ``t`` (mm), clamped to the slab."""
    chord = np.zeros((spec.height, spec.width))
    for bub in spec.bubbles:
        if not bub.alive(t):
            continue
        x, y = bub.position(t)
        th = bub.theta(t)
        col, row = spec.to_pixel(x, y)
        hw, hh = _ellipse_extent(bub.a / spec.pitch, bub.b / spec.pitch, th)
        c0, c1 = max(int(math.floor(col - hw)), 0), min(int(math.ceil(col + hw)) + 1, spec.width)
        r0, r1 = max(int(math.floor(row - hh)), 0), min(int(math.ceil(row + hh)) + 1, spec.height)
        if c0 >= c1 or r0 >= r1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1].astype(np.float64)
        dx = (cc - col) * spec.pitch
        dy = (row - rr) * spec.pitch
        ct, st = math.cos(th), math.sin(th)
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        q = 1.0 - (u / bub.a) ** 2 - (v / bub.b) ** 2
        chord[r0:r1, c0:c1] += 2.0 * bub.b * np.sqrt(np.clip(q, 0.0, None))
    return np.minimum(chord, spec.slab_thickness)


def transmission_map(spec: ScenarioSpec, t: float) -> np.ndarray:
    liquid = spec.slab_thickness - chord_map(spec, t)
    if spec.surface_row is not None:
        liquid[: spec.surface_row, :] = 0.0
    return np.exp(-spec.mu * liquid)


def _expose(rng: np.random.Generator, spec: ScenarioSpec, expected: np.ndarray | None) -> np.ndarray:
    counts = np.zeros((spec.height, spec.width)) if expected is None else np.array(expected, dtype=np.float64)
    if spec.noise:
        if expected is not None:
            counts = rng.poisson(expected).astype(np.float64)
        counts += rng.normal(0.0, spec.read_noise, counts.shape)
    counts += spec.dark_level
    out = np.clip(np.rint(counts), 0, 65535).astype(np.uint16)
    for r, c in spec.hot_pixels:
        out[r, c] = spec.hot_value
    return out


@dataclass
class RenderedSequence:
    raw: np.ndarray  # (n_frames, h, w) uint16
    dark: np.ndarray
    flat: np.ndarray
    truth: GroundTruth


def render_frame(spec: ScenarioSpec, index: int, seed: int, beam: np.ndarray | None = None) -> np.ndarray:
    """Render raw frame ``index`` on its own random substream."""
    child = np.random.SeedSequence(seed).spawn(spec.n_frames + spec.n_dark + spec.n_flat)[index]
    beam = spec.beam_map() if beam is None else beam
    t = index / spec.frame_rate
    return _expose(np.random.default_rng(child), spec, spec.photon_scale * beam * transmission_map(spec, t))


def render_sequence(spec: ScenarioSpec, seed: int = 0) -> RenderedSequence:
    children = np.random.SeedSequence(seed).spawn(spec.n_frames + spec.n_dark + spec.n_flat)
    beam = spec.beam_map()
    raw = np.empty((spec.n_frames, spec.height, spec.width), dtype=np.uint16)
    for i in range(spec.n_frames):
        expected = spec.photon_scale * beam * transmission_map(spec, i / spec.frame_rate)
        raw[i] = _expose(np.random.default_rng(children[i]), spec, expected)
    dark = np.stack(
        [_expose(np.random.default_rng(children[spec.n_frames + j]), spec, None) for j in range(spec.n_dark)]
    )
    flat = np.stack(
        [
            _expose(np.random.default_rng(children[spec.n_frames + spec.n_dark + j]), spec, spec.photon_scale * beam)
            for j in range(spec.n_flat)
        ]
    )
    return RenderedSequence(raw, dark, flat, ground_truth(spec))


# ---------------------------------------------------------------------------
# truth CSV

TRUTH_COLUMNS = [
    "bubble_id", "frame_index", "time_s", "x_mm", "y_mm", "a_mm", "b_mm", "theta_rad",
    "area_mm2", "aspect", "vx_mm_s", "vy_mm_s", "visible",
]


def write_truth_csv(path: str | Path, truth: GroundTruth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for s in truth.states:
            w.writerow(
                [s.bubble_id, s.frame_index, f"{s.time:.6f}", f"{s.x:.6f}", f"{s.y:.6f}", f"{s.a:.6f}",
                 f"{s.b:.6f}", f"{s.theta:.6f}", f"{s.area:.6f}", f"{s.a / s.b:.6f}", f"{s.vx:.6f}",
                 f"{s.vy:.6f}", int(s.visible)]
            )


def read_truth_csv(path: str | Path) -> GroundTruth:
    states = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            states.append(
                TruthState(
                    int(row["bubble_id"]), int(row["frame_index"]), float(row["time_s"]),
                    float(row["x_mm"]), float(row["y_mm"]), float(row["a_mm"]), float(row["b_mm"]),
                    float(row["theta_rad"]), float(row["vx_mm_s"]), float(row["vy_mm_s"]),
                    bool(int(row["visible"])),
                )
            )
    return GroundTruth(states)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class DetectionScore:
    recall: float
    false_positive_rate: float
    centroid_rmse_px: float
    semi_axis_mape: float  # fraction, not percent
    true_positives: int
    false_positives: int
    misses: int
    ignored: int

    def as_dict(self) -> dict:
        return asdict(self)


def _match_frame(dets: Sequence[Detection], truths: Sequence[TruthState], radius_mm: float):
    pairs = []
    for di, d in enumerate(dets):
        for ti, s in enumerate(truths):
            dist = math.hypot(d.x - s.x, d.y - s.y)
            if dist <= radius_mm:
                pairs.append((dist, s.bubble_id, di, ti))
    pairs.sort()
    used_d, used_t, matches = set(), set(), []
    for dist, _, di, ti in pairs:
        if di in used_d or ti in used_t:
            continue
        used_d.add(di)
        used_t.add(ti)
        matches.append((di, ti, dist))
    return matches


def score_detections(
    detections: Iterable[Detection], truth: GroundTruth, match_radius: float = 5.0, pitch: float = BINNED_PITCH
) -> DetectionScore:
    """Greedy nearest matching per frame within ``match_radius`` pixels.

    Truth states that are not fully inside the field of view are "don't
    care": detections matched to them count neither as hits nor as false
    positives, and missing them is not a miss.  The false-positive rate is
    the fraction of scored detections that match no truth.
    """
    det_by_frame: dict[int, list[Detection]] = {}
    for d in detections:
        det_by_frame.setdefault(d.frame_index, []).append(d)
    truth_by_frame = truth.by_frame()

    tp = fp = miss = ignored = 0
    sq_err = []
    ape = []
    for fi in sorted(set(det_by_frame) | set(truth_by_frame)):
        dets = det_by_frame.get(fi, [])
        truths = truth_by_frame.get(fi, [])
        matches = _match_frame(dets, truths, match_radius * pitch)
        matched_d = {di for di, _, _ in matches}
        matched_t = {ti for _, ti, _ in matches}
        for di, ti, dist in matches:
            s = truths[ti]
            if not s.visible:
                ignored += 1
                continue
            tp += 1
            sq_err.append((dist / pitch) ** 2)
            d = dets[di]
            ape.append(0.5 * (abs(d.a - s.a) / s.a + abs(d.b - s.b) / s.b))
        fp += len(dets) - len(matched_d)
        miss += sum(1 for ti, s in enumerate(truths) if s.visible and ti not in matched_t)

    n_truth = tp + miss
    scored = tp + fp
    return DetectionScore(
        recall=tp / n_truth if n_truth else 0.0,
        false_positive_rate=fp / scored if scored else 0.0,
        centroid_rmse_px=math.sqrt(sum(sq_err) / len(sq_err)) if sq_err else math.nan,
        semi_axis_mape=sum(ape) / len(ape) if ape else math.nan,
        true_positives=tp,
        false_positives=fp,
        misses=miss,
        ignored=ignored,
    )


@dataclass(frozen=True)
class VelocityBinError:
    y_lo: float
    y_hi: float
    n: int
    vx_measured: float
    vx_true: float
    vy_measured: float
    vy_true: float

    @property
    def vy_rel_error(self) -> float:
        return abs(self.vy_measured - self.vy_true) / abs(self.vy_true)

    @property
    def vx_abs_error(self) -> float:
        return abs(self.vx_measured - self.vx_true)


def score_velocity(profile: VelocityProfile, truth: GroundTruth) -> list[VelocityBinError]:
    """Compare binned mean velocities with the truth averaged over the same bins."""
    states = [s for s in truth.states if s.visible]
    ys = np.array([s.y for s in states])
    vxs = np.array([s.vx for s in states])
    vys = np.array([s.vy for s in states])
    out = []
    for k in range(len(profile)):
        if profile.count[k] == 0:
            continue
        lo, hi = profile.edges[k], profile.edges[k + 1]
        sel = (ys >= lo) & (ys < hi)
        if not sel.any():
            continue
        out.append(
            VelocityBinError(
                float(lo), float(hi), int(profile.count[k]),
                float(profile.vx_mean[k]), float(vxs[sel].mean()),
                float(profile.vy_mean[k]), float(vys[sel].mean()),
            )
        )
    if not out:
        raise ValueError("velocity profile and truth share no populated bins")
    return out
