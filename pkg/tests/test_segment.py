import math
from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bubbleflow.imagestack import Frame
from bubbleflow.segment import (
    QUALITY_EDGE,
    QUALITY_LOW,
    QUALITY_OK,
    DegenerateHistogramError,
    SegmentParams,
    SurfaceNotFoundError,
    adaptive_binarize,
    binarize,
    connected_components,
    detect_bubbles,
    detect_free_surface,
    fill_holes,
    fit_ellipse,
    grow_regions,
    morphological_thin,
    otsu_bin,
    otsu_threshold,
    segment_frame,
    shen_castan_edges,
    surface_row,
    trace_contour,
)

from .conftest import disk, ellipse_mask

masks = arrays(bool, st.tuples(st.integers(1, 14), st.integers(1, 14)))


def brute_force_otsu(counts):
    """First split maximizing between-class variance, in exact arithmetic."""
    n = sum(counts)
    best, best_k = Fraction(0), None
    for k in range(len(counts) - 1):
        w0 = sum(counts[: k + 1])
        w1 = n - w0
        if w0 == 0 or w1 == 0:
            continue
        m0 = Fraction(sum(i * c for i, c in enumerate(counts[: k + 1])), w0)
        m1 = Fraction(sum(i * c for i, c in enumerate(counts) if i > k), w1)
        var = Fraction(w0 * w1, n * n) * (m0 - m1) ** 2
        if var > best:
            best, best_k = var, k
    return best_k


# -- Otsu ---------------------------------------------------------------------


@given(st.lists(st.integers(0, 50), min_size=2, max_size=40))
def test_otsu_bin_matches_exhaustive_search(counts):
    expected = brute_force_otsu(counts)
    if expected is None:
        with pytest.raises(DegenerateHistogramError):
            otsu_bin(counts)
    else:
        assert otsu_bin(counts) == expected


def test_two_valued_frame():
    img = np.where(np.arange(100).reshape(10, 10) < 50, 0.2, 0.8)
    t = otsu_threshold(Frame(img))
    assert 0.2 < t < 0.8
    np.testing.assert_array_equal(binarize(img, t), img == 0.8)


def test_single_bright_pixel_is_separated():
    img = np.zeros((1000, 1000))
    img[123, 456] = 1.0
    t = otsu_threshold(img)
    assert binarize(img, t).sum() == 1


def test_constant_frame_is_degenerate():
    with pytest.raises(DegenerateHistogramError, match="degenerate histogram"):
        otsu_threshold(np.full((5, 5), 0.3))


def test_otsu_threshold_respects_mask():
    img = np.zeros((4, 4))
    img[0, 0] = 10.0
    img[2:, :] = [[1, 2, 1, 2], [1, 2, 1, 2]]
    region = np.zeros((4, 4), bool)
    region[2:, :] = True
    assert 1.0 < otsu_threshold(img, 16, mask=region) < 2.0


# -- binarization -------------------------------------------------------------


def test_binarize_cases():
    assert not binarize(np.full((3, 3), 0.1), 0.5).any()
    assert binarize(np.random.default_rng(0).random((3, 3)), -np.inf).all()
    checker = (np.indices((4, 5)).sum(axis=0) % 2).astype(float)
    np.testing.assert_array_equal(binarize(checker, 0.5), checker == 1)
    np.testing.assert_array_equal(binarize(checker, 0.5, "below"), checker == 0)
    with pytest.raises(ValueError):
        binarize(checker, 0.5, "sideways")


def test_adaptive_cases():
    assert not adaptive_binarize(np.full((9, 9), 2.0), 3, offset=0.1).any()
    imp = np.zeros((9, 9))
    imp[4, 4] = 1.0
    got = adaptive_binarize(imp, 3)
    assert got[4, 4] and got.sum() == 1
    with pytest.raises(ValueError):
        adaptive_binarize(imp, 4)
    with pytest.raises(ValueError):
        adaptive_binarize(imp, 1)


def test_adaptive_ramp_has_no_interior_structure():
    ramp = np.tile(np.arange(40.0), (30, 1))
    w = 7
    got = adaptive_binarize(ramp, w)
    # the local mean of a linear ramp equals the centre value
    assert not got[:, w // 2 : -(w // 2)].any()


# -- morphology ---------------------------------------------------------------


def _is_thin(mask):
    # no fully set 2x2 block
    return not (mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]).any()


def test_thin_line_is_unchanged():
    m = np.zeros((7, 9), bool)
    m[3, 1:8] = True
    np.testing.assert_array_equal(morphological_thin(m), m)


def test_thin_square_gives_connected_skeleton():
    m = np.zeros((15, 15), bool)
    m[2:13, 2:13] = True
    sk = morphological_thin(m)
    assert sk.any() and _is_thin(sk)
    assert len(connected_components(sk, 8)[1]) == 1
    assert (sk <= m).all()


def test_thin_keeps_a_2x2_block_as_one_pixel():
    assert morphological_thin(np.ones((2, 2), bool)).sum() == 1


def test_thin_empty():
    assert not morphological_thin(np.zeros((5, 5), bool)).any()


@given(masks)
def test_thinning_is_idempotent_and_keeps_components(m):
    once = morphological_thin(m)
    np.testing.assert_array_equal(morphological_thin(once), once)
    assert (once <= m).all()
    assert len(connected_components(once, 8)[1]) == len(connected_components(m, 8)[1])


def flood_fill_oracle(mask):
    """Background pixels reachable from the border (4-connected) stay unset."""
    h, w = mask.shape
    outside = np.zeros_like(mask)
    q = deque((r, c) for r in range(h) for c in range(w) if (r in (0, h - 1) or c in (0, w - 1)) and not mask[r, c])
    for r, c in q:
        outside[r, c] = True
    while q:
        r, c = q.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and not mask[rr, cc] and not outside[rr, cc]:
                outside[rr, cc] = True
                q.append((rr, cc))
    return ~outside


def test_annulus_fills_to_disk():
    ring = disk((31, 31), (15, 15), 10) & ~disk((31, 31), (15, 15), 6)
    np.testing.assert_array_equal(fill_holes(ring), disk((31, 31), (15, 15), 10))


def test_solid_disk_unchanged():
    d = disk((21, 21), (10, 10), 7)
    np.testing.assert_array_equal(fill_holes(d), d)


def test_nested_rings_fill_completely():
    s = (41, 41)
    m = (disk(s, (20, 20), 18) & ~disk(s, (20, 20), 15)) | (disk(s, (20, 20), 9) & ~disk(s, (20, 20), 6))
    got = fill_holes(m)
    np.testing.assert_array_equal(got, flood_fill_oracle(m))
    np.testing.assert_array_equal(got, disk(s, (20, 20), 18))


@given(masks)
def test_fill_holes_matches_flood_fill_and_is_idempotent(m):
    got = fill_holes(m)
    np.testing.assert_array_equal(got, flood_fill_oracle(m))
    np.testing.assert_array_equal(fill_holes(got), got)


# -- components ---------------------------------------------------------------


def test_no_components_in_empty_mask():
    labels, comps = connected_components(np.zeros((4, 4), bool))
    assert comps == [] and not labels.any()


def test_two_disks_have_rasterized_areas():
    s = (40, 60)
    a, b = disk(s, (20, 15), 8), disk(s, (20, 45), 5)
    _, comps = connected_components(a | b)
    expected = sorted(
        sum(1 for r in range(s[0]) for c in range(s[1]) if (r - cy) ** 2 + (c - cx) ** 2 <= rad * rad)
        for cy, cx, rad in ((20, 15, 8), (20, 45, 5))
    )
    assert sorted(c.pixel_count for c in comps) == expected
    assert not any(c.touches_border for c in comps)


def test_diagonal_pair_depends_on_connectivity():
    m = np.array([[1, 0], [0, 1]], bool)
    assert len(connected_components(m, 4)[1]) == 2
    assert len(connected_components(m, 8)[1]) == 1
    with pytest.raises(ValueError):
        connected_components(m, 6)


def test_bbox_and_border_flag():
    m = np.zeros((6, 6), bool)
    m[2:4, 1:5] = True
    m[5, 5] = True
    _, comps = connected_components(m)
    assert comps[0].bbox == (2, 1, 4, 5) and not comps[0].touches_border
    assert comps[1].touches_border


# -- contours -----------------------------------------------------------------


def test_square_contour_has_eight_points():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    c = trace_contour(m)
    assert len(c) == 8 and c.is_simple and not c.degenerate
    assert {tuple(p) for p in c.points} == {(r, cc) for r in (1, 2, 3) for cc in (1, 2, 3)} - {(2, 2)}
    assert c.signed_area() > 0


def test_disk_contour_length():
    c = trace_contour(disk((31, 31), (15, 15), 10))
    assert c.length == pytest.approx(2 * math.pi * 10, rel=0.10)
    assert c.is_simple and c.signed_area() > 0
    steps = np.abs(np.diff(np.vstack([c.points, c.points[:1]]), axis=0))
    assert steps.max() <= 1 and (steps.sum(axis=1) > 0).all()


def test_single_pixel_contour_is_degenerate():
    m = np.zeros((3, 3), bool)
    m[1, 1] = True
    c = trace_contour(m)
    assert len(c) == 1 and c.degenerate


@given(st.integers(2, 9), st.integers(2, 9), st.floats(0, math.pi))
def test_contours_of_convex_shapes_are_simple_and_counterclockwise(a, b, th):
    m = ellipse_mask((24, 24), (11.7, 12.2), a, b, th)
    c = trace_contour(m)
    assert c.is_simple
    assert c.signed_area() > 0
    boundary = m & ~(np.roll(m, 1, 0) & np.roll(m, -1, 0) & np.roll(m, 1, 1) & np.roll(m, -1, 1))
    assert {tuple(p) for p in c.points} <= {tuple(p) for p in np.argwhere(m)}
    assert {tuple(p) for p in np.argwhere(boundary)} <= {tuple(p) for p in c.points}


# -- ellipse fit --------------------------------------------------------------


def test_disk_fit():
    d = fit_ellipse(disk((61, 61), (30, 30), 20), 0.0551, origin=(30, 30))
    assert d.a == pytest.approx(1.102, rel=0.02)
    assert d.b == pytest.approx(1.102, rel=0.02)
    assert abs(d.x) < 1e-12 and abs(d.y) < 1e-12
    assert d.area == pytest.approx(disk((61, 61), (30, 30), 20).sum() * 0.0551**2)
    assert d.quality == QUALITY_OK


def test_ellipse_round_trip_30_15_at_30_degrees():
    th = math.radians(30)
    d = fit_ellipse(ellipse_mask((101, 101), (50, 50), 30, 15, th), 1.0)
    assert d.a == pytest.approx(30, rel=0.02)
    assert d.b == pytest.approx(15, rel=0.02)
    assert math.degrees(abs(d.theta - th)) < 2


def test_single_pixel_fit_is_degenerate():
    m = np.zeros((5, 5), bool)
    m[3, 1] = True
    d = fit_ellipse(m, 0.1)
    assert (d.col, d.row) == (1.0, 3.0)
    assert d.quality == QUALITY_LOW
    assert d.b >= 0.05 and d.a >= d.b


def test_collinear_pixels_floor_minor_axis():
    m = np.zeros((3, 9), bool)
    m[1, 1:8] = True
    d = fit_ellipse(m, 0.2)
    # a zero-width line keeps the footprint of one pixel
    assert d.quality == QUALITY_LOW and d.b == pytest.approx(2 * math.sqrt(1 / 12) * 0.2)


def test_fit_coordinates_have_y_up():
    m = np.zeros((20, 20), bool)
    m[2:5, 12:15] = True  # up and to the right of the origin
    d = fit_ellipse(m, 0.5, origin=(10.0, 10.0))
    assert d.x == pytest.approx(1.5) and d.y == pytest.approx(3.5)


def test_fit_accepts_index_arrays():
    m = ellipse_mask((30, 30), (14, 15), 9, 4, 0.3)
    a = fit_ellipse(m, 1.0)
    b = fit_ellipse(np.nonzero(m), 1.0)
    assert (a.x, a.y, a.a, a.b, a.theta) == pytest.approx((b.x, b.y, b.a, b.b, b.theta))
    with pytest.raises(ValueError):
        fit_ellipse(np.zeros((3, 3), bool), 1.0)


@given(st.floats(3, 10), st.floats(1.5, 6), st.floats(-1.5, 1.5), st.integers(-5, 5), st.integers(-5, 5))
def test_fit_is_translation_and_quarter_turn_equivariant(a, b, th, dr, dc):
    m = ellipse_mask((40, 40), (19.3, 20.1), a, min(a, b), th)
    base = fit_ellipse(m, 1.0)
    shifted = fit_ellipse(np.roll(np.roll(m, dr, 0), dc, 1), 1.0)
    assert shifted.x == pytest.approx(base.x + dc, abs=1e-9)
    assert shifted.y == pytest.approx(base.y - dr, abs=1e-9)
    assert (shifted.a, shifted.b) == pytest.approx((base.a, base.b), rel=1e-12)
    rot = fit_ellipse(np.rot90(m), 1.0)  # counterclockwise on screen
    assert (rot.a, rot.b) == pytest.approx((base.a, base.b), rel=1e-9)
    if base.aspect > 1.01:
        diff = (rot.theta - base.theta - math.pi / 2) % math.pi
        assert min(diff, math.pi - diff) < 1e-6


# -- edges and surface --------------------------------------------------------


def test_constant_frame_has_no_edges():
    assert not shen_castan_edges(np.full((10, 10), 0.4)).any()


def test_vertical_step_gives_single_edge_line():
    img = np.zeros((20, 30))
    img[:, 15:] = 1.0
    e = shen_castan_edges(img, 0.7)
    cols = np.nonzero(e.any(axis=0))[0]
    assert len(cols) == 1 and abs(cols[0] - 14.5) <= 1
    assert e[:, cols[0]].all()


def test_disk_gives_closed_ring():
    d = disk((41, 41), (20, 20), 10)
    e = shen_castan_edges(d.astype(float), 0.6)
    assert e.any() and not e[20, 20]
    inside = fill_holes(e)
    assert inside[20, 20]
    assert len(connected_components(e, 8)[1]) == 1


def test_smoothing_must_be_in_unit_interval():
    with pytest.raises(ValueError):
        shen_castan_edges(np.zeros((4, 4)), 1.0)


def test_two_band_surface():
    img = np.full((40, 12), 0.25)
    img[:17, :] = 1.0
    assert surface_row(img) == pytest.approx(16.5)
    f = Frame(img, pixel_pitch=0.1)
    assert detect_free_surface(f) == pytest.approx((40 - 16.5) * 0.1)
    assert detect_free_surface(f, origin_row=30) == pytest.approx((30 - 16.5) * 0.1)


def test_tilted_surface_gives_median_row():
    img = np.full((40, 9), 0.25)
    boundary = [15, 15, 16, 16, 17, 17, 18, 19, 19]
    for c, r in enumerate(boundary):
        img[:r, c] = 1.0
    assert surface_row(img) == pytest.approx(float(np.median(np.array(boundary) - 1)) + 0.5)


def test_constant_frame_has_no_surface():
    with pytest.raises(SurfaceNotFoundError, match="surface not found"):
        surface_row(np.full((10, 10), 0.5))


# -- detector -----------------------------------------------------------------


def _scene(bubbles, shape=(160, 160), snr=None, seed=0, bg=0.25, contrast=0.1):
    """Spheroid-chord bubbles on a flat background, with optional Gaussian noise."""
    img = np.full(shape, bg)
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    for r0, c0, a, b, th in bubbles:
        dx, dy = cc - c0, -(rr - r0)
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        q = 1 - (u / a) ** 2 - (v / b) ** 2
        img += contrast * np.sqrt(np.clip(q, 0, None))
    if snr is not None:
        img += np.random.default_rng(seed).normal(0, contrast / snr, shape)
    return Frame(img, pixel_pitch=1.0)


def test_three_bubbles_at_snr_5():
    truth = [(40, 50, 9, 6, 0.3), (80, 110, 8, 7, -0.5), (120, 60, 10, 6, 1.2)]
    frame = _scene(truth, snr=5, seed=3)
    from bubbleflow.denoise import curvature_flow_filter, default_params

    dets = detect_bubbles(curvature_flow_filter(frame, default_params(frame)), origin=(0, 0))
    assert len(dets) == 3
    for d in dets:
        err = min(math.hypot(d.col - c, d.row - r) for r, c, *_ in truth)
        assert err <= 1.0


def test_blank_frame_gives_no_detections():
    assert detect_bubbles(Frame(np.full((30, 30), 0.25))) == []


def test_bubble_half_out_of_frame_is_flagged():
    dets = detect_bubbles(_scene([(60, 2, 10, 8, 0.0), (60, 90, 10, 8, 0.0)]), origin=(0, 0))
    assert sorted(d.quality for d in dets) == [QUALITY_EDGE, QUALITY_OK]


def test_detections_are_sorted_and_deterministic():
    frame = _scene([(120, 40, 8, 6, 0), (40, 120, 8, 6, 0), (40, 30, 8, 6, 0)], snr=8, seed=1)
    a = detect_bubbles(frame, origin=(0, 0))
    b = detect_bubbles(frame.with_pixels(frame.pixels.copy()), origin=(0, 0))
    assert a == b
    assert [(d.row, d.col) for d in a] == sorted((d.row, d.col) for d in a)


def test_noiseless_outline_recovered_by_growth():
    frame = _scene([(80, 80, 16, 12, 0.4)])
    grown = detect_bubbles(frame, origin=(0, 0))[0]
    core = detect_bubbles(frame, SegmentParams(grow_fraction=None), origin=(0, 0))[0]
    true_area = math.pi * 16 * 12
    assert grown.area == pytest.approx(true_area, rel=0.03)
    assert core.area < 0.9 * true_area


def test_grow_regions_follows_each_core():
    img = np.zeros((10, 20))
    img[4:7, 2:9] = [1, 2, 3, 9, 3, 2, 1]  # peak 9, grows to > 0.9
    img[4:7, 12:18] = 0.5  # never seeded
    seeds = img >= 9
    out = grow_regions(seeds, img, 0.0, 0.1)
    expected = np.zeros_like(seeds)
    expected[4:7, 2:9] = True
    np.testing.assert_array_equal(out, expected)
    # the floor stops growth into weak pixels
    out = grow_regions(seeds, img, 0.0, 0.1, floor=2.5)
    assert out.sum() == 9


def test_surface_band_is_excluded():
    frame = _scene([(120, 80, 9, 7, 0.0), (40, 80, 9, 7, 0.0)])
    px = frame.pixels.copy()
    px[:30, :] = 1.0
    seg = segment_frame(frame.with_pixels(px), SegmentParams(surface_margin=2.0), origin=(0, 0))
    assert seg.surface_row == pytest.approx(29.5)
    assert len(seg.detections) == 1 and seg.detections[0].row == pytest.approx(120, abs=0.5)


def test_adaptive_route():
    frame = _scene([(50, 50, 9, 7, 0.0)], shape=(100, 100))
    dets = detect_bubbles(frame, SegmentParams(method="adaptive", adaptive_window=51, adaptive_offset=0.01), origin=(0, 0))
    assert len(dets) == 1 and dets[0].col == pytest.approx(50, abs=0.5)


def test_segment_params_validation():
    with pytest.raises(ValueError):
        SegmentParams(method="watershed")
    with pytest.raises(ValueError):
        SegmentParams(min_area=0)
