import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmrecon.errors import ExtractionError, NoVectorContentError, ParseError
from kmrecon.simgen import RenderStyle, SimConfig, curve_vertices, generate, render_km_svg
from kmrecon.survival_core import StepCurve, km_estimate
from kmrecon.vec_km import (
    AxisCalibration,
    CensorMark,
    PageCurve,
    PagePath,
    Segment,
    SegmentSet,
    assemble_paths,
    assign_marks,
    detect_axes,
    extract_figure,
    find_mark_candidates,
    parse_vector_document,
    select_km_curves,
    to_data_space,
    to_interchange,
)


def seg(x1, y1, x2, y2, rgb=None):
    return Segment((x1, y1), (x2, y2), rgb)


def svg(body):
    return f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 100 80">{body}</svg>'.encode()


# -- parsing ------------------------------------------------------------------


def test_interchange_paper_element():
    doc = {
        "page_height": 792,
        "segments": [
            {"x1": 36.850399, "y1": 102.797119, "x2": 566.929382, "y2": 102.797119, "rgb": [0.7010, 0.0310, 0.2210], "width": 1.5}
        ],
    }
    segs = parse_vector_document(json.dumps(doc).encode(), "segment_interchange")
    assert segs.page_height == 792
    (s,) = segs.segments
    assert s.start == (36.850399, 102.797119) and s.end == (566.929382, 102.797119)
    assert s.stroke_color == (0.7010, 0.0310, 0.2210) and s.stroke_width == 1.5


def test_interchange_line_oriented_and_drawing_items():
    text = "\n".join(
        [
            json.dumps({"page_height": 100}),
            json.dumps({"x1": 0, "y1": 0, "x2": 1, "y2": 0, "rgb": None, "width": None}),
            json.dumps({"items": [["l", [36.85, 102.79], [566.92, 102.79]]], "color": [0.7, 0.03, 0.22], "width": 1.5}),
        ]
    )
    segs = parse_vector_document(text.encode())
    assert len(segs) == 2 and segs.page_height == 100
    assert segs.segments[1].stroke_color == (0.7, 0.03, 0.22)


def test_interchange_roundtrip():
    segs = SegmentSet((seg(0, 0, 1, 2, (0.1, 0.2, 0.3)), seg(3, 4, 5, 6)), 50.0)
    assert parse_vector_document(to_interchange(segs)) == segs


def test_svg_line():
    segs = parse_vector_document(svg('<line x1="0" y1="0" x2="10" y2="0"/>'))
    assert segs.segments == (Segment((0.0, 0.0), (10.0, 0.0)),)
    assert segs.page_height == 80


def test_svg_path_two_segments():
    segs = parse_vector_document(svg('<path d="M0 0 L5 0 L5 3"/>'))
    assert [(s.start, s.end) for s in segs.segments] == [((0, 0), (5, 0)), ((5, 0), (5, 3))]


def test_svg_path_relative_and_hv():
    segs = parse_vector_document(svg('<path d="m1,1 h4 v2 l1-1 H0 V0 z"/>'))
    ends = [(s.start, s.end) for s in segs.segments]
    assert ends == [((1, 1), (5, 1)), ((5, 1), (5, 3)), ((5, 3), (6, 2)), ((6, 2), (0, 2)), ((0, 2), (0, 0)), ((0, 0), (1, 1))]


def test_svg_curves_ignored_but_move_pen():
    segs = parse_vector_document(svg('<path d="M0 0 C1 1 2 2 3 3 L3 5"/>'))
    assert [(s.start, s.end) for s in segs.segments] == [((3, 3), (3, 5))]


def test_svg_polyline_transform_and_color():
    body = '<g transform="translate(10,20)" stroke="#ff0000"><polyline points="0,0 1,0 1,1" style="stroke-width:2"/></g>'
    segs = parse_vector_document(svg(body))
    assert segs.segments[0].start == (10, 20) and segs.segments[1].end == (11, 21)
    assert segs.segments[0].stroke_color == (1.0, 0.0, 0.0) and segs.segments[0].stroke_width == 2


def test_svg_use_of_marker_definition():
    body = '<defs><path id="m" d="M0 -3 L0 3" stroke="#000"/></defs><use href="#m" x="5" y="7"/><use href="#m" x="9" y="7"/>'
    segs = parse_vector_document(svg(body))
    assert [(s.start, s.end) for s in segs.segments] == [((5, 4), (5, 10)), ((9, 4), (9, 10))]


def test_malformed_svg_reports_offset():
    with pytest.raises(ParseError, match="byte offset"):
        parse_vector_document(b'<svg xmlns="http://www.w3.org/2000/svg">\n<line x1="0" </svg>')


def test_malformed_json_reports_offset():
    with pytest.raises(ParseError) as err:
        parse_vector_document(b'{"segments": [ {"x1": 1,, }]}', "segment_interchange")
    assert err.value.offset == 24  # the second comma


@pytest.mark.parametrize(
    "data", [b"", b'<svg xmlns="http://www.w3.org/2000/svg"></svg>', b'{"page_height": 5, "segments": []}']
)
def test_no_vector_content(data):
    with pytest.raises(NoVectorContentError, match="no vector content"):
        parse_vector_document(data)


# -- assembly -------------------------------------------------------------------


def test_assemble_shared_endpoint():
    paths = assemble_paths(SegmentSet((seg(0, 0, 1, 0), seg(1, 0, 1, 1))), 1e-6)
    assert [p.n_segments for p in paths] == [2]


def test_assemble_gap_breaks_chain():
    paths = assemble_paths(SegmentSet((seg(0, 0, 1, 0), seg(1.5, 0, 1.5, 1))), 1e-6)
    assert sorted(p.n_segments for p in paths) == [1, 1]


def test_assemble_reversed_segments_are_oriented():
    paths = assemble_paths(SegmentSet((seg(1, 1, 1, 0), seg(1, 0, 0, 0))), 1e-6)
    assert len(paths) == 1 and paths[0].vertices == ((0, 0), (1, 0), (1, 1))


def test_assemble_rising_segment_is_not_monotone():
    paths = assemble_paths(SegmentSet((seg(0, 1, 1, 0),)), 1e-6)
    assert not paths[0].monotone


def _staircase_segments(n_steps, x0=0.0, y0=0.0):
    out = []
    x, y = x0, y0
    for _ in range(n_steps):
        out.append(seg(x, y, x + 1, y))
        out.append(seg(x + 1, y, x + 1, y + 1))
        x, y = x + 1, y + 1
    return out


def test_staircase_plus_ticks():
    ticks = [seg(0.5 + i * 2, -0.2, 0.5 + i * 2, 0.2) for i in range(5)]
    paths = assemble_paths(SegmentSet(tuple(_staircase_segments(10) + ticks)), 1e-6)
    assert sorted(p.n_segments for p in paths) == [1] * 5 + [20]


def test_rendered_ten_step_staircase_plus_ticks():
    c = StepCurve(tuple([(0.0, 1.0)] + [(i + 1.0, 1 - 0.08 * (i + 1)) for i in range(10)]), censor_times=(0.5, 2.5, 4.5, 6.5, 8.5))
    segs = parse_vector_document(render_km_svg([c], RenderStyle(t_max=12)))
    counts = sorted(p.n_segments for p in assemble_paths(segs))
    # two axis rules join into their own chain at the origin
    assert counts == [1] * 5 + [2, 20]


# -- curve selection ----------------------------------------------------------------


def test_select_single_candidate():
    (path,) = assemble_paths(SegmentSet(tuple(_staircase_segments(3))))
    (curve,) = select_km_curves([path], 1)
    assert curve.path == path
    assert curve.drops == ((1, 1), (2, 2), (3, 3))


def test_select_longest():
    mk = lambda n, k: PagePath(tuple((float(i), float(k)) for i in range(n + 1)), tuple(range(100 * k, 100 * k + n)))
    paths = [mk(6, 1), mk(40, 2), mk(2, 3), mk(38, 4)]
    chosen = select_km_curves(paths, 2)
    assert [c.path.n_segments for c in chosen] == [40, 38]


def test_select_too_few_candidates():
    with pytest.raises(ExtractionError, match=r"segment counts \[2\]"):
        select_km_curves(assemble_paths(SegmentSet(tuple(_staircase_segments(1)))), 2)


def test_selection_invariant_to_segment_shuffle():
    ipd = generate(SimConfig(seed=4))
    segs = parse_vector_document(render_km_svg([km_estimate(ipd.arm(a)) for a in (0, 1)]))
    base = [c.vertices for c in select_km_curves(assemble_paths(segs), 2, segs)]
    rng = random.Random(0)
    for _ in range(3):
        shuffled = list(segs.segments)
        rng.shuffle(shuffled)
        shuffled = [Segment(s.end, s.start, s.stroke_color) if rng.random() < 0.5 else s for s in shuffled]
        s2 = SegmentSet(tuple(shuffled))
        assert [c.vertices for c in select_km_curves(assemble_paths(s2), 2, s2)] == base


# -- axes -------------------------------------------------------------------------


def _curve_for(segments):
    segs = SegmentSet(tuple(segments))
    return segs, select_km_curves(assemble_paths(segs), 1, segs)


def test_axes_unique_candidates():
    stair = _staircase_segments(3, x0=10, y0=10)
    segs, curves = _curve_for(stair + [seg(10, 20, 13, 20), seg(9, 10, 9, 20)])
    calib, ids = detect_axes(segs, curves, t_max=3)
    assert (calib.x_start, calib.x_end, calib.y_start, calib.y_end) == (10, 13, 20, 10)


def test_axes_gridline_loses_to_nearer_bottom_rule():
    stair = _staircase_segments(3, x0=10, y0=10)
    gridline = seg(10, 15, 13, 15)
    axis = seg(10, 14.0 + 8, 13, 14.0 + 8)
    segs, curves = _curve_for(stair + [gridline, axis, seg(10, 10, 10, 22)])
    calib, _ = detect_axes(segs, curves, t_max=3)
    assert calib.y_start == 22 and calib.x_start == 10


def test_axes_missing():
    segs, curves = _curve_for(_staircase_segments(3))
    with pytest.raises(ExtractionError, match="axis not found"):
        detect_axes(segs, curves, t_max=3)


def test_axes_match_renderer():
    ipd = generate(SimConfig(seed=1))
    fig = render_km_svg([km_estimate(ipd.arm(a)) for a in (0, 1)], with_figure=True)
    segs = parse_vector_document(fig.svg)
    calib, _ = detect_axes(segs, select_km_curves(assemble_paths(segs), 2, segs), fig.t_max)
    assert (calib.x_start, calib.x_end, calib.y_start, calib.y_end) == tuple(fig.axis.values())


# -- transform --------------------------------------------------------------------


def test_to_data_space_examples():
    c = AxisCalibration(100, 500, 700, 100, 24, 100)
    assert to_data_space((100, 700), c) == (0.0, 0.0)
    assert to_data_space((300, 700), c)[0] == 12.0
    assert to_data_space((100, 400), c)[1] == 0.5


@settings(max_examples=200)
@given(st.floats(0, 48), st.floats(0, 1))
def test_render_map_inverse(t, s):
    style = RenderStyle()
    calib = AxisCalibration(*style.to_page(0, 0)[:1], style.to_page(48, 0)[0], style.y_origin, style.y_origin - style.y_span, 48)
    t2, s2 = to_data_space(style.to_page(t, s), calib)
    assert abs(t2 - t) < 1e-9 and abs(s2 - s) < 1e-9


# -- censor marks ------------------------------------------------------------------


def _page_curve(start, drops, end_x, color=None):
    verts = [start]
    for x, y in drops:
        verts += [(x, verts[-1][1]), (x, y)]
    verts.append((end_x, verts[-1][1]))
    return PageCurve(start, tuple(drops), end_x, PagePath(tuple(verts), ()), color)


def test_tick_on_tread_assigned():
    curve = _page_curve((0, 0), [(5, 10)], 20)
    marks = find_mark_candidates(SegmentSet((seg(8, 8, 8, 12),)), set(), 1, 8, 1e-6)
    per_curve, un = assign_marks(marks, [curve], 5, 1e-6)
    assert [m.center for m in per_curve[0]] == [(8, 10)] and un == []
    calib = AxisCalibration(0, 20, 40, 0, 10)
    assert to_data_space(per_curve[0][0].center, calib)[0] == 4.0


def test_tick_between_curves_goes_to_colour_match():
    red, blue = (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)
    a = _page_curve((0, 0), [(5, 8)], 20, red)
    b = _page_curve((0, 0), [(5, 12)], 20, blue)
    marks = [CensorMark((10, 10), (0,), blue)]
    per_curve, _ = assign_marks(marks, [a, b], 5, 1e-6)
    assert per_curve == [[], marks]


def test_cross_marks_merge_and_loose_horizontal_rejected():
    segs = SegmentSet((seg(9, 10, 11, 10), seg(10, 9, 10, 11), seg(30, 5, 32, 5), seg(40, 5, 42, 7), seg(41, 5, 41, 5.0001)))
    marks = find_mark_candidates(segs, set(), 1, 8, 1e-6)
    assert [m.center for m in marks] == [(10, 10)]


def test_far_mark_unassigned():
    curve = _page_curve((0, 0), [(5, 10)], 20)
    marks = [CensorMark((8, 30), (0,), None)]
    per_curve, un = assign_marks(marks, [curve], 5, 1e-6)
    assert per_curve == [[]] and un == marks


# -- end to end ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 7, 19])
def test_rendered_figure_recovered_exactly(seed):
    ipd = generate(SimConfig(seed=seed))
    truth = [km_estimate(ipd.arm(a)) for a in (0, 1)]
    fig = render_km_svg(truth, with_figure=True)
    ex = extract_figure(fig.svg, 2, fig.t_max)
    # curves come back ordered by segment count, so pair them by colour
    style = RenderStyle()
    for curve, color in zip(ex.curves, ex.colors):
        src = truth[[tuple(round(c * 255) for c in col) for col in style.colors].index(tuple(round(c * 255) for c in color))]
        assert len(curve.points) == len(src.points)
        assert np.max(np.abs(np.array(curve_vertices(curve)) - np.array(curve_vertices(src)))) < 1e-9
        cens = sorted(set(src.censor_times))
        assert len(curve.censor_times) == len(cens)
        assert np.max(np.abs(np.array(curve.censor_times) - cens)) < 1e-9
        assert all(0 <= s <= 1 + 1e-9 for _, s in curve.points)
    assert ex.unassigned_marks == []


def test_thirty_ticks_recovered():
    times = tuple(0.5 + 0.7 * i for i in range(30))
    pts = ((0.0, 1.0), (3.3, 0.9), (9.1, 0.7), (15.2, 0.55))
    c = StepCurve(pts, censor_times=times, t_end=22.0)
    ex = extract_figure(render_km_svg([c]), 1, 24)
    assert np.max(np.abs(np.array(ex.curves[0].censor_times) - np.array(times))) < 1e-9
