"""Vector KM figure extraction.

Figures arrive as SVG or as a JSON segment-interchange file. Straight drawing
primitives become :class:`Segment` objects in page space (y grows downward).
Segments are chained into monotone staircase paths, the longest paths are
taken as the KM curves, the two axis rules are located next to them, short
vertical or cross-shaped marks are assigned to curves as censor ticks, and
everything is mapped to (time, survival) through the axis calibration.
"""

from __future__ import annotations

import json
import math
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ExtractionError, NoVectorContentError, ParseError, ValidationError
from .survival_core import StepCurve

Point = tuple[float, float]


@dataclass(frozen=True)
class Segment:
    start: Point
    end: Point
    stroke_color: tuple[float, float, float] | None = None
    stroke_width: float | None = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.start, *self.end)):
            raise ValidationError("segment coordinates must be finite")

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])

    @property
    def center(self) -> Point:
        return (0.5 * (self.start[0] + self.end[0]), 0.5 * (self.start[1] + self.end[1]))

    def key(self) -> tuple:
        a, b = sorted((self.start, self.end))
        return (*a, *b)


@dataclass(frozen=True)
class SegmentSet:
    segments: tuple[Segment, ...]
    page_height: float | None = None

    def __len__(self):
        return len(self.segments)


@dataclass(frozen=True)
class AxisCalibration:
    x_start: float
    x_end: float
    y_start: float
    y_end: float
    t_max: float
    s_max: float = 1.0

    def __post_init__(self):
        if not self.x_end > self.x_start:
            raise ValidationError("x_end must exceed x_start")
        if self.y_start == self.y_end:
            raise ValidationError("y_start and y_end must differ")
        if not self.t_max > 0:
            raise ValidationError("t_max must be positive")
        if self.s_max not in (1, 100):
            raise ValidationError("s_max must be 1 or 100")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x_start", "x_end", "y_start", "y_end", "t_max", "s_max")}


@dataclass(frozen=True)
class ExtractConfig:
    """Tolerances for extraction.

    Mark length bounds and the assignment tolerance are fractions of the
    y-axis span unless the absolute overrides are set.
    """

    join_tol: float = 1e-6
    span_tol: float = 0.02
    mark_min_rel: float = 0.002
    mark_max_rel: float = 0.04
    assign_rel: float = 0.01
    min_len: float | None = None
    max_len: float | None = None
    assign_tol: float | None = None

    def __post_init__(self):
        if self.join_tol <= 0:
            raise ValidationError("join_tol must be positive")
        if not 0 <= self.span_tol < 1:
            raise ValidationError("span_tol must lie in [0, 1)")

    def bounds(self, y_span: float) -> tuple[float, float, float]:
        lo = self.min_len if self.min_len is not None else self.mark_min_rel * y_span
        hi = self.max_len if self.max_len is not None else self.mark_max_rel * y_span
        tol = self.assign_tol if self.assign_tol is not None else self.assign_rel * y_span
        return lo, hi, tol


# ----------------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------------

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_NUM_RE = re.compile(_NUM)
_PATH_TOKEN = re.compile(rf"\s*,?\s*([MmLlHhVvZzCcSsQqTtAa]|{_NUM})")
_TRANSFORM = re.compile(r"(matrix|translate|scale|rotate|skewX|skewY)\s*\(([^)]*)\)")

_NAMED = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 128 / 255, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "gray": (128 / 255,) * 3,
    "grey": (128 / 255,) * 3,
    "orange": (1.0, 165 / 255, 0.0),
}

_SKIP_SUBTREES = {"defs", "clipPath", "mask", "symbol", "marker", "pattern", "title", "desc", "metadata", "style"}


def _local(tag) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


def parse_color(value: str | None):
    """SVG paint to an (r, g, b) triple in [0, 1]; ``None`` when unknown."""
    if value is None:
        return None
    v = value.strip().lower()
    if v.startswith("#"):
        h = v[1:]
        if len(h) == 3:
            h = "".join(c * 2 for c in h)
        if len(h) == 6:
            try:
                return tuple(int(h[i : i + 2], 16) / 255 for i in (0, 2, 4))
            except ValueError:
                return None
        return None
    m = re.fullmatch(r"rgb\(\s*([^,]+),\s*([^,]+),\s*([^)]+)\)", v)
    if m:
        out = []
        for part in m.groups():
            part = part.strip()
            if part.endswith("%"):
                out.append(float(part[:-1]) / 100)
            else:
                out.append(float(part) / 255)
        return tuple(min(max(c, 0.0), 1.0) for c in out)
    return _NAMED.get(v)


def _parse_style(style: str | None) -> dict:
    out = {}
    if style:
        for item in style.split(";"):
            if ":" in item:
                k, v = item.split(":", 1)
                out[k.strip()] = v.strip()
    return out


def _mat_mul(a, b):
    # affine (a, b, c, d, e, f) composition: apply b first, then a
    a0, a1, a2, a3, a4, a5 = a
    b0, b1, b2, b3, b4, b5 = b
    return (
        a0 * b0 + a2 * b1,
        a1 * b0 + a3 * b1,
        a0 * b2 + a2 * b3,
        a1 * b2 + a3 * b3,
        a0 * b4 + a2 * b5 + a4,
        a1 * b4 + a3 * b5 + a5,
    )


_IDENTITY = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


def parse_transform(text: str | None):
    m = _IDENTITY
    if not text:
        return m
    for name, args in _TRANSFORM.findall(text):
        v = [float(x) for x in _NUM_RE.findall(args)]
        if name == "matrix" and len(v) == 6:
            t = tuple(v)
        elif name == "translate":
            t = (1, 0, 0, 1, v[0], v[1] if len(v) > 1 else 0.0)
        elif name == "scale":
            sx = v[0]
            t = (sx, 0, 0, v[1] if len(v) > 1 else sx, 0, 0)
        elif name == "rotate":
            a = math.radians(v[0])
            t = (math.cos(a), math.sin(a), -math.sin(a), math.cos(a), 0, 0)
            if len(v) == 3:
                cx, cy = v[1], v[2]
                t = _mat_mul(_mat_mul((1, 0, 0, 1, cx, cy), t), (1, 0, 0, 1, -cx, -cy))
        elif name == "skewX":
            t = (1, 0, math.tan(math.radians(v[0])), 1, 0, 0)
        elif name == "skewY":
            t = (1, math.tan(math.radians(v[0])), 0, 1, 0, 0)
        else:
            continue
        m = _mat_mul(m, t)
    return m


def _apply(m, p: Point) -> Point:
    return (m[0] * p[0] + m[2] * p[1] + m[4], m[1] * p[0] + m[3] * p[1] + m[5])


def _num(value, default=0.0) -> float:
    if value is None:
        return default
    found = _NUM_RE.match(value.strip())
    if not found:
        raise ParseError(f"bad numeric attribute {value!r}")
    return float(found.group())


_ARITY = {"m": 2, "l": 2, "h": 1, "v": 1, "c": 6, "s": 4, "q": 4, "t": 2, "a": 7}


def path_to_polylines(d: str) -> list[list[Point]]:
    """Straight-line pieces of SVG path data.

    Curve and arc commands move the current point but contribute no line;
    every run of straight commands becomes one polyline.
    """
    pos = 0
    tokens = []
    d = d.strip()
    while pos < len(d):
        m = _PATH_TOKEN.match(d, pos)
        if not m or m.end() == pos:
            if d[pos:].strip(" ,\t\r\n") == "":
                break
            raise ParseError(f"bad path data near {d[pos:pos + 12]!r}", pos)
        tokens.append(m.group(1))
        pos = m.end()

    runs: list[list[Point]] = []
    cur = (0.0, 0.0)
    sub_start = cur
    run: list[Point] = []

    def flush():
        nonlocal run
        if len(run) >= 2:
            runs.append(run)
        run = []

    i = 0
    cmd = None
    while i < len(tokens):
        tok = tokens[i]
        if tok.isalpha():
            cmd = tok
            i += 1
            if cmd in "Zz":
                if run and run[-1] != sub_start:
                    run.append(sub_start)
                flush()
                cur = sub_start
                continue
        elif cmd is None:
            raise ParseError("path data must start with a command")
        lc = cmd.lower()
        if lc == "z":
            raise ParseError("numbers after closepath")
        n = _ARITY[lc]
        if i + n > len(tokens) or any(t.isalpha() for t in tokens[i : i + n]):
            raise ParseError(f"command {cmd} expects {n} numbers")
        v = [float(t) for t in tokens[i : i + n]]
        i += n
        rel = cmd.islower()
        if lc == "m":
            flush()
            cur = (cur[0] + v[0], cur[1] + v[1]) if rel else (v[0], v[1])
            sub_start = cur
            run = [cur]
            cmd = "l" if rel else "L"  # implicit lineto after moveto
        elif lc in "lhv":
            if lc == "l":
                nxt = (cur[0] + v[0], cur[1] + v[1]) if rel else (v[0], v[1])
            elif lc == "h":
                nxt = (cur[0] + v[0] if rel else v[0], cur[1])
            else:
                nxt = (cur[0], cur[1] + v[0] if rel else v[0])
            if not run:
                run = [cur]
            run.append(nxt)
            cur = nxt
        else:
            flush()
            ex, ey = v[-2], v[-1]
            cur = (cur[0] + ex, cur[1] + ey) if rel else (ex, ey)
            run = [cur]
    flush()
    return runs


def _error_offset(data: bytes, line: int, col: int) -> int:
    lines = data.splitlines(keepends=True)
    return sum(len(x) for x in lines[: max(line - 1, 0)]) + col


def _parse_svg(data: bytes) -> SegmentSet:
    if not data.strip():
        raise NoVectorContentError()
    try:
        root = ET.fromstring(data)
    except ET.ParseError as e:
        line, col = e.position
        raise ParseError(f"malformed SVG: {e.msg if hasattr(e, 'msg') else e}", _error_offset(data, line, col)) from None

    ids = {el.get("id"): el for el in root.iter() if el.get("id")}
    segments: list[Segment] = []

    def emit(points, m, stroke, width):
        if stroke == "none":
            return
        color = parse_color(stroke)
        pts = [_apply(m, p) for p in points]
        for a, b in zip(pts, pts[1:]):
            if a != b:
                segments.append(Segment(a, b, color, width))

    def walk(el, m, inherited, depth=0):
        tag = _local(el.tag)
        if tag in _SKIP_SUBTREES or depth > 64:
            return
        style = _parse_style(el.get("style"))
        attrs = dict(inherited)
        for key in ("stroke", "stroke-width"):
            val = style.get(key, el.get(key))
            if val is not None and val != "inherit":
                attrs[key] = val
        m = _mat_mul(m, parse_transform(el.get("transform")))
        stroke = attrs.get("stroke")
        width = _num(attrs["stroke-width"]) if "stroke-width" in attrs else None
        try:
            if tag == "line":
                p1 = (_num(el.get("x1")), _num(el.get("y1")))
                p2 = (_num(el.get("x2")), _num(el.get("y2")))
                emit([p1, p2], m, stroke, width)
            elif tag in ("polyline", "polygon"):
                vals = [float(v) for v in _NUM_RE.findall(el.get("points", ""))]
                pts = list(zip(vals[0::2], vals[1::2]))
                if tag == "polygon" and pts:
                    pts.append(pts[0])
                emit(pts, m, stroke, width)
            elif tag == "rect":
                x, y = _num(el.get("x")), _num(el.get("y"))
                w, h = _num(el.get("width")), _num(el.get("height"))
                if w > 0 and h > 0 and not (el.get("rx") or el.get("ry")):
                    emit([(x, y), (x + w, y), (x + w, y + h), (x, y + h), (x, y)], m, stroke, width)
            elif tag == "path":
                d = el.get("d", "")
                try:
                    runs = path_to_polylines(d)
                except ParseError as e:
                    at = data.find(d.encode("utf-8")) if d else -1
                    off = at + (e.offset or 0) if at >= 0 else None
                    raise ParseError(str(e).split(" (at byte")[0], off) from None
                for run in runs:
                    emit(run, m, stroke, width)
            elif tag == "use":
                ref = el.get("href") or el.get("{http://www.w3.org/1999/xlink}href")
                target = ids.get(ref[1:]) if ref and ref.startswith("#") else None
                if target is not None and target is not el:
                    shift = (1, 0, 0, 1, _num(el.get("x")), _num(el.get("y")))
                    walk_target(target, _mat_mul(m, shift), attrs, depth + 1)
                return
        except ValueError as e:
            if isinstance(e, ParseError):
                raise
            raise ParseError(f"bad attribute on <{tag}>: {e}") from None
        for child in el:
            walk(child, m, attrs, depth + 1)

    def walk_target(el, m, attrs, depth):
        # a <symbol> target is drawn through its children; walk() alone would skip it
        if _local(el.tag) in _SKIP_SUBTREES:
            for child in el:
                walk(child, m, attrs, depth + 1)
        else:
            walk(el, m, attrs, depth)

    walk(root, _IDENTITY, {})
    if not segments:
        raise NoVectorContentError()
    page_height = None
    vb = root.get("viewBox")
    if vb:
        vals = [float(v) for v in _NUM_RE.findall(vb)]
        if len(vals) == 4:
            page_height = vals[3]
    if page_height is None and root.get("height"):
        page_height = _num(root.get("height"))
    return SegmentSet(tuple(segments), page_height)


def _segments_from_entry(entry, index: int) -> list[Segment]:
    if not isinstance(entry, dict):
        raise ParseError(f"segment entry {index} is not an object")
    rgb = entry.get("rgb", entry.get("color"))
    color = None
    if rgb is not None:
        if len(rgb) != 3:
            raise ParseError(f"segment entry {index}: rgb needs 3 components")
        color = tuple(float(c) for c in rgb)
    width = entry.get("width")
    width = None if width is None else float(width)
    if "items" in entry:
        # drawing dictionaries as emitted by PDF extractors: ("l", p1, p2) and ("re", rect)
        out = []
        for item in entry["items"]:
            kind = item[0]
            if kind == "l":
                out.append(Segment(tuple(map(float, item[1])), tuple(map(float, item[2])), color, width))
            elif kind == "re":
                x0, y0, x1, y1 = map(float, item[1])
                corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
                out.extend(Segment(a, b, color, width) for a, b in zip(corners, corners[1:]) if a != b)
        return out
    try:
        p1 = (float(entry["x1"]), float(entry["y1"]))
        p2 = (float(entry["x2"]), float(entry["y2"]))
    except (KeyError, TypeError, ValueError):
        raise ParseError(f"segment entry {index} needs numeric x1, y1, x2, y2") from None
    return [Segment(p1, p2, color, width)]


def _parse_interchange(data: bytes) -> SegmentSet:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError("input is not UTF-8", e.start) from None
    if not text.strip():
        raise NoVectorContentError()
    entries, page_height = [], None
    try:
        doc = json.loads(text)
        docs = [doc]
    except json.JSONDecodeError as whole_err:
        # line-oriented form: one JSON object per line
        docs = []
        offset = 0
        for line in text.splitlines(keepends=True):
            if line.strip():
                try:
                    docs.append(json.loads(line))
                except json.JSONDecodeError as e:
                    if not docs:
                        e = whole_err
                        raise ParseError(f"malformed JSON: {e.msg}", len(text[: e.pos].encode())) from None
                    raise ParseError(f"malformed JSON: {e.msg}", offset + len(line[: e.pos].encode())) from None
            offset += len(line.encode())
    for doc in docs:
        if isinstance(doc, list):
            entries.extend(doc)
        elif isinstance(doc, dict):
            if "page_height" in doc:
                page_height = None if doc["page_height"] is None else float(doc["page_height"])
            if "segments" in doc:
                entries.extend(doc["segments"])
            elif "items" in doc or "x1" in doc:
                entries.append(doc)
        else:
            raise ParseError("interchange document must hold objects")
    segments = []
    for i, entry in enumerate(entries):
        segments.extend(_segments_from_entry(entry, i))
    if not segments:
        raise NoVectorContentError()
    return SegmentSet(tuple(segments), page_height)


def parse_vector_document(data: bytes, fmt: str | None = None) -> SegmentSet:
    """Decode ``data`` as ``"svg"`` or ``"segment_interchange"``.

    With ``fmt=None`` the format is sniffed from the first non-blank byte.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    if fmt is None:
        fmt = "svg" if data.lstrip()[:1] == b"<" else "segment_interchange"
    if fmt == "svg":
        return _parse_svg(data)
    if fmt in ("segment_interchange", "json"):
        return _parse_interchange(data)
    raise ValidationError(f"unknown vector format {fmt!r}")


def to_interchange(segs: SegmentSet) -> bytes:
    rows = [
        {
            "x1": s.start[0],
            "y1": s.start[1],
            "x2": s.end[0],
            "y2": s.end[1],
            "rgb": None if s.stroke_color is None else list(s.stroke_color),
            "width": s.stroke_width,
        }
        for s in segs.segments
    ]
    return (json.dumps({"page_height": segs.page_height, "segments": rows}, indent=1) + "\n").encode()


# ----------------------------------------------------------------------------
# Path assembly
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PagePath:
    """Chain of oriented segments; ``segment_ids`` index the SegmentSet."""

    vertices: tuple[Point, ...]
    segment_ids: tuple[int, ...]
    monotone: bool = True

    @property
    def n_segments(self) -> int:
        return len(self.segment_ids)

    def sort_key(self):
        return (-self.n_segments, self.vertices)


class _VertexIndex:
    """Cluster points that lie within ``tol`` of each other."""

    def __init__(self, tol: float):
        self.tol = tol
        self.cells: dict[tuple[int, int], list[int]] = {}
        self.points: list[Point] = []

    def find_or_add(self, p: Point) -> int:
        cx, cy = int(math.floor(p[0] / self.tol)), int(math.floor(p[1] / self.tol))
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for vid in self.cells.get((cx + dx, cy + dy), ()):
                    q = self.points[vid]
                    if abs(q[0] - p[0]) <= self.tol and abs(q[1] - p[1]) <= self.tol:
                        return vid
        vid = len(self.points)
        self.points.append(p)
        self.cells.setdefault((cx, cy), []).append(vid)
        return vid


def _orient(seg: Segment, tol: float):
    """Return (start, end) ordered rightward and downward, or ``None``."""
    (x1, y1), (x2, y2) = seg.start, seg.end
    if x2 - x1 >= -tol and y2 - y1 >= -tol:
        return seg.start, seg.end
    if x1 - x2 >= -tol and y1 - y2 >= -tol:
        return seg.end, seg.start
    return None


def _kind(a: Point, b: Point, tol: float) -> str:
    if abs(b[1] - a[1]) <= tol:
        return "h"
    if abs(b[0] - a[0]) <= tol:
        return "v"
    return "d"


def assemble_paths(segs: SegmentSet, join_tol: float = 1e-6) -> list[PagePath]:
    """Chain segments whose endpoints coincide within ``join_tol``.

    Each segment is oriented left-to-right and top-to-bottom, so every chain is
    a monotone staircase by construction. Segments that rise while moving
    right cannot be oriented and come back as single non-monotone paths.
    Where several chains meet at one vertex, a horizontal/vertical alternation
    is preferred, then matching stroke color.
    """
    if join_tol <= 0:
        raise ValidationError("join_tol must be positive")
    index = _VertexIndex(join_tol)
    oriented: dict[int, tuple[Point, Point]] = {}
    starts: dict[int, list[int]] = {}
    ends: dict[int, list[int]] = {}
    loose: list[PagePath] = []
    for i, seg in enumerate(segs.segments):
        if seg.length <= join_tol:
            continue
        o = _orient(seg, join_tol)
        if o is None:
            loose.append(PagePath((seg.start, seg.end), (i,), monotone=False))
            continue
        oriented[i] = o
        starts.setdefault(index.find_or_add(o[0]), []).append(i)
        ends.setdefault(index.find_or_add(o[1]), []).append(i)

    def gkey(i):
        a, b = oriented[i]
        return (a, b)

    nxt: dict[int, int] = {}
    prv: dict[int, int] = {}
    for v, incoming in ends.items():
        outgoing = starts.get(v, [])
        if not outgoing:
            continue
        ranked = []
        for a in incoming:
            ka = _kind(*oriented[a], join_tol)
            for b in outgoing:
                kb = _kind(*oriented[b], join_tol)
                score = 2 * (ka != kb and "d" not in (ka, kb))
                ca, cb = segs.segments[a].stroke_color, segs.segments[b].stroke_color
                score += ca == cb
                ranked.append((-score, gkey(a), gkey(b), a, b))
        ranked.sort()
        for _, _, _, a, b in ranked:
            if a not in nxt and b not in prv:
                nxt[a] = b
                prv[b] = a

    paths = []
    seen = set()
    for i in sorted(oriented, key=gkey):
        if i in prv or i in seen:
            continue
        chain = [i]
        seen.add(i)
        while chain[-1] in nxt and nxt[chain[-1]] not in seen:
            chain.append(nxt[chain[-1]])
            seen.add(chain[-1])
        verts = [oriented[chain[0]][0]] + [oriented[j][1] for j in chain]
        paths.append(PagePath(tuple(verts), tuple(chain)))
    # anything left is on a cycle, which orientation rules out; kept for safety
    for i in sorted(set(oriented) - seen, key=gkey):
        paths.append(PagePath(oriented[i], (i,)))
    return paths + loose


# ----------------------------------------------------------------------------
# Curves, axes and marks
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PageCurve:
    """Staircase in page coordinates: start vertex, (x, y after drop) pairs, end x."""

    start: Point
    drops: tuple[Point, ...]
    end_x: float
    path: PagePath
    color: tuple[float, float, float] | None = None

    @property
    def segment_ids(self):
        return self.path.segment_ids

    @property
    def vertices(self):
        return self.path.vertices

    def level_at(self, x: float, tol: float):
        """Page-y interval covered by the curve at ``x`` or ``None`` off its range."""
        if x < self.start[0] - tol or x > self.end_x + tol:
            return None
        y = self.start[1]
        for dx, dy in self.drops:
            if abs(dx - x) <= tol:
                return (y, dy)
            if dx > x:
                break
            y = dy
        return (y, y)


def _path_to_curve(path: PagePath, segs: SegmentSet | None, tol: float) -> PageCurve:
    verts = path.vertices
    drops: list[Point] = []
    for a, b in zip(verts, verts[1:]):
        if b[1] - a[1] > tol:
            if drops and abs(drops[-1][0] - b[0]) <= tol:
                drops[-1] = (drops[-1][0], b[1])
            else:
                drops.append((b[0], b[1]))
    color = None
    if segs is not None:
        colors = [segs.segments[i].stroke_color for i in path.segment_ids]
        color = max(set(colors), key=lambda c: (colors.count(c), c is not None, str(c)))
    return PageCurve(verts[0], tuple(drops), verts[-1][0], path, color)


def select_km_curves(paths, k_curves: int, segs: SegmentSet | None = None, join_tol: float = 1e-6) -> list[PageCurve]:
    """The ``k_curves`` monotone paths with the most segments, longest first."""
    if k_curves < 1:
        raise ValidationError("k_curves must be positive")
    cands = sorted((p for p in paths if p.monotone), key=PagePath.sort_key)
    if len(cands) < k_curves:
        counts = [p.n_segments for p in cands]
        raise ExtractionError(f"requested {k_curves} curves but found {len(cands)} candidate paths (segment counts {counts})")
    return [_path_to_curve(p, segs, join_tol) for p in cands[:k_curves]]


def _curve_extent(curves):
    xs = [v[0] for c in curves for v in c.vertices]
    ys = [v[1] for c in curves for v in c.vertices]
    return min(xs), max(xs), min(ys), max(ys)


def detect_axes(segs: SegmentSet, curves, t_max: float, s_max: float = 1.0, span_tol: float = 0.02, join_tol: float = 1e-6):
    """Locate the axis rules and return the calibration together with their segment ids.

    The x-axis is the horizontal segment, outside the curves, that spans the
    curves' horizontal extent (allowing a ``span_tol`` shortfall at each end),
    lies on or below the lowest curve point, and is nearest to it. The y-axis
    is the analogous vertical segment on or left of the curves.
    """
    used = {i for c in curves for i in c.segment_ids}
    x_lo, x_hi, y_top, y_bot = _curve_extent(curves)
    span_x, span_y = x_hi - x_lo, y_bot - y_top
    best_h = best_v = None
    for i, s in enumerate(segs.segments):
        if i in used or s.length <= join_tol:
            continue
        (x1, y1), (x2, y2) = s.start, s.end
        if abs(y2 - y1) <= join_tol:
            a, b, y = min(x1, x2), max(x1, x2), 0.5 * (y1 + y2)
            if a <= x_lo + span_tol * span_x + join_tol and b >= x_hi - span_tol * span_x - join_tol and y >= y_bot - join_tol:
                key = (y - y_bot, -(b - a), s.key())
                if best_h is None or key < best_h[0]:
                    best_h = (key, i, a, b)
        elif abs(x2 - x1) <= join_tol:
            a, b, x = min(y1, y2), max(y1, y2), 0.5 * (x1 + x2)
            if a <= y_top + span_tol * span_y + join_tol and b >= y_bot - span_tol * span_y - join_tol and x <= x_lo + join_tol:
                key = (x_lo - x, -(b - a), s.key())
                if best_v is None or key < best_v[0]:
                    best_v = (key, i, a, b)
    if best_h is None or best_v is None:
        raise ExtractionError("axis not found" + (" (time axis)" if best_h is None else " (survival axis)"))
    calib = AxisCalibration(best_h[2], best_h[3], best_v[3], best_v[2], t_max, s_max)
    return calib, (best_h[1], best_v[1])


def to_data_space(p: Point, calib: AxisCalibration) -> tuple[float, float]:
    """Page point to (months, survival in [0, 1] scale)."""
    x, y = p
    t = (x - calib.x_start) * calib.t_max / (calib.x_end - calib.x_start)
    s = (calib.y_start - y) * calib.s_max / (calib.y_start - calib.y_end)
    return t, s / calib.s_max


@dataclass(frozen=True)
class CensorMark:
    center: Point
    segment_ids: tuple[int, ...]
    color: tuple[float, float, float] | None
    # identical primitives drawn on top of each other, one per censored subject
    multiplicity: int = 1


def find_mark_candidates(segs: SegmentSet, exclude, min_len: float, max_len: float, join_tol: float) -> list[CensorMark]:
    """Short vertical segments, or groups of short segments sharing a center.

    Segments with a common center form one mark (a cross, say). Exact copies
    of the same primitive within a mark count as separate censorings.
    """
    index = _VertexIndex(join_tol)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(segs.segments):
        if i in exclude or not (min_len <= s.length <= max_len):
            continue
        groups.setdefault(index.find_or_add(s.center), []).append(i)
    marks = []
    for gid, members in groups.items():
        vertical = [i for i in members if abs(segs.segments[i].end[0] - segs.segments[i].start[0]) <= join_tol]
        if not vertical and len(members) < 2:
            continue
        anchor = segs.segments[(vertical or members)[0]]
        colors = [segs.segments[i].stroke_color for i in members]
        shapes = Counter(tuple(round(v / join_tol) for v in segs.segments[i].key()) for i in members)
        marks.append(CensorMark(anchor.center, tuple(members), colors[0], max(shapes.values())))
    marks.sort(key=lambda m: (m.center, m.segment_ids))
    return marks


def assign_marks(marks, curves, assign_tol: float, join_tol: float):
    """Split marks into per-curve lists plus the unassigned remainder.

    Every curve within ``assign_tol`` of the mark center is a candidate. A
    candidate whose stroke color matches the mark wins; otherwise the nearest.
    """
    per_curve = [[] for _ in curves]
    unassigned = []
    for mark in marks:
        cx, cy = mark.center
        cands = []
        for j, c in enumerate(curves):
            span = c.level_at(cx, join_tol)
            if span is None:
                continue
            lo, hi = min(span), max(span)
            dist = 0.0 if lo <= cy <= hi else min(abs(cy - lo), abs(cy - hi))
            if dist <= assign_tol:
                colour_match = mark.color is not None and c.color is not None and np.allclose(mark.color, c.color, atol=1e-6)
                cands.append((not colour_match, dist, j))
        if not cands:
            unassigned.append(mark)
            continue
        if any(not c[0] for c in cands):
            cands = [c for c in cands if not c[0]]
        per_curve[min(cands, key=lambda c: (c[1], c[2]))[2]].append(mark)
    return per_curve, unassigned


@dataclass
class ExtractedFigure:
    curves: list[StepCurve]
    calibration: AxisCalibration
    page_curves: list[PageCurve]
    unassigned_marks: list[Segment] = field(default_factory=list)
    colors: list = field(default_factory=list)
    n_paths: int = 0

    def report(self) -> dict:
        return {
            "n_curves": len(self.curves),
            "n_paths": self.n_paths,
            "segments_per_curve": [c.path.n_segments for c in self.page_curves],
            "drops_per_curve": [len(c.drops) for c in self.page_curves],
            "censors_per_curve": [len(c.censor_times) for c in self.curves],
            "colors": [None if c is None else list(c) for c in self.colors],
            "calibration": self.calibration.to_dict(),
            "unassigned_marks": [
                {"x1": s.start[0], "y1": s.start[1], "x2": s.end[0], "y2": s.end[1]} for s in self.unassigned_marks
            ],
        }


def page_curve_to_step(curve: PageCurve, censor_x, calib: AxisCalibration, tol: float = 1e-12) -> StepCurve:
    t0, s0 = to_data_space(curve.start, calib)
    pts = [(t0, min(max(s0, 0.0), 1.0))]
    for x, y in curve.drops:
        t, s = to_data_space((x, y), calib)
        s = min(max(s, 0.0), pts[-1][1])
        if t <= pts[-1][0] + tol:
            pts[-1] = (pts[-1][0], s)
        else:
            pts.append((t, s))
    cens = sorted(to_data_space((x, 0.0), calib)[0] for x in censor_x)
    t_end = to_data_space((curve.end_x, 0.0), calib)[0]
    return StepCurve(tuple(pts), censor_times=tuple(cens), t_end=t_end)


def extract_figure(
    source,
    k_curves: int,
    t_max: float,
    s_max: float = 1.0,
    cfg: ExtractConfig = ExtractConfig(),
    fmt: str | None = None,
) -> ExtractedFigure:
    """Full extraction from bytes or an already parsed :class:`SegmentSet`."""
    segs = source if isinstance(source, SegmentSet) else parse_vector_document(source, fmt)
    paths = assemble_paths(segs, cfg.join_tol)
    page_curves = select_km_curves(paths, k_curves, segs, cfg.join_tol)
    calib, axis_ids = detect_axes(segs, page_curves, t_max, s_max, cfg.span_tol, cfg.join_tol)
    min_len, max_len, assign_tol = cfg.bounds(abs(calib.y_start - calib.y_end))
    exclude = {i for c in page_curves for i in c.segment_ids} | set(axis_ids)
    marks = find_mark_candidates(segs, exclude, min_len, max_len, cfg.join_tol)
    per_curve, unassigned = assign_marks(marks, page_curves, assign_tol, cfg.join_tol)
    curves = [
        page_curve_to_step(pc, [m.center[0] for m in ms for _ in range(m.multiplicity)], calib)
        for pc, ms in zip(page_curves, per_curve)
    ]
    loose = [segs.segments[i] for m in unassigned for i in m.segment_ids]
    return ExtractedFigure(curves, calib, page_curves, loose, [pc.color for pc in page_curves], len(paths))
