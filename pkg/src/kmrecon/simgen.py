"""Synthetic two-subgroup trial generator and vector KM figure renderer.

Random streams
--------------
``generate`` builds a :class:`numpy.random.SeedSequence` from ``cfg.seed`` and
spawns three children, used in order for treatment allocation, event times and
censoring times. Each child drives a PCG64 bit generator, so a given seed
reproduces the same dataset on any platform numpy supports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .survival_core import IpdSet, StepCurve

BIOMARKER_LOW = 0
BIOMARKER_HIGH = 1


@dataclass(frozen=True)
class SimConfig:
    n_total: int = 400
    group_sizes: tuple[int, ...] = (200, 200)
    lambda0: float = 0.1
    hazard_ratios: tuple[float, ...] = (0.9, 0.7)
    p_treatment: float = 0.5
    censor_weights: tuple[float, float] = (0.9, 0.1)
    censor_late: tuple[float, float] = (12.0, 24.0)
    censor_early: tuple[float, float] = (0.0, 12.0)
    # Observed times are recorded to this many decimals (None keeps full precision).
    time_decimals: int | None = 4
    seed: int = 0

    def __post_init__(self):
        if sum(self.group_sizes) != self.n_total:
            raise ValidationError("group sizes must sum to n_total")
        if len(self.group_sizes) != len(self.hazard_ratios):
            raise ValidationError("one hazard ratio per group is required")
        if not math.isclose(sum(self.censor_weights), 1.0):
            raise ValidationError("censoring mixture weights must sum to 1")
        if self.lambda0 <= 0 or min(self.hazard_ratios) <= 0:
            raise ValidationError("rates must be positive")
        if not 0.0 <= self.p_treatment <= 1.0:
            raise ValidationError("p_treatment must be a probability")


def generate(cfg: SimConfig = SimConfig()) -> IpdSet:
    """Draw one synthetic trial; labels carry the true subgroup."""
    ss = np.random.SeedSequence(cfg.seed)
    r_arm, r_event, r_cens = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3))

    groups = np.repeat(np.arange(len(cfg.group_sizes)), cfg.group_sizes)
    arms = (r_arm.random(cfg.n_total) < cfg.p_treatment).astype(int)
    log_hr = np.log(np.asarray(cfg.hazard_ratios))[groups]
    rate = cfg.lambda0 * np.exp(log_hr * arms)
    t_event = r_event.exponential(1.0 / rate)

    late = r_cens.random(cfg.n_total) < cfg.censor_weights[0]
    u = r_cens.random(cfg.n_total)
    lo = np.where(late, cfg.censor_late[0], cfg.censor_early[0])
    hi = np.where(late, cfg.censor_late[1], cfg.censor_early[1])
    t_cens = lo + (hi - lo) * u

    observed = np.minimum(t_event, t_cens)
    event = t_event <= t_cens
    if cfg.time_decimals is not None:
        step = 10.0 ** -cfg.time_decimals
        observed = np.maximum(np.round(observed, cfg.time_decimals), step)
    return IpdSet.from_arrays(observed, event, arms, groups, provenance="synthetic")


def risk_table(ipd: IpdSet, times) -> list[tuple[float, int]]:
    t = ipd.times
    return [(float(tau), int(np.count_nonzero(t >= tau))) for tau in times]


def risk_table_times(t_max: float, step: float = 6.0) -> list[float]:
    n = int(math.floor(t_max / step + 1e-9))
    return [step * i for i in range(n + 1)]


# ----------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------

DEFAULT_COLORS = ((0.0, 0.447, 0.698), (0.835, 0.369, 0.0), (0.0, 0.620, 0.451), (0.8, 0.475, 0.655))


@dataclass(frozen=True)
class RenderStyle:
    """Page layout for :func:`render_km_svg`.

    The time axis maps 0 to ``x_origin`` at ``x_scale`` page units per month;
    the survival axis maps 0 to ``y_origin`` and 1 to ``y_origin - y_span``.
    Page y grows downward. ``t_max=None`` rounds the longest follow-up up to a
    multiple of ``t_step``.
    """

    x_origin: float = 60.0
    y_origin: float = 1060.0
    x_scale: float = 20.0
    y_span: float = 1000.0
    t_max: float | None = None
    t_step: float = 6.0
    colors: tuple[tuple[float, float, float], ...] = DEFAULT_COLORS
    axis_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tick_half_height: float = 5.0
    stroke_width: float = 1.5
    decimals: int = 6
    margin: float = 40.0
    # "subject" draws one tick per censored subject, so tied censorings give
    # coincident ticks; "time" draws one tick per distinct censoring time
    censor_ticks: str = "subject"

    def __post_init__(self):
        if self.censor_ticks not in ("subject", "time"):
            raise ValidationError("censor_ticks must be 'subject' or 'time'")

    def resolve_t_max(self, curves) -> float:
        if self.t_max is not None:
            return float(self.t_max)
        ends = [c.t_end if c.t_end is not None else c.points[-1][0] for c in curves]
        longest = max(ends + [c.points[-1][0] for c in curves])
        return self.t_step * max(1, math.ceil(longest / self.t_step - 1e-12))

    def to_page(self, t: float, s: float) -> tuple[float, float]:
        return self.x_origin + self.x_scale * t, self.y_origin - self.y_span * s

    def page_size(self, t_max: float) -> tuple[float, float]:
        return self.x_origin + self.x_scale * t_max + self.margin, self.y_origin + self.margin


@dataclass
class RenderedFigure:
    svg: bytes
    t_max: float
    axis: dict = field(default_factory=dict)


def curve_vertices(curve: StepCurve) -> list[tuple[float, float]]:
    """Staircase vertices in data space, horizontal run first at every drop."""
    pts = list(curve.points)
    verts = [pts[0]]
    level = pts[0][1]
    for t, s in pts[1:]:
        verts.append((t, level))
        verts.append((t, s))
        level = s
    end = curve.t_end
    if end is not None and end > verts[-1][0]:
        verts.append((end, level))
    return verts


def _hex(rgb) -> str:
    return "#" + "".join(f"{int(round(c * 255)):02x}" for c in rgb)


def render_km_svg(curves, style: RenderStyle = RenderStyle(), with_figure: bool = False):
    """Draw curves, their censor ticks and both axes.

    Returns SVG bytes, or a :class:`RenderedFigure` carrying the axis geometry
    when ``with_figure`` is true.
    """
    curves = list(curves)
    t_max = style.resolve_t_max(curves)
    fmt = lambda v: f"{v:.{style.decimals}f}"
    width, height = style.page_size(t_max)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{fmt(width)}" height="{fmt(height)}" '
        f'viewBox="0 0 {fmt(width)} {fmt(height)}">',
    ]
    x0, y0 = style.to_page(0.0, 0.0)
    x1, _ = style.to_page(t_max, 0.0)
    _, y1 = style.to_page(0.0, 1.0)
    axis_attr = f'stroke="{_hex(style.axis_color)}" stroke-width="{fmt(style.stroke_width)}"'
    out.append(f'<line x1="{fmt(x0)}" y1="{fmt(y0)}" x2="{fmt(x1)}" y2="{fmt(y0)}" {axis_attr}/>')
    out.append(f'<line x1="{fmt(x0)}" y1="{fmt(y0)}" x2="{fmt(x0)}" y2="{fmt(y1)}" {axis_attr}/>')

    for i, curve in enumerate(curves):
        color = _hex(style.colors[i % len(style.colors)])
        attr = f'fill="none" stroke="{color}" stroke-width="{fmt(style.stroke_width)}"'
        verts = [style.to_page(t, s) for t, s in curve_vertices(curve)]
        if len(verts) >= 2:
            d = "M " + " L ".join(f"{fmt(x)} {fmt(y)}" for x, y in verts)
            out.append(f'<path d="{d}" {attr}/>')
        ticks = sorted(curve.censor_times) if style.censor_ticks == "subject" else sorted(set(curve.censor_times))
        for c in ticks:
            x, y = style.to_page(c, float(curve.evaluate(c)))
            h = style.tick_half_height
            out.append(
                f'<line x1="{fmt(x)}" y1="{fmt(y - h)}" x2="{fmt(x)}" y2="{fmt(y + h)}" '
                f'stroke="{color}" stroke-width="{fmt(style.stroke_width)}"/>'
            )
    out.append("</svg>")
    svg = ("\n".join(out) + "\n").encode("utf-8")
    if not with_figure:
        return svg
    axis = {"x_start": float(fmt(x0)), "x_end": float(fmt(x1)), "y_start": float(fmt(y0)), "y_end": float(fmt(y1))}
    return RenderedFigure(svg=svg, t_max=t_max, axis=axis)
