"""Command-line interface.

Every subcommand reads its inputs, stages its outputs in memory, publishes
them with atomic renames and then writes a run manifest (input and output
hashes, resolved configuration, seed, library versions).

Settings come from three places, highest precedence first: command-line
flags, the JSON file given with ``--config``, built-in defaults. The config
file has one object per stage::

    {"seed": 0,
     "extraction": {"k_curves": 2, "t_max": 24, "s_max": 1.0, "join_tol": 1e-6},
     "reconstruction": {"tol": 1e-7, "c_max": 20, "branch_radius": 1},
     "maple": {"targets": "targets.json", "runs": 1000, "t0": 1.0, "cooling": 0.999},
     "meta": {"cuts": [0, 6, 12, 18, 24, 30, 36], "burn_in": 2000, "samples": 5000, "runs": 500}}

Randomness derives from the single master seed: ``simulate`` uses it
directly, ``maple`` seeds run r with child r of ``SeedSequence(seed)`` and
``meta`` derives its per-arm sampler seeds and per-run member draws from
``SeedSequence([seed, 1])`` and ``SeedSequence([seed, 0])``.

Exit codes: 0 success, 1 invalid input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, cen_km, km_subtract, maple, meta_pex, simgen, vec_km
from .errors import (
    ExtractionError,
    KmreconError,
    ReconstructionError,
    ValidationError,
)
from .files import (
    StagedOutputs,
    dump_json,
    format_ipd_csv,
    format_risk_table_csv,
    read_curve_json,
    read_ipd_csv,
    read_json,
    read_risk_table_csv,
    sha256_file,
)
from .survival_core import IpdSet, curve_rmse, km_estimate

log = logging.getLogger("kmrecon")

POPULATIONS = {"overall": None, "low": simgen.BIOMARKER_LOW, "high": simgen.BIOMARKER_HIGH}


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(quiet: bool, json_logs: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("kmrecon")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if quiet else logging.INFO)
    root.propagate = False


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


@dataclass
class Context:
    args: argparse.Namespace
    config: dict
    inputs: list[Path] = field(default_factory=list)
    resolved: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.pick("seed", None, "seed", 0))

    def pick(self, flag: str, section: str | None, key: str, default):
        """Flag value, else config value, else ``default``; records the choice."""
        value = getattr(self.args, flag, None)
        if value is None:
            src = self.config if section is None else self.config.get(section, {})
            value = src.get(key, default)
        self.resolved[key if section is None else f"{section}.{key}"] = value
        return value

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"input file not found: {path}")
        self.inputs.append(path)
        return path


def load_config(path) -> dict:
    if path is None:
        return {}
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    for section in ("extraction", "reconstruction", "maple", "meta"):
        if not isinstance(cfg.get(section, {}), dict):
            raise ValidationError(f"{path}: section {section} must be an object")
    targets = cfg.get("maple", {}).get("targets")
    if targets is not None and not (Path(path).parent / targets).is_file() and not Path(targets).is_file():
        raise ValidationError(f"{path}: targets file {targets} does not exist")
    return cfg


def _versions() -> dict:
    import numba
    import scipy

    return {
        "kmrecon": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def _finish(ctx: Context, out: StagedOutputs, primary: Path):
    inputs = {str(p): sha256_file(p) for p in ctx.inputs}
    hashes = out.commit()
    manifest = {
        "command": ctx.args.command,
        "argv": ctx.args.argv,
        "seed": ctx.resolved.get("seed"),
        "config": ctx.resolved,
        "inputs": inputs,
        "outputs": hashes,
        "versions": _versions(),
    }
    path = Path(ctx.args.manifest) if ctx.args.manifest else primary.parent / f"{ctx.args.command}.manifest.json"
    final = StagedOutputs()
    final.add(path, dump_json(manifest))
    final.commit()
    log.info("wrote %d outputs; manifest %s", len(hashes), path)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _keyed(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


# ----------------------------------------------------------------------------
# simulate
# ----------------------------------------------------------------------------


def _population(ipd: IpdSet, name: str) -> IpdSet:
    k = POPULATIONS[name]
    return ipd if k is None else ipd.select(ipd.labels == k)


def _risk_tables(pop: IpdSet, t_max: float) -> dict:
    times = simgen.risk_table_times(t_max)
    return {a: simgen.risk_table(pop.arm(a), times) for a in (0, 1)}


def cmd_simulate(ctx: Context) -> int:
    a = ctx.args
    seed = ctx.pick("seed", None, "seed", 0)
    n = ctx.pick("n", "simulation", "n_total", 400)
    hrs = tuple(ctx.pick("hazard_ratios", "simulation", "hazard_ratios", (0.9, 0.7)))
    half = n // 2
    cfg = simgen.SimConfig(n_total=n, group_sizes=(half, n - half), hazard_ratios=hrs, seed=int(seed))
    ipd = simgen.generate(cfg)
    out = StagedOutputs()
    primary = out.add(a.out, format_ipd_csv(ipd))
    pop = _population(ipd, a.population)
    truth = [km_estimate(pop.arm(arm)) for arm in (0, 1)]
    style = simgen.RenderStyle()
    t_max = style.resolve_t_max(truth)
    if a.render:
        out.add(a.render, simgen.render_km_svg(truth, style))
    if a.risk_table:
        out.add(a.risk_table, format_risk_table_csv(_risk_tables(pop, t_max)))
    if a.targets:
        targets = maple.SummaryTargets.from_ipd(ipd)
        cons = maple.HardConstraints.from_labels(ipd)
        out.add(a.targets, dump_json(maple.publication_dict(targets, cons)))
    _finish(ctx, out, primary)
    return 0


# ----------------------------------------------------------------------------
# extract / reconstruct
# ----------------------------------------------------------------------------


def _extract_config(ctx: Context) -> vec_km.ExtractConfig:
    kw = {}
    for key in ("join_tol", "span_tol", "mark_min_rel", "mark_max_rel", "assign_rel"):
        v = ctx.pick(key, "extraction", key, None)
        if v is not None:
            kw[key] = float(v)
    return vec_km.ExtractConfig(**kw)


def cmd_extract(ctx: Context) -> int:
    a = ctx.args
    data = ctx.input(a.input).read_bytes()
    k = ctx.pick("curves", "extraction", "k_curves", None)
    t_max = ctx.pick("t_max", "extraction", "t_max", None)
    if k is None or t_max is None:
        raise ValidationError("the number of curves and t_max are required")
    s_max = ctx.pick("s_max", "extraction", "s_max", 1.0)
    fig = vec_km.extract_figure(data, int(k), float(t_max), float(s_max), _extract_config(ctx), fmt=a.format)
    out = StagedOutputs()
    out_dir = Path(a.out_dir)
    for i, curve in enumerate(fig.curves):
        out.add(out_dir / f"curve_{i}.json", dump_json(curve.to_json_dict()))
    primary = out.add(out_dir / "extraction_report.json", dump_json(fig.report()))
    _finish(ctx, out, primary)
    return 0


def _recon_config(ctx: Context) -> cen_km.CenKmConfig:
    return cen_km.CenKmConfig(
        tol=float(ctx.pick("tol", "reconstruction", "tol", 1e-7)),
        c_max=int(ctx.pick("c_max", "reconstruction", "c_max", 20)),
        branch_radius=int(ctx.pick("branch_radius", "reconstruction", "branch_radius", 1)),
    )


def cmd_reconstruct(ctx: Context) -> int:
    a = ctx.args
    cfg = _recon_config(ctx)
    arms = a.arm or list(range(len(a.curve)))
    if len(arms) != len(a.curve):
        raise ValidationError("give one --arm per --curve")
    if a.n and len(a.n) != len(a.curve):
        raise ValidationError("give one --n per --curve")
    records, reports = [], []
    for i, (path, arm) in enumerate(zip(a.curve, arms)):
        curve = read_curve_json(ctx.input(path))
        rt = read_risk_table_csv(ctx.input(a.risk_table), arm) if a.risk_table else None
        n = a.n[i] if a.n else curve.n_initial
        if n is None and rt is not None and rt.entries[0][0] == 0:
            n = rt.entries[0][1]
        if n is None:
            raise ValidationError(f"{path}: initial population unknown; pass --n or a risk table starting at 0")
        rep = cen_km.reconstruct(curve, int(n), rt, cfg, arm=arm)
        for w in rep.warnings:
            log.warning("%s: %s", path, w)
        records.extend(rep.ipd.records)
        reports.append({"curve": str(path), "arm": arm, **rep.to_dict()})
    ipd = IpdSet(tuple(records), "reconstructed").sorted()
    out = StagedOutputs()
    primary = out.add(a.out, format_ipd_csv(ipd))
    if a.report:
        out.add(a.report, dump_json({"curves": reports}))
    _finish(ctx, out, primary)
    return 0


# ----------------------------------------------------------------------------
# subtract
# ----------------------------------------------------------------------------


def cmd_subtract(ctx: Context) -> int:
    a = ctx.args
    overall = read_ipd_csv(ctx.input(a.overall))
    known = [read_ipd_csv(ctx.input(p)) for p in a.known]
    spec = km_subtract.MatchSpec(a.method, a.distance)
    rest = km_subtract.subtract(overall, known, spec, label=a.label)
    out = StagedOutputs()
    primary = out.add(a.out, format_ipd_csv(rest))
    _finish(ctx, out, primary)
    return 0


# ----------------------------------------------------------------------------
# maple / filter
# ----------------------------------------------------------------------------


def _sa_config(ctx: Context) -> maple.SaConfig:
    d = maple.SaConfig()
    return maple.SaConfig(
        t0=float(ctx.pick("t0", "maple", "t0", d.t0)),
        cooling=float(ctx.pick("cooling", "maple", "cooling", d.cooling)),
        max_iter=int(ctx.pick("max_iter", "maple", "max_iter", d.max_iter)),
        min_iter=int(ctx.pick("min_iter", "maple", "min_iter", d.min_iter)),
        stagnation_stop_iter=int(ctx.pick("stagnation", "maple", "stagnation_stop_iter", d.stagnation_stop_iter)),
        seeds=int(ctx.pick("runs", "maple", "runs", d.seeds)),
    )


def _targets_path(ctx: Context) -> Path:
    path = ctx.pick("targets", "maple", "targets", None)
    if path is None:
        raise ValidationError("a targets file is required")
    if ctx.args.targets is None and ctx.args.config and not Path(path).is_file():
        path = Path(ctx.args.config).parent / path
    return ctx.input(path)


def cmd_maple(ctx: Context) -> int:
    a = ctx.args
    ipd = read_ipd_csv(ctx.input(a.ipd))
    targets, cons = maple.parse_publication_dict(read_json(_targets_path(ctx)))
    if cons.n_total != len(ipd):
        raise ValidationError(f"targets describe {cons.n_total} patients but the IPD has {len(ipd)}")
    cfg = _sa_config(ctx)
    seed = ctx.seed
    fixed = ipd.labels >= 0 if a.keep_labels else None
    results = maple.run_seeds(ipd, targets, cons, cfg, seed, fixed=fixed, workers=max(1, a.threads or 1))
    ens = maple.build_ensemble(results).with_statistics(ipd, targets)
    problems = maple.verify_ensemble(ens, ipd, targets, cons)
    if problems:
        raise KmreconError("ensemble failed re-verification: " + "; ".join(problems[:5]))
    log.info("best loss %.6g over %d runs; %d distinct members", ens.loss, len(results), len(ens.members))
    doc = ens.to_json_dict(targets)
    doc["runs"] = [{"seed": r.seed, "loss": r.loss, "iterations": r.iterations} for r in results]
    out = StagedOutputs()
    primary = out.add(a.out, dump_json(doc))
    if a.frequency:
        out.add(a.frequency, _frequency_csv(doc.get("frequency", {})))
    _finish(ctx, out, primary)
    return 0


def _frequency_csv(freq: dict) -> str:
    lines = ["statistic,value,percent"]
    for sid, table in freq.items():
        for value, pct in table.items():
            lines.append(f"\"{sid}\",{value},{pct:.2f}")
    return "\n".join(lines) + "\n"


def cmd_filter(ctx: Context) -> int:
    a = ctx.args
    ipd = read_ipd_csv(ctx.input(a.ipd))
    doc = read_json(ctx.input(a.ensemble))
    ens = maple.LabelingEnsemble.from_json_dict(doc)
    if any(len(g) != len(ipd) for g in ens.members):
        raise ValidationError("ensemble members do not match the IPD length")
    curves = {}
    if a.reference_ipd:
        ref = read_ipd_csv(ctx.input(a.reference_ipd))
        for arm in (0, 1):
            if len(ref.arm(arm)):
                curves[(a.subgroup, arm)] = km_estimate(ref.arm(arm))
    for arm_text, path in a.reference_curve or []:
        curves[(a.subgroup, int(arm_text))] = read_curve_json(ctx.input(path))
    if not curves:
        raise ValidationError("give --reference-ipd or --reference-curve")
    bands = maple.reference_bands(curves, a.level)
    kept = maple.filter_ensemble(ens, ipd, bands)
    targets = maple.SummaryTargets.from_json_dict(doc["targets"]) if "targets" in doc else None
    new = kept.to_json_dict(targets)
    new["filter"] = {"subgroup": a.subgroup, "level": a.level, "input_members": len(ens.members)}
    out = StagedOutputs()
    primary = out.add(a.out, dump_json(new))
    _finish(ctx, out, primary)
    return 0


# ----------------------------------------------------------------------------
# meta
# ----------------------------------------------------------------------------


def _meta_studies(ctx: Context) -> list[meta_pex.StudyInput]:
    a = ctx.args
    studies = []
    for name, path in a.study or []:
        studies.append(meta_pex.StudyInput(name, ipd=read_ipd_csv(ctx.input(path))))
    for name, spec in a.ensemble_study or []:
        parts = spec.split(",")
        if len(parts) not in (2, 3):
            raise ValidationError(f"study {name}: expected ENSEMBLE.json,OVERALL.csv[,SUBGROUP]")
        ens = maple.LabelingEnsemble.from_json_dict(read_json(ctx.input(parts[0])))
        overall = read_ipd_csv(ctx.input(parts[1]))
        sub = int(parts[2]) if len(parts) == 3 else 1
        studies.append(meta_pex.StudyInput(name, ensemble=ens, overall=overall, subgroup=sub))
    if not studies:
        raise ValidationError("at least one --study or --ensemble-study is required")
    return studies


def _finite_or_none(v):
    return float(v) if math.isfinite(v) else None


def cmd_meta(ctx: Context) -> int:
    a = ctx.args
    studies = _meta_studies(ctx)
    cuts = ctx.pick("cuts", "meta", "cuts", list(meta_pex.IntervalGrid.regular().cuts))
    grid = meta_pex.IntervalGrid(tuple(float(c) for c in cuts))
    d = meta_pex.McmcConfig()
    mcmc = meta_pex.McmcConfig(
        burn_in=int(ctx.pick("burn_in", "meta", "burn_in", d.burn_in)),
        samples=int(ctx.pick("samples", "meta", "samples", d.samples)),
    )
    runs = int(ctx.pick("runs", "meta", "runs", 500))
    if all(st.n_choices == 1 for st in studies):
        runs = 1
    cfg = meta_pex.PropagationConfig(n_runs=runs, grid=grid, mcmc=mcmc, paired=not a.unpaired)
    res = meta_pex.propagate(studies, cfg, ctx.seed)

    out = StagedOutputs()
    out_dir = Path(a.out_dir)
    names = ("control", "treatment")
    for arm, pc in enumerate(res.pooled):
        out.add(out_dir / f"pooled_{names[arm]}.json", dump_json(pc.to_json_dict()))
    out.add(out_dir / "hr_table.csv", meta_pex.format_table_csv(res.hr_table(), "interval"))
    out.add(out_dir / "median_table.csv", meta_pex.format_table_csv(res.median_table(), "arm"))
    out.add(out_dir / "pooled_survival.svg", meta_pex.render_pooled_svg(dict(zip(cfg.arm_names, res.pooled))))
    out.add(out_dir / "interval_hr.svg", meta_pex.render_hr_svg(res.first_hr))
    ihr = res.first_hr
    summary = {
        "studies": [{"name": st.name, "choices": st.n_choices} for st in studies],
        "grid": list(grid.cuts),
        "runs": runs,
        "mcmc": asdict(mcmc),
        "interval_hr": [
            {"interval": lab, "hr": float(h), "lower": float(lo), "upper": float(hi), "significant": bool(sig)}
            for lab, h, lo, hi, sig in zip(ihr.labels, ihr.hr, ihr.lower, ihr.upper, ihr.significant)
        ],
        "median": {
            name: [_finite_or_none(v) for v in pc.median] for name, pc in zip(cfg.arm_names, res.pooled)
        },
        "hr_table": [list(r[:2]) + [_finite_or_none(v) for v in r[2:]] for r in res.hr_table()],
        "median_table": [list(r[:2]) + [_finite_or_none(v) for v in r[2:]] for r in res.median_table()],
    }
    primary = out.add(out_dir / "posterior_summary.json", dump_json(summary))
    _finish(ctx, out, primary)
    return 0


# ----------------------------------------------------------------------------
# roundtrip
# ----------------------------------------------------------------------------


@dataclass
class RoundTripResult:
    rmse: dict
    risk_tables_match: dict
    ipd: dict

    @property
    def max_rmse(self) -> float:
        return max(self.rmse.values())

    @property
    def ok(self) -> bool:
        return self.max_rmse <= 1e-9 and all(self.risk_tables_match.values())


def _color_key(rgb) -> tuple:
    return tuple(int(round(c * 255)) for c in rgb)


def run_roundtrip(seed: int, cfg: cen_km.CenKmConfig = cen_km.CenKmConfig(), artifacts: StagedOutputs | None = None, out_dir=None):
    """Simulate, render every population, extract, reconstruct and compare."""
    ipd = simgen.generate(simgen.SimConfig(seed=seed))
    style = simgen.RenderStyle()
    palette = [_color_key(c) for c in style.colors]
    rmse, rt_ok, recon = {}, {}, {}
    for name in POPULATIONS:
        pop = _population(ipd, name)
        truth = [km_estimate(pop.arm(a)) for a in (0, 1)]
        fig = simgen.render_km_svg(truth, style, with_figure=True)
        tables = _risk_tables(pop, fig.t_max)
        ex = vec_km.extract_figure(fig.svg, 2, fig.t_max)
        arms_seen = []
        records = []
        for curve, color in zip(ex.curves, ex.colors):
            if color is None or _color_key(color) not in palette:
                raise ExtractionError(f"{name}: curve colour does not identify an arm")
            arm = palette.index(_color_key(color))
            arms_seen.append(arm)
            rt = cen_km.RiskTable.from_pairs(tables[arm])
            rep = cen_km.reconstruct(curve, len(pop.arm(arm)), rt, cfg, arm=arm)
            rmse[(name, arm)] = curve_rmse(km_estimate(rep.ipd), truth[arm], fig.t_max)
            rt_ok[(name, arm)] = simgen.risk_table(rep.ipd, [t for t, _ in tables[arm]]) == tables[arm]
            records.extend(rep.ipd.records)
        if sorted(arms_seen) != [0, 1]:
            raise ExtractionError(f"{name}: expected one curve per arm")
        recon[name] = IpdSet(tuple(records), "reconstructed").sorted()
        if artifacts is not None:
            base = Path(out_dir)
            artifacts.add(base / f"{name}.svg", fig.svg)
            artifacts.add(base / f"{name}_risk_table.csv", format_risk_table_csv(tables))
            artifacts.add(base / f"{name}_reconstructed.csv", format_ipd_csv(recon[name]))
    return RoundTripResult(rmse, rt_ok, recon)


def cmd_roundtrip(ctx: Context) -> int:
    a = ctx.args
    seed = ctx.seed
    out = StagedOutputs() if a.out_dir else None
    res = run_roundtrip(int(seed), _recon_config(ctx), out, a.out_dir)
    for (name, arm), v in sorted(res.rmse.items()):
        log.info("%s arm %d: rmse %.3g, risk table %s", name, arm, v, "ok" if res.risk_tables_match[(name, arm)] else "MISMATCH")
    print(f"rmse={res.max_rmse:.9f}")
    if out is not None:
        primary = out.add(Path(a.out_dir) / "roundtrip.json", dump_json({
            "seed": seed,
            "rmse": {f"{n}/{arm}": v for (n, arm), v in sorted(res.rmse.items())},
            "risk_tables_match": {f"{n}/{arm}": v for (n, arm), v in sorted(res.risk_tables_match.items())},
        }))
        _finish(ctx, out, primary)
    if not res.ok:
        log.error("round trip did not reproduce the truth")
        return 2
    return 0


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="cap on worker processes")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--json-logs", action="store_true", help="log one JSON object per line")
    common.add_argument("--manifest", help="run manifest path (default: next to the main output)")

    p = argparse.ArgumentParser(prog="kmrecon", description="Reconstruct and synthesise survival data from published figures.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="draw a synthetic two-subgroup trial")
    s.add_argument("--out", required=True, help="IPD CSV")
    s.add_argument("--render", help="SVG figure of the chosen population")
    s.add_argument("--risk-table", help="risk table CSV at 6-month marks")
    s.add_argument("--population", choices=list(POPULATIONS), default="overall")
    s.add_argument("--targets", help="also write the subgroup targets file")
    s.add_argument("--n", type=int)
    s.add_argument("--hazard-ratios", type=_floats)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("extract", parents=[common], help="extract KM curves from a vector figure")
    s.add_argument("input", help="SVG or segment interchange JSON")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--curves", type=int, help="number of KM curves")
    s.add_argument("--t-max", type=float, help="time at the right end of the x axis")
    s.add_argument("--s-max", type=float)
    s.add_argument("--format", choices=["svg", "json"])
    for key in ("join_tol", "span_tol", "mark_min_rel", "mark_max_rel", "assign_rel"):
        s.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("reconstruct", parents=[common], help="rebuild IPD from extracted curves")
    s.add_argument("--curve", action="append", required=True, help="curve JSON (repeatable)")
    s.add_argument("--arm", type=int, action="append", help="arm of each curve")
    s.add_argument("--n", type=int, action="append", help="initial population of each curve")
    s.add_argument("--risk-table", help="risk table CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--tol", type=float)
    s.add_argument("--c-max", dest="c_max", type=int)
    s.add_argument("--branch-radius", dest="branch_radius", type=int)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("subtract", parents=[common], help="recover a subgroup by removing the others")
    s.add_argument("--overall", required=True)
    s.add_argument("--known", action="append", required=True)
    s.add_argument("--method", choices=km_subtract.METHODS, default="hungarian")
    s.add_argument("--distance", choices=km_subtract.DISTANCES, default="absolute")
    s.add_argument("--label", type=int, help="label given to the recovered subgroup")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_subtract)

    s = sub.add_parser("maple", parents=[common], help="search subgroup labelings by annealing")
    s.add_argument("--ipd", required=True, help="overall IPD CSV")
    s.add_argument("--targets", help="targets JSON")
    s.add_argument("--out", required=True, help="ensemble JSON")
    s.add_argument("--frequency", help="frequency table CSV")
    s.add_argument("--runs", type=int)
    s.add_argument("--t0", type=float)
    s.add_argument("--cooling", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.add_argument("--min-iter", dest="min_iter", type=int)
    s.add_argument("--stagnation", type=int)
    s.add_argument("--keep-labels", action="store_true", help="labels present in the IPD stay fixed")
    s.set_defaults(func=cmd_maple)

    s = sub.add_parser("filter", parents=[common], help="keep ensemble members inside reference bands")
    s.add_argument("--ensemble", required=True)
    s.add_argument("--ipd", required=True, help="overall IPD CSV")
    s.add_argument("--reference-ipd", help="IPD of the published subgroup")
    s.add_argument("--reference-curve", type=_keyed, action="append", help="ARM=curve.json")
    s.add_argument("--subgroup", type=int, default=1)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("meta", parents=[common], help="Bayesian piecewise-exponential meta-analysis")
    s.add_argument("--study", type=_keyed, action="append", help="NAME=ipd.csv")
    s.add_argument("--ensemble-study", type=_keyed, action="append", help="NAME=ensemble.json,overall.csv[,SUBGROUP]")
    s.add_argument("--cuts", type=_floats)
    s.add_argument("--burn-in", dest="burn_in", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--unpaired", action="store_true", help="shuffle control draws before forming ratios")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_meta)

    s = sub.add_parser("roundtrip", parents=[common], help="simulate, render, extract, reconstruct, compare")
    s.add_argument("--out-dir", help="keep figures, risk tables and reconstructions here")
    s.add_argument("--tol", type=float)
    s.set_defaults(func=cmd_roundtrip)
    return p


_VALIDATION = (ValidationError, ValueError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    args.argv = argv
    _setup_logging(args.quiet, args.json_logs)
    try:
        ctx = Context(args, load_config(args.config))
        if args.config:
            ctx.input(args.config)
        ctx.seed  # record the master seed in the manifest
        return args.func(ctx)
    except (ExtractionError, ReconstructionError) as exc:
        log.error("%s", exc)
        return 2
    except _VALIDATION as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
