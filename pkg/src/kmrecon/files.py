"""Readers and writers for the on-disk formats, plus staged atomic output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

from .cen_km import RiskTable
from .errors import ValidationError
from .survival_core import IpdSet, StepCurve

IPD_HEADER = ["time", "event", "arm", "label"]


def _num(v: float) -> str:
    # repr round-trips doubles exactly
    return repr(float(v))


def format_ipd_csv(ipd: IpdSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(IPD_HEADER)
    for r in ipd:
        w.writerow([_num(r.time), int(r.event), r.arm, "" if r.label is None else r.label])
    return buf.getvalue()


def parse_ipd_csv(text: str, source: str = "<ipd>") -> IpdSet:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0][:4]] != IPD_HEADER:
        raise ValidationError(f"{source}: expected header {','.join(IPD_HEADER)}")
    times, events, arms, labels = [], [], [], []
    for n, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise ValidationError(f"{source}:{n}: expected at least 3 columns")
        try:
            t = float(row[0])
            e = int(row[1])
            a = int(row[2])
            g = row[3].strip() if len(row) > 3 else ""
            g = int(g) if g else None
        except ValueError as exc:
            raise ValidationError(f"{source}:{n}: {exc}") from None
        if e not in (0, 1):
            raise ValidationError(f"{source}:{n}: event must be 0 or 1")
        if not math.isfinite(t) or t < 0:
            raise ValidationError(f"{source}:{n}: time must be finite and non-negative")
        times.append(t)
        events.append(bool(e))
        arms.append(a)
        labels.append(-1 if g is None else g)
    return IpdSet.from_arrays(times, events, arms, labels, provenance=source)


def read_ipd_csv(path) -> IpdSet:
    return parse_ipd_csv(Path(path).read_text(), str(path))


def format_risk_table_csv(tables: dict) -> str:
    """``tables`` maps arm to a list of (time, n_at_risk) pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "time", "n_at_risk"])
    for arm in sorted(tables):
        for t, n in tables[arm]:
            w.writerow([arm, _num(t), int(n)])
    return buf.getvalue()


def read_risk_table_csv(path, arm: int | None = None) -> RiskTable:
    """Read ``time,n_at_risk`` or ``arm,time,n_at_risk``; the latter is filtered by ``arm``."""
    rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
    if not rows or not {"time", "n_at_risk"} <= set(rows[0]):
        raise ValidationError(f"{path}: expected columns time,n_at_risk")
    if "arm" in rows[0]:
        arms = sorted({int(r["arm"]) for r in rows})
        if arm is None:
            if len(arms) > 1:
                raise ValidationError(f"{path}: several arms present; choose one")
            arm = arms[0]
        rows = [r for r in rows if int(r["arm"]) == arm]
        if not rows:
            raise ValidationError(f"{path}: no rows for arm {arm}")
    try:
        return RiskTable.from_pairs((float(r["time"]), int(r["n_at_risk"])) for r in rows)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def read_curve_json(path) -> StepCurve:
    d = read_json(path)
    if not isinstance(d, dict) or "points" not in d:
        raise ValidationError(f"{path}: curve JSON needs a points array")
    return StepCurve.from_json_dict(d)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class StagedOutputs:
    """Collect outputs in memory and publish them together.

    Each file is written to a temporary sibling and renamed into place, so a
    failure before :meth:`commit` leaves no partial output behind.
    """

    def __init__(self):
        self.files: dict[Path, bytes] = {}

    def add(self, path, data) -> Path:
        path = Path(path)
        self.files[path] = data.encode("utf-8") if isinstance(data, str) else bytes(data)
        return path

    def commit(self) -> dict[str, str]:
        staged = []
        try:
            for path, data in self.files.items():
                if path.is_dir():
                    raise IsADirectoryError(f"output path is a directory: {path}")
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
                with os.fdopen(fd, "wb") as f:
                    f.write(data)
                staged.append((tmp, path))
            while staged:
                tmp, path = staged[0]
                os.replace(tmp, path)
                staged.pop(0)
        finally:
            for tmp, _ in staged:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        return {str(p): hashlib.sha256(d).hexdigest() for p, d in self.files.items()}
