"""Panel ingestion and JSON/CSV serialization of fits, tuning reports and studies."""

from __future__ import annotations

import csv
import json
import math
import os
import re
import tempfile
from collections import defaultdict

import numpy as np

from .errors import DataError, DuplicateTriple, InconsistentDimensions, ParseError
from .estimator import PointFit, SubspaceFit
from .manpg import SolveStatus, SolveTrace
from .panel import PanelDataset

SCHEMA_VERSION = 1


def fmt(x) -> str:
    """Canonical float text: 17 significant digits, so values round-trip exactly."""
    return format(float(x), ".17g")


def natural_key(s: str):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", s)]


def _float(text: str, line: int, col: int, what: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not a number", line, col) from None
    if not math.isfinite(val):
        raise ParseError(f"{what} {text!r} is not finite", line, col)
    return val


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("file is empty", 1, 1)
    return [h.strip() for h in rows[0]], rows[1:]


def detect_format(header) -> str:
    norm = [h.lower() for h in header]
    if norm == ["subject", "time", "variable", "value"]:
        return "long"
    if len(norm) >= 3 and norm[:2] == ["subject", "time"] and all(re.fullmatch(r"var_\d+", h) for h in norm[2:]):
        return "wide"
    raise ParseError("header must be 'subject,time,variable,value' or 'subject,time,var_1..var_p'", 1, 1)


def _records_wide(header, rows):
    p = len(header) - 2
    expected = [f"var_{j}" for j in range(1, p + 1)]
    if [h.lower() for h in header[2:]] != expected:
        raise ParseError("wide header columns must be var_1..var_p in order", 1, 3)
    out = {}
    for k, row in enumerate(rows):
        line = k + 2
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != p + 2:
            raise InconsistentDimensions(f"line {line}: expected {p + 2} fields, got {len(row)}")
        sid = row[0].strip()
        if not sid:
            raise ParseError("empty subject id", line, 1)
        t = _float(row[1], line, 2, "time")
        vals = [_float(c, line, j + 3, "value") for j, c in enumerate(row[2:])]
        key = (sid, t)
        if key in out:
            raise DuplicateTriple(f"line {line}: duplicate (subject={sid}, time={row[1].strip()})")
        out[key] = vals
    return out, p


def _records_long(rows):
    cells = defaultdict(dict)
    first_line = {}
    p = 0
    for k, row in enumerate(rows):
        line = k + 2
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", line, min(len(row), 4) + 1)
        sid = row[0].strip()
        if not sid:
            raise ParseError("empty subject id", line, 1)
        t = _float(row[1], line, 2, "time")
        try:
            j = int(row[2])
        except ValueError:
            raise ParseError(f"variable index {row[2]!r} is not an integer", line, 3) from None
        if j < 1:
            raise ParseError(f"variable index must be >= 1, got {j}", line, 3)
        v = _float(row[3], line, 4, "value")
        key = (sid, t)
        if j in cells[key]:
            raise DuplicateTriple(
                f"line {line}: duplicate (subject={sid}, time={row[1].strip()}, variable={j}); "
                f"first seen on line {first_line[(sid, t, j)]}")
        cells[key][j] = v
        first_line[(sid, t, j)] = line
        p = max(p, j)
    out = {}
    for key, vals in cells.items():
        if len(vals) != p:
            missing = sorted(set(range(1, p + 1)) - set(vals))
            raise InconsistentDimensions(
                f"subject {key[0]} at time {key[1]!r} lacks variables {missing[:5]} (p={p})")
        out[key] = [vals[j] for j in range(1, p + 1)]
    return out, p


def ingest(path, format: str = "auto", normalize: str = "auto") -> PanelDataset:
    """Read a long or wide CSV panel.

    Parameters
    ----------
    format : {'auto', 'long', 'wide'}
    normalize : {'auto', 'always', 'never'}
        ``'auto'`` applies the min-max map onto ``[0, 1]`` only when some time
        falls outside ``[0, 1]``; ``'always'`` applies it unconditionally. The
        map ``t -> (t - offset) / scale`` is stored in ``metadata['time_map']``.

    Subjects are ordered by natural sort of their ids and times ascending, so
    long and wide files with the same content give identical datasets.

    Raises
    ------
    ParseError, InconsistentDimensions, DuplicateTriple
    """
    header, rows = _read_rows(path)
    kind = detect_format(header) if format == "auto" else format
    if kind == "wide":
        if detect_format(header) != "wide":
            raise ParseError("not a wide-format header", 1, 1)
        records, p = _records_wide(header, rows)
    elif kind == "long":
        if detect_format(header) != "long":
            raise ParseError("not a long-format header", 1, 1)
        records, p = _records_long(rows)
    else:
        raise ValueError(f"unknown format {format!r}")
    if not records:
        raise DataError("no observations")
    by_subject = defaultdict(list)
    for (sid, t), vals in records.items():
        by_subject[sid].append((t, vals))
    ids = sorted(by_subject, key=natural_key)
    all_t = np.array([t for (_, t) in records])
    lo, hi = float(all_t.min()), float(all_t.max())
    if normalize not in ("auto", "always", "never"):
        raise ValueError(f"unknown normalize mode {normalize!r}")
    apply_map = normalize == "always" or (normalize == "auto" and (lo < 0.0 or hi > 1.0))
    if apply_map:
        if hi <= lo:
            raise DataError("all observation times are equal; cannot normalize")
        offset, scale = lo, hi - lo
    else:
        offset, scale = 0.0, 1.0
    if not apply_map and (lo < 0.0 or hi > 1.0):
        raise DataError("times outside [0, 1] and normalization disabled")
    times, values = [], []
    for sid in ids:
        obs = sorted(by_subject[sid], key=lambda o: o[0])
        t = np.array([o[0] for o in obs])
        times.append((t - offset) / scale if apply_map else t)
        values.append(np.array([o[1] for o in obs]).reshape(len(obs), p))
    meta = {"source": os.path.basename(str(path)), "format": kind,
            "time_map": {"offset": offset, "scale": scale}}
    try:
        return PanelDataset(times, values, ids, metadata=meta)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def panel_rows(data: PanelDataset, format: str = "wide"):
    """CSV rows (header first) for a panel in canonical formatting."""
    if format == "wide":
        yield ["subject", "time"] + [f"var_{j}" for j in range(1, data.p + 1)]
        for sid, t, y in zip(data.subject_ids, data.times, data.values):
            for l in range(t.size):
                yield [sid, fmt(t[l])] + [fmt(v) for v in y[l]]
    elif format == "long":
        yield ["subject", "time", "variable", "value"]
        for sid, t, y in zip(data.subject_ids, data.times, data.values):
            for l in range(t.size):
                for j in range(data.p):
                    yield [sid, fmt(t[l]), str(j + 1), fmt(y[l, j])]
    else:
        raise ValueError(f"unknown format {format!r}")


def csv_text(rows) -> str:
    from io import StringIO

    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (SolveStatus,)):
        return x.value
    return x


def write_outputs(files: dict):
    """Write ``{path: text}`` atomically: everything is rendered before any file appears."""
    staged = []
    try:
        for path, text in files.items():
            d = os.path.dirname(os.path.abspath(path))
            fd, tmp = tempfile.mkstemp(dir=d, prefix=".dynspca-")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.remove(tmp)


def sparse_encode(U: np.ndarray) -> list:
    rows, cols = np.nonzero(U)
    return [[int(r), int(c), float(U[r, c])] for r, c in zip(rows, cols)]


def sparse_decode(entries, p: int, d: int) -> np.ndarray:
    U = np.zeros((p, d))
    for r, c, v in entries:
        U[int(r), int(c)] = float(v)
    return U


def fit_to_dict(fit: SubspaceFit, data: PanelDataset = None) -> dict:
    cfg = fit.config
    points = []
    for pt in fit.points:
        rec = {"t": pt.t, "status": pt.status}
        if pt.ok:
            rec.update({
                "d": pt.d,
                "rho": pt.rho,
                "gamma": pt.gamma,
                "support": [int(j) for j in pt.support],
                "U": sparse_encode(pt.U),
                "U0": sparse_encode(pt.U0),
                "eigengap": pt.eigengap,
                "solver": {"initial": pt.trace0.to_dict(), "refined": pt.trace.to_dict()},
                "warnings": list(pt.warnings),
            })
        else:
            rec["reason"] = pt.reason
        points.append(rec)
    out = {
        "schema_version": SCHEMA_VERSION,
        "kind": "fit",
        "p": fit.metadata.get("p"),
        "n": fit.metadata.get("n"),
        "covariance": fit.metadata.get("covariance"),
        "center": fit.metadata.get("center"),
        "points": points,
    }
    if cfg is not None:
        out["config"] = {
            "d": cfg.d if isinstance(cfg.d, int) else {"fve": cfg.d.threshold},
            "bandwidth": cfg.bandwidth,
            "kernel": cfg.kernel.value,
            "grid": cfg.grid,
            "rho": cfg.rho,
            "gamma": cfg.gamma,
            "solver": cfg.solver.to_dict(),
        }
    if data is not None:
        out["time_map"] = data.metadata.get("time_map")
        out["design"] = data.design.value
    return out


def fit_from_dict(obj: dict) -> SubspaceFit:
    if obj.get("kind") != "fit":
        raise DataError("not a fit result")
    p = int(obj["p"])
    points = []
    for rec in obj["points"]:
        if rec["status"] != "ok":
            points.append(PointFit(float(rec["t"]), rec["status"], reason=rec.get("reason", "")))
            continue
        d = int(rec["d"])
        s0, s1 = rec["solver"]["initial"], rec["solver"]["refined"]
        tr0 = SolveTrace(status=SolveStatus(s0["status"]), final_objective=s0["final_objective"])
        tr1 = SolveTrace(status=SolveStatus(s1["status"]), final_objective=s1["final_objective"])
        points.append(PointFit(
            float(rec["t"]), "ok", d, float(rec["rho"]), float(rec["gamma"]),
            sparse_decode(rec["U0"], p, d), np.asarray(rec["support"], dtype=int),
            sparse_decode(rec["U"], p, d),
            float("nan") if rec.get("eigengap") is None else float(rec["eigengap"]),
            tr0, tr1, warnings=list(rec.get("warnings", [])),
        ))
    return SubspaceFit(points, None, {"p": p, "n": obj.get("n"), "covariance": obj.get("covariance"),
                                      "center": obj.get("center")})


def fit_diag_rows(fit_obj: dict):
    """Flat ``(t, variable, pi_jj, pi0_jj)`` table of projection diagonals."""
    fit = fit_from_dict(fit_obj) if isinstance(fit_obj, dict) else fit_obj
    yield ["t", "variable", "pi_diag", "pi0_diag"]
    for pt in fit.points:
        if not pt.ok:
            continue
        diag = np.einsum("ij,ij->i", pt.U, pt.U)
        diag0 = np.einsum("ij,ij->i", pt.U0, pt.U0)
        for j in range(diag.size):
            yield [fmt(pt.t), str(j + 1), fmt(diag[j]), fmt(diag0[j])]


def curve_rows(curve: dict, value_keys):
    yield ["candidate"] + list(value_keys)
    for k, c in enumerate(curve["candidates"]):
        row = [fmt(c)]
        for key in value_keys:
            v = curve[key][k]
            row.append("" if v is None or not math.isfinite(float(v)) else fmt(v))
        yield row


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(obj, dict) or "schema_version" not in obj:
        raise DataError(f"{path}: missing schema_version")
    if obj["schema_version"] != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {obj['schema_version']}")
    return obj
