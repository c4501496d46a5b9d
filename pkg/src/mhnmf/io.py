"""On-disk formats: count matrices, tidy tables, sample archives and run manifests.

All writes are atomic (temporary file in the target directory, then rename).
Floats are written with 12 significant digits.
"""

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .model import ContractError

FLOAT_FMT = "%.12g"
MANIFEST = "manifest.json"


class DataError(ContractError):
    """Malformed or inconsistent input data."""


def fmt(v):
    """Format a table cell: 12 significant digits for floats, plain text otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isnan(v):
            return "NA"
        return FLOAT_FMT % v
    if v is None:
        return "NA"
    return str(v)


def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# count matrices


def read_matrix(path, integer=True):
    """Parse a tab-separated matrix: header of sample IDs, first column of labels.

    Returns:
        (M, row_labels, column_ids) with M a float array.

    Raises:
        DataError naming the offending line and column.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    rows = list(csv.reader(io.StringIO(text), delimiter="\t"))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    _, header = rows[0]
    if len(header) < 2:
        raise DataError(f"{path}: line 1: header needs a label column and at least one sample")
    cols = header[1:]
    if len(set(cols)) != len(cols):
        raise DataError(f"{path}: line 1: duplicated sample IDs")
    labels, vals = [], []
    for lineno, r in rows[1:]:
        if len(r) != len(header):
            raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(r)}")
        row = []
        for j, cell in enumerate(r[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {lineno}, column {j}: "
                                f"{cell!r} is not a number") from None
            if not np.isfinite(v) or v < 0:
                raise DataError(f"{path}: line {lineno}, column {j}: "
                                f"{cell!r} must be finite and nonnegative")
            if integer and v != round(v):
                raise DataError(f"{path}: line {lineno}, column {j}: "
                                f"{cell!r} is not an integer count")
            row.append(v)
        labels.append(r[0])
        vals.append(row)
    if not vals:
        raise DataError(f"{path}: no data rows")
    if len(set(labels)) != len(labels):
        raise DataError(f"{path}: duplicated row labels")
    return np.array(vals, dtype=float), labels, cols


def matrix_text(M, row_labels, col_ids, corner="Type", integer=False):
    out = io.StringIO()
    out.write("\t".join([corner] + [str(c) for c in col_ids]) + "\n")
    for lab, row in zip(row_labels, np.asarray(M)):
        cells = [str(int(v)) for v in row] if integer else [fmt(float(v)) for v in row]
        out.write("\t".join([str(lab)] + cells) + "\n")
    return out.getvalue()


def write_matrix(path, M, row_labels, col_ids, corner="Type", integer=False):
    return atomic_write(path, matrix_text(M, row_labels, col_ids, corner, integer))


# ---------------------------------------------------------------------------
# tidy tables


def table_text(header, rows):
    out = io.StringIO()
    out.write("\t".join(header) + "\n")
    for r in rows:
        out.write("\t".join(fmt(v) for v in r) + "\n")
    return out.getvalue()


def write_table(path, header, rows):
    return atomic_write(path, table_text(header, rows))


def read_table(path):
    """Read a tidy table back as a list of dicts; numeric cells become floats."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f, delimiter="\t")
        out = []
        for row in reader:
            rec = {}
            for k, v in row.items():
                if v == "NA":
                    rec[k] = float("nan")
                elif v in ("true", "false"):
                    rec[k] = v == "true"
                else:
                    try:
                        rec[k] = float(v)
                    except ValueError:
                        rec[k] = v
            out.append(rec)
    return out


def summary_tables(summary, row_labels, col_ids):
    """Tidy rows for the P and E posterior summaries of the included factors."""
    fac = [int(f) for f in summary.factors]
    p_rows = [(fac[n], row_labels[k], summary.P[k, n], summary.P_lower[k, n],
               summary.P_upper[k, n])
              for n in range(len(fac)) for k in range(summary.P.shape[0])]
    e_rows = [(fac[n], col_ids[g], summary.E[n, g], summary.E_lower[n, g],
               summary.E_upper[n, g])
              for n in range(len(fac)) for g in range(summary.E.shape[1])]
    return p_rows, e_rows


SUMMARY_HEADER_P = ["factor", "label", "mean", "lower", "upper"]
SUMMARY_HEADER_E = ["factor", "sample", "mean", "lower", "upper"]


def read_summary(fit_dir):
    """Rebuild the posterior mean matrices from a fit directory.

    Returns (P, E, factors, row_labels, col_ids).
    """
    fit_dir = Path(fit_dir)
    P_rows = read_table(fit_dir / "summary_P.tsv")
    E_rows = read_table(fit_dir / "summary_E.tsv")
    factors = sorted({int(r["factor"]) for r in P_rows})
    labels = list(dict.fromkeys(r["label"] for r in P_rows))
    samples = list(dict.fromkeys(r["sample"] for r in E_rows))
    fi = {f: i for i, f in enumerate(factors)}
    li = {lab: i for i, lab in enumerate(labels)}
    si = {s: i for i, s in enumerate(samples)}
    P = np.zeros((len(labels), len(factors)))
    E = np.zeros((len(factors), len(samples)))
    bounds = {k: np.zeros_like(P) for k in ("P_lower", "P_upper")}
    bounds.update({k: np.zeros_like(E) for k in ("E_lower", "E_upper")})
    for r in P_rows:
        i, n = li[r["label"]], fi[int(r["factor"])]
        P[i, n], bounds["P_lower"][i, n], bounds["P_upper"][i, n] = r["mean"], r["lower"], r["upper"]
    for r in E_rows:
        n, g = fi[int(r["factor"])], si[r["sample"]]
        E[n, g], bounds["E_lower"][n, g], bounds["E_upper"][n, g] = r["mean"], r["lower"], r["upper"]
    return P, E, factors, [str(x) for x in labels], [str(x) for x in samples], bounds


# ---------------------------------------------------------------------------
# samples


def write_samples(path, samples):
    """Inference samples as a compressed archive of stacked arrays."""
    buf = io.BytesIO()
    np.savez_compressed(buf,
                        iteration=np.array([s.iteration for s in samples], dtype=np.int64),
                        P=np.array([s.P for s in samples]),
                        E=np.array([s.E for s in samples]),
                        A=np.array([s.A for s in samples]))
    return atomic_write(path, buf.getvalue())


class StoredSample:
    def __init__(self, iteration, P, E, A):
        self.iteration, self.P, self.E, self.A = int(iteration), P, E, A


def read_samples(path):
    with np.load(path) as z:
        return [StoredSample(i, p, e, a) for i, p, e, a in zip(z["iteration"], z["P"], z["E"], z["A"])]


# ---------------------------------------------------------------------------
# manifests


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if np.isfinite(v) else None
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    return o


def write_manifest(out_dir, command, config, inputs=None, timings=None, status=None, extra=None):
    """Write ``manifest.json`` listing every other file in ``out_dir`` with its digest."""
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST and not p.name.startswith("."):
            files[p.relative_to(out_dir).as_posix()] = sha256_file(p)
    man = {
        "software": {"name": "mhnmf", "version": __version__},
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in (inputs or {}).items()},
        "timings": timings or {},
        "status": status or {},
        "files": files,
    }
    if extra:
        man.update(extra)
    atomic_write(out_dir / MANIFEST, json.dumps(_jsonable(man), indent=2, sort_keys=True) + "\n")
    return man


def load_manifest(out_dir, verify=True):
    """Load a manifest and (by default) verify it against the files on disk."""
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST
    try:
        man = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if verify:
        problems = verify_manifest(out_dir, man)
        if problems:
            raise DataError(f"manifest {path} does not match directory: " + "; ".join(problems))
    return man


def verify_manifest(out_dir, man):
    out_dir = Path(out_dir)
    problems = []
    listed = man.get("files", {})
    for rel, digest in listed.items():
        p = out_dir / rel
        if not p.is_file():
            problems.append(f"missing {rel}")
        elif sha256_file(p) != digest:
            problems.append(f"digest mismatch for {rel}")
    for p in out_dir.rglob("*"):
        rel = p.relative_to(out_dir).as_posix()
        if p.is_file() and p.name != MANIFEST and not p.name.startswith(".") and rel not in listed:
            problems.append(f"unlisted file {rel}")
    return problems
