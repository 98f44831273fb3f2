"""Reading and writing of pipeline artifacts.

Datasets, iteration logs and ensemble tables are CSV; hyperparameters,
policies and manifests are JSON. Floats go out with 17 significant digits
(CSV) or as the shortest exact repr (JSON), so every file reads back to the
same binary values. Files are written to a temporary sibling and renamed
into place, so a failed write never leaves a partial artifact.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError
from .gp import GpDataset, GpHyperparams
from .solver import FeedbackPolicy, SolveResult

FLOAT_FMT = "%.17g"


def _fmt(v) -> str:
    return FLOAT_FMT % v


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _plain(obj):
    """Recursively turn numpy containers and scalars into JSON-ready Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), indent=1, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write(path, dumps_json(obj))


def read_json(path):
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# --------------------------------------------------------------------- datasets

def dataset_header(n: int, m: int) -> list:
    return ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + [f"dx{i}" for i in range(n)]


def write_dataset(path, data: GpDataset) -> Path:
    n, m = data.n_state, data.n_control
    t = data.times if data.times is not None else np.arange(len(data), dtype=float)
    rows = np.column_stack([t, data.inputs, data.targets])
    return atomic_write(path, _csv_text(dataset_header(n, m), rows))


def read_dataset(path) -> GpDataset:
    """Parse a dataset CSV; errors name the offending line."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", path=path, line=1) from None
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("u"))
        if n < 1 or header != dataset_header(n, m):
            raise ParseError("header must read t, x0..x{n-1}, u0..u{m-1}, dx0..dx{n-1}", path=path, line=1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", path=path, line=line)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError("non-numeric field", path=path, line=line) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", path=path, line=line)
            rows.append(vals)
    if not rows:
        raise ParseError("no data rows", path=path)
    A = np.array(rows)
    return GpDataset(A[:, 1 : 1 + n + m], A[:, 1 + n + m :], A[:, 0])


# ----------------------------------------------------------------------- models

def write_model(path, hyper, dataset_path, lml=None) -> Path:
    """Model file: dataset reference plus per-dimension hyperparameters."""
    path = Path(path)
    dataset_path = Path(dataset_path)
    try:
        ref = os.path.relpath(dataset_path.resolve(), path.resolve().parent)
    except ValueError:
        ref = str(dataset_path.resolve())
    doc = {
        "dataset": ref,
        "dataset_sha256": sha256_file(dataset_path),
        "hyperparameters": [h.to_dict() for h in hyper],
    }
    if lml is not None:
        doc["log_marginal_likelihood"] = list(lml)
    return write_json(path, doc)


def read_model(path, check_hash: bool = True):
    """Return ``(dataset, hyperparameters)`` referenced by a model file."""
    path = Path(path)
    doc = read_json(path)
    extra = set(doc) - {"dataset", "dataset_sha256", "hyperparameters", "log_marginal_likelihood"}
    if extra or "dataset" not in doc or "hyperparameters" not in doc:
        raise ParseError(f"not a model file (unexpected keys {sorted(extra)})", path=path)
    ds_path = Path(doc["dataset"])
    if not ds_path.is_absolute():
        ds_path = path.resolve().parent / ds_path
    if check_hash and "dataset_sha256" in doc and sha256_file(ds_path) != doc["dataset_sha256"]:
        raise ParseError(f"dataset {ds_path} changed since the model was trained", path=path)
    try:
        hyper = [GpHyperparams.from_dict(h) for h in doc["hyperparameters"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad hyperparameters: {exc}", path=path) from None
    return read_dataset(ds_path), hyper


# --------------------------------------------------------------------- policies

def write_policy(path, result: SolveResult, gamma: float | None = None) -> Path:
    tr, g = result.trajectory, result.gains
    doc = {
        "converged": result.converged,
        "n_accepted": result.n_accepted,
        "gamma": gamma,
        "cost": tr.cost,
        "cost_plain": tr.cost_plain,
        "t": tr.t,
        "x": tr.x,
        "u": tr.u,
        "w": tr.w,
        "l_u": g.l_u,
        "l_w": g.l_w,
        "K_u": g.K_u,
        "K_w": g.K_w,
    }
    return write_json(path, doc)


def read_policy(path) -> FeedbackPolicy:
    path = Path(path)
    doc = read_json(path)
    try:
        t, x, u, K = (np.array(doc[k], dtype=float) for k in ("t", "x", "u", "K_u"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"not a policy file: {exc}", path=path) from None
    if not (x.ndim == 2 and u.ndim == 2 and K.ndim == 3 and x.shape[0] == t.size == u.shape[0] + 1
            and K.shape == (u.shape[0], u.shape[1], x.shape[1])):
        raise ParseError("inconsistent policy array shapes", path=path)
    return FeedbackPolicy(t, x, u, K)


def read_policy_doc(path) -> dict:
    return read_json(path)


# ------------------------------------------------------------------------- logs

LOG_HEADER = ["iter", "cost", "alpha", "lambda", "grad_norm"]


def write_iteration_log(path, records) -> Path:
    rows = [(r.iter, r.cost, r.alpha, r.reg, r.grad_norm) for r in records]
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for it, *rest in rows:
        w.writerow([str(int(it))] + [_fmt(v) for v in rest])
    return atomic_write(path, buf.getvalue())


def read_iteration_log(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LOG_HEADER:
            raise ParseError("unexpected log header", path=path, line=1)
        cols = list(zip(*[[float(c) for c in row] for row in reader]))
    return {k: np.array(v) for k, v in zip(LOG_HEADER, cols)} if cols else {k: np.array([]) for k in LOG_HEADER}


# -------------------------------------------------------------------- ensembles

def run_header(n: int, m: int) -> list:
    return ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]


def write_ensemble(out_dir, ens, goal, manifest: dict) -> dict:
    """Per-run CSVs, ``summary.csv`` and ``manifest.json`` under ``out_dir``.

    Controls are defined on the K intervals; the final row repeats the last
    control so every row is complete. Failed runs get no CSV and are
    flagged in the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    R, K1, n = ens.states.shape
    width = len(str(max(R - 1, 0)))
    files = []
    for i in range(R):
        if ens.failed[i]:
            files.append(None)
            continue
        u = ens.controls[i]
        u_rows = np.vstack([u, u[-1:]])
        name = f"run_{i:0{width}d}.csv"
        atomic_write(out_dir / name, _csv_text(run_header(n, u.shape[1]), np.column_stack([ens.t, ens.states[i], u_rows])))
        files.append(name)
    goal = np.asarray(goal, float)
    header = ["t"] + [f"mean_x{i}" for i in range(n)] + [f"std_x{i}" for i in range(n)] + [f"goal_x{i}" for i in range(n)]
    rows = np.column_stack([ens.t, ens.mean, ens.std, np.broadcast_to(goal, (K1, n))])
    atomic_write(out_dir / "summary.csv", _csv_text(header, rows))
    doc = dict(manifest)
    doc.update(
        n_runs=R,
        n_failed=int(ens.failed.sum()),
        run_seeds=[int(s) for s in ens.seeds],
        failed=[bool(f) for f in ens.failed],
        run_files=files,
    )
    write_json(out_dir / "manifest.json", doc)
    return doc


def read_table(path):
    """Read a numeric CSV into ``(header, array)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(c) for c in row] for row in reader if row])
    return header, data
