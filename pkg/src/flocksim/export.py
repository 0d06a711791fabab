"""CSV / JSONL writers for run artifacts. Particle indices are written 1-based."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np


def _fmt(x) -> str:
    return repr(float(x))


def write_trajectory_csv(path, states) -> None:
    """Columns t, particle_id, r_0.., v_0..; one row per particle per snapshot."""
    states = list(states)
    d = states[0].d if states else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "particle_id"] + [f"r_{i}" for i in range(d)] + [f"v_{i}" for i in range(d)])
        for s in states:
            for k in range(s.N):
                w.writerow([_fmt(s.t), k + 1, *map(_fmt, s.positions[k]), *map(_fmt, s.velocities[k])])


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`: list of (t, positions, velocities)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    d = sum(h.startswith("r_") for h in header)
    out = []
    for t in np.unique(body[:, 0]):
        block = body[body[:, 0] == t]
        block = block[np.argsort(block[:, 1])]
        out.append((float(t), block[:, 2:2 + d], block[:, 2 + d:2 + 2 * d]))
    return out


def write_jump_log_csv(path, events, d: int) -> None:
    """Columns t, k, j, u_0.., accepted (0/1)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "k", "j"] + [f"u_{i}" for i in range(d)] + ["accepted"])
        for ev in events:
            w.writerow([_fmt(ev.t), ev.k + 1, ev.j + 1, *map(_fmt, np.atleast_1d(ev.u)), int(ev.accepted)])


def write_rows_csv(path, header, rows: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def jsonl_lines(records: Iterable[dict]):
    """Serialized records, one per line; non-finite floats become null."""
    for rec in records:
        yield json.dumps(_jsonable(rec), sort_keys=True) + "\n"


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        fh.writelines(jsonl_lines(records))


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
