"""Persistence: binary field snapshots, deterministic CSV, JSON reports.

Snapshot format (version 1): a single JSON header line (utf-8, terminated by
a newline) followed by the raw payload.

    header = {"format_version": 1, "N": .., "L": .., "r": ..,
              "t": .., "kind": "pair"|"metric", "fixed_det": ..,
              "fields": [{"name": .., "offset": ..}, ...],
              "payload_bytes": ..}

Each field is little-endian float64 pairs (re, im), row-major site order,
matrix entries row-major; offsets are in bytes from the start of the payload.
Round trips are bit exact.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .fields import HiggsPair
from .flow import HermitianMetric, Trajectory
from .geometry import FormDegree, MatrixField, TorusGrid

FORMAT_VERSION = 1


def _field_bytes(data: np.ndarray) -> bytes:
    flat = np.ascontiguousarray(data, dtype=np.complex128)
    as_float = flat.view(np.float64)
    if as_float.dtype.byteorder not in ("<", "="):  # pragma: no cover
        as_float = as_float.astype("<f8")
    return as_float.tobytes()


def _field_from_bytes(raw: bytes, N: int, r: int) -> np.ndarray:
    as_float = np.frombuffer(raw, dtype="<f8")
    return as_float.view(np.complex128).reshape(N, N, r, r).copy()


def write_snapshot(path, obj, t: float = 0.0, extra: dict | None = None):
    """Write a HiggsPair or HermitianMetric snapshot."""
    path = Path(path)
    if isinstance(obj, HiggsPair):
        kind = "pair"
        fields = [("a2", obj.a2.data), ("phi", obj.phi.data)]
        grid, r, fixed_det = obj.grid, obj.r, obj.fixed_det
    elif isinstance(obj, HermitianMetric):
        kind = "metric"
        fields = [("a2", obj.base.a2.data), ("phi", obj.base.phi.data),
                  ("h", obj.h.data)]
        grid, r, fixed_det = obj.base.grid, obj.base.r, obj.base.fixed_det
    else:
        raise TypeError(f"cannot snapshot object of type {type(obj)}")

    payloads = [_field_bytes(d) for _, d in fields]
    offsets = np.cumsum([0] + [len(b) for b in payloads[:-1]]).tolist()
    header = {
        "format_version": FORMAT_VERSION,
        "N": grid.N,
        "L": grid.L,
        "backend": grid.backend,
        "r": r,
        "t": t,
        "kind": kind,
        "fixed_det": fixed_det,
        "fields": [{"name": name, "offset": off}
                   for (name, _), off in zip(fields, offsets)],
        "payload_bytes": sum(len(b) for b in payloads),
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for b in payloads:
            f.write(b)


def read_snapshot(path):
    """Read a snapshot; returns (object, t, header)."""
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        header = json.loads(header_line.decode("utf-8"))
        payload = f.read()
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported snapshot version {header['format_version']}")
    if len(payload) != header["payload_bytes"]:
        raise ValueError(
            f"snapshot payload truncated: {len(payload)} != {header['payload_bytes']}")
    N, r = header["N"], header["r"]
    grid = TorusGrid(N, header["L"], header.get("backend", "fd"))
    nbytes = N * N * r * r * 16
    data = {}
    for entry in header["fields"]:
        off = entry["offset"]
        data[entry["name"]] = _field_from_bytes(payload[off:off + nbytes], N, r)
    pair = HiggsPair.from_arrays(grid, data["a2"], data["phi"], header["fixed_det"])
    if header["kind"] == "pair":
        return pair, header["t"], header
    metric = HermitianMetric(pair, MatrixField(grid, FormDegree.ZERO, data["h"]))
    return metric, header["t"], header


# --- CSV ------------------------------------------------------------------------


def trajectory_csv_header(r: int) -> str:
    cols = ["time", "ymh", "qh", "grad_norm", "sup_mu", "higgs_residual"]
    for k in range(1, r + 1):
        cols += [f"re_tr_phi_{k}", f"im_tr_phi_{k}"]
    for k in range(1, r + 1):
        cols.append(f"H_{k}")
    for k in range(1, r + 1):
        cols.append(f"drift_tr_phi_{k}")
    cols.append("energy_integral")
    return ",".join(cols)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trajectory_csv(path, traj: Trajectory, r: int):
    """Deterministic CSV of the recorded observables (schema in the README)."""
    lines = [trajectory_csv_header(r)]
    for i, t in enumerate(traj.times):
        row = [_fmt(t), _fmt(traj.ymh[i]), _fmt(traj.qh[i]), _fmt(traj.grad_norm[i]),
               _fmt(traj.sup_mu[i]), _fmt(traj.higgs_residual[i])]
        for k in range(r):
            row += [_fmt(traj.tr_phi[i, k].real), _fmt(traj.tr_phi[i, k].imag)]
        for k in range(r):
            row.append(_fmt(traj.convex[i, k]))
        for k in range(r):
            row.append(_fmt(traj.tr_phi_drift[i, k]))
        row.append(_fmt(traj.energy_integral[i]))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def config_hash(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def write_report(path, payload: dict, config_dict: dict | None = None,
                 seed=None):
    """JSON report with embedded config hash and code version."""
    from . import __version__

    doc = {
        "code_version": __version__,
        "config_hash": config_hash(config_dict) if config_dict is not None else None,
        "seed": seed,
        "report": payload,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2,
                                     default=_json_default) + "\n")
    return doc


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    raise TypeError(f"not JSON serializable: {type(obj)}")
