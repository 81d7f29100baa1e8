"""Artifact persistence: CSV tables, binary basis/model containers and manifests.

All writes go through :func:`atomic_write` (temporary file plus rename), so an
interrupted run never leaves a torn file behind.

Binary layout (little endian)
-----------------------------
MORB: ``b"MORB"``, ``u32 version``, ``u32 kind`` (1 = POD basis, 2 = DEIM
operator), ``u32 count``, then ``count`` arrays, each stored as ``u32 ndim``,
``ndim x u64`` dims and the row-major float64 payload.

DRNN: ``b"DRNN"``, ``u32 version``, ``u32 K``, ``u32 n``, ``u8 train_U``,
four float64 scalars ``dt, zeta, gamma, eps``, then ``w`` (n), ``eta`` (K - 1)
and ``U`` (n x n) as row-major float64.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .drrnn import DrRnnModel
from .dynsys import TimeGrid, Trajectory
from .reduction import DeimOperator, PodBasis, SnapshotMatrix

MORB_MAGIC = b"MORB"
DRNN_MAGIC = b"DRNN"
FORMAT_VERSION = 1
KIND_POD = 1
KIND_DEIM = 2


class SchemaError(ValueError):
    """A file does not have the expected layout."""


def fmt_float(x) -> str:
    """17 significant digits: enough to round-trip any float64."""
    return format(float(x), ".17g")


def atomic_write(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# CSV -------------------------------------------------------------------------

@dataclass
class CsvTable:
    header: list
    rows: list

    def __post_init__(self):
        self.header = [str(h) for h in self.header]
        if len(set(self.header)) != len(self.header):
            raise SchemaError(f"duplicate column names in {self.header}")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.header):
                raise SchemaError(f"row {i} has {len(row)} fields, expected {len(self.header)}")

    def column(self, name) -> list:
        j = self.header.index(name)
        return [row[j] for row in self.rows]

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
        return buf.getvalue()


def write_csv(table: CsvTable, path) -> Path:
    return atomic_write(path, table.to_text())


def _parse_cell(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_csv(path) -> CsvTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [[_parse_cell(c) for c in row] for row in reader if row]
    return CsvTable(header, rows)


def write_trajectory_csv(traj: Trajectory, path) -> Path:
    """Schema ``t, y_0, ..., y_{n-1}``, one row per time index."""
    header = ["t"] + [f"y_{i}" for i in range(traj.n)]
    rows = [[float(t)] + [float(v) for v in traj.states[:, j]]
            for j, t in enumerate(traj.grid.times)]
    return write_csv(CsvTable(header, rows), path)


def _check_traj_header(header, path, n=None):
    if not header or header[0] != "t":
        raise SchemaError(f"{path}: first column must be 't', found {header[:1]}")
    expected = [f"y_{i}" for i in range(len(header) - 1)]
    for j, (got, want) in enumerate(zip(header[1:], expected), start=1):
        if got != want:
            raise SchemaError(f"{path}: column {j} is {got!r}, expected {want!r}")
    if n is not None and len(header) - 1 != n:
        raise SchemaError(f"{path}: {len(header) - 1} state columns, expected {n}")


def read_trajectory_csv(path) -> Trajectory:
    table = read_csv(path)
    _check_traj_header(table.header, path)
    data = np.array(table.rows, dtype=float)
    if data.shape[0] == 0:
        raise SchemaError(f"{path}: no data rows")
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    return Trajectory(data[:, 1:].T, TimeGrid(dt, len(t) - 1, float(t[0])))


def read_snapshot_matrix(paths: Sequence) -> SnapshotMatrix:
    """Concatenate trajectory CSVs column-wise in the given order."""
    blocks, labels, n = [], [], None
    for run, path in enumerate(paths):
        traj = read_trajectory_csv(path)
        if n is None:
            n = traj.n
        elif traj.n != n:
            raise SchemaError(f"{path}: {traj.n} state columns, expected {n}")
        blocks.append(traj.states)
        labels.extend((run, j) for j in range(traj.states.shape[1]))
    if not blocks:
        raise ValueError("no snapshot files given")
    return SnapshotMatrix(np.hstack(blocks), labels)


def write_history_csv(history, path) -> Path:
    rows = [[int(e), float(tr), float(te)] for e, tr, te in history.rows()]
    return write_csv(CsvTable(["epoch", "train_mse", "test_mse"], rows), path)


# binary containers ---------------------------------------------------------------

def _pack_arrays(magic, kind, arrays) -> bytes:
    out = [magic, struct.pack("<III", FORMAT_VERSION, kind, len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes(order="C"))
    return b"".join(out)


def _unpack_arrays(raw: bytes, magic, path):
    if raw[:4] != magic:
        raise SchemaError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, kind, count = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported version {version}")
    pos = 16
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy())
        pos += 8 * size
    if pos != len(raw):
        raise SchemaError(f"{path}: {len(raw) - pos} trailing bytes")
    return kind, arrays


def write_pod_basis(basis: PodBasis, path) -> Path:
    return atomic_write(path, _pack_arrays(MORB_MAGIC, KIND_POD, [basis.basis, basis.singular_values]))


def read_pod_basis(path) -> PodBasis:
    kind, arrays = _unpack_arrays(Path(path).read_bytes(), MORB_MAGIC, path)
    if kind != KIND_POD or len(arrays) != 2:
        raise SchemaError(f"{path}: not a POD basis container")
    return PodBasis(arrays[0], arrays[1])


def write_deim_operator(op: DeimOperator, path) -> Path:
    arrays = [op.indices.astype(float), op.nonlinearity_basis, op.deim_matrix,
              op.sampling_rows_of_Ur, np.array([op.condition])]
    return atomic_write(path, _pack_arrays(MORB_MAGIC, KIND_DEIM, arrays))


def read_deim_operator(path) -> DeimOperator:
    kind, arrays = _unpack_arrays(Path(path).read_bytes(), MORB_MAGIC, path)
    if kind != KIND_DEIM or len(arrays) != 5:
        raise SchemaError(f"{path}: not a DEIM container")
    idx, V, D, PU, cond = arrays
    return DeimOperator(idx.astype(int), V, D, PU, float(cond[0]))


def write_singular_values_csv(basis: PodBasis, path) -> Path:
    rows = [[i + 1, float(s)] for i, s in enumerate(basis.singular_values)]
    return write_csv(CsvTable(["index", "sigma"], rows), path)


_DRNN_HEAD = struct.Struct("<4sIIIB4d")


def write_drrnn_model(model: DrRnnModel, path) -> Path:
    head = _DRNN_HEAD.pack(DRNN_MAGIC, FORMAT_VERSION, model.K, model.n, int(model.train_U),
                           model.dt, model.zeta, model.gamma, model.eps)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in (model.w, model.eta, model.U))
    return atomic_write(path, head + body)


def read_drrnn_model(path) -> DrRnnModel:
    raw = Path(path).read_bytes()
    if len(raw) < _DRNN_HEAD.size:
        raise SchemaError(f"{path}: truncated DR-RNN file")
    magic, version, K, n, train_U, dt, zeta, gamma, eps = _DRNN_HEAD.unpack_from(raw)
    if magic != DRNN_MAGIC:
        raise SchemaError(f"{path}: bad magic {magic!r}, expected {DRNN_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported version {version}")
    expected = _DRNN_HEAD.size + 8 * (n + K - 1 + n * n)
    if len(raw) != expected:
        raise SchemaError(f"{path}: size {len(raw)} bytes, expected {expected}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_DRNN_HEAD.size)
    w, eta, U = vals[:n], vals[n:n + K - 1], vals[n + K - 1:].reshape(n, n)
    return DrRnnModel(w.copy(), eta.copy(), U.copy(), dt=dt, zeta=zeta, gamma=gamma,
                      eps=eps, train_U=bool(train_U))


# manifests -----------------------------------------------------------------

def write_manifest(directory, stage: str, inputs: Sequence = (), outputs: Sequence = (),
                   seed=None, extra=None) -> Path:
    """``manifest.json`` listing inputs and outputs with their sha256 hashes.

    Paths are stored relative to ``directory``.
    """
    directory = Path(directory)

    def entry(p):
        p = Path(p)
        return {"path": os.path.relpath(p, directory), "sha256": file_hash(p)}

    doc = {
        "stage": stage,
        "seed": seed,
        "inputs": [entry(p) for p in inputs],
        "outputs": [entry(p) for p in outputs],
    }
    if extra:
        doc["meta"] = extra
    return atomic_write(directory / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    return json.loads(path.read_text())
