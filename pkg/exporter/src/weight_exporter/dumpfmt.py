"""ATNW attention-dump writer and verifier.

Binary layout per (layer, head) file: 16-byte header (magic "ATNW",
format-version u32 LE, n u32 LE, reserved u32 zero) followed by n*n
little-endian f32 values row-major, exactly zero above the diagonal.
The manifest.json lists model metadata and one file entry per head.
This module is self-contained so the exporter touches the analysis side
only through the files themselves.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ATNW"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")
ROW_SUM_TOL = 1e-3


@dataclass
class FileCheck:
    path: str
    ok: bool
    detail: str = ""


@dataclass
class VerifyReport:
    manifest: str
    checks: list[FileCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failures(self) -> list[FileCheck]:
        return [c for c in self.checks if not c.ok]


def write_matrix(path: Path, w: np.ndarray) -> None:
    """Atomically write one n x n causal matrix as f32."""
    n = w.shape[0]
    if w.shape != (n, n):
        raise ValueError(f"matrix must be square, got {w.shape}")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, n, 0))
        fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    os.replace(tmp, path)


def write_manifest(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _check_file(path: Path, n_expected: int) -> FileCheck:
    name = str(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        return FileCheck(name, False, f"unreadable: {exc}")
    if len(data) < HEADER.size:
        return FileCheck(name, False, f"truncated header ({len(data)} bytes)")
    magic, version, n, reserved = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        return FileCheck(name, False, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        return FileCheck(name, False, f"unsupported version {version}")
    if reserved != 0:
        return FileCheck(name, False, f"reserved word is {reserved}")
    if n != n_expected:
        return FileCheck(name, False, f"n={n}, manifest says {n_expected}")
    expected = HEADER.size + 4 * n * n
    if len(data) != expected:
        return FileCheck(name, False, f"size {len(data)}, expected {expected}")
    w = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n, n)
    if n > 1 and np.any(w[np.triu_indices(n, k=1)] != 0.0):
        return FileCheck(name, False, "nonzero mass above the diagonal")
    sums = w.sum(axis=1, dtype=np.float64)
    dev = float(np.abs(sums - 1.0).max())
    if dev > ROW_SUM_TOL:
        bad = int(np.argmax(np.abs(sums - 1.0)))
        return FileCheck(name, False, f"row {bad} sums to {sums[bad]:.6f} (dev {dev:.2e})")
    return FileCheck(name, True, f"n={n}, max row-sum dev {dev:.2e}")


def verify_dump(manifest_path) -> VerifyReport:
    """Validate every file referenced by a dump manifest."""
    mpath = Path(manifest_path)
    report = VerifyReport(manifest=str(mpath))
    try:
        doc = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        report.checks.append(FileCheck(str(mpath), False, f"unreadable manifest: {exc}"))
        return report

    required = {
        "format-version", "model", "n", "layers", "heads",
        "dtype", "layout", "files", "sequences-averaged",
    }
    missing = required - doc.keys()
    if missing:
        report.checks.append(
            FileCheck(str(mpath), False, f"manifest missing keys {sorted(missing)}")
        )
        return report
    schema_ok = (
        doc["format-version"] == FORMAT_VERSION
        and doc["dtype"] == "f32"
        and doc["layout"] == "dense-causal-rowmajor"
    )
    report.checks.append(
        FileCheck(str(mpath), schema_ok, "manifest schema" if schema_ok else "bad schema constants")
    )
    for entry in doc["files"]:
        report.checks.append(_check_file(mpath.parent / entry["path"], int(doc["n"])))
    return report
