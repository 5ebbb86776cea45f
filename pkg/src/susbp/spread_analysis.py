"""Attention-spread statistics and the on-disk attention dump format.

Spread s_i counts how many of row i's largest weights are needed to cover
probability mass p (p = 0.9 throughout the experiments); the aggregate
spread fraction phi_i = sum_{j<=i} s_j / sum_{j<=i} j is the noise-robust
cumulative version. Dumps store per-(layer, head) sequence-averaged causal
weight matrices as little-endian f32 behind a JSON manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from susbp.numerics import Mat, as_matrix, as_vector

MAGIC = b"ATNW"
FORMAT_VERSION = 1
DUMP_DTYPE = "f32"
DUMP_LAYOUT = "dense-causal-rowmajor"
HEADER = struct.Struct("<4sIII")

ROW_SUM_LOAD_TOL = 1e-3
MASS_TOL = 1e-9
CAUSAL_MASS_TOL = 1e-9


class DumpFormatError(ValueError):
    """Malformed dump file or manifest; carries the offending path."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class SpreadConfig:
    """Mass threshold p in (0, 1] for the top-p spread count."""

    p: float = 0.9

    def __post_init__(self) -> None:
        if not (0.0 < self.p <= 1.0):
            raise ValueError(f"p must lie in (0, 1], got {self.p}")


@dataclass(frozen=True)
class SpreadReport:
    """Per-position spread counts s_i and aggregate fractions phi_i.

    phi is undefined at position 0 (empty denominator) and stored as NaN
    there; use phi_at for checked access.
    """

    s: np.ndarray
    phi: np.ndarray
    positions: int

    def phi_at(self, i: int) -> float:
        if i == 0:
            raise ValueError("phi is undefined at position 0")
        if not (0 < i < self.positions):
            raise ValueError(f"position {i} outside [1, {self.positions})")
        return float(self.phi[i])


@dataclass(frozen=True)
class HeadSpreadStats:
    """Across-head summary of phi at one reference position."""

    phis: np.ndarray
    arithmetic_mean: float
    geometric_mean: float
    bin_width: float
    hist_bin_lefts: np.ndarray  # left edges of occupied log2(phi) bins
    hist_counts: np.ndarray


@dataclass(frozen=True)
class DumpMeta:
    model: str
    n: int
    layers: int
    heads: int
    sequences_averaged: int


@dataclass(frozen=True)
class WeightDump:
    meta: DumpMeta
    matrices: dict[tuple[int, int], Mat]
    raw_row_sums: dict[tuple[int, int], np.ndarray] = field(repr=False, default_factory=dict)


def top_p_count(row, p: float) -> int:
    """Size of the smallest set of largest weights with cumulative mass >= p.

    Ties break by descending weight then ascending position. Comparison
    uses a 1e-9 slack so that exact rational masses (e.g. uniform rows) are
    not miscounted by accumulated rounding.
    """
    r = as_vector(row, "row")
    if r.size == 0:
        raise ValueError("row is empty")
    if np.any(r < 0):
        raise ValueError("row has negative weights")
    total = float(r.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"row mass must be 1 within 1e-6, got {total!r}")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must lie in (0, 1], got {p}")
    order = np.lexsort((np.arange(r.size), -r))
    csum = np.cumsum(r[order])
    idx = int(np.searchsorted(csum, p - MASS_TOL, side="left"))
    return min(idx + 1, r.size)


def spread_profile(w: Mat, cfg: SpreadConfig = SpreadConfig()) -> SpreadReport:
    """Spread counts of a causal row-stochastic weight matrix."""
    w = as_matrix(w, "W")
    n, m = w.shape
    if n != m:
        raise ValueError(f"W must be square, got {n}x{m}")
    if n > 1:
        above = float(np.abs(w[np.triu_indices(n, k=1)]).max())
        if above > CAUSAL_MASS_TOL:
            raise ValueError(
                f"non-causal mass {above:.3e} above the diagonal exceeds {CAUSAL_MASS_TOL}"
            )
    s = np.array([top_p_count(w[i, : i + 1], cfg.p) for i in range(n)], dtype=np.int64)
    return SpreadReport(s=s, phi=aggregate_phi(s), positions=n)


def aggregate_phi(s) -> np.ndarray:
    """phi_i = sum_{j<=i} s_j / sum_{j<=i} j, NaN at the undefined i = 0."""
    counts = np.asarray(s)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("s must be a non-empty 1-D count vector")
    if np.any(counts < 1):
        raise ValueError("every spread count must be at least 1")
    idx = np.arange(counts.size, dtype=np.float64)
    denom = np.cumsum(idx)
    phi = np.full(counts.size, np.nan)
    if counts.size > 1:
        phi[1:] = np.cumsum(counts.astype(np.float64))[1:] / denom[1:]
    return phi


def head_spread_stats(phis, bin_width: float = 0.5) -> HeadSpreadStats:
    """Arithmetic and geometric means plus a log2 histogram of per-head phi."""
    values = as_vector(phis, "phis")
    if values.size == 0:
        raise ValueError("need at least one head")
    if np.any(values <= 0):
        raise ValueError("phi values must be strictly positive")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    am = float(values.mean())
    gm = float(np.exp(np.mean(np.log(values))))
    bins = np.floor(np.log2(values) / bin_width) * bin_width
    lefts, counts = np.unique(bins, return_counts=True)
    return HeadSpreadStats(
        phis=values,
        arithmetic_mean=am,
        geometric_mean=gm,
        bin_width=bin_width,
        hist_bin_lefts=lefts,
        hist_counts=counts.astype(np.int64),
    )


def strided_means(values, stride: int = 10):
    """Report values in `stride`-position increments, averaged per window.

    Returns (positions, means) with each position the last index of its
    complete window; a sequence shorter than one stride yields a single
    window over everything. NaN entries (undefined phi at 0) are skipped.
    """
    v = np.asarray(values, dtype=np.float64)
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if v.size == 0:
        raise ValueError("values is empty")
    if v.size < stride:
        return np.array([v.size - 1]), np.array([np.nanmean(v)])
    k = v.size // stride
    windows = v[: k * stride].reshape(k, stride)
    positions = np.arange(1, k + 1) * stride - 1
    with np.errstate(invalid="ignore"):
        means = np.nanmean(windows, axis=1)
    return positions, means


def write_weight_dump(
    matrices: dict[tuple[int, int], Mat],
    model: str,
    out_dir,
    sequences_averaged: int,
) -> Path:
    """Write per-(layer, head) causal weight matrices in the dump format.

    Returns the manifest path. Layer and head counts are inferred from the
    key grid, which must be complete.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not matrices:
        raise ValueError("no matrices to write")
    layers = 1 + max(k[0] for k in matrices)
    heads = 1 + max(k[1] for k in matrices)
    if set(matrices) != {(l, h) for l in range(layers) for h in range(heads)}:
        raise ValueError("matrices must cover the full (layer, head) grid")
    n = as_matrix(next(iter(matrices.values())), "W").shape[0]

    files = []
    for layer in range(layers):
        for head in range(heads):
            w = as_matrix(matrices[(layer, head)], f"W[{layer},{head}]")
            if w.shape != (n, n):
                raise ValueError(f"matrix ({layer}, {head}) has shape {w.shape}, expected ({n}, {n})")
            name = f"layer{layer:02d}_head{head:02d}.atnw"
            payload = np.triu(w, k=1)
            if np.any(payload != 0.0):
                raise ValueError(f"matrix ({layer}, {head}) has mass above the diagonal")
            with open(out / name, "wb") as fh:
                fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, n, 0))
                fh.write(w.astype("<f4").tobytes())
            files.append({"layer": layer, "head": head, "path": name})

    manifest = {
        "format-version": FORMAT_VERSION,
        "model": model,
        "n": n,
        "layers": layers,
        "heads": heads,
        "dtype": DUMP_DTYPE,
        "layout": DUMP_LAYOUT,
        "files": files,
        "sequences-averaged": int(sequences_averaged),
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _read_matrix_file(path: Path, n_expected: int) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < HEADER.size:
        raise DumpFormatError(path, f"truncated header: {len(data)} bytes at offset 0")
    magic, version, n, reserved = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DumpFormatError(path, f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise DumpFormatError(path, f"unsupported format version {version}")
    if reserved != 0:
        raise DumpFormatError(path, f"reserved header word is {reserved}, expected 0")
    if n != n_expected:
        raise DumpFormatError(path, f"matrix is {n}x{n}, manifest says {n_expected}")
    expected_size = HEADER.size + 4 * n * n
    if len(data) != expected_size:
        raise DumpFormatError(
            path, f"truncated payload: {len(data)} bytes, expected {expected_size} "
            f"(offset {len(data)})"
        )
    raw = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(np.float64)
    return raw.reshape(n, n)


def load_weight_dump(manifest_path) -> WeightDump:
    """Load and validate a weight dump; rows come back renormalized to 1.

    Raw (pre-renormalization) row sums are kept for diagnostics. Any
    structural defect raises DumpFormatError naming the file.
    """
    mpath = Path(manifest_path)
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DumpFormatError(mpath, f"unreadable manifest: {exc}") from exc

    required = {
        "format-version", "model", "n", "layers", "heads",
        "dtype", "layout", "files", "sequences-averaged",
    }
    missing = required - manifest.keys()
    if missing:
        raise DumpFormatError(mpath, f"manifest missing keys {sorted(missing)}")
    if manifest["format-version"] != FORMAT_VERSION:
        raise DumpFormatError(mpath, f"unsupported format-version {manifest['format-version']}")
    if manifest["dtype"] != DUMP_DTYPE:
        raise DumpFormatError(mpath, f"unsupported dtype {manifest['dtype']!r}")
    if manifest["layout"] != DUMP_LAYOUT:
        raise DumpFormatError(mpath, f"unsupported layout {manifest['layout']!r}")

    n = int(manifest["n"])
    meta = DumpMeta(
        model=str(manifest["model"]),
        n=n,
        layers=int(manifest["layers"]),
        heads=int(manifest["heads"]),
        sequences_averaged=int(manifest["sequences-averaged"]),
    )
    matrices: dict[tuple[int, int], np.ndarray] = {}
    raw_sums: dict[tuple[int, int], np.ndarray] = {}
    for entry in manifest["files"]:
        key = (int(entry["layer"]), int(entry["head"]))
        path = mpath.parent / entry["path"]
        if not path.exists():
            raise DumpFormatError(path, "listed in manifest but missing on disk")
        w = _read_matrix_file(path, n)
        if n > 1:
            above = float(np.abs(w[np.triu_indices(n, k=1)]).max())
            if above > 0.0:
                raise DumpFormatError(path, f"nonzero mass {above:.3e} above the diagonal")
        sums = w.sum(axis=1)
        dev = float(np.abs(sums - 1.0).max())
        if dev > ROW_SUM_LOAD_TOL:
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise DumpFormatError(
                path, f"row {bad} sums to {sums[bad]!r}, deviation {dev:.3e} > {ROW_SUM_LOAD_TOL}"
            )
        matrices[key] = w / sums[:, None]
        raw_sums[key] = sums
    expected_keys = {(l, h) for l in range(meta.layers) for h in range(meta.heads)}
    if set(matrices) != expected_keys:
        raise DumpFormatError(mpath, "manifest files do not cover the (layer, head) grid")
    return WeightDump(meta=meta, matrices=matrices, raw_row_sums=raw_sums)
