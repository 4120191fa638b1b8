"""Bit-exact file formats for bundles, parameters, reports and heatmaps.

Layouts (full byte-level detail in FORMATS.md):

* responses/covariates/weights/betas: headerless delimited text, one record
  per line, every value printed with 17 significant digits (lossless for
  IEEE doubles);
* image stacks: 16-byte header (4-byte magic, then n, p, q as little-endian
  uint32) followed by n*p*q little-endian float64 samples, images
  concatenated row-major;
* heatmaps: 16-bit binary PGM (P5, maxval 65535, big-endian samples) plus a
  text sidecar with the affine constants for exact inversion;
* reports: key-value text with a stable field order.

All writers are deterministic byte-for-byte; readers verify declared
dimensions, sha256 checksums and exact file sizes, and reject trailing
bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .core import PairParams, SourceDataset

__all__ = [
    "write_bundle",
    "read_bundle",
    "write_image_stack",
    "read_image_stack",
    "write_params",
    "read_params",
    "export_heatmap",
    "read_heatmap",
    "write_report",
]

BUNDLE_FORMAT = "msir-bundle"
PARAMS_FORMAT = "msir-params"
FORMAT_VERSION = 1
STACK_MAGIC = b"MSX1"

_F64LE = np.dtype("<f8")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_matrix_text(path: Path, a: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    lines = [" ".join(_fmt(v) for v in row) for row in a]
    path.write_text("\n".join(lines) + "\n")


def _read_matrix_text(path: Path, rows: int, cols: int) -> np.ndarray:
    lines = path.read_text().splitlines()
    if len(lines) != rows:
        raise ValueError(f"{path}: expected {rows} lines, found {len(lines)}")
    out = np.empty((rows, cols))
    for i, line in enumerate(lines):
        fields = line.split()
        if len(fields) != cols:
            raise ValueError(
                f"{path}: line {i + 1} has {len(fields)} fields, expected {cols}"
            )
        out[i] = [float(f) for f in fields]
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{path}: non-finite values")
    return out


def write_image_stack(path, stack: np.ndarray) -> None:
    """Write an (n, p, q) stack: 16-byte header + little-endian float64 data."""
    path = Path(path)
    stack = np.ascontiguousarray(stack, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError(f"expected an (n, p, q) stack, got shape {stack.shape}")
    n, p, q = stack.shape
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<III", n, p, q))
        fh.write(stack.astype(_F64LE, copy=False).tobytes(order="C"))


def read_image_stack(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != STACK_MAGIC:
        raise ValueError(f"{path}: not an image-stack file")
    n, p, q = struct.unpack("<III", raw[4:16])
    expected = 16 + n * p * q * 8
    if len(raw) != expected:
        raise ValueError(
            f"{path}: file is {len(raw)} bytes, expected exactly {expected}"
        )
    data = np.frombuffer(raw, dtype=_F64LE, offset=16)
    return data.astype(np.float64).reshape(n, p, q)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_bundle(directory, bundle, intercept: bool = False,
                 normalized: bool = False) -> None:
    """Write a list of sources to a directory with a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(bundle) == 0:
        raise ValueError("bundle is empty")
    d, p, q = bundle[0].d, bundle[0].p, bundle[0].q
    sources = []
    for i, ds in enumerate(bundle):
        stem = f"source_{i:03d}"
        y_path = directory / f"{stem}.y.txt"
        z_path = directory / f"{stem}.z.txt"
        x_path = directory / f"{stem}.x.bin"
        _write_matrix_text(y_path, ds.y.reshape(-1, 1))
        _write_matrix_text(z_path, ds.z)
        write_image_stack(x_path, ds.x)
        sources.append({
            "source_id": ds.source_id,
            "n": ds.n,
            "y": y_path.name, "z": z_path.name, "x": x_path.name,
            "sha256_y": _sha256(y_path),
            "sha256_z": _sha256(z_path),
            "sha256_x": _sha256(x_path),
        })
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": FORMAT_VERSION,
        "t_sources": len(bundle),
        "d": d, "rows": p, "cols": q,
        "intercept": intercept,
        "normalized": normalized,
        "sources": sources,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def read_bundle(directory) -> list[SourceDataset]:
    """Read a bundle directory, verifying dimensions and checksums."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} is missing")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{manifest_path}: not a bundle manifest")
    d, p, q = manifest["d"], manifest["rows"], manifest["cols"]
    bundle = []
    for entry in manifest["sources"]:
        n = entry["n"]
        paths = {key: directory / entry[key] for key in ("y", "z", "x")}
        for key, path in paths.items():
            if not path.exists():
                raise FileNotFoundError(f"{path} is missing")
            declared = entry[f"sha256_{key}"]
            if _sha256(path) != declared:
                raise ValueError(f"{path}: checksum mismatch")
        y = _read_matrix_text(paths["y"], n, 1).reshape(-1)
        z = _read_matrix_text(paths["z"], n, d)
        x = read_image_stack(paths["x"])
        if x.shape != (n, p, q):
            raise ValueError(
                f"{paths['x']}: stack shape {x.shape} does not match "
                f"manifest ({n}, {p}, {q})"
            )
        bundle.append(SourceDataset(y=y, z=z, x=x, source_id=entry["source_id"]))
    if len(bundle) != manifest["t_sources"]:
        raise ValueError(f"{manifest_path}: source count mismatch")
    return bundle


def write_params(directory, betas=None, coefficients=None,
                 components=None, weights=None, method: str = "") -> None:
    """Write fitted or generating parameters (any subset of the four blocks)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": PARAMS_FORMAT, "version": FORMAT_VERSION, "method": method}
    if betas is not None:
        betas = np.atleast_2d(np.asarray(betas, dtype=np.float64))
        _write_matrix_text(directory / "betas.txt", betas)
        manifest["betas"] = "betas.txt"
        manifest["t_sources"], manifest["d"] = map(int, betas.shape)
    if weights is not None:
        weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        _write_matrix_text(directory / "weights.txt", weights)
        manifest["weights"] = "weights.txt"
        manifest["t_sources"] = int(weights.shape[0])
        manifest["r_components"] = int(weights.shape[1])
    if components is not None:
        components = np.asarray(components, dtype=np.float64)
        write_image_stack(directory / "components.bin", components)
        manifest["components"] = "components.bin"
    if coefficients is not None:
        coefficients = np.asarray(coefficients, dtype=np.float64)
        write_image_stack(directory / "coefficients.bin", coefficients)
        manifest["coefficients"] = "coefficients.bin"
    (directory / "params.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def read_params(directory) -> dict:
    """Read a parameter directory into a dict of arrays (missing blocks omitted)."""
    directory = Path(directory)
    manifest = json.loads((directory / "params.json").read_text())
    if manifest.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{directory}: not a parameter directory")
    out = {"method": manifest.get("method", "")}
    if "betas" in manifest:
        out["betas"] = _read_matrix_text(
            directory / manifest["betas"], manifest["t_sources"], manifest["d"]
        )
    if "weights" in manifest:
        out["weights"] = _read_matrix_text(
            directory / manifest["weights"],
            manifest["t_sources"], manifest["r_components"],
        )
    for key in ("components", "coefficients"):
        if key in manifest:
            out[key] = read_image_stack(directory / manifest[key])
    return out


def params_to_pair(loaded: dict) -> PairParams:
    return PairParams(
        betas=loaded["betas"],
        components=loaded["components"],
        weights=loaded["weights"],
    )


def export_heatmap(matrix: np.ndarray, path, scale: str = "minmax") -> None:
    """Write a matrix as a 16-bit binary PGM plus an inversion sidecar.

    `scale` is "minmax" (affine map of [min, max] onto [0, 65535]) or
    "symmetric" (affine map of [-a, a], a = max |entry|).  A degenerate
    range maps everything to sample 0.  The sidecar `<path>.scale.txt`
    records offset and step so that value = offset + step * sample inverts
    the quantization to within half a step.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("matrix contains non-finite entries")
    path = Path(path)

    if scale == "minmax":
        lo = float(matrix.min())
        hi = float(matrix.max())
    elif scale == "symmetric":
        a = float(np.abs(matrix).max())
        lo, hi = -a, a
    else:
        raise ValueError(f"unknown scale {scale!r}")

    if hi > lo:
        step = (hi - lo) / 65535.0
        samples = np.rint((matrix - lo) / step).astype(np.uint16)
    else:
        step = 0.0
        samples = np.zeros(matrix.shape, dtype=np.uint16)

    p, q = matrix.shape
    header = f"P5\n{q} {p}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.astype(">u2").tobytes(order="C"))
    sidecar = (
        f"scale {scale}\n"
        f"offset {_fmt(lo)}\n"
        f"step {_fmt(step)}\n"
    )
    Path(str(path) + ".scale.txt").write_text(sidecar)


def read_heatmap(path) -> np.ndarray:
    """Invert export_heatmap via the sidecar (exact to half a quantization step)."""
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError(f"{path}: not a 16-bit PGM written by export_heatmap")
    q, p = (int(v) for v in parts[1].split())
    body = parts[3]
    if len(body) != p * q * 2:
        raise ValueError(
            f"{path}: payload is {len(body)} bytes, expected exactly {p * q * 2}"
        )
    samples = np.frombuffer(body, dtype=">u2").reshape(p, q)

    sidecar = Path(str(path) + ".scale.txt").read_text().splitlines()
    fields = dict(line.split(maxsplit=1) for line in sidecar if line)
    offset = float(fields["offset"])
    step = float(fields["step"])
    return offset + step * samples.astype(np.float64)


def write_report(path, pairs) -> None:
    """Write an ordered list of (key, value) pairs as stable key-value text."""
    lines = []
    for key, value in pairs:
        if isinstance(value, float):
            value = _fmt(value)
        lines.append(f"{key} {value}")
    Path(path).write_text("\n".join(lines) + "\n")
