"""Reader/writer for the de-facto 3DGS PLY layout (binary little-endian subset)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..core import GaussianSet, sh_coeff_count, sh_degree_for
from ..exceptions import DataError, FormatError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

REQUIRED = (
    "x", "y", "z", "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
)


def _read_header(fh) -> tuple[str, int, list[tuple[str, str]]]:
    if fh.readline().strip() != b"ply":
        raise FormatError("missing 'ply' magic line")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif count is None:
                raise FormatError(f"element '{tokens[1]}' before vertex element is not supported")
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise FormatError("list properties are not supported on vertices")
            if tokens[1] not in _PLY_TYPES:
                raise FormatError(f"unknown property type '{tokens[1]}'")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise FormatError(f"unsupported PLY format '{fmt}'")
    if count is None:
        raise FormatError("no vertex element")
    return fmt, count, props


def load_ply(path) -> GaussianSet:
    """Load Gaussians; scales are exponentiated, opacity squashed, rotations normalised."""
    path = Path(path)
    with path.open("rb") as fh:
        fmt, count, props = _read_header(fh)
        names = [p[0] for p in props]
        for name in REQUIRED:
            if name not in names:
                raise FormatError(f"missing required property '{name}'")
        if fmt == "ascii":
            raw = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=count)
            if raw.shape[0] != count:
                raise FormatError(f"expected {count} vertices, found {raw.shape[0]}")
            data = {name: raw[:, i] for i, name in enumerate(names)}
        else:
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise FormatError(f"truncated vertex data: {len(buf)} of {dtype.itemsize * count} bytes")
            arr = np.frombuffer(buf, dtype=dtype, count=count)
            data = {name: arr[name].astype(np.float64) for name in names}

    rest = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n[7:]))
    k = 1 + len(rest) // 3
    if len(rest) % 3:
        raise FormatError(f"{len(rest)} f_rest_* properties is not a multiple of 3")
    sh_degree_for(k)
    for i, name in enumerate(rest):
        if name != f"f_rest_{i}":
            raise FormatError(f"missing property 'f_rest_{i}'")

    columns = [data[n] for n in REQUIRED] + [data[n] for n in rest]
    stacked = np.stack(columns, axis=1) if count else np.zeros((0, len(columns)))
    bad = ~np.isfinite(stacked).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"non-finite field in vertex record {i}", index=i)

    positions = np.stack([data["x"], data["y"], data["z"]], axis=1)
    scales = np.exp(np.stack([data[f"scale_{i}"] for i in range(3)], axis=1))
    rot = np.stack([data[f"rot_{i}"] for i in range(4)], axis=1)
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    if np.any(norms == 0):
        i = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise DataError(f"zero quaternion in vertex record {i}", index=i)
    rot = rot / norms
    opacity = 1.0 / (1.0 + np.exp(-data["opacity"]))
    sh = np.zeros((count, k, 3))
    sh[:, 0, :] = np.stack([data[f"f_dc_{i}"] for i in range(3)], axis=1)
    if k > 1:
        # f_rest is channel-major: all R coefficients, then G, then B
        r = np.stack([data[n] for n in rest], axis=1).reshape(count, 3, k - 1)
        sh[:, 1:, :] = np.transpose(r, (0, 2, 1))
    return GaussianSet(np.arange(count), positions, scales, rot, opacity, sh)


def save_ply(path, gaussians: GaussianSet) -> None:
    """Write the inverse of :func:`load_ply` (log scales, logit opacity)."""
    n = len(gaussians)
    k = gaussians.sh.shape[1]
    names = list(REQUIRED) + [f"f_rest_{i}" for i in range(3 * (k - 1))]
    dtype = np.dtype([(name, "<f4") for name in names])
    out = np.zeros(n, dtype=dtype)
    out["x"], out["y"], out["z"] = gaussians.positions.T
    op = np.clip(gaussians.opacities, 1e-7, 1 - 1e-7)
    out["opacity"] = np.log(op / (1 - op))
    for i in range(3):
        out[f"scale_{i}"] = np.log(gaussians.scales[:, i])
        out[f"f_dc_{i}"] = gaussians.sh[:, 0, i]
    for i in range(4):
        out[f"rot_{i}"] = gaussians.rotations[:, i]
    if k > 1:
        rest = np.transpose(gaussians.sh[:, 1:, :], (0, 2, 1)).reshape(n, -1)
        for i in range(rest.shape[1]):
            out[f"f_rest_{i}"] = rest[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with Path(path).open("wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(out.tobytes())


__all__ = ["load_ply", "save_ply", "REQUIRED", "sh_coeff_count"]
