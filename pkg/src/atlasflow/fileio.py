"""Flat binary field container (AFRAW v1) and PGM snapshot export.

Layout: one ASCII header line

    AFRAW v1 <kind> <d> <dims...> <spacing...>\n

followed by the raw little-endian payload in C order, so the last listed
axis (x) varies fastest.  Kinds: ``scalar``/``vector`` store 32-bit floats
(vector components interleaved per voxel), ``label`` stores 32-bit unsigned
integers.  Deformation maps are serialized as their displacement vector
field.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .grid import DeformationMap, GridShape, LabelField, ScalarField, VectorField

_KINDS = ("scalar", "vector", "label")


def _format_number(x: float) -> str:
    return str(int(x)) if float(x) == int(x) else repr(float(x))


def _header(kind: str, shape: GridShape) -> bytes:
    parts = ["AFRAW", "v1", kind, str(shape.ndim)]
    parts += [str(n) for n in shape.dims]
    parts += [_format_number(s) for s in shape.spacing]
    return (" ".join(parts) + "\n").encode("ascii")


def write_field(path, field) -> None:
    """Serialize a scalar/vector/label field (or a map's displacement)."""
    if isinstance(field, DeformationMap):
        field = field.displacement
    if isinstance(field, ScalarField):
        kind, payload = "scalar", field.values.astype("<f4").tobytes(order="C")
    elif isinstance(field, VectorField):
        kind, payload = "vector", field.vectors.astype("<f4").tobytes(order="C")
    elif isinstance(field, LabelField):
        if field.labels.max() > np.iinfo(np.uint32).max:
            raise FormatError("labels exceed uint32 range")
        kind, payload = "label", field.labels.astype("<u4").tobytes(order="C")
    else:
        raise TypeError(f"cannot serialize {type(field).__name__}")
    with open(path, "wb") as fh:
        fh.write(_header(kind, field.shape))
        fh.write(payload)


def read_field(path):
    """Parse an AFRAW file into the matching field type.

    Raises FormatError naming the offending header field or payload size.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError("missing header line")
    try:
        tokens = raw[:newline].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ascii") from exc
    if len(tokens) < 4 or tokens[0] != "AFRAW":
        raise FormatError(f"bad magic {tokens[:1]!r}; expected AFRAW")
    if tokens[1] != "v1":
        raise FormatError(f"unsupported version {tokens[1]!r}")
    kind = tokens[2]
    if kind not in _KINDS:
        raise FormatError(f"unknown kind {kind!r}; expected one of {_KINDS}")
    try:
        d = int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"dimension count {tokens[3]!r} is not an integer") from exc
    if d not in (2, 3):
        raise FormatError(f"dimension count must be 2 or 3, got {d}")
    if len(tokens) != 4 + 2 * d:
        raise FormatError(
            f"header has {len(tokens)} tokens; expected {4 + 2 * d} for d={d}"
        )
    try:
        dims = tuple(int(t) for t in tokens[4 : 4 + d])
    except ValueError as exc:
        raise FormatError(f"dims {tokens[4:4 + d]!r} are not integers") from exc
    try:
        spacing = tuple(float(t) for t in tokens[4 + d :])
    except ValueError as exc:
        raise FormatError(f"spacing {tokens[4 + d:]!r} is not numeric") from exc
    try:
        shape = GridShape(dims, spacing)
    except ValueError as exc:
        raise FormatError(f"bad header geometry: {exc}") from exc

    payload = raw[newline + 1 :]
    nvox = shape.num_voxels
    per_voxel = d if kind == "vector" else 1
    expected = nvox * per_voxel * 4
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes; expected {expected} for {kind} {dims}"
        )
    if kind == "label":
        arr = np.frombuffer(payload, dtype="<u4").reshape(dims)
        return LabelField(shape, arr.astype(np.int64))
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if kind == "scalar":
        return ScalarField(shape, arr.reshape(dims))
    return VectorField(shape, arr.reshape(dims + (d,)))


def read_map(path) -> DeformationMap:
    field = read_field(path)
    if not isinstance(field, VectorField):
        raise FormatError(f"{path}: expected a vector field for a deformation map")
    return DeformationMap(field)


def export_pgm(path, field: ScalarField) -> None:
    """8-bit binary PGM of a scalar field scaled from [0, 1].

    3D fields export their central slice along the first axis.
    """
    values = field.values
    if values.ndim == 3:
        values = values[values.shape[0] // 2]
    pixels = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))
