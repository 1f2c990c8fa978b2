"""Readers and writers for the on-disk formats.

Two formats are implemented, both little-endian and strict:

* A small NRRD-like grammar for dense grids: ``key: value`` header lines
  terminated by one blank line, then a raw voxel payload with x fastest.
  Supported keys are ``dimension`` (must be 3), ``type`` (float32 | int16 |
  uint8), ``sizes``, ``encoding`` (raw), ``endian`` (little) and either
  ``spacings`` or a diagonal ``space directions``.  ``#`` comment lines are
  ignored; any other key is rejected.
* ``SCRB`` v1 for scribbles: run-length encoded foreground and background
  linear-index lists as u32 ``(start, length)`` pairs.

Readers reject malformed input rather than guessing; writers round-trip
bit-exactly through the matching reader.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError, ValidationError
from .grid import Dims, LabelMap, ProbMap, ScribbleSet, Spacing, Volume, voxel_count

_DTYPES = {
    "float32": np.dtype("<f4"),
    "int16": np.dtype("<i2"),
    "uint8": np.dtype("u1"),
}
_REQUIRED_KEYS = ("dimension", "type", "sizes", "encoding", "endian")

PathOrFile = Union[str, "BinaryIO"]


def _open(path_or_file: PathOrFile, mode: str):
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        return open(path_or_file, mode), True
    return path_or_file, False


def _parse_header(stream: BinaryIO) -> dict[str, str]:
    fields: dict[str, str] = {}
    line_no = 0
    while True:
        line_no += 1
        raw = stream.readline()
        if raw == b"":
            raise FormatError(f"line {line_no}: header not terminated by a blank line")
        line = raw.decode("ascii", errors="replace").rstrip("\r\n")
        if line == "":
            return fields
        if line.startswith("#"):
            continue
        if ": " not in line:
            raise FormatError(f"line {line_no}: expected 'key: value', got {line!r}")
        key, value = line.split(": ", 1)
        key = key.strip()
        if key in fields:
            raise FormatError(f"line {line_no}: duplicate field {key!r}")
        if key not in _REQUIRED_KEYS + ("spacings", "space directions"):
            raise FormatError(f"line {line_no}: unsupported field {key!r}")
        fields[key] = value.strip()


def _parse_spacing(fields: dict[str, str]) -> Spacing:
    if "spacings" in fields and "space directions" in fields:
        raise FormatError("both 'spacings' and 'space directions' present")
    if "spacings" in fields:
        parts = fields["spacings"].split()
        if len(parts) != 3:
            raise FormatError(f"spacings must have 3 entries, got {fields['spacings']!r}")
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    if "space directions" in fields:
        vecs = fields["space directions"].split(") (")
        vecs = [v.strip("() ") for v in vecs]
        if len(vecs) != 3:
            raise FormatError(f"space directions must have 3 vectors, got {fields['space directions']!r}")
        spacing = []
        for axis, vec in enumerate(vecs):
            comps = [float(c) for c in vec.split(",")]
            if len(comps) != 3 or any(c != 0.0 for i, c in enumerate(comps) if i != axis):
                raise FormatError("space directions must be diagonal")
            spacing.append(comps[axis])
        return tuple(spacing)  # type: ignore[return-value]
    raise FormatError("missing 'spacings' or 'space directions'")


def _read_grid(stream: BinaryIO) -> tuple[Dims, Spacing, np.ndarray]:
    fields = _parse_header(stream)
    for key in _REQUIRED_KEYS:
        if key not in fields:
            raise FormatError(f"missing required field {key!r}")
    if fields["dimension"] != "3":
        raise FormatError(f"dimension must be 3, got {fields['dimension']!r}")
    if fields["encoding"] != "raw":
        raise FormatError(f"encoding must be raw, got {fields['encoding']!r}")
    if fields["endian"] != "little":
        raise FormatError(f"endian must be little, got {fields['endian']!r}")
    if fields["type"] not in _DTYPES:
        raise FormatError(f"type must be one of {sorted(_DTYPES)}, got {fields['type']!r}")
    try:
        sizes = tuple(int(s) for s in fields["sizes"].split())
    except ValueError:
        raise FormatError(f"sizes must be integers, got {fields['sizes']!r}") from None
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise FormatError(f"sizes must be 3 positive integers, got {fields['sizes']!r}")
    spacing = _parse_spacing(fields)
    dtype = _DTYPES[fields["type"]]
    expected = voxel_count(sizes) * dtype.itemsize
    payload = stream.read(expected)
    if len(payload) != expected:
        raise FormatError(f"payload truncated: expected {expected} bytes, got {len(payload)}")
    trailing = stream.read(1)
    if trailing:
        raise FormatError("trailing data after declared payload")
    return sizes, spacing, np.frombuffer(payload, dtype=dtype)


def read_volume(path: PathOrFile) -> Volume:
    stream, owned = _open(path, "rb")
    try:
        dims, spacing, raw = _read_grid(stream)
    finally:
        if owned:
            stream.close()
    data = raw.astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise ValidationError("volume payload contains non-finite values")
    return Volume(dims, spacing, data)


def read_labelmap(path: PathOrFile) -> LabelMap:
    stream, owned = _open(path, "rb")
    try:
        dims, _, raw = _read_grid(stream)
    finally:
        if owned:
            stream.close()
    values = np.unique(raw)
    if not np.all(np.isin(values, (0, 1))):
        raise ValidationError(f"label payload must be binary, found values {values[:8]!r}")
    return LabelMap(dims, raw.astype(np.uint8))


def read_probmap(path: PathOrFile) -> ProbMap:
    stream, owned = _open(path, "rb")
    try:
        dims, _, raw = _read_grid(stream)
    finally:
        if owned:
            stream.close()
    prob = raw.astype(np.float32)
    if not np.all(np.isfinite(prob)) or prob.min() < 0.0 or prob.max() > 1.0:
        raise ValidationError("probability payload must lie in [0, 1]")
    return ProbMap(dims, prob)


def read_nrrd(path: PathOrFile, kind: str) -> Union[Volume, LabelMap, ProbMap]:
    """Read a grid file as the stated kind: 'volume', 'labels' or 'prob'."""
    readers = {"volume": read_volume, "labels": read_labelmap, "prob": read_probmap}
    if kind not in readers:
        raise ValueError(f"kind must be one of {sorted(readers)}, got {kind!r}")
    return readers[kind](path)


def _write_grid(stream: BinaryIO, dims: Dims, spacing: Spacing, data: np.ndarray, type_name: str) -> None:
    header = (
        f"dimension: 3\n"
        f"type: {type_name}\n"
        f"sizes: {dims[0]} {dims[1]} {dims[2]}\n"
        f"encoding: raw\n"
        f"endian: little\n"
        f"spacings: {spacing[0]!r} {spacing[1]!r} {spacing[2]!r}\n"
        f"\n"
    )
    stream.write(header.encode("ascii"))
    stream.write(np.ascontiguousarray(data, dtype=_DTYPES[type_name]).tobytes())


def write_nrrd(obj: Union[Volume, LabelMap, ProbMap], path: PathOrFile) -> None:
    stream, owned = _open(path, "wb")
    try:
        if isinstance(obj, Volume):
            _write_grid(stream, obj.dims, obj.spacing, obj.data, "float32")
        elif isinstance(obj, LabelMap):
            _write_grid(stream, obj.dims, (1.0, 1.0, 1.0), obj.labels, "uint8")
        elif isinstance(obj, ProbMap):
            _write_grid(stream, obj.dims, (1.0, 1.0, 1.0), obj.prob, "float32")
        else:
            raise TypeError(f"cannot serialize {type(obj).__name__}")
    finally:
        if owned:
            stream.close()


def write_float_grid(grid_flat: np.ndarray, dims: Dims, path: PathOrFile, spacing: Spacing = (1.0, 1.0, 1.0)) -> None:
    """Write an arbitrary f32 field (e.g. distance or weight maps).

    Unlike :func:`write_nrrd` for volumes this does not require finite values,
    so +inf distances (empty seed sets) serialize as-is.
    """
    stream, owned = _open(path, "wb")
    try:
        _write_grid(stream, dims, spacing, np.asarray(grid_flat, dtype=np.float32), "float32")
    finally:
        if owned:
            stream.close()


_SCRB_MAGIC = b"SCRB"


def _runs_of(indices: set[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for idx in sorted(indices):
        if runs and idx == runs[-1][0] + runs[-1][1]:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((idx, 1))
    return runs


def _decode_runs(runs: list[tuple[int, int]], n: int, which: str) -> set[int]:
    out: set[int] = set()
    prev_end = -1
    for start, length in runs:
        if length == 0:
            raise FormatError(f"{which}: zero-length run at start {start}")
        if start <= prev_end:
            raise FormatError(f"{which}: runs overlap or are unsorted at start {start}")
        end = start + length - 1
        if end >= n:
            raise FormatError(f"{which}: run ({start}, {length}) exceeds volume of {n} voxels")
        out.update(range(start, end + 1))
        prev_end = end
    return out


def write_scribbles(scribbles: ScribbleSet, path: PathOrFile) -> None:
    stream, owned = _open(path, "wb")
    try:
        stream.write(_SCRB_MAGIC)
        stream.write(struct.pack("<IIII", 1, *scribbles.dims))
        for indices in (scribbles.foreground, scribbles.background):
            runs = _runs_of(indices)
            stream.write(struct.pack("<I", len(runs)))
            for start, length in runs:
                stream.write(struct.pack("<II", start, length))
    finally:
        if owned:
            stream.close()


def read_scribbles(path: PathOrFile) -> ScribbleSet:
    stream, owned = _open(path, "rb")
    try:
        magic = stream.read(4)
        if magic != _SCRB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_SCRB_MAGIC!r}")
        head = stream.read(16)
        if len(head) != 16:
            raise FormatError("truncated scribble header")
        version, nx, ny, nz = struct.unpack("<IIII", head)
        if version != 1:
            raise FormatError(f"unsupported scribble file version {version}")
        dims: Dims = (nx, ny, nz)
        n = voxel_count(dims)
        sets = []
        for which in ("foreground", "background"):
            count_raw = stream.read(4)
            if len(count_raw) != 4:
                raise FormatError(f"truncated {which} run count")
            (count,) = struct.unpack("<I", count_raw)
            body = stream.read(8 * count)
            if len(body) != 8 * count:
                raise FormatError(f"truncated {which} run list")
            runs = [struct.unpack_from("<II", body, 8 * i) for i in range(count)]
            sets.append(_decode_runs(runs, n, which))
        if stream.read(1):
            raise FormatError("trailing data after scribble runs")
        fg, bg = sets
        if fg & bg:
            raise FormatError("foreground and background runs overlap")
        return ScribbleSet(dims, fg, bg)
    finally:
        if owned:
            stream.close()


def scribbles_to_bytes(scribbles: ScribbleSet) -> bytes:
    buf = io.BytesIO()
    write_scribbles(scribbles, buf)
    return buf.getvalue()


def scribbles_from_bytes(data: bytes) -> ScribbleSet:
    return read_scribbles(io.BytesIO(data))
