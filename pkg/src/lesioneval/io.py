"""NIfTI-1 volume I/O and CSV/JSON report emission.

Volumes are reoriented on load to the canonical RAS+ axis order described in
:mod:`lesioneval.volume`, using only the axis permutation and flips implied by
the header affine. Oblique or sheared affines are rejected.
"""

from __future__ import annotations

import csv
import gzip
import io as _io
import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .volume import BinaryMask, ScalarVolume, Spacing, Unit

__all__ = [
    "NiftiError",
    "NonBinaryMaskWarning",
    "DataKind",
    "VolumeFileHeader",
    "read_header",
    "read_volume",
    "read_mask",
    "write_volume",
    "write_mask",
    "write_report",
    "read_report",
    "format_real",
]

HEADER_SIZE = 348
_VOX_OFFSET = 352
_MAX_VOXELS = 2**31 - 1
_SPACING_TOL_MM = 1e-3
_OBLIQUE_TOL = 1e-6


class NiftiError(ValueError):
    pass


class NonBinaryMaskWarning(UserWarning):
    """A mask file held values other than 0 and 1; ``count`` voxels were affected."""

    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


class DataKind(str, Enum):
    U8 = "U8"
    I16 = "I16"
    I32 = "I32"
    F32 = "F32"
    F64 = "F64"


_CODES = {
    DataKind.U8: (2, "u1"),
    DataKind.I16: (4, "i2"),
    DataKind.I32: (8, "i4"),
    DataKind.F32: (16, "f4"),
    DataKind.F64: (64, "f8"),
}
_KIND_BY_CODE = {code: kind for kind, (code, _) in _CODES.items()}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    fields = []
    for f in _HEADER_FIELDS:
        name, code = f[0], f[1]
        if code[0] in "iuf":
            code = byteorder + code
        fields.append((name, code) + tuple(f[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_SIZE
    return dt


@dataclass(frozen=True)
class VolumeFileHeader:
    dims: tuple[int, int, int]
    spacing: Spacing
    data_kind: DataKind
    scale_slope: float
    scale_intercept: float
    orientation: np.ndarray  # 3x4 voxel-to-mm affine
    byteorder: str
    vox_offset: int
    single_file: bool
    description: str = ""


def _open_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _quaternion_affine(h) -> np.ndarray:
    b, c, d = float(h["quatern_b"]), float(h["quatern_c"]), float(h["quatern_d"])
    a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pix = h["pixdim"].astype(np.float64)
    qfac = -1.0 if pix[0] < 0 else 1.0
    aff = np.zeros((3, 4))
    aff[:, :3] = rot * np.array([pix[1], pix[2], qfac * pix[3]])
    aff[:, 3] = [h["qoffset_x"], h["qoffset_y"], h["qoffset_z"]]
    return aff


def _parse_header(raw: bytes, path: Path) -> VolumeFileHeader:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file too short for a NIfTI-1 header")
    for byteorder in ("<", ">"):
        dt = _header_dtype(byteorder)
        h = np.frombuffer(raw[:HEADER_SIZE], dtype=dt)[0]
        if int(h["sizeof_hdr"]) == HEADER_SIZE:
            break
    else:
        raise NiftiError(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = bytes(h["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise NiftiError(f"{path}: bad magic {magic!r}, expected 'n+1' or 'ni1'")

    dim = [int(x) for x in h["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: dim[0]={ndim} outside 1..7")
    shape = [dim[i] if i <= ndim else 1 for i in (1, 2, 3)]
    if any(n < 1 for n in shape):
        raise NiftiError(f"{path}: non-positive dimension in {shape}")
    if any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise NiftiError(f"{path}: only 3D volumes are supported, dims are {dim[1:ndim + 1]}")
    if math.prod(shape) > _MAX_VOXELS:
        raise NiftiError(f"{path}: dimension overflow, {shape} has more than {_MAX_VOXELS} voxels")

    code = int(h["datatype"])
    if code not in _KIND_BY_CODE:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    kind = _KIND_BY_CODE[code]

    if int(h["sform_code"]) > 0:
        affine = np.stack([h["srow_x"], h["srow_y"], h["srow_z"]]).astype(np.float64)
    elif int(h["qform_code"]) > 0:
        affine = _quaternion_affine(h)
    else:
        affine = np.zeros((3, 4))
        affine[[0, 1, 2], [0, 1, 2]] = h["pixdim"][1:4]

    pix = np.abs(h["pixdim"][1:4].astype(np.float64))
    norms = np.linalg.norm(affine[:, :3], axis=0)
    if np.any(np.abs(norms - pix) > _SPACING_TOL_MM):
        raise NiftiError(f"{path}: affine column norms {norms} disagree with pixdim {pix}")
    slope = float(h["scl_slope"])
    return VolumeFileHeader(
        dims=tuple(shape),  # type: ignore[arg-type]
        spacing=Spacing(*pix),
        data_kind=kind,
        scale_slope=slope if slope != 0 and math.isfinite(slope) else 1.0,
        scale_intercept=float(h["scl_inter"]) if math.isfinite(float(h["scl_inter"])) else 0.0,
        orientation=affine,
        byteorder=byteorder,
        vox_offset=int(h["vox_offset"]),
        single_file=magic == b"n+1",
        description=bytes(h["descrip"]).split(b"\x00")[0].decode("latin-1"),
    )


def read_header(path) -> VolumeFileHeader:
    path = Path(path)
    return _parse_header(_open_bytes(path), path)


def _image_path(path: Path) -> Path:
    name = path.name
    for hdr_ext, img_ext in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if name.endswith(hdr_ext):
            base = path.with_name(name[: -len(hdr_ext)])
            for candidate in (base.with_name(base.name + img_ext), base.with_name(base.name + ".img"),
                              base.with_name(base.name + ".img.gz")):
                if candidate.exists():
                    return candidate
    raise NiftiError(f"{path}: 'ni1' header without a matching .img file")


def _canonical_transform(affine: np.ndarray, path: Path):
    """Axis permutation and flips that bring voxel axes to RAS+ order."""
    m = affine[:, :3]
    perm = [0, 0, 0]
    flips = [False, False, False]
    seen = set()
    for j in range(3):
        col = m[:, j]
        r = int(np.argmax(np.abs(col)))
        off = np.delete(np.abs(col), r)
        if np.any(off > _OBLIQUE_TOL * np.abs(col[r])):
            raise NiftiError(f"{path}: oblique or sheared orientation is not supported")
        if r in seen:
            raise NiftiError(f"{path}: degenerate orientation affine")
        seen.add(r)
        perm[r] = j
        flips[r] = col[r] < 0
    return perm, flips


def _load_array(path: Path) -> tuple[np.ndarray, VolumeFileHeader]:
    raw = _open_bytes(path)
    header = _parse_header(raw, path)
    if header.single_file:
        payload = raw
        offset = header.vox_offset
    else:
        payload = _open_bytes(_image_path(path))
        offset = header.vox_offset
    _, tcode = _CODES[header.data_kind]
    dtype = np.dtype(header.byteorder + tcode)
    n = math.prod(header.dims)
    need = offset + n * dtype.itemsize
    if len(payload) < need:
        raise NiftiError(f"{path}: truncated data, expected {need} bytes and found {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype, count=n, offset=offset).reshape(header.dims, order="F")
    data = data.astype(np.float64)
    if header.scale_slope != 1.0 or header.scale_intercept != 0.0:
        data = data * header.scale_slope + header.scale_intercept
    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NiftiError(f"{path}: non-finite value at voxel {idx}")
    perm, flips = _canonical_transform(header.orientation, path)
    data = np.transpose(data, perm)
    for axis, flip in enumerate(flips):
        if flip:
            data = np.flip(data, axis=axis)
    return np.ascontiguousarray(data), header


def _canonical_spacing(header: VolumeFileHeader, path: Path) -> Spacing:
    perm, _ = _canonical_transform(header.orientation, path)
    s = header.spacing.as_tuple()
    return Spacing(*(s[j] for j in perm))


def _unit_from_description(text: str) -> Unit | None:
    for token in text.split():
        if token.startswith("unit="):
            try:
                return Unit(token[5:])
            except ValueError:
                return None
    return None


def read_volume(path, unit: Unit | str | None = None) -> ScalarVolume:
    """Load a NIfTI-1 volume (``.nii``, ``.nii.gz`` or ``.hdr``/``.img``).

    ``unit`` defaults to the unit recorded by :func:`write_volume`, else SUV.
    """
    path = Path(path)
    data, header = _load_array(path)
    if unit is None:
        unit = _unit_from_description(header.description) or Unit.SUV
    return ScalarVolume(data, _canonical_spacing(header, path), Unit(unit))


def read_mask(path) -> BinaryMask:
    """Load a mask; every nonzero voxel is foreground.

    Values other than 0 and 1 are accepted but reported through a
    :class:`NonBinaryMaskWarning` carrying the number of such voxels.
    """
    path = Path(path)
    data, header = _load_array(path)
    odd = int(np.count_nonzero((data != 0) & (data != 1)))
    if odd:
        warnings.warn(NonBinaryMaskWarning(f"{path}: {odd} voxel(s) hold values other than 0/1", odd),
                      stacklevel=2)
    return BinaryMask(data != 0, _canonical_spacing(header, path))


def _encode(data: np.ndarray, kind: DataKind) -> np.ndarray:
    _, tcode = _CODES[kind]
    target = np.dtype("<" + tcode)
    if kind in (DataKind.F32, DataKind.F64):
        return data.astype(target)
    info = np.iinfo(target)
    if data.size and (data.min() < info.min or data.max() > info.max):
        raise ValueError(f"values outside the {kind.value} range")
    cast = data.astype(target)
    if not np.array_equal(cast.astype(np.float64), data):
        raise ValueError(f"non-integral values cannot be stored as {kind.value}")
    return cast


def _build_header(dims, spacing: Spacing, kind: DataKind, description: str) -> bytes:
    h = np.zeros((), dtype=_header_dtype("<"))
    code, tcode = _CODES[kind]
    h["sizeof_hdr"] = HEADER_SIZE
    h["regular"] = b"r"
    h["dim"] = [3, *dims, 1, 1, 1, 1]
    h["datatype"] = code
    h["bitpix"] = np.dtype(tcode).itemsize * 8
    h["pixdim"] = [1.0, *spacing.as_tuple(), 1.0, 1.0, 1.0, 1.0]
    h["vox_offset"] = _VOX_OFFSET
    h["scl_slope"] = 1.0
    h["scl_inter"] = 0.0
    h["xyzt_units"] = 2  # mm
    h["descrip"] = description.encode("latin-1")[:79]
    h["qform_code"] = 1
    h["sform_code"] = 1
    h["srow_x"] = [spacing.dx, 0, 0, 0]
    h["srow_y"] = [0, spacing.dy, 0, 0]
    h["srow_z"] = [0, 0, spacing.dz, 0]
    h["magic"] = b"n+1"
    return h.tobytes() + b"\x00" * (_VOX_OFFSET - HEADER_SIZE)


def _write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        buf = _io.BytesIO()
        # fixed mtime and no embedded name keep the output byte-reproducible
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(payload)
        payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)


def write_volume(vol: ScalarVolume, path, data_kind: DataKind | str = DataKind.F32) -> None:
    """Write a canonical-orientation NIfTI-1 file; ``.gz`` suffix compresses."""
    kind = DataKind(data_kind)
    data = _encode(vol.data, kind)
    header = _build_header(vol.dims, vol.spacing, kind, f"lesioneval unit={vol.unit.value}")
    _write_bytes(Path(path), header + data.tobytes(order="F"))


def write_mask(mask: BinaryMask, path, data_kind: DataKind | str = DataKind.U8) -> None:
    kind = DataKind(data_kind)
    data = _encode(mask.data.astype(np.float64), kind)
    header = _build_header(mask.dims, mask.spacing, kind, "lesioneval mask")
    _write_bytes(Path(path), header + data.tobytes(order="F"))


# -- reports -----------------------------------------------------------------


def format_real(x: float) -> str:
    """Six significant digits; non-finite values spelled out."""
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6g}"


def _json_value(value: Any):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        return float(format_real(value))
    return value


def _csv_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_real(float(value))
    return str(value)


def _columns(records: Sequence[Mapping[str, Any]]) -> list[str]:
    cols: dict[str, None] = {}
    for rec in records:
        for key in rec:
            cols.setdefault(key, None)
    return list(cols)


def write_report(results: Iterable[Mapping[str, Any]], format: str, path) -> None:
    """Write one record per row as CSV (RFC 4180) or a JSON list.

    Columns follow first-appearance order across the records. Reals carry six
    significant digits.
    """
    records = list(results)
    if not records:
        raise ValueError("refusing to write an empty report")
    fmt = format.lower()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = _columns(records)
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(cols)
            for rec in records:
                writer.writerow([_csv_value(rec.get(c)) for c in cols])
    elif fmt == "json":
        payload = [{c: _json_value(rec.get(c)) for c in cols} for rec in records]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, ensure_ascii=False, allow_nan=False)
            fh.write("\n")
    else:
        raise ValueError(f"unknown report format {format!r}; use 'csv' or 'json'")


def _parse_cell(text: str):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_report(path) -> list[dict]:
    """Read back a report written by :func:`write_report` (format from suffix)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as fh:
            return list(json.load(fh))
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]
