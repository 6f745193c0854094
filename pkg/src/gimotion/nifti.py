"""Minimal NIfTI-1 single-file (.nii) reader/writer.

Uncompressed, little-endian, axis-aligned geometry only. Scalar grids are
stored as 3-D volumes; vector fields as 5-D volumes with ``dim[5] = 3`` and
the vector intent. The grid kind / field convention travels in
``intent_name`` so files written here read back as the same object type.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .grid import (BACKWARD_PULL, DOSE_GRAY, FORWARD_PUSH, INTENSITY, GridGeometry,
                   LabelMask, ScalarGrid, VectorField)

HEADER_SIZE = 348
VOX_OFFSET = 352
INTENT_VECTOR = 1007
LABELS_INTENT = "labels"

DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    512: np.dtype("<u2"),
}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class NiftiError(ValueError):
    """Base class for NIfTI read/write failures."""


class NiftiHeaderError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionMismatchError(NiftiError):
    pass


class GeometryError(NiftiError):
    pass


# field name, struct format
_LAYOUT = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"), ("qoffset_x", "f"),
    ("qoffset_y", "f"), ("qoffset_z", "f"), ("srow_x", "4f"), ("srow_y", "4f"),
    ("srow_z", "4f"), ("intent_name", "16s"), ("magic", "4s"),
]
_FMT = "<" + "".join(f for _, f in _LAYOUT)
assert struct.calcsize(_FMT) == HEADER_SIZE


def _unpack_header(raw: bytes) -> dict:
    vals = list(struct.unpack(_FMT, raw[:HEADER_SIZE]))
    hdr, pos = {}, 0
    for name, fmt in _LAYOUT:
        count = int(fmt[:-1]) if fmt[:-1].isdigit() and fmt[-1] != "s" else 1
        if count == 1:
            hdr[name] = vals[pos]
        else:
            hdr[name] = tuple(vals[pos:pos + count])
        pos += count
    return hdr


def _pack_header(hdr: dict) -> bytes:
    vals = []
    for name, fmt in _LAYOUT:
        v = hdr[name]
        if isinstance(v, (tuple, list)):
            vals.extend(v)
        else:
            vals.append(v)
    return struct.pack(_FMT, *vals)


def _cstr(b: bytes) -> str:
    return b.split(b"\0", 1)[0].decode("latin-1")


def _geometry_from_header(hdr: dict, dims) -> GridGeometry:
    pixdim = hdr["pixdim"]
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if hdr["sform_code"] > 0:
        rows = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=float)
        lin = rows[:, :3]
        off = lin - np.diag(np.diag(lin))
        if np.any(np.abs(off) > 1e-6 * np.abs(lin).max()):
            raise GeometryError("sform has rotation/shear terms; only axis-aligned grids are supported")
        diag = np.diag(lin)
        if np.any(diag <= 0):
            raise GeometryError("sform has non-positive axis scaling (flipped axes are not supported)")
        return GridGeometry(dims, tuple(float(d) for d in diag), tuple(float(o) for o in rows[:, 3]))
    if hdr["qform_code"] > 0:
        quat = (hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"])
        if any(abs(q) > 1e-6 for q in quat):
            raise GeometryError("qform has a rotation; only axis-aligned grids are supported")
        if pixdim[0] < 0:
            raise GeometryError("qform qfac = -1 flips the z axis; not supported")
        origin = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
        return GridGeometry(dims, spacing, tuple(float(o) for o in origin))
    return GridGeometry(dims, spacing, (0.0, 0.0, 0.0))


def _read_raw(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiHeaderError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
            raise NiftiHeaderError(f"{path}: big-endian NIfTI is not supported")
        raise NiftiHeaderError(f"{path}: sizeof_hdr={sizeof_hdr}, expected 348")
    hdr = _unpack_header(raw)
    if hdr["magic"] != b"n+1\0":
        raise NiftiHeaderError(f"{path}: magic {hdr['magic']!r} is not single-file NIfTI-1 'n+1'")
    dtype = DTYPES.get(hdr["datatype"])
    if dtype is None:
        raise UnsupportedDatatypeError(f"{path}: datatype code {hdr['datatype']} not supported")
    ndim = hdr["dim"][0]
    if ndim < 1 or ndim > 7:
        raise NiftiHeaderError(f"{path}: dim[0]={ndim} out of range")
    shape = tuple(int(d) for d in hdr["dim"][1:ndim + 1])
    if min(shape) < 1:
        raise DimensionMismatchError(f"{path}: non-positive dimension in {shape}")
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if offset < HEADER_SIZE or len(raw) - offset != nbytes:
        raise DimensionMismatchError(
            f"{path}: expected {nbytes} data bytes at offset {offset}, found {len(raw) - offset}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    return hdr, data


def _scaled(hdr, data) -> tuple[np.ndarray, bool]:
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0):
        return data.astype(float) * float(slope) + float(inter), True
    return data.astype(float), False


def _parse_label_names(descrip: str) -> dict[int, str]:
    names = {}
    if descrip.startswith("labels:"):
        for item in descrip[len("labels:"):].split(";"):
            if "=" in item:
                k, v = item.split("=", 1)
                names[int(k)] = v
    return names


def read_nifti(path, kind: str | None = None):
    """Read a 3-D NIfTI-1 file as a ScalarGrid or LabelMask.

    ``kind`` forces the result type (``"labels"``, ``"intensity"``,
    ``"dose_gray"``); otherwise it is taken from ``intent_name``, defaulting to
    an intensity ScalarGrid.
    """
    hdr, data = _read_raw(path)
    if hdr["dim"][0] != 3:
        if hdr["dim"][0] == 5 and hdr["dim"][5] == 3:
            raise DimensionMismatchError(f"{path}: 5-D vector file; use read_vector_field")
        raise DimensionMismatchError(f"{path}: dim[0]={hdr['dim'][0]}, expected 3")
    geo = _geometry_from_header(hdr, data.shape)
    intent = _cstr(hdr["intent_name"])
    kind = kind or (intent if intent in (LABELS_INTENT, INTENSITY, DOSE_GRAY) else INTENSITY)
    values, scaled = _scaled(hdr, data)
    if kind == LABELS_INTENT:
        if scaled or data.dtype.kind == "f":
            if np.any(values != np.round(values)) or values.min() < 0:
                raise NiftiError(f"{path}: label volume holds non-integer or negative values")
        return LabelMask(geo, values.astype(np.int32), _parse_label_names(_cstr(hdr["descrip"])))
    return ScalarGrid(geo, values, kind)


def read_vector_field(path, convention: str | None = None) -> VectorField:
    """Read a 5-D (x, y, z, 1, 3) NIfTI vector field in mm."""
    hdr, data = _read_raw(path)
    dim = hdr["dim"]
    if dim[0] != 5 or dim[4] != 1 or dim[5] != 3:
        raise DimensionMismatchError(f"{path}: expected dim [5, X, Y, Z, 1, 3], got {list(dim)}")
    geo = _geometry_from_header(hdr, data.shape[:3])
    values, _ = _scaled(hdr, data)
    intent = _cstr(hdr["intent_name"])
    convention = convention or (intent if intent in (FORWARD_PUSH, BACKWARD_PULL) else BACKWARD_PULL)
    return VectorField(geo, values[:, :, :, 0, :], convention)


def _base_header(geo: GridGeometry, dim, dtype: np.dtype, intent_name: str,
                 intent_code: int = 0, descrip: str = "") -> dict:
    sx, sy, sz = geo.spacing
    ox, oy, oz = geo.origin
    full_dim = list(dim) + [1] * (8 - len(dim))
    pixdim = [1.0, sx, sy, sz] + [1.0] * 4
    return {
        "sizeof_hdr": HEADER_SIZE, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": b"r", "dim_info": 0, "dim": tuple(full_dim),
        "intent_p1": 0.0, "intent_p2": 0.0, "intent_p3": 0.0, "intent_code": intent_code,
        "datatype": DTYPE_CODES[dtype], "bitpix": dtype.itemsize * 8, "slice_start": 0,
        "pixdim": tuple(pixdim), "vox_offset": float(VOX_OFFSET), "scl_slope": 1.0,
        "scl_inter": 0.0, "slice_end": 0, "slice_code": 0, "xyzt_units": 2 | 8,
        "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0, "toffset": 0.0,
        "glmax": 0, "glmin": 0, "descrip": descrip.encode("latin-1")[:79],
        "aux_file": b"", "qform_code": 1, "sform_code": 1,
        "quatern_b": 0.0, "quatern_c": 0.0, "quatern_d": 0.0,
        "qoffset_x": ox, "qoffset_y": oy, "qoffset_z": oz,
        "srow_x": (sx, 0.0, 0.0, ox), "srow_y": (0.0, sy, 0.0, oy), "srow_z": (0.0, 0.0, sz, oz),
        "intent_name": intent_name.encode("latin-1")[:15], "magic": b"n+1\0",
    }


def _write(path, hdr: dict, data: np.ndarray):
    payload = _pack_header(hdr) + b"\0\0\0\0" + np.asarray(data).tobytes(order="F")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_nifti(obj, path) -> None:
    """Write a ScalarGrid (float32), LabelMask (uint16) or VectorField (5-D float32)."""
    if isinstance(obj, VectorField):
        data = obj.vectors.astype("<f4")[:, :, :, None, :]
        hdr = _base_header(obj.geometry, (5,) + data.shape, np.dtype("<f4"),
                           obj.convention, INTENT_VECTOR)
    elif isinstance(obj, LabelMask):
        if obj.labels.size and obj.labels.max() > np.iinfo(np.uint16).max:
            raise NiftiError("label values exceed uint16")
        names = ";".join(f"{k}={v}" for k, v in sorted(obj.label_names.items()))
        descrip = f"labels:{names}"
        if len(descrip) > 79:
            descrip = "labels:"
        data = obj.labels.astype("<u2")
        hdr = _base_header(obj.geometry, (3,) + data.shape, np.dtype("<u2"), LABELS_INTENT,
                           descrip=descrip)
    elif isinstance(obj, ScalarGrid):
        data = obj.values.astype("<f4")
        hdr = _base_header(obj.geometry, (3,) + data.shape, np.dtype("<f4"), obj.kind)
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as NIfTI")
    _write(path, hdr, data)
