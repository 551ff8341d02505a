"""Minimal single-file NIfTI-1 reader/writer.

Only the little-endian ``n+1`` single-file form is handled. Orientation
fields (qform/sform) are parsed but not applied; the package works in voxel
coordinates and keeps spacing from pixdim. Files ending in ``.gz`` are
(de)compressed transparently, with a zeroed gzip mtime so identical data
produces identical bytes.
"""
from __future__ import annotations

import gzip
import struct

import numpy as np

from .volume import LabelMask, TrunkMask, Volume

__all__ = [
    "NiftiError",
    "UnsupportedNiftiError",
    "TruncatedNiftiError",
    "read_nifti",
    "read_label_mask",
    "read_trunk_mask",
    "write_nifti",
]


class NiftiError(ValueError):
    """Malformed NIfTI file."""


class UnsupportedNiftiError(NiftiError):
    """Well-formed but outside the supported subset."""


class TruncatedNiftiError(NiftiError):
    """File shorter than its declared data extent."""


HEADER_SIZE = 348
# header + the mandatory 4-byte extension indicator
DATA_OFFSET = 352

_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

# datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    512: np.dtype("<u2"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

# struct layout of the 348-byte header, little-endian
_HDR_FMT = "<i10s18sihcc8h3f4h8ffffhcc4f2i80s24s2h3f3f4f4f4f16s4s"
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE


def _open_read(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(path):
    with _open_read(path) as fh:
        raw = fh.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise TruncatedNiftiError(f"{path}: only {len(raw)} header bytes")
        fields = struct.unpack(_HDR_FMT, raw)
        hdr = {
            "sizeof_hdr": fields[0],
            "dim": fields[7:15],
            "datatype": fields[19],
            "bitpix": fields[20],
            "pixdim": fields[22:30],
            "vox_offset": fields[30],
            "scl_slope": fields[31],
            "scl_inter": fields[32],
            "magic": fields[-1],
        }
        if hdr["sizeof_hdr"] != HEADER_SIZE:
            swapped = struct.unpack(">i", raw[:4])[0]
            if swapped == HEADER_SIZE:
                raise UnsupportedNiftiError(
                    f"{path}: big-endian (byte-swapped) file; only little-endian is supported"
                )
            raise NiftiError(
                f"{path}: bad sizeof_hdr {hdr['sizeof_hdr']} (expected {HEADER_SIZE})"
            )
        if hdr["magic"] == _MAGIC_PAIR:
            raise UnsupportedNiftiError(
                f"{path}: two-file (hdr/img) form is not supported"
            )
        if hdr["magic"] != _MAGIC_SINGLE:
            raise NiftiError(f"{path}: bad magic {hdr['magic']!r}")

        ndim = hdr["dim"][0]
        if not 1 <= ndim <= 7:
            raise NiftiError(f"{path}: bad dim[0] = {ndim}")
        shape = tuple(int(d) for d in hdr["dim"][1 : 1 + ndim])
        if any(d < 1 for d in shape):
            raise NiftiError(f"{path}: non-positive dimension in {shape}")

        if hdr["datatype"] not in _DTYPES:
            raise UnsupportedNiftiError(
                f"{path}: unsupported datatype code {hdr['datatype']}"
            )
        dtype = _DTYPES[hdr["datatype"]]
        if hdr["bitpix"] != dtype.itemsize * 8:
            raise NiftiError(
                f"{path}: bitpix {hdr['bitpix']} does not match datatype"
            )

        offset = int(round(hdr["vox_offset"]))
        if offset < HEADER_SIZE:
            raise NiftiError(f"{path}: vox_offset {offset} below header size")
        fh.seek(offset)
        count = int(np.prod(shape, dtype=np.int64))
        payload = fh.read(count * dtype.itemsize)
        if len(payload) < count * dtype.itemsize:
            raise TruncatedNiftiError(
                f"{path}: {len(payload)} data bytes, expected {count * dtype.itemsize}"
            )
    return hdr, shape, dtype, payload


def _read_array(path):
    """Return (array indexed [x, y, z, ...], spacing) with scaling applied."""
    hdr, shape, dtype, payload = _read_header(path)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    # drop trailing singleton dims (e.g. dim[0]=5 vector storage)
    while arr.ndim > 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0.0 and not np.isnan(slope) and (slope, inter) != (1.0, 0.0):
        arr = arr * np.float32(slope) + np.float32(inter)
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    if any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise NiftiError(f"{path}: non-positive pixdim {spacing}")
    return arr, spacing


def read_nifti(path) -> Volume:
    """Read a 3-D scalar volume, converting to float32."""
    arr, spacing = _read_array(path)
    if arr.ndim != 3:
        raise UnsupportedNiftiError(
            f"{path}: expected a 3-D volume, got shape {arr.shape}"
        )
    return Volume(np.ascontiguousarray(arr, dtype=np.float32), spacing)


def read_label_mask(path) -> LabelMask:
    arr, spacing = _read_array(path)
    if arr.ndim != 3:
        raise UnsupportedNiftiError(
            f"{path}: expected a 3-D label map, got shape {arr.shape}"
        )
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.allclose(arr, rounded, atol=1e-3):
            raise NiftiError(f"{path}: label map holds non-integral values")
        arr = rounded
    return LabelMask(np.ascontiguousarray(arr).astype(np.int64), spacing)


def read_trunk_mask(path) -> TrunkMask:
    arr, spacing = _read_array(path)
    if arr.ndim != 3:
        raise UnsupportedNiftiError(
            f"{path}: expected a 3-D mask, got shape {arr.shape}"
        )
    return TrunkMask(np.asarray(arr) != 0, spacing)


def _pack_header(shape, spacing, datatype_code) -> bytes:
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    pixdim = [1.0] + list(spacing) + [1.0] * (7 - len(spacing))
    dtype = _DTYPES[datatype_code]
    sx, sy, sz = (float(s) for s in spacing[:3])
    fields = (
        HEADER_SIZE,            # sizeof_hdr
        b"", b"",               # data_type, db_name (unused legacy)
        0, 0, b"r", b"\x00",    # extents, session_error, regular, dim_info
        *[int(d) for d in dim],
        0.0, 0.0, 0.0,          # intent_p1..p3
        0, datatype_code, dtype.itemsize * 8, 0,  # intent_code, datatype, bitpix, slice_start
        *[float(p) for p in pixdim],
        float(DATA_OFFSET),     # vox_offset
        1.0, 0.0,               # scl_slope, scl_inter
        0, b"\x00", b"\x02",    # slice_end, slice_code, xyzt_units (mm)
        0.0, 0.0, 0.0, 0.0,     # cal_max, cal_min, slice_duration, toffset
        0, 0,                   # glmax, glmin
        b"regbench", b"",       # descrip, aux_file
        0, 1,                   # qform_code, sform_code
        0.0, 0.0, 0.0,          # quatern_b/c/d
        0.0, 0.0, 0.0,          # qoffset_x/y/z
        sx, 0.0, 0.0, 0.0,      # srow_x
        0.0, sy, 0.0, 0.0,      # srow_y
        0.0, 0.0, sz, 0.0,      # srow_z
        b"",                    # intent_name
        _MAGIC_SINGLE,
    )
    return struct.pack(_HDR_FMT, *fields)


def _write_array(path, arr: np.ndarray, spacing, datatype_code) -> None:
    dtype = _DTYPES[datatype_code]
    buf = bytearray()
    buf += _pack_header(arr.shape, spacing, datatype_code)
    buf += b"\x00\x00\x00\x00"  # no extensions
    buf += np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes(order="F")
    if str(path).endswith(".gz"):
        with open(path, "wb") as fh:
            # mtime pinned so repeated writes are byte-identical
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(bytes(buf))
    else:
        with open(path, "wb") as fh:
            fh.write(bytes(buf))


def write_nifti(obj, path) -> None:
    """Write a Volume (float32), LabelMask (uint16) or TrunkMask (uint8)."""
    if isinstance(obj, Volume):
        _write_array(path, obj.data, obj.spacing, 16)
    elif isinstance(obj, LabelMask):
        _write_array(path, obj.labels, obj.spacing, 512)
    elif isinstance(obj, TrunkMask):
        _write_array(path, obj.mask.astype(np.uint8), obj.spacing, 2)
    else:
        raise TypeError(f"cannot write object of type {type(obj).__name__}")
