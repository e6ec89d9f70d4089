"""Minimal single-file NIfTI-1 reader/writer.

Supported subset: little-endian ``.nii`` with magic ``n+1``, ``dim[0] == 3``,
``vox_offset == 352`` and datatypes uint8 (2), int16 (4) and float32 (16).
Orientation is reduced to spacing (pixdim) and origin (qoffset); the
rotation part of qform/sform is written as identity and ignored on read.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .volume import Mask, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

DATATYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}


class NiftiError(ValueError):
    pass


def _build_header(dims, spacing, origin, code: int) -> bytes:
    d, h, w = dims
    sz, sy, sx = spacing
    oz, oy, ox = origin
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, DATATYPES[code].itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<h", hdr, 252, 1)  # qform_code
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)  # quatern b, c, d
    struct.pack_into("<3f", hdr, 268, ox, oy, oz)
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(v: Volume, path, datatype: str | None = None) -> None:
    """Write ``v`` as an uncompressed NIfTI-1 file.

    ``datatype`` defaults to uint8 for masks and float32 otherwise. int16
    values are rounded and must fit the int16 range.
    """
    if datatype is None:
        datatype = "uint8" if isinstance(v, Mask) else "float32"
    if datatype not in DATATYPE_CODES:
        raise NiftiError(f"unsupported datatype {datatype!r}")
    code = DATATYPE_CODES[datatype]
    dt = DATATYPES[code]
    data = np.asarray(v.data)
    if datatype == "float32":
        out = data.astype(dt)
    else:
        rounded = np.rint(data.astype(np.float64))
        info = np.iinfo(dt)
        if rounded.size and (rounded.min() < info.min or rounded.max() > info.max):
            raise NiftiError(f"values outside {datatype} range [{info.min}, {info.max}]")
        out = rounded.astype(dt)
    header = _build_header(v.dims, v.spacing, v.origin, code)
    with open(os.fspath(path), "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")
        # (z, y, x) C-order == NIfTI x-fastest order
        fh.write(np.ascontiguousarray(out).tobytes())


def read_nifti(path, kind: str = "auto") -> Volume:
    """Read a NIfTI-1 file into a :class:`Volume` or :class:`Mask`.

    ``kind`` is ``"volume"``, ``"mask"`` or ``"auto"`` (uint8 files whose
    values are all 0/1 become masks).
    """
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raise NiftiError("gzip-compressed NIfTI is not supported")
    if len(raw) < VOX_OFFSET:
        raise NiftiError("file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"not a little-endian NIfTI-1 header (sizeof_hdr={sizeof_hdr})")
    if raw[344:347] != b"n+1":
        raise NiftiError(f"unsupported magic {raw[344:348]!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError(f"only 3-d images are supported (dim[0]={dim[0]})")
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<2f", raw, 112)
    qoffset = struct.unpack_from("<3f", raw, 268)

    w, h, d = dim[1], dim[2], dim[3]
    if min(w, h, d) < 1:
        raise NiftiError(f"invalid dims {dim[1:4]}")
    dt = DATATYPES[code]
    offset = int(vox_offset)
    nbytes = w * h * d * dt.itemsize
    if len(raw) - offset != nbytes:
        raise NiftiError(f"data size mismatch: header implies {nbytes} bytes, file holds {len(raw) - offset}")
    arr = np.frombuffer(raw, dtype=dt, count=w * h * d, offset=offset).reshape(d, h, w)

    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    origin = (float(qoffset[2]), float(qoffset[1]), float(qoffset[0]))

    if slope == 0:
        slope = 1.0
    scaled = not (slope == 1.0 and inter == 0.0)

    if kind == "auto":
        kind = "mask" if code == 2 and not scaled and np.all(arr <= 1) else "volume"
    if kind == "mask":
        return Mask(arr, spacing, origin)
    if kind != "volume":
        raise ValueError(f"kind must be 'auto', 'volume' or 'mask', got {kind!r}")
    if scaled:
        data = arr.astype(np.float64) * float(slope) + float(inter)
    else:
        data = arr.astype(np.float32)
    return Volume(data, spacing, origin)
