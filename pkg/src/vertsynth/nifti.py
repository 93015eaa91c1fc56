"""Minimal NIfTI-1 reader/writer for single-file .nii / .nii.gz volumes.

Covers exactly what the pipeline stores: 3-D arrays (float32 CT, integer
labels), voxel spacing in pixdim, data laid out in Fortran order as the
format requires. Compressed files are written with a fixed gzip mtime so
byte-identical reruns stay byte-identical.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352.0
MAGIC = b"n+1\x00"

# NIfTI datatype codes we support.
_DTYPE_TO_CODE = {
    np.dtype(np.uint8): (2, 8),
    np.dtype(np.int16): (4, 16),
    np.dtype(np.int32): (8, 32),
    np.dtype(np.float32): (16, 32),
    np.dtype(np.float64): (64, 64),
}
_CODE_TO_DTYPE = {code: dt for dt, (code, _) in _DTYPE_TO_CODE.items()}


class NiftiError(IOError):
    """Malformed, missing, or unsupported NIfTI content."""


class _ClosingGzip(gzip.GzipFile):
    """GzipFile that also closes the underlying raw file object."""

    def close(self):
        raw = self.fileobj if self.mode == gzip.READ else self.myfileobj or self.fileobj
        try:
            super().close()
        finally:
            if raw is not None:
                raw.close()


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        # Empty filename + mtime=0 keep compressed bytes deterministic.
        return _ClosingGzip(filename="", mode=mode, fileobj=open(path, mode), mtime=0)
    return open(path, mode)


def write_nifti(path, data: np.ndarray, spacing) -> None:
    """Write a 3-D array with per-axis spacing (mm/voxel) to ``path``."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"expected a 3-D array, got shape {data.shape}")
    if data.dtype not in _DTYPE_TO_CODE:
        raise NiftiError(f"unsupported dtype {data.dtype}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise NiftiError(f"spacing must be 3 positive floats, got {spacing}")

    code, bitpix = _DTYPE_TO_CODE[data.dtype]
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, VOX_OFFSET)
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    header[123] = 2  # xyzt_units: millimetres
    # sform: diagonal spacing, so standard viewers get the geometry right.
    struct.pack_into("<h", header, 254, 1)
    struct.pack_into("<4f", header, 280, spacing[0], 0, 0, 0)
    struct.pack_into("<4f", header, 296, 0, spacing[1], 0, 0)
    struct.pack_into("<4f", header, 312, 0, 0, spacing[2], 0)
    header[344:348] = MAGIC

    with _open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * int(VOX_OFFSET - HEADER_SIZE))
        fh.write(np.asfortranarray(data).tobytes(order="F"))


def read_nifti(path):
    """Read a 3-D NIfTI-1 file; returns ``(data, spacing)``."""
    path = Path(path)
    if not path.exists():
        raise NiftiError(f"no such file: {path}")
    with _open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise NiftiError(f"truncated header in {path}")
        if header[344:348] != MAGIC:
            raise NiftiError(f"not a single-file NIfTI-1 image: {path}")
        ndim = struct.unpack_from("<h", header, 40)[0]
        if ndim != 3:
            raise NiftiError(f"expected 3-D image, header says dim[0]={ndim}")
        shape = struct.unpack_from("<3h", header, 42)
        code = struct.unpack_from("<h", header, 70)[0]
        if code not in _CODE_TO_DTYPE:
            raise NiftiError(f"unsupported datatype code {code}")
        dtype = _CODE_TO_DTYPE[code]
        pixdim = struct.unpack_from("<8f", header, 76)
        vox_offset = struct.unpack_from("<f", header, 108)[0]
        fh.read(int(vox_offset) - HEADER_SIZE)
        n = int(np.prod(shape))
        raw = fh.read(n * dtype.itemsize)
        if len(raw) != n * dtype.itemsize:
            raise NiftiError(f"truncated data in {path}")
    data = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
    data = data.reshape(shape, order="F")
    spacing = tuple(float(p) for p in pixdim[1:4])
    return np.ascontiguousarray(data), spacing
