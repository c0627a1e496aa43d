"""Single-file NIfTI-1 reader/writer for the metric pipeline.

Supports the subset the pipeline needs: little-endian single-file ``.nii``
(magic ``n+1\\0``), 3-D or 4-D volumes, datatypes uint8/int16/float32/float64,
intensity scaling applied on read. Orientation metadata (qform/sform) is
ignored: all volumes are assumed co-registered on a common grid.

Voxel arrays use the canonical NIfTI index order, ``data[x, y, z]`` or
``data[x, y, z, t]`` with x fastest on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    BigEndian,
    InvalidHeader,
    ShapeMismatch,
    SizeMismatch,
    TruncatedData,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes for the supported subset
_CODE_TO_DTYPE = {2: "uint8", 4: "int16", 16: "float32", 64: "float64"}
_DTYPE_TO_CODE = {v: k for k, v in _CODE_TO_DTYPE.items()}
_BITPIX = {"uint8": 8, "int16": 16, "float32": 32, "float64": 64}

# mm for space, seconds for time
_XYZT_UNITS = 2 | 8


@dataclass
class VolumeHeader:
    """Canonical header fields of a supported NIfTI-1 volume."""

    dims: tuple[int, ...]
    voxel_size: tuple[float, float, float]
    datatype: str = "float32"
    scl_slope: float = 1.0
    scl_inter: float = 0.0

    def validate(self):
        if len(self.dims) not in (3, 4):
            raise InvalidHeader(f"expected 3 or 4 dims, got {len(self.dims)}")
        if any(int(d) < 1 for d in self.dims):
            raise InvalidHeader(f"all extents must be >= 1, got {self.dims}")
        if any(not (s > 0) for s in self.voxel_size):
            raise InvalidHeader(f"voxel sizes must be > 0, got {self.voxel_size}")
        if self.datatype not in _DTYPE_TO_CODE:
            raise UnsupportedDatatype(f"unsupported datatype {self.datatype!r}")


@dataclass
class DwiVolume:
    """A 4-D diffusion-weighted series on a regular grid."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeMismatch(f"DwiVolume needs 4-D data, got {self.data.ndim}-D")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_measurements(self) -> int:
        return self.data.shape[3]


def header_for(data: np.ndarray, voxel_size=(2.0, 2.0, 2.0)) -> VolumeHeader:
    """Build a header describing ``data`` as written by :func:`write_nifti`."""
    return VolumeHeader(
        dims=tuple(int(d) for d in data.shape),
        voxel_size=tuple(float(v) for v in voxel_size),
        datatype=str(data.dtype),
    )


def read_nifti(path) -> tuple[VolumeHeader, np.ndarray]:
    """Read a single-file little-endian NIfTI-1 volume.

    Parameters
    ----------
    path : str or Path
        File to read.

    Returns
    -------
    header : VolumeHeader
        Canonical header fields. ``scl_slope == 0`` on disk is normalized
        to slope 1, intercept 0.
    data : numpy.ndarray
        Voxel values in x-fastest index order. Returned in the on-disk
        dtype when no intensity scaling applies, as float64 otherwise
        (scaling is applied, never re-emitted).

    Raises
    ------
    BadMagic, BigEndian, UnsupportedDatatype, InvalidHeader, TruncatedData
    """
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    if raw[344:348] != MAGIC:
        raise BadMagic(f"{path}: magic {raw[344:348]!r} is not a single-file NIfTI-1")

    (sizeof_hdr_le,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr_le != HEADER_SIZE:
        (sizeof_hdr_be,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr_be == HEADER_SIZE:
            raise BigEndian(f"{path}: big-endian NIfTI-1 is not supported")
        raise BadMagic(f"{path}: sizeof_hdr = {sizeof_hdr_le}, header corrupt")

    dim = struct.unpack_from("<8h", raw, 40)
    (datatype_code,) = struct.unpack_from("<h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)

    if datatype_code not in _CODE_TO_DTYPE:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype_code} unsupported")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise InvalidHeader(f"{path}: dim[0] = {ndim}, only 3-D/4-D supported")
    dims = tuple(int(d) for d in dim[1 : 1 + ndim])

    if scl_slope == 0.0:
        scl_slope, scl_inter = 1.0, 0.0

    header = VolumeHeader(
        dims=dims,
        voxel_size=tuple(float(p) for p in pixdim[1:4]),
        datatype=_CODE_TO_DTYPE[datatype_code],
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
    )
    header.validate()

    offset = int(round(vox_offset))
    if offset < HEADER_SIZE:
        raise InvalidHeader(f"{path}: vox_offset {offset} < {HEADER_SIZE}")

    dtype = np.dtype(header.datatype).newbyteorder("<")
    n_voxels = int(np.prod(dims))
    needed = n_voxels * dtype.itemsize
    payload = raw[offset : offset + needed]
    if len(payload) < needed:
        raise TruncatedData(
            f"{path}: header declares {needed} data bytes, found {len(payload)}"
        )

    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape(dims, order="F")
    if (header.scl_slope, header.scl_inter) != (1.0, 0.0):
        data = data.astype(np.float64) * header.scl_slope + header.scl_inter
    return header, data


def write_nifti(header: VolumeHeader, data: np.ndarray, path) -> None:
    """Write a single-file little-endian NIfTI-1 volume.

    The header is emitted with slope 1 / intercept 0: values passed in are
    stored as-is. ``data`` must match ``header.dims`` and
    ``header.datatype`` exactly.

    Raises
    ------
    SizeMismatch
        If the data shape disagrees with the header extents.
    InvalidHeader, UnsupportedDatatype
        If the header violates format invariants.
    """
    header.validate()
    data = np.asarray(data)
    if tuple(data.shape) != tuple(header.dims):
        raise SizeMismatch(
            f"data shape {tuple(data.shape)} != header dims {tuple(header.dims)}"
        )
    if str(data.dtype) != header.datatype:
        raise InvalidHeader(
            f"data dtype {data.dtype} != header datatype {header.datatype}"
        )

    buf = bytearray(VOX_OFFSET)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    dim = [len(header.dims)] + [int(d) for d in header.dims]
    dim += [1] * (8 - len(dim))
    struct.pack_into("<8h", buf, 40, *dim)
    struct.pack_into("<h", buf, 70, _DTYPE_TO_CODE[header.datatype])
    struct.pack_into("<h", buf, 72, _BITPIX[header.datatype])
    pixdim = [1.0] + [float(v) for v in header.voxel_size]
    pixdim += [1.0] * (8 - len(pixdim))
    struct.pack_into("<8f", buf, 76, *pixdim)
    struct.pack_into("<f", buf, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", buf, 112, 1.0, 0.0)
    struct.pack_into("<B", buf, 123, _XYZT_UNITS)
    descrip = b"cordmetrics"
    buf[148 : 148 + len(descrip)] = descrip
    buf[344:348] = MAGIC
    # bytes 348..352 stay zero: no header extensions

    dtype = np.dtype(header.datatype).newbyteorder("<")
    payload = np.ascontiguousarray(data.astype(dtype, copy=False)).tobytes(order="F")

    with open(path, "wb") as fh:
        fh.write(bytes(buf))
        fh.write(payload)


def save_volume(path, data: np.ndarray, voxel_size=(2.0, 2.0, 2.0)) -> None:
    """Write ``data`` with a header derived from its shape and dtype."""
    write_nifti(header_for(data, voxel_size), data, path)


def load_volume(path) -> np.ndarray:
    """Read a volume, discarding the header."""
    return read_nifti(path)[1]
