"""NIfTI-1 reader and writer (.nii, .nii.gz, and .hdr/.img pairs on read).

Output is always little-endian float32, single file (``n+1``), with the
geometry stored in the sform.  Extension records are skipped on read.
"""

from __future__ import annotations

import gzip
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import MgaError
from .volume import Volume

HEADER_SIZE = 348

HEADER_FIELDS = [
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

HEADER_DTYPE = np.dtype(HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> (numpy type, bitpix)
DATATYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    8: (np.int32, 32),
    16: (np.float32, 32),
    64: (np.float64, 64),
}


class NiftiError(MgaError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedFile(NiftiError):
    pass


class DimOutOfRange(NiftiError, ValueError):
    pass


class IoFailure(NiftiError, OSError):
    pass


def _decompress(raw: bytes) -> bytes:
    try:
        return gzip.decompress(raw)
    except (EOFError, zlib.error, gzip.BadGzipFile, OSError) as exc:
        raise TruncatedFile(f"compressed stream is incomplete or corrupt: {exc}") from exc


def _load_bytes(path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:2] == b"\x1f\x8b":
        return _decompress(raw)
    return raw


def parse_header(raw: bytes):
    """Decode the 348-byte header, detecting byte order from ``sizeof_hdr``.

    Returns the header record and the byte-order character ('<' or '>').
    """
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    for endian in "<>":
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(endian))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            break
    else:
        raise BadMagic("sizeof_hdr is not 348 in either byte order")
    if hdr["magic"] not in (b"n+1", b"ni1"):
        raise BadMagic(f"unrecognised magic {bytes(hdr['magic'])!r}")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise DimOutOfRange(f"dim[0]={ndim} outside [1, 7]")
    if any(int(d) < 1 for d in hdr["dim"][1 : ndim + 1]):
        raise DimOutOfRange(f"non-positive dimension in {list(hdr['dim'][1:ndim + 1])}")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code}")
    if int(hdr["bitpix"]) != DATATYPES[code][1]:
        raise UnsupportedDatatype(f"bitpix {hdr['bitpix']} inconsistent with datatype {code}")
    return hdr, endian


def quaternion_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.abs(pixdim[1:4].copy())
    zooms[zooms == 0] = 1.0
    zooms[2] *= qfac
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def header_affine(hdr) -> np.ndarray:
    if int(hdr["sform_code"]) > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        return aff
    if int(hdr["qform_code"]) > 0:
        return quaternion_affine(hdr)
    zooms = np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64))
    zooms[zooms == 0] = 1.0
    return np.diag([*zooms, 1.0])


def _shape3(hdr) -> tuple:
    ndim = int(hdr["dim"][0])
    dims = [int(d) for d in hdr["dim"][1 : ndim + 1]]
    if any(d != 1 for d in dims[3:]):
        raise DimOutOfRange(f"only 3D volumes are supported, got dims {dims}")
    dims = (dims + [1, 1, 1])[:3]
    return tuple(dims)


def read_volume(path) -> Volume:
    """Read a NIfTI-1 file into a :class:`Volume`.

    Data are scaled by ``scl_slope``/``scl_inter`` when the slope is nonzero.
    """
    path = Path(path)
    raw = _load_bytes(path)
    hdr, endian = parse_header(raw)
    shape = _shape3(hdr)
    nptype, _ = DATATYPES[int(hdr["datatype"])]
    dtype = np.dtype(nptype).newbyteorder(endian)
    nbytes = int(np.prod(shape)) * dtype.itemsize

    if bytes(hdr["magic"]) == b"ni1":
        name = str(path)
        img = name[:-7] + ".img.gz" if name.endswith(".hdr.gz") else name[:-4] + ".img"
        if not os.path.exists(img) and img.endswith(".gz"):
            img = img[:-3]
        payload = _load_bytes(img)
        offset = int(hdr["vox_offset"])
    else:
        payload = raw
        offset = int(hdr["vox_offset"])
        if offset < HEADER_SIZE:
            offset = 352
    if len(payload) < offset + nbytes:
        raise TruncatedFile(f"expected {offset + nbytes} bytes, got {len(payload)}")

    flat = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = flat.reshape(shape, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope):
        if data.dtype == np.float64:
            data = data * slope + inter
        else:
            data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    elif data.dtype != np.float64:
        data = data.astype(np.float32)

    zooms = np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64))
    zooms[zooms == 0] = 1.0
    return Volume(np.ascontiguousarray(data), spacing=tuple(zooms), affine=header_affine(hdr))


def build_header(shape, spacing, affine) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *shape, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, *spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 2
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = b"n+1"
    return hdr


def encode_volume(v, gz: bool = False) -> bytes:
    if isinstance(v, Volume):
        data, spacing, affine = v.data, v.spacing, v.affine
    else:
        data = np.asarray(v)
        spacing, affine = (1.0, 1.0, 1.0), np.eye(4)
    if data.ndim != 3 or min(data.shape, default=0) < 1 or max(data.shape) > 32767:
        raise DimOutOfRange(f"cannot write volume of shape {data.shape}")
    hdr = build_header(data.shape, spacing, affine)
    body = np.asarray(data, dtype="<f4").tobytes(order="F")
    blob = hdr.tobytes() + b"\x00" * 4 + body
    if gz:
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    return blob


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_volume(v, path, gz: bool | None = None) -> None:
    """Write ``v`` as float32 NIfTI-1; gzip when ``gz`` or the name ends in .gz."""
    if gz is None:
        gz = str(path).endswith(".gz")
    atomic_write_bytes(path, encode_volume(v, gz=gz))
