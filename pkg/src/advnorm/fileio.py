"""Volume I/O: a portable raw format with a text sidecar header, and NIfTI-1.

Raw format: little-endian values, x-fastest ordering (x, then y, then z,
channel slowest), one ``.raw`` data file plus a ``.hdr`` text sidecar listing
shape, channels, spacing and dtype.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import LabeledVolume, Volume


class VolumeIOError(IOError):
    pass


_DTYPES = {"float32": "<f4", "uint8": "|u1", "int16": "<i2"}


# ---------------------------------------------------------------------------
# raw format
# ---------------------------------------------------------------------------

def write_raw(path, data: np.ndarray, spacing, dtype: str = "float32") -> None:
    """Write ``(C, X, Y, Z)`` data as <stem>.raw plus <stem>.hdr."""
    path = Path(path)
    if data.ndim == 3:
        data = data[None]
    if dtype not in _DTYPES:
        raise VolumeIOError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(np.transpose(data, (0, 3, 2, 1)).astype(_DTYPES[dtype]))
    path.with_suffix(".raw").write_bytes(arr.tobytes())
    shape = data.shape[1:]
    hdr = (
        f"shape: {shape[0]} {shape[1]} {shape[2]}\n"
        f"channels: {data.shape[0]}\n"
        f"spacing: {spacing[0]} {spacing[1]} {spacing[2]}\n"
        f"dtype: {dtype}\n"
        "order: x-fastest\n"
    )
    path.with_suffix(".hdr").write_text(hdr)


def read_raw_array(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    hdr_path = path.with_suffix(".hdr")
    if not hdr_path.exists():
        raise VolumeIOError(f"missing sidecar header {hdr_path}")
    fields = {}
    for line in hdr_path.read_text().splitlines():
        if ":" in line:
            key, val = line.split(":", 1)
            fields[key.strip()] = val.strip()
    try:
        shape = tuple(int(x) for x in fields["shape"].split())
        channels = int(fields.get("channels", "1"))
        spacing = tuple(float(x) for x in fields["spacing"].split())
        dtype = fields.get("dtype", "float32")
    except (KeyError, ValueError) as exc:
        raise VolumeIOError(f"malformed header {hdr_path}: {exc}") from exc
    if dtype not in _DTYPES:
        raise VolumeIOError(f"unsupported dtype {dtype!r} in {hdr_path}")
    raw = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=_DTYPES[dtype])
    expected = channels * int(np.prod(shape))
    if raw.size != expected:
        raise VolumeIOError(
            f"{path}: expected {expected} values for shape {shape} x {channels} "
            f"channels, found {raw.size}")
    arr = raw.reshape((channels, shape[2], shape[1], shape[0]))
    return np.transpose(arr, (0, 3, 2, 1)).copy(), spacing


def write_volume_raw(path, v: Volume) -> None:
    write_raw(path, v.data, v.spacing, "float32")


def read_volume_raw(path) -> Volume:
    data, spacing = read_raw_array(path)
    return Volume(data.astype(np.float32), spacing)


def write_labels_raw(path, lv: LabeledVolume) -> None:
    write_raw(path, lv.labels[None], lv.volume.spacing, "uint8")


def read_labeled_raw(vol_path, label_path) -> LabeledVolume:
    vol = read_volume_raw(vol_path)
    labels, _ = read_raw_array(label_path)
    return LabeledVolume(vol, labels[0].astype(np.uint8))


# ---------------------------------------------------------------------------
# NIfTI-1 (single-file .nii / .nii.gz)
# ---------------------------------------------------------------------------

_NII_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_NII_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16,
              np.dtype(np.float64): 64}


def _nii_open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def write_nifti(path, data: np.ndarray, spacing) -> None:
    """Write ``(C, X, Y, Z)`` or ``(X, Y, Z)`` data as a NIfTI-1 file.

    Multi-channel data is stored along the 4th NIfTI dimension.
    """
    if data.ndim == 3:
        data = data[None]
    channels = data.shape[0]
    shape = data.shape[1:]
    arr = np.transpose(data, (1, 2, 3, 0))  # (X, Y, Z, C): dim1 fastest on disk
    if arr.dtype not in _NII_CODES:
        arr = arr.astype(np.float32)
    code = _NII_CODES[arr.dtype]
    bitpix = arr.dtype.itemsize * 8
    ndim = 3 if channels == 1 else 4
    dim = [ndim, shape[0], shape[1], shape[2], channels, 1, 1, 1]
    pixdim = [0.0, float(spacing[0]), float(spacing[1]), float(spacing[2]), 1.0, 0, 0, 0]
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)                       # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, *dim)                    # dim
    struct.pack_into("<h", hdr, 70, code)                     # datatype
    struct.pack_into("<h", hdr, 72, bitpix)                   # bitpix
    struct.pack_into("<8f", hdr, 76, *pixdim)                 # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)                   # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                     # scl_slope
    struct.pack_into("<h", hdr, 252, 1)                       # qform_code=scanner? keep 1
    struct.pack_into("<3f", hdr, 280, 0.0, 0.0, 0.0)          # qoffset
    struct.pack_into("<4f", hdr, 256, 0.0, 0.0, 0.0, 1.0)     # quatern b,c,d + qfac slot
    hdr[344:348] = b"n+1\x00"
    with _nii_open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")                          # no extensions
        f.write(np.asfortranarray(arr).tobytes(order="F"))


def read_nifti(path) -> Volume:
    with _nii_open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 352:
        raise VolumeIOError(f"{path}: too short for a NIfTI-1 file")
    (size,) = struct.unpack_from("<i", blob, 0)
    if size != 348:
        raise VolumeIOError(f"{path}: unsupported NIfTI header (sizeof_hdr={size})")
    dim = struct.unpack_from("<8h", blob, 40)
    (code,) = struct.unpack_from("<h", blob, 70)
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    (slope,) = struct.unpack_from("<f", blob, 112)
    (inter,) = struct.unpack_from("<f", blob, 116)
    if code not in _NII_DTYPES:
        raise VolumeIOError(f"{path}: unsupported NIfTI datatype code {code}")
    ndim = dim[0]
    shape = tuple(max(1, d) for d in dim[1:1 + max(ndim, 3)])
    nx, ny, nz = shape[0], shape[1], shape[2]
    channels = shape[3] if ndim >= 4 else 1
    dtype = _NII_DTYPES[code]
    count = nx * ny * nz * channels
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=int(vox_offset))
    arr = data.reshape((nx, ny, nz, channels), order="F").astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope if slope != 0.0 else 1.0) + inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume(np.transpose(arr, (3, 0, 1, 2)).copy(), spacing)


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

def write_manifest(path, rows) -> None:
    """Rows of (volume path, label path, domain id, split, subject id)."""
    lines = ["# volume\tlabels\tdomain\tsplit\tsubject"]
    for vol, lab, domain, split, subject in rows:
        lines.append(f"{vol}\t{lab}\t{int(domain)}\t{split}\t{subject}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise VolumeIOError(f"malformed manifest line: {line!r}")
        rows.append((parts[0], parts[1], int(parts[2]), parts[3], parts[4]))
    return rows
