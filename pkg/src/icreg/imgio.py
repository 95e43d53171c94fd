"""NIfTI-1 subset I/O for volumes and displacement fields, plus landmark CSV.

Single-file `.nii` / `.nii.gz` only (magic "n+1\\0"); header/data pairs are
rejected. Supported payload types: uint8, int16, float32, float64. Byte order
is detected from the header-size field. scl_slope/scl_inter are applied when
the slope is nonzero. qform/sform matrices are preserved on read but never
applied; all computation happens in voxel space and only pixdim is used (for
the mm scale). Nonpositive pixdim entries fall back to 1.0.

A 4th dimension > 1 becomes channels. Displacement fields are stored as 5-D
images with dim = [5, nx, ny, nz, 1, 3], vector intent, float32, components
in voxel units ordered (x, y, z); the convention is spelled out in the
header's description field. Writes are always little-endian float32 with a
zeroed gzip timestamp, so identical inputs produce bitwise-identical files.
"""

from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass

import numpy as np

from .landmarks import Landmark, LandmarkSet
from .transform import DisplacementField
from .volume import Volume

HEADER_BYTES = 348
VOX_OFFSET = 352.0
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
INTENT_VECTOR = 1007
MAX_VOXELS = 2**31
FIELD_DESCRIP = b"displacement field, voxel units, components x,y,z"

_DATATYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}
DT_FLOAT32 = 16

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
    for spec in _HEADER_FIELDS:
        name, fmt = spec[0], spec[1]
        fmt = fmt if fmt.startswith(("S", "u1")) else byteorder + fmt
        fields.append((name, fmt) if len(spec) == 2 else (name, fmt, spec[2]))
    return np.dtype(fields)


_LE_HEADER = _header_dtype("<")
assert _LE_HEADER.itemsize == HEADER_BYTES


@dataclass(frozen=True)
class NiftiHeader:
    dim: tuple[int, ...]
    datatype: int
    pixdim: tuple[float, ...]
    scl_slope: float
    scl_inter: float
    vox_offset: int
    intent_code: int
    descrip: bytes
    byteorder: str


def _read_raw(path: str) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        rest = fh.read()
    raw = head + rest
    if head == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, path: str) -> NiftiHeader:
    if len(raw) < HEADER_BYTES:
        raise ValueError(f"{path}: file shorter than a {HEADER_BYTES}-byte header")
    size_le = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if size_le == HEADER_BYTES:
        byteorder = "<"
    elif int(np.frombuffer(raw, dtype=">i4", count=1)[0]) == HEADER_BYTES:
        byteorder = ">"
    else:
        raise ValueError(f"{path}: header size field is {size_le}, not a NIfTI-1 file")
    hdr = np.frombuffer(raw, dtype=_header_dtype(byteorder), count=1)[0]
    # numpy strips trailing NULs from S4 scalars, so pad back to 4 bytes
    magic = bytes(hdr["magic"]).ljust(4, b"\x00")
    if magic == MAGIC_PAIR:
        raise ValueError(f"{path}: header/data pair files are not supported")
    if magic != MAGIC_SINGLE:
        raise ValueError(f"{path}: bad magic {magic!r}")
    ndim = int(hdr["dim"][0])
    if ndim < 3 or ndim > 5:
        raise ValueError(f"{path}: unsupported number of dimensions {ndim}")
    dim = tuple(int(d) for d in hdr["dim"][: ndim + 1])
    if any(d < 1 for d in dim[1:]):
        raise ValueError(f"{path}: nonpositive dim entries {dim}")
    total = int(np.prod([np.int64(d) for d in dim[1:]]))
    if total > MAX_VOXELS:
        raise ValueError(f"{path}: {total} voxels exceeds the {MAX_VOXELS} limit")
    dtcode = int(hdr["datatype"])
    if dtcode not in _DATATYPES:
        raise ValueError(f"{path}: unsupported datatype code {dtcode}")
    offset = int(hdr["vox_offset"])
    if offset < HEADER_BYTES:
        raise ValueError(f"{path}: vox_offset {offset} overlaps the header")
    return NiftiHeader(
        dim=dim,
        datatype=dtcode,
        pixdim=tuple(float(p) for p in hdr["pixdim"]),
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        vox_offset=offset,
        intent_code=int(hdr["intent_code"]),
        descrip=bytes(hdr["descrip"]),
        byteorder=byteorder,
    )


def _read_payload(raw: bytes, hdr: NiftiHeader, path: str) -> np.ndarray:
    """Decode the voxel block as a C-ordered array, slowest dimension first."""
    dt = np.dtype(hdr.byteorder + _DATATYPES[hdr.datatype])
    count = int(np.prod(hdr.dim[1:]))
    nbytes = count * dt.itemsize
    avail = len(raw) - hdr.vox_offset
    if avail < nbytes:
        raise ValueError(f"{path}: truncated payload, expected {nbytes} bytes, got {avail}")
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=hdr.vox_offset)
    data = flat.reshape(tuple(reversed(hdr.dim[1:]))).astype(np.float64)
    if hdr.scl_slope != 0.0 and (hdr.scl_slope, hdr.scl_inter) != (1.0, 0.0):
        data = data * hdr.scl_slope + hdr.scl_inter
    return data


def _spacing(hdr: NiftiHeader) -> tuple[float, float, float]:
    px = hdr.pixdim[1:4]
    return tuple(p if p > 0 else 1.0 for p in px)


def read_nifti(path: str) -> Volume:
    """Read a 3-D or 4-D image; the 4th dimension (> 1) becomes channels."""
    raw = _read_raw(path)
    hdr = _parse_header(raw, path)
    ndim = hdr.dim[0]
    if ndim == 5:
        raise ValueError(
            f"{path}: 5-D image (a displacement field?); use read_field"
        )
    data = _read_payload(raw, hdr, path)
    if ndim == 3:
        data = data[np.newaxis]
    return Volume(data, spacing=_spacing(hdr))


def read_field(path: str) -> DisplacementField:
    """Read a displacement field stored as dim = [5, nx, ny, nz, 1, 3]."""
    raw = _read_raw(path)
    hdr = _parse_header(raw, path)
    if hdr.dim[0] != 5:
        raise ValueError(f"{path}: expected a 5-D field file, got {hdr.dim[0]}-D")
    if hdr.dim[4] != 1 or hdr.dim[5] != 3:
        raise ValueError(
            f"{path}: field layout must be [nx, ny, nz, 1, 3], got dim {hdr.dim[1:]}"
        )
    data = _read_payload(raw, hdr, path)  # (3, 1, nz, ny, nx)
    return DisplacementField(data[:, 0], spacing=_spacing(hdr))


def _blank_header() -> np.ndarray:
    hdr = np.zeros((), dtype=_LE_HEADER)
    hdr["sizeof_hdr"] = HEADER_BYTES
    hdr["regular"] = b"r"
    hdr["magic"] = MAGIC_SINGLE
    hdr["vox_offset"] = VOX_OFFSET
    hdr["datatype"] = DT_FLOAT32
    hdr["bitpix"] = 32
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    return hdr


def _write_bytes(path: str, blob: bytes) -> None:
    if str(path).endswith(".gz"):
        buf = io.BytesIO()
        # fixed mtime keeps identical runs bitwise identical
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
            gz.write(blob)
        blob = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(blob)


def write_nifti(v: Volume | DisplacementField, path: str) -> None:
    """Write a volume (3-D/4-D) or displacement field (5-D) as float32."""
    hdr = _blank_header()
    dim = np.ones(8, dtype=np.int16)
    if isinstance(v, Volume):
        nx, ny, nz = v.dims
        dim[0] = 4 if v.channels > 1 else 3
        dim[1:5] = (nx, ny, nz, v.channels)
        payload = v.data
    elif isinstance(v, DisplacementField):
        nx, ny, nz = v.dims
        dim[0] = 5
        dim[1:6] = (nx, ny, nz, 1, 3)
        hdr["intent_code"] = INTENT_VECTOR
        hdr["descrip"] = FIELD_DESCRIP
        payload = v.components[:, np.newaxis]
    else:
        raise TypeError(f"cannot write {type(v).__name__} as NIfTI")
    hdr["dim"] = dim
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = v.spacing
    pixdim[4:] = 1.0
    hdr["pixdim"] = pixdim
    blob = hdr.tobytes() + b"\x00" * 4 + payload.astype("<f4").tobytes()
    _write_bytes(path, blob)


LANDMARK_HEADER = ("Landmark", "X", "Y", "Z")


def read_landmarks(path: str) -> LandmarkSet:
    """Parse a landmark CSV: header `Landmark,X,Y,Z`, one point per line.

    Coordinates are 0-based voxel indices; 1-based sources must be shifted by
    the caller. Blank lines are ignored; malformed lines report their number.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    header_index = None
    entries: list[Landmark] = []
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        cells = [c.strip() for c in row]
        if header_index is None:
            if tuple(cells) != LANDMARK_HEADER:
                raise ValueError(
                    f"{path}: line {lineno}: expected header "
                    f"{','.join(LANDMARK_HEADER)!r}, got {','.join(cells)!r}"
                )
            header_index = lineno
            continue
        if len(cells) != 4:
            raise ValueError(f"{path}: line {lineno}: expected 4 fields, got {len(cells)}")
        try:
            lm = Landmark(cells[0], float(cells[1]), float(cells[2]), float(cells[3]))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from exc
        entries.append(lm)
    if header_index is None:
        raise ValueError(f"{path}: missing header line {','.join(LANDMARK_HEADER)!r}")
    try:
        return LandmarkSet(tuple(entries))
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def write_landmarks(lms: LandmarkSet, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LANDMARK_HEADER)
        for lm in lms:
            writer.writerow([lm.id, repr(lm.x), repr(lm.y), repr(lm.z)])
