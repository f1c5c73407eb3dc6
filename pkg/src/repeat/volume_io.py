"""Volumes with physical geometry and their NIfTI-1 serialization.

Arrays are indexed ``data[i, j, k]`` with ``i`` the fastest-varying axis on
disk, so array axis ``a`` is NIfTI ``dim[a + 1]``.  World coordinates are
millimetres::

    world = direction @ (spacing * index) + origin
"""
from __future__ import annotations

import enum
import gzip
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import (
    GeometryMismatch,
    IoFailure,
    MalformedField,
    MalformedHeader,
    MaskValueWarning,
    UnsupportedDatatype,
)

__all__ = [
    "Kind",
    "Geometry",
    "ImageVolume",
    "DeformationField",
    "JacobianField",
    "read_nifti",
    "write_nifti",
    "read_field",
    "write_field",
    "voxel_to_world",
    "world_to_voxel",
]

PathLike = Union[str, Path]

AIR_HU = -1024.0

HEADER_DTYPE = np.dtype([
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
])
assert HEADER_DTYPE.itemsize == 348

DT_UINT8, DT_INT16, DT_FLOAT32, DT_FLOAT64 = 2, 4, 16, 64
_READ_DTYPES = {
    DT_UINT8: np.dtype("u1"),
    DT_INT16: np.dtype("i2"),
    DT_FLOAT32: np.dtype("f4"),
    DT_FLOAT64: np.dtype("f8"),
}
INTENT_VECTOR = 1007
XYZT_MM = 2

# Comment extension (ecode 6) carrying float64 geometry; the sform stores
# float32 only, which cannot hold arbitrary origins to 1e-6 mm.
_ECODE_COMMENT = 6
_GEOMETRY_TAG = b"repeat-geometry:"


class Kind(enum.Enum):
    INTENSITY = "intensity"
    MASK = "mask"


@dataclass(frozen=True)
class Geometry:
    """Voxel grid placement in world space."""

    dims: Tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = np.array(self.spacing, dtype=float).reshape(3)
        origin = np.array(self.origin, dtype=float).reshape(3)
        direction = np.array(self.direction, dtype=float).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 2:
            raise GeometryMismatch(f"dims must be 3 integers >= 2, got {dims}")
        if not np.all(spacing > 0) or not np.all(np.isfinite(spacing)):
            raise GeometryMismatch(f"spacing must be positive, got {spacing}")
        if not np.all(np.isfinite(origin)):
            raise GeometryMismatch("origin must be finite")
        if np.abs(direction.T @ direction - np.eye(3)).max() >= 1e-6:
            raise GeometryMismatch("direction matrix is not orthonormal")
        for arr in (spacing, origin, direction):
            arr.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def affine(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.direction * self.spacing
        out[:3, 3] = self.origin
        return out

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def voxel_to_world(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=float)
        return (index * self.spacing) @ self.direction.T + self.origin

    def world_to_voxel(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        return ((point - self.origin) @ self.direction) / self.spacing

    def world_grid(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape ``dims + (3,)``."""
        axes = [np.arange(n, dtype=float) * s for n, s in zip(self.dims, self.spacing)]
        frame = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return frame @ self.direction.T + self.origin

    def isclose(self, other: "Geometry", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and np.allclose(self.direction, other.direction, rtol=0, atol=tol)
        )

    def max_difference(self, other: "Geometry") -> float:
        if self.dims != other.dims:
            return np.inf
        return float(max(
            np.abs(self.spacing - other.spacing).max(),
            np.abs(self.origin - other.origin).max(),
            np.abs(self.direction - other.direction).max(),
        ))

    def with_(self, **changes) -> "Geometry":
        kw = dict(dims=self.dims, spacing=self.spacing, origin=self.origin,
                  direction=self.direction)
        kw.update(changes)
        return Geometry(**kw)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": self.spacing.tolist(),
            "origin": self.origin.tolist(),
            "direction": self.direction.tolist(),
        }


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageVolume:
    """A scalar 3D grid with geometry.

    ``background`` is the value returned when sampling outside the grid:
    air for CT intensities and 0 for masks unless set explicitly.
    """

    geometry: Geometry
    data: np.ndarray
    kind: Kind = Kind.INTENSITY
    background: Optional[float] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.shape != self.geometry.dims:
            raise GeometryMismatch(
                f"data shape {data.shape} does not match dims {self.geometry.dims}")
        if self.kind is Kind.MASK and not np.all((data == 0) | (data == 1)):
            raise ValueError("mask data must be 0 or 1")
        if self.background is None:
            bg = 0.0 if self.kind is Kind.MASK else AIR_HU
            object.__setattr__(self, "background", bg)
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   direction=None, kind: Kind = Kind.INTENSITY,
                   background: Optional[float] = None) -> "ImageVolume":
        data = np.asarray(data, dtype=np.float64)
        geom = Geometry(data.shape, spacing, origin,
                        np.eye(3) if direction is None else direction)
        return cls(geom, data, kind, background)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.geometry.dims

    @property
    def spacing(self) -> np.ndarray:
        return self.geometry.spacing

    @property
    def origin(self) -> np.ndarray:
        return self.geometry.origin

    @property
    def direction(self) -> np.ndarray:
        return self.geometry.direction

    @property
    def is_mask(self) -> bool:
        return self.kind is Kind.MASK

    def replace_data(self, data, kind: Optional[Kind] = None,
                     background: Optional[float] = None) -> "ImageVolume":
        kind = self.kind if kind is None else kind
        if background is None and kind is self.kind:
            background = self.background
        return ImageVolume(self.geometry, data, kind, background)


@dataclass(frozen=True)
class DeformationField:
    """Per-voxel displacement ``u(x)`` in mm, world frame, on a fixed grid."""

    geometry: Geometry
    displacements: np.ndarray

    def __post_init__(self):
        disp = np.array(self.displacements, dtype=np.float64)
        if disp.shape != self.geometry.dims + (3,):
            raise GeometryMismatch(
                f"displacement shape {disp.shape} does not match dims {self.geometry.dims}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("displacements must be finite")
        object.__setattr__(self, "displacements", _frozen(disp))

    @classmethod
    def zeros(cls, geometry: Geometry) -> "DeformationField":
        return cls(geometry, np.zeros(geometry.dims + (3,)))

    def mapped_points(self) -> np.ndarray:
        """World position ``x + u(x)`` for every voxel."""
        return self.geometry.world_grid() + self.displacements


@dataclass(frozen=True)
class JacobianField:
    geometry: Geometry
    det: np.ndarray

    def __post_init__(self):
        det = np.array(self.det, dtype=np.float64)
        if det.shape != self.geometry.dims:
            raise GeometryMismatch("determinant shape does not match geometry")
        if not np.all(np.isfinite(det)):
            raise ValueError("Jacobian determinant must be finite")
        object.__setattr__(self, "det", _frozen(det))

    def as_volume(self) -> ImageVolume:
        return ImageVolume(self.geometry, self.det, Kind.INTENSITY, background=1.0)


def voxel_to_world(vol, index) -> np.ndarray:
    """Map a continuous voxel index to world mm; ``vol`` may be any object with a geometry."""
    return _geometry_of(vol).voxel_to_world(index)


def world_to_voxel(vol, point) -> np.ndarray:
    return _geometry_of(vol).world_to_voxel(point)


def _geometry_of(obj) -> Geometry:
    return obj if isinstance(obj, Geometry) else obj.geometry


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------

def _open_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IoFailure(f"corrupt gzip stream in {path}: {exc}") from exc
    return raw


def _parse_header(raw: bytes):
    if len(raw) < 348:
        raise MalformedHeader(f"file holds {len(raw)} bytes, a header needs 348")
    for order in "<>":
        hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == 348:
            break
    else:
        raise MalformedHeader("sizeof_hdr is not 348 in either byte order")
    magic = bytes(hdr["magic"])
    if magic not in (b"n+1", b"ni1"):
        raise MalformedHeader(f"bad magic {magic!r}")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7 or np.any(hdr["dim"][1:ndim + 1] < 1):
        raise MalformedHeader(f"invalid dim field {hdr['dim'].tolist()}")
    return hdr, order


def _quaternion_to_matrix(b: float, c: float, d: float) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])


def _matrix_to_quaternion(rot: np.ndarray) -> Tuple[float, float, float, float]:
    """Return (b, c, d, qfac) for an orthonormal matrix."""
    rot = np.array(rot, dtype=float)
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] *= -1
    a = rot.trace() + 1.0
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (rot[2, 1] - rot[1, 2]) / a
        c = 0.25 * (rot[0, 2] - rot[2, 0]) / a
        d = 0.25 * (rot[1, 0] - rot[0, 1]) / a
    else:
        xd = 1.0 + rot[0, 0] - (rot[1, 1] + rot[2, 2])
        yd = 1.0 + rot[1, 1] - (rot[0, 0] + rot[2, 2])
        zd = 1.0 + rot[2, 2] - (rot[0, 0] + rot[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (rot[0, 1] + rot[1, 0]) / b
            d = 0.25 * (rot[0, 2] + rot[2, 0]) / b
            a = 0.25 * (rot[2, 1] - rot[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (rot[0, 1] + rot[1, 0]) / c
            d = 0.25 * (rot[1, 2] + rot[2, 1]) / c
            a = 0.25 * (rot[0, 2] - rot[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (rot[0, 2] + rot[2, 0]) / d
            c = 0.25 * (rot[1, 2] + rot[2, 1]) / d
            a = 0.25 * (rot[1, 0] - rot[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


def _orthonormalize(mat: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(mat)
    return u @ vt


def _header_geometry(hdr, dims) -> Geometry:
    pixdim = np.abs(hdr["pixdim"][1:4].astype(float))
    if int(hdr["sform_code"]) > 0:
        rows = np.stack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]]).astype(float)
        lin = rows[:, :3]
        spacing = np.linalg.norm(lin, axis=0)
        if np.any(spacing <= 0):
            raise MalformedHeader("sform has a zero column")
        direction = _orthonormalize(lin / spacing)
        origin = rows[:, 3]
    elif int(hdr["qform_code"]) > 0:
        qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
        direction = _quaternion_to_matrix(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"]))
        direction[:, 2] *= qfac
        direction = _orthonormalize(direction)
        spacing = pixdim
        origin = np.array([hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]], dtype=float)
    else:
        spacing = pixdim
        direction = np.eye(3)
        origin = np.zeros(3)
    spacing = np.where(spacing > 0, spacing, 1.0)
    return Geometry(dims, spacing, origin, direction)


def _extension_geometry(raw: bytes, vox_offset: int, byteorder: str):
    pos = 352
    if len(raw) < 352 or raw[348] == 0:
        return None
    while pos + 8 <= vox_offset:
        esize, ecode = np.frombuffer(raw[pos:pos + 8], dtype=f"{byteorder}i4")
        if esize < 8:
            break
        body = raw[pos + 8:pos + esize]
        if ecode == _ECODE_COMMENT and body.startswith(_GEOMETRY_TAG):
            try:
                return json.loads(body[len(_GEOMETRY_TAG):].rstrip(b"\0").decode())
            except ValueError:
                return None
        pos += int(esize)
    return None


def _image_path(header_path: Path) -> Path:
    """Data file paired with a two-file ``.hdr`` header."""
    name = header_path.name
    stem = name[:-len(".hdr.gz")] if name.endswith(".hdr.gz") else name[:-len(".hdr")]
    for suffix in (".img", ".img.gz"):
        candidate = header_path.with_name(stem + suffix)
        if candidate.exists():
            return candidate
    raise IoFailure(f"no .img data file next to {header_path}")


def _read_raw(path: PathLike):
    path = Path(path)
    raw = _open_bytes(path)
    hdr, byteorder = _parse_header(raw)
    code = int(hdr["datatype"])
    if code not in _READ_DTYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not supported")
    ndim = int(hdr["dim"][0])
    shape = tuple(int(d) for d in hdr["dim"][1:ndim + 1])
    if bytes(hdr["magic"]) == b"ni1":
        data, offset, ext_end = _open_bytes(_image_path(path)), int(hdr["vox_offset"]), len(raw)
    else:
        data, offset = raw, int(hdr["vox_offset"]) or 352
        ext_end = offset
    dtype = _READ_DTYPES[code].newbyteorder(byteorder)
    count = int(np.prod(shape))
    if len(data) < offset + count * dtype.itemsize:
        raise IoFailure(f"{path} is truncated")
    values = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    values = values.reshape(shape, order="F").astype(np.float64)
    slope = float(hdr["scl_slope"])
    if slope != 0 and np.isfinite(slope):
        values = values * slope + float(hdr["scl_inter"])
    extra = _extension_geometry(raw, ext_end, byteorder)
    return hdr, values, extra


def _geometry_from(hdr, dims, extra) -> Geometry:
    geom = _header_geometry(hdr, dims)
    if extra is not None and int(hdr["sform_code"]) > 0:
        precise = Geometry(dims, extra["spacing"], extra["origin"], extra["direction"])
        # only trust the extension while it agrees with the stored sform
        if np.abs(precise.affine - geom.affine).max() < 1e-3:
            return precise
    return geom


def read_nifti(path: PathLike, kind: Optional[Kind] = None) -> ImageVolume:
    """Read a 3D NIfTI-1 volume.

    Geometry comes from the sform when ``sform_code > 0``, else the qform,
    else pixdim with an identity direction.  With ``kind=None`` a uint8 file
    holding only 0/1 is read as a mask.  Masks with other values are
    binarized at 0.5 with a :class:`MaskValueWarning`.
    """
    hdr, values, extra = _read_raw(path)
    if values.ndim > 3:
        if any(d != 1 for d in values.shape[3:]):
            raise MalformedHeader(f"expected a 3D volume, got shape {values.shape}")
        values = values.reshape(values.shape[:3])
    while values.ndim < 3:
        values = values[..., np.newaxis]
    if min(values.shape) < 2:
        raise MalformedHeader(f"every axis needs at least 2 voxels, got {values.shape}")
    geom = _geometry_from(hdr, values.shape, extra)
    binary = bool(np.all((values == 0) | (values == 1)))
    if kind is None:
        kind = Kind.MASK if int(hdr["datatype"]) == DT_UINT8 and binary else Kind.INTENSITY
    if kind is Kind.MASK and not binary:
        warnings.warn(f"{path}: mask values outside {{0,1}} binarized at 0.5",
                      MaskValueWarning, stacklevel=2)
        values = (values > 0.5).astype(np.float64)
    return ImageVolume(geom, values, kind)


def _build_header(geom: Geometry, shape, datatype: int, intent: int = 0) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = len(shape)
    dim[1:len(shape) + 1] = shape
    hdr["dim"] = dim
    hdr["datatype"] = datatype
    hdr["bitpix"] = {DT_UINT8: 8, DT_FLOAT64: 64}[datatype]
    b, c, d, qfac = _matrix_to_quaternion(geom.direction)
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[0] = qfac
    pixdim[1:4] = geom.spacing
    hdr["pixdim"] = pixdim
    hdr["scl_slope"] = 0.0
    hdr["xyzt_units"] = XYZT_MM
    hdr["intent_code"] = intent
    if intent == INTENT_VECTOR:
        hdr["intent_name"] = b"displacement_mm"
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = geom.origin
    aff = geom.affine
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = aff[0], aff[1], aff[2]
    hdr["magic"] = b"n+1"
    return hdr


def _extension_bytes(geom: Geometry) -> bytes:
    body = _GEOMETRY_TAG + json.dumps(
        {k: v for k, v in geom.to_dict().items() if k != "dims"},
        separators=(",", ":")).encode()
    size = 8 + len(body)
    size += (-size) % 16
    body = body.ljust(size - 8, b"\0")
    return np.array([size, _ECODE_COMMENT], dtype="<i4").tobytes() + body


def _write_raw(path: PathLike, hdr: np.ndarray, payload: bytes, geom: Geometry) -> None:
    path = Path(path)
    ext = _extension_bytes(geom)
    hdr["vox_offset"] = 352 + len(ext)
    blob = hdr.tobytes() + b"\x01\0\0\0" + ext + payload
    try:
        if path.name.endswith(".gz"):
            # mtime=0 keeps output byte-identical across runs
            with open(path, "wb") as fh, gzip.GzipFile(
                    filename="", mode="wb", fileobj=fh, mtime=0) as gz:
                gz.write(blob)
        else:
            path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_nifti(vol: ImageVolume, path: PathLike) -> None:
    """Write a single-file NIfTI-1 volume (uint8 masks, float64 otherwise).

    The stream is gzip-compressed iff ``path`` ends in ``.gz``.
    """
    if vol.is_mask:
        datatype, payload = DT_UINT8, vol.data.astype("u1")
    else:
        datatype, payload = DT_FLOAT64, vol.data.astype("<f8")
    hdr = _build_header(vol.geometry, vol.dims, datatype)
    _write_raw(path, hdr, payload.tobytes(order="F"), vol.geometry)


def write_field(field: DeformationField, path: PathLike) -> None:
    """Write displacements as a 5D vector NIfTI (dim[5] = 3, vector intent)."""
    shape = field.geometry.dims + (1, 3)
    hdr = _build_header(field.geometry, shape, DT_FLOAT64, INTENT_VECTOR)
    payload = field.displacements.reshape(shape).astype("<f8").tobytes(order="F")
    _write_raw(path, hdr, payload, field.geometry)


def read_field(path: PathLike) -> DeformationField:
    try:
        hdr, values, extra = _read_raw(path)
    except (MalformedHeader, UnsupportedDatatype) as exc:
        raise MalformedField(str(exc)) from exc
    ok = (values.ndim == 5 and values.shape[3] == 1 and values.shape[4] == 3)
    if not ok:
        raise MalformedField(f"expected a 3-component vector volume, got shape {values.shape}")
    if int(hdr["intent_code"]) != INTENT_VECTOR:
        raise MalformedField(f"intent code {int(hdr['intent_code'])} is not vector")
    geom = _geometry_from(hdr, values.shape[:3], extra)
    return DeformationField(geom, values[:, :, :, 0, :])


def write_jacobian(jac: JacobianField, path: PathLike) -> None:
    write_nifti(jac.as_volume(), path)
