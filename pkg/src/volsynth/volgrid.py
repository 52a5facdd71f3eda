"""Volume container, bit-exact VVOL file I/O, plane slicing, and resampling.

A volume is a dense (D, H, W) float32 grid. Slicing follows one fixed
convention shared by every module in this package:

    axial    : fixed depth index d, slice varies over (H, W)
    coronal  : fixed height index h, slice varies over (D, W)
    sagittal : fixed width index w, slice varies over (D, H)

VVOL file layout (little-endian throughout):

    bytes 0..7   magic b"VVOLv001"
    bytes 8..19  three u32 dims D, H, W
    rest         D*H*W IEEE-754 f32 voxels, W fastest (C order)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"VVOLv001"

# voxel-count guard against absurd headers before we allocate
_MAX_VOXELS = 1 << 31


class VvolError(Exception):
    """Malformed VVOL byte stream."""


class BadMagic(VvolError):
    pass


class TruncatedFile(VvolError):
    pass


class NonFinite(ValueError):
    """Volume payload contains NaN or Inf."""


class RangeEmpty(ValueError):
    """Scaled slice range came out empty."""


class Plane(str, enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"


PLANES = (Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL)

# volume axis whose index is held fixed when slicing along each plane
PLANE_AXIS = {Plane.AXIAL: 0, Plane.CORONAL: 1, Plane.SAGITTAL: 2}


@dataclass(eq=False)
class VolumeGrid:
    """Immutable (D, H, W) float32 voxel grid with a modality tag."""

    data: np.ndarray
    modality_tag: str = "MRI"

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("volume must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise NonFinite("volume contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.data.shape
        return d, h, w


@dataclass(eq=False)
class Slice2D:
    """One 2-D slice cut from a volume along a plane."""

    data: np.ndarray
    plane: Plane
    index: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"slice must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr

    @property
    def dims(self) -> tuple[int, int]:
        r, c = self.data.shape
        return r, c


def read_vvol(path, modality_tag: str = "MRI") -> VolumeGrid:
    """Parse a VVOL file. Raises BadMagic / TruncatedFile / NonFinite."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not a VVOL file")
    if len(blob) < len(MAGIC) + 12:
        raise TruncatedFile(f"{path}: header cut short")
    d, h, w = struct.unpack_from("<3I", blob, len(MAGIC))
    if min(d, h, w) == 0 or d * h * w > _MAX_VOXELS:
        raise VvolError(f"{path}: bad dims {(d, h, w)}")
    need = d * h * w * 4
    payload = blob[len(MAGIC) + 12 :]
    if len(payload) < need:
        raise TruncatedFile(f"{path}: want {need} payload bytes, have {len(payload)}")
    if len(payload) > need:
        raise VvolError(f"{path}: {len(payload) - need} trailing bytes")
    arr = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{path}: payload contains NaN or Inf")
    return VolumeGrid(arr, modality_tag=modality_tag)


def write_vvol(v: VolumeGrid, path) -> None:
    """Serialize a volume; byte-identical output for identical input."""
    if not np.all(np.isfinite(v.data)):
        raise NonFinite("refusing to write NaN or Inf voxels")
    d, h, w = v.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<3I", d, h, w))
        f.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def slice_count(v: VolumeGrid, plane: Plane) -> int:
    return v.dims[PLANE_AXIS[plane]]


def slice_array(data: np.ndarray, plane: Plane, index: int) -> np.ndarray:
    """View of one plane slice of a (D, H, W) array."""
    axis = PLANE_AXIS[plane]
    return np.take(data, index, axis=axis)


def extract_slices(v: VolumeGrid, plane: Plane) -> list[Slice2D]:
    """All slices along `plane`, in index order."""
    n = slice_count(v, plane)
    return [Slice2D(slice_array(v.data, plane, i), plane, i) for i in range(n)]


def restack_slices(slices: list[Slice2D], modality_tag: str = "MRI") -> VolumeGrid:
    """Inverse of extract_slices: rebuild the volume from its slices."""
    if not slices:
        raise ValueError("no slices to restack")
    plane = slices[0].plane
    stacked = np.stack([s.data for s in slices], axis=PLANE_AXIS[plane])
    return VolumeGrid(stacked, modality_tag=modality_tag)


DEFAULT_EPS_MINMAX = 1e-6


def normalize_array(u: np.ndarray, eps_mm: float = DEFAULT_EPS_MINMAX) -> np.ndarray:
    """Min-max rescale to [0, 1): (u - min) / (max - min + eps)."""
    if eps_mm <= 0:
        raise ValueError("eps_mm must be positive")
    u = np.asarray(u)
    lo = u.min()
    return (u - lo) / (u.max() - lo + eps_mm)


def normalize_slice(u: Slice2D, eps_mm: float = DEFAULT_EPS_MINMAX) -> Slice2D:
    return Slice2D(normalize_array(u.data, eps_mm), u.plane, u.index)


def resample_trilinear(v: VolumeGrid, warp: np.ndarray) -> VolumeGrid:
    """Resample a volume through a warp, zero padding outside the grid.

    `warp` is either a displacement field of shape (3, D, H, W), where output
    voxel o samples the input at o + warp[:, o], or a (3, 4) affine matrix A,
    where output voxel o samples the input at A @ [d, h, w, 1].
    """
    warp = np.asarray(warp, dtype=np.float64)
    if not np.all(np.isfinite(warp)):
        raise NonFinite("warp contains NaN or Inf")
    d, h, w = v.dims
    grid = np.stack(
        np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    ).astype(np.float64)
    if warp.shape == (3, 4):
        coords = np.einsum("ij,jdhw->idhw", warp[:, :3], grid) + warp[:, 3].reshape(
            3, 1, 1, 1
        )
    elif warp.shape == (3, d, h, w):
        coords = grid + warp
    else:
        raise ValueError(f"warp shape {warp.shape} is neither (3,4) nor (3,{d},{h},{w})")
    out = _gather_trilinear(v.data.astype(np.float64), coords)
    return VolumeGrid(out.astype(np.float32), modality_tag=v.modality_tag)


def _gather_trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of `data` at fractional `coords` (3, ...)."""
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    dims = data.shape
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for corner in range(8):
        offs = [(corner >> a) & 1 for a in range(3)]
        idx = [base[a] + offs[a] for a in range(3)]
        weight = np.ones_like(out)
        valid = np.ones(out.shape, dtype=bool)
        for a in range(3):
            weight = weight * (frac[a] if offs[a] else 1.0 - frac[a])
            valid &= (idx[a] >= 0) & (idx[a] < dims[a])
        clipped = [np.clip(idx[a], 0, dims[a] - 1) for a in range(3)]
        out += np.where(valid, data[tuple(clipped)] * weight, 0.0)
    return out


def scaled_slice_range(extent: int) -> tuple[int, int]:
    """Inclusive (lo, hi) evaluation window, proportional to a 20..90
    window on a 128-slice extent."""
    if extent < 1:
        raise ValueError("extent must be positive")
    lo = extent * 20 // 128
    hi = extent * 90 // 128
    if hi < lo:
        raise RangeEmpty(f"window empty for extent {extent}")
    return lo, hi
