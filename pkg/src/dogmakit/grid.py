"""Grid geometry, DOGMa frames, Dempster-Shafer mass algebra and the grid file container.

Arrays are indexed ``[north, east, channel]``: row-major with east as the
fast axis, so ``data[j, i]`` is the cell ``i`` cells east and ``j`` cells
north of the origin corner.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"DGM1"
FORMAT_VERSION = 1

CHANNELS = ("m_occ", "m_free", "v_east", "v_north", "var_v_east", "var_v_north", "cov_v")
M_OCC, M_FREE, V_EAST, V_NORTH, VAR_EAST, VAR_NORTH, COV_V = range(7)
N_CHANNELS = len(CHANNELS)

_HEADER = struct.Struct("<4s5I3d")
_FRAME_HEADER = struct.Struct("<4d")


class GridFormatError(ValueError):
    """Raised for malformed or truncated grid files."""


class GeometryMismatchError(ValueError):
    pass


class TotalConflictError(ValueError):
    """Dempster combination of fully contradictory evidence (k = 1)."""


@dataclass(frozen=True)
class GridGeometry:
    """Placement of a W x H grid of square cells in world coordinates.

    ``origin`` is the (east, north) world position of the outer corner of
    cell (0, 0).
    """

    width_cells: int
    height_cells: int
    cell_size: float = 0.15
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width_cells <= 0 or self.height_cells <= 0:
            raise ValueError("grid dimensions must be positive")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, size_cells: int, cell_size: float = 0.15, center=(0.0, 0.0)) -> "GridGeometry":
        """Square grid whose middle cell is centred on ``center``."""
        half = size_cells * cell_size / 2.0
        return cls(size_cells, size_cells, cell_size, (center[0] - half, center[1] - half))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def n_cells(self) -> int:
        return self.width_cells * self.height_cells

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(east_min, east_max, north_min, north_max) in meters."""
        e0, n0 = self.origin
        return (e0, e0 + self.width_cells * self.cell_size, n0, n0 + self.height_cells * self.cell_size)

    def cell_center(self, east_index, north_index):
        e = self.origin[0] + (np.asarray(east_index) + 0.5) * self.cell_size
        n = self.origin[1] + (np.asarray(north_index) + 0.5) * self.cell_size
        return e, n

    def cell_of(self, east, north):
        """Integer (east_index, north_index) of the cell containing a world point."""
        i = np.floor((np.asarray(east, dtype=float) - self.origin[0]) / self.cell_size).astype(np.int64)
        j = np.floor((np.asarray(north, dtype=float) - self.origin[1]) / self.cell_size).astype(np.int64)
        return i, j

    def contains(self, east, north):
        e0, e1, n0, n1 = self.extent
        east = np.asarray(east)
        north = np.asarray(north)
        return (east >= e0) & (east < e1) & (north >= n0) & (north < n1)

    def center_grids(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of all cell centres, each shaped (H, W)."""
        e = self.origin[0] + (np.arange(self.width_cells) + 0.5) * self.cell_size
        n = self.origin[1] + (np.arange(self.height_cells) + 0.5) * self.cell_size
        return np.meshgrid(e, n)

    def translated(self, d_east: float, d_north: float) -> "GridGeometry":
        return GridGeometry(
            self.width_cells, self.height_cells, self.cell_size,
            (self.origin[0] + d_east, self.origin[1] + d_north),
        )

    def same_layout(self, other: "GridGeometry") -> bool:
        return (self.width_cells == other.width_cells and self.height_cells == other.height_cells
                and self.cell_size == other.cell_size)


@dataclass(frozen=True)
class DogmaCell:
    m_occ: float = 0.0
    m_free: float = 0.0
    v_east: float = 0.0
    v_north: float = 0.0
    var_v_east: float = 0.0
    var_v_north: float = 0.0
    cov_v: float = 0.0

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (self.m_occ >= 0 and self.m_free >= 0 and self.m_occ + self.m_free <= 1 + tol
                and self.var_v_east >= 0 and self.var_v_north >= 0
                and self.cov_v ** 2 <= self.var_v_east * self.var_v_north + tol)


@dataclass(frozen=True, eq=False)
class DogmaFrame:
    """One time step of the 7-channel grid; ``data`` has shape (H, W, 7), float32.

    The array is made read-only on construction.
    """

    geometry: GridGeometry
    data: np.ndarray
    timestamp: float = 0.0
    ego_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.shape != (*self.geometry.shape, N_CHANNELS):
            raise GeometryMismatchError(
                f"frame data shape {data.shape} does not match geometry {self.geometry.shape}x{N_CHANNELS}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "ego_pose", tuple(float(x) for x in self.ego_pose))

    def __eq__(self, other):
        if not isinstance(other, DogmaFrame):
            return NotImplemented
        return (self.geometry == other.geometry and self.timestamp == other.timestamp
                and self.ego_pose == other.ego_pose
                and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32)))

    __hash__ = None

    @property
    def m_occ(self) -> np.ndarray:
        return self.data[..., M_OCC]

    @property
    def m_free(self) -> np.ndarray:
        return self.data[..., M_FREE]

    @property
    def velocity(self) -> np.ndarray:
        return self.data[..., V_EAST:V_NORTH + 1]

    def cell(self, east_index: int, north_index: int) -> DogmaCell:
        return DogmaCell(*(float(v) for v in self.data[north_index, east_index]))

    def occupancy_probability(self) -> np.ndarray:
        return occupancy_probability(self.m_occ, self.m_free)

    def with_data(self, data: np.ndarray) -> "DogmaFrame":
        return DogmaFrame(self.geometry, data, self.timestamp, self.ego_pose)


def occupancy_probability(m_occ, m_free=None):
    """P_O = 0.5 * M_O + 0.5 * (1 - M_F).

    Accepts a :class:`DogmaCell`, or scalar / array masses.
    """
    if isinstance(m_occ, DogmaCell):
        m_occ, m_free = m_occ.m_occ, m_occ.m_free
    return 0.5 * m_occ + 0.5 * (1.0 - m_free)


def ds_combine(a, b):
    """Dempster's rule on the frame {occupied, free} for scalar mass pairs.

    ``a`` and ``b`` are ``(m_occ, m_free)``; the unassigned remainder is the
    mass on the whole frame (unknown).
    """
    a_o, a_f = a
    b_o, b_f = b
    conflict = a_o * b_f + a_f * b_o
    if conflict >= 1.0:
        raise TotalConflictError(f"total conflict between {a} and {b}")
    a_u = 1.0 - a_o - a_f
    b_u = 1.0 - b_o - b_f
    norm = 1.0 - conflict
    return ((a_o * b_o + a_o * b_u + a_u * b_o) / norm,
            (a_f * b_f + a_f * b_u + a_u * b_f) / norm)


def ds_combine_arrays(a_occ, a_free, b_occ, b_free):
    """Element-wise :func:`ds_combine` over arrays of masses."""
    a_occ = np.asarray(a_occ, dtype=float)
    a_free = np.asarray(a_free, dtype=float)
    b_occ = np.asarray(b_occ, dtype=float)
    b_free = np.asarray(b_free, dtype=float)
    conflict = a_occ * b_free + a_free * b_occ
    if np.any(conflict >= 1.0):
        raise TotalConflictError("total conflict in at least one cell")
    a_u = 1.0 - a_occ - a_free
    b_u = 1.0 - b_occ - b_free
    norm = 1.0 - conflict
    m_occ = (a_occ * b_occ + a_occ * b_u + a_u * b_occ) / norm
    m_free = (a_free * b_free + a_free * b_u + a_u * b_free) / norm
    return m_occ, m_free


# -- file container ---------------------------------------------------------

@dataclass
class GridRecord:
    """One frame of a generic grid file: metadata plus an (H, W, C) float32 array."""

    timestamp: float
    ego_pose: tuple[float, float, float]
    data: np.ndarray


@dataclass
class GridFile:
    geometry: GridGeometry
    channel_count: int
    records: list[GridRecord] = field(default_factory=list)
    version: int = FORMAT_VERSION


def write_grid_file(path, geometry: GridGeometry, records: Sequence[GridRecord],
                    channel_count: int | None = None) -> None:
    """Write records sharing one geometry; all arrays must be (H, W, C)."""
    if not records:
        raise ValueError("cannot write an empty grid sequence")
    if channel_count is None:
        channel_count = int(np.shape(records[0].data)[-1])
    expected = (*geometry.shape, channel_count)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, geometry.width_cells, geometry.height_cells,
                              channel_count, len(records), geometry.cell_size, *geometry.origin))
        for rec in records:
            data = np.asarray(rec.data)
            if data.shape != expected:
                raise GeometryMismatchError(f"record shape {data.shape} != {expected}")
            fh.write(_FRAME_HEADER.pack(rec.timestamp, *rec.ego_pose))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_grid_file(path) -> GridFile:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GridFormatError(f"{path}: file shorter than header")
    magic, version, w, h, c, t, cell_size, oe, on = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    if w == 0 or h == 0 or c == 0 or not cell_size > 0:
        raise GridFormatError(f"{path}: invalid header dimensions")
    geometry = GridGeometry(w, h, cell_size, (oe, on))
    payload = w * h * c * 4
    expected = _HEADER.size + t * (_FRAME_HEADER.size + payload)
    if len(raw) != expected:
        raise GridFormatError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or padded)")
    records = []
    offset = _HEADER.size
    for _ in range(t):
        ts, pe, pn, ph = _FRAME_HEADER.unpack_from(raw, offset)
        offset += _FRAME_HEADER.size
        data = np.frombuffer(raw, dtype="<f4", count=w * h * c, offset=offset).reshape(h, w, c)
        offset += payload
        records.append(GridRecord(ts, (pe, pn, ph), data.astype(np.float32)))
    return GridFile(geometry, c, records, version)


def grid_file_size(width: int, height: int, channels: int, frames: int) -> int:
    return _HEADER.size + frames * (_FRAME_HEADER.size + width * height * channels * 4)


def follow_ego(base: GridGeometry, pose0, pose) -> GridGeometry:
    """Geometry of a grid that translates with the ego from ``pose0`` to ``pose`` (no rotation)."""
    if pose[0] == pose0[0] and pose[1] == pose0[1]:
        return base
    return base.translated(pose[0] - pose0[0], pose[1] - pose0[1])


def write_sequence(frames: Sequence[DogmaFrame], path) -> None:
    """Write DOGMa frames to one grid file.

    The file stores the geometry of the first frame. Later frames must either
    share it or be translated by their ego displacement, which is recovered
    on reading.
    """
    if not frames:
        raise ValueError("cannot write an empty frame list")
    geometry = frames[0].geometry
    pose0 = frames[0].ego_pose
    for f in frames[1:]:
        if f.geometry != follow_ego(geometry, pose0, f.ego_pose):
            raise GeometryMismatchError("frame geometry is neither shared nor ego-translated")
    records = [GridRecord(f.timestamp, f.ego_pose, f.data) for f in frames]
    write_grid_file(path, geometry, records, N_CHANNELS)


def read_sequence(path) -> list[DogmaFrame]:
    gf = read_grid_file(path)
    if gf.channel_count != N_CHANNELS:
        raise GeometryMismatchError(f"{path}: expected {N_CHANNELS} channels, found {gf.channel_count}")
    pose0 = gf.records[0].ego_pose if gf.records else (0.0, 0.0, 0.0)
    return [DogmaFrame(follow_ego(gf.geometry, pose0, r.ego_pose), r.data, r.timestamp, r.ego_pose)
            for r in gf.records]


def stack_occupancy(frames: Iterable[DogmaFrame]) -> np.ndarray:
    """P_O of every frame, shaped (T, H, W)."""
    return np.stack([f.occupancy_probability() for f in frames])


def wrap_angle(angle):
    """Wrap to [-pi, pi)."""
    return (np.asarray(angle) + math.pi) % (2 * math.pi) - math.pi
