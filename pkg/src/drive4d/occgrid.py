"""Voxel-grid, flow and trajectory types plus the ``<OCC>`` textual codec.

Coordinate conventions used everywhere in this package:

* World frame: ego-centric, x forward, y left, z up, meters.
* Grid indices: ``(x, y, z)`` integer voxel coordinates; the ego origin
  always lands on index ``(nx/2, ny/2, 0)``.
* A grid cell covers the half-open box
  ``[min + i*size, min + (i+1)*size)`` along each axis.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, OutOfBoundsError, ParseError, ShapeError

# Class ids are stable across the whole package; id 0 must stay "free".
CLASS_NAMES = (
    "free",
    "car",
    "truck",
    "pedestrian",
    "bicycle",
    "road",
    "building",
    "vegetation",
    "barrier",
)
FREE_ID = 0
MOVABLE_CLASSES = ("car", "truck", "pedestrian", "bicycle")
MOVABLE_IDS = tuple(CLASS_NAMES.index(c) for c in MOVABLE_CLASSES)
BARRIER_ID = CLASS_NAMES.index("barrier")

N_WAYPOINTS = 6
FRAME_INTERVAL_S = 0.5
FRAME_RATE_HZ = 2.0
PLAN_HORIZON_S = N_WAYPOINTS * FRAME_INTERVAL_S


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Geometry of an ego-centric voxel volume.

    ``nx, ny`` are the BEV extent, ``nz`` the number of height bins.
    ``voxel_size`` applies to x and y; ``dz`` is the height-bin size.
    """

    nx: int
    ny: int
    nz: int
    x_min: float
    y_min: float
    z_min: float
    voxel_size: float
    dz: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.nz < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.nx % 2 or self.ny % 2:
            raise ValueError("nx and ny must be even so the ego sits on a cell corner")
        if self.voxel_size <= 0 or self.dz <= 0:
            raise ValueError("voxel_size and dz must be positive")
        ego = (
            math.floor((0.0 - self.x_min) / self.voxel_size),
            math.floor((0.0 - self.y_min) / self.voxel_size),
            math.floor((0.0 - self.z_min) / self.dz),
        )
        if ego != (self.nx // 2, self.ny // 2, 0):
            raise ValueError(
                f"ego origin must map to index ({self.nx // 2}, {self.ny // 2}, 0), got {ego}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def x_max(self) -> float:
        return self.x_min + self.nx * self.voxel_size

    @property
    def y_max(self) -> float:
        return self.y_min + self.ny * self.voxel_size

    @property
    def z_max(self) -> float:
        return self.z_min + self.nz * self.dz

    def to_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "nz": self.nz,
            "x_min": self.x_min,
            "y_min": self.y_min,
            "z_min": self.z_min,
            "voxel_size": self.voxel_size,
            "dz": self.dz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)


def desk_spec() -> GridSpec:
    """Small grid sized for exhaustive oracles and CPU training."""
    return GridSpec(nx=40, ny=40, nz=8, x_min=-20.0, y_min=-20.0, z_min=0.0,
                    voxel_size=1.0, dz=0.75)


def full_scale_spec() -> GridSpec:
    """200x200x16 grid matching the production-scale convention."""
    return GridSpec(nx=200, ny=200, nz=16, x_min=-100.0, y_min=-100.0, z_min=0.0,
                    voxel_size=1.0, dz=0.5)


@dataclass(frozen=True)
class OccToken:
    """Integer voxel coordinate as it appears in QA text."""

    x: int
    y: int
    z: int

    def validate(self, spec: GridSpec) -> "OccToken":
        if not (0 <= self.x < spec.nx and 0 <= self.y < spec.ny and 0 <= self.z < spec.nz):
            raise OutOfBoundsError(f"token {self} outside grid {spec.shape}")
        return self


@dataclass(frozen=True)
class OccupancyGrid:
    """Dense per-voxel class labels over a GridSpec volume."""

    spec: GridSpec
    labels: np.ndarray  # [nx, ny, nz] integer class ids
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if self.labels.shape != self.spec.shape:
            raise ShapeError(f"labels shape {self.labels.shape} != spec {self.spec.shape}")
        if self.labels.size and int(self.labels.max()) >= len(self.class_names):
            raise ValueError("label id outside class set")
        if self.labels.size and int(self.labels.min()) < 0:
            raise ValueError("negative label id")
        if self.class_names[FREE_ID] != "free":
            raise ValueError("class id 0 must be 'free'")
        object.__setattr__(self, "labels", _readonly(self.labels.astype(np.int16)))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != FREE_ID

    def free_fraction(self) -> float:
        return float(np.mean(self.labels == FREE_ID))


@dataclass(frozen=True)
class FlowField:
    """Per-voxel 2D velocity (m/s) aligned with an OccupancyGrid."""

    spec: GridSpec
    velocity: np.ndarray  # [nx, ny, nz, 2] float
    dynamic_mask: np.ndarray  # [nx, ny, nz] bool

    def __post_init__(self):
        if self.velocity.shape != self.spec.shape + (2,):
            raise ShapeError(f"velocity shape {self.velocity.shape} != {self.spec.shape + (2,)}")
        if self.dynamic_mask.shape != self.spec.shape:
            raise ShapeError("dynamic_mask shape mismatch")
        if not np.all(np.isfinite(self.velocity)):
            raise ValueError("velocity must be finite")
        if np.any(self.velocity[~self.dynamic_mask] != 0.0):
            raise ValueError("velocity must be zero outside the dynamic mask")
        object.__setattr__(self, "velocity", _readonly(self.velocity.astype(np.float32)))
        object.__setattr__(self, "dynamic_mask", _readonly(self.dynamic_mask.astype(bool)))


@dataclass(frozen=True)
class TrajectoryPlan:
    """Six future ego waypoints at 0.5 s spacing, ego-frame meters.

    Waypoints are cumulative displacements from the current pose, so the
    final row is the position 3 s ahead.
    """

    waypoints: np.ndarray  # [6, 2]
    ego_status: tuple[float, float, float] | None = None  # speed, yaw rate, accel

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=np.float64)
        if wp.shape != (N_WAYPOINTS, 2):
            raise ShapeError(f"expected [{N_WAYPOINTS}, 2] waypoints, got {wp.shape}")
        if not np.all(np.isfinite(wp)):
            raise ValueError("waypoints must be finite")
        object.__setattr__(self, "waypoints", _readonly(wp))
        if self.ego_status is not None:
            status = tuple(float(v) for v in self.ego_status)
            if len(status) != 3 or not all(math.isfinite(v) for v in status):
                raise ValueError("ego_status must be 3 finite floats")
            object.__setattr__(self, "ego_status", status)


# ---------------------------------------------------------------------------
# World <-> grid coordinates
# ---------------------------------------------------------------------------

def world_to_grid(pt, spec: GridSpec) -> OccToken:
    """Floor-quantize a world point (meters) to its voxel index."""
    x, y, z = (float(v) for v in pt)
    ix = math.floor((x - spec.x_min) / spec.voxel_size)
    iy = math.floor((y - spec.y_min) / spec.voxel_size)
    iz = math.floor((z - spec.z_min) / spec.dz)
    if not (0 <= ix < spec.nx and 0 <= iy < spec.ny and 0 <= iz < spec.nz):
        raise OutOfBoundsError(f"point ({x}, {y}, {z}) outside grid volume")
    return OccToken(ix, iy, iz)


def grid_to_world_center(token: OccToken, spec: GridSpec) -> tuple[float, float, float]:
    """Center of a voxel in world coordinates (meters)."""
    token.validate(spec)
    return (
        spec.x_min + (token.x + 0.5) * spec.voxel_size,
        spec.y_min + (token.y + 0.5) * spec.voxel_size,
        spec.z_min + (token.z + 0.5) * spec.dz,
    )


# ---------------------------------------------------------------------------
# <OCC> textual codec
# ---------------------------------------------------------------------------

_OCC_RE = re.compile(
    r"<OCC>\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*</OCC>"
)


def render_occ_token(token: OccToken) -> str:
    """Canonical text form: ``<OCC>(x, y, z)</OCC>``."""
    return f"<OCC>({token.x}, {token.y}, {token.z})</OCC>"


def parse_occ_token(text: str) -> OccToken:
    """Parse one ``<OCC>(x, y, z)</OCC>`` token, tolerating interior whitespace."""
    m = _OCC_RE.fullmatch(text.strip())
    if m is None:
        # Pinpoint the failure for the caller: find where the text stops
        # matching a lazily accepted prefix of the grammar.
        probe = _OCC_RE.match(text.strip())
        offset = probe.end() if probe else _mismatch_offset(text)
        raise ParseError(f"not a valid <OCC>(x, y, z)</OCC> token: {text!r}", offset=offset)
    return OccToken(int(m.group(1)), int(m.group(2)), int(m.group(3)))


def _mismatch_offset(text: str) -> int:
    stripped = text.lstrip()
    lead = len(text) - len(stripped)
    template = "<OCC>("
    for i, ch in enumerate(stripped[: len(template)]):
        if ch != template[i]:
            return lead + i
    return lead + min(len(stripped), len(template))


def find_occ_tokens(text: str) -> list[OccToken]:
    """All well-formed occupancy tokens inside a larger string, in order."""
    return [OccToken(int(a), int(b), int(c)) for a, b, c in _OCC_RE.findall(text)]


# ---------------------------------------------------------------------------
# Binary array files
# ---------------------------------------------------------------------------
#
# Each array file is a 16-byte header (magic "OCG1", u32 dtype code, u32 rank,
# u32 reserved) followed by rank little-endian u32 dims, then the raw
# little-endian array payload.

_MAGIC = b"OCG1"
_HEADER = struct.Struct("<4sIII")
_DTYPE_CODES = {
    np.dtype(np.uint8): 1,
    np.dtype(np.int16): 2,
    np.dtype(np.int32): 3,
    np.dtype(np.int64): 4,
    np.dtype(np.float32): 5,
    np.dtype(np.float64): 6,
    np.dtype(np.bool_): 7,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_array(path: Path | str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _DTYPE_CODES[arr.dtype], arr.ndim, 0))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(payload)


def read_array(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, code, rank, _ = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if rank > 16:
        raise FormatError(f"{path}: implausible rank {rank}")
    dims_end = _HEADER.size + 4 * rank
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, _HEADER.size)
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - dims_end != expected:
        raise FormatError(f"{path}: payload is {len(raw) - dims_end} bytes, expected {expected}")
    arr = np.frombuffer(raw[dims_end:], dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(dims)


# ---------------------------------------------------------------------------
# Scene container
# ---------------------------------------------------------------------------
#
# A scene directory holds one manifest plus per-array binary files per scene:
#
#   <root>/manifest.json
#   <root>/scenes/<scene_id>/{sensor,occ_labels,flow_velocity,flow_dynamic,
#                             plan}.ocg + meta.json

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SceneManifest:
    spec: GridSpec
    class_names: tuple[str, ...]
    scene_ids: tuple[str, ...]
    frame_rate_hz: float = FRAME_RATE_HZ
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": MANIFEST_VERSION,
                "grid": self.spec.to_dict(),
                "class_names": list(self.class_names),
                "frame_rate_hz": self.frame_rate_hz,
                "scene_ids": list(self.scene_ids),
                "extra": self.extra,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneManifest":
        d = json.loads(text)
        if d.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {d.get('format_version')}")
        return cls(
            spec=GridSpec.from_dict(d["grid"]),
            class_names=tuple(d["class_names"]),
            scene_ids=tuple(d["scene_ids"]),
            frame_rate_hz=float(d["frame_rate_hz"]),
            extra=dict(d.get("extra", {})),
        )


def read_manifest(root: Path | str) -> SceneManifest:
    return SceneManifest.from_json((Path(root) / "manifest.json").read_text())


def write_occupancy(grid: OccupancyGrid, scene_dir: Path | str) -> None:
    write_array(Path(scene_dir) / "occ_labels.ocg", grid.labels)


def read_occupancy(scene_dir: Path | str, spec: GridSpec,
                   class_names: tuple[str, ...] = CLASS_NAMES) -> OccupancyGrid:
    labels = read_array(Path(scene_dir) / "occ_labels.ocg")
    if labels.shape != spec.shape:
        raise FormatError(f"occ_labels shape {labels.shape} does not match grid {spec.shape}")
    return OccupancyGrid(spec=spec, labels=labels, class_names=class_names)


def write_flow(flow: FlowField, scene_dir: Path | str) -> None:
    scene_dir = Path(scene_dir)
    write_array(scene_dir / "flow_velocity.ocg", flow.velocity)
    write_array(scene_dir / "flow_dynamic.ocg", flow.dynamic_mask)


def read_flow(scene_dir: Path | str, spec: GridSpec) -> FlowField:
    scene_dir = Path(scene_dir)
    velocity = read_array(scene_dir / "flow_velocity.ocg")
    dynamic = read_array(scene_dir / "flow_dynamic.ocg")
    if velocity.shape != spec.shape + (2,) or dynamic.shape != spec.shape:
        raise FormatError("flow arrays do not match the grid spec")
    return FlowField(spec=spec, velocity=velocity, dynamic_mask=dynamic.astype(bool))


def write_plan(plan: TrajectoryPlan, scene_dir: Path | str) -> None:
    write_array(Path(scene_dir) / "plan.ocg", plan.waypoints.astype(np.float64))


def read_plan(scene_dir: Path | str, ego_status=None) -> TrajectoryPlan:
    wp = read_array(Path(scene_dir) / "plan.ocg")
    return TrajectoryPlan(waypoints=wp, ego_status=ego_status)


# ---------------------------------------------------------------------------
# QA corpus (JSON lines)
# ---------------------------------------------------------------------------

def write_jsonl(path: Path | str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
            f.write("\n")


def read_jsonl(path: Path | str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
