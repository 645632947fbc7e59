"""Procedural synthetic driving scenes with dense 4D ground truth.

Every scene is a pure function of ``(seed, grid spec, difficulty)``.  A scene
holds a two-channel BEV sensor raster, a semantic occupancy grid, a per-voxel
flow field, a six-waypoint ego plan from a kinematic bicycle rollout, and the
driving command implied by that plan.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .occgrid import (
    CLASS_NAMES,
    FRAME_INTERVAL_S,
    FlowField,
    GridSpec,
    MOVABLE_IDS,
    N_WAYPOINTS,
    OccupancyGrid,
    PLAN_HORIZON_S,
    SceneManifest,
    TrajectoryPlan,
    desk_spec,
    read_array,
    read_flow,
    read_occupancy,
    read_plan,
    write_array,
    write_flow,
    write_occupancy,
    write_plan,
)

COMMANDS = ("straight", "right", "left", "stop")
DIFFICULTIES = ("easy", "normal", "hard")

# Command thresholds: a plan whose path length stays under 0.5 m is a stop;
# otherwise the sign of the final lateral offset beyond 1.5 m picks a turn.
STOP_PATH_LENGTH_M = 0.5
TURN_LATERAL_M = 1.5

WHEELBASE_M = 2.7
EGO_LENGTH_M = 4.1
EGO_WIDTH_M = 1.85

# Per-class box templates: (length, width, height bins at dz=0.75, top speed).
_CAR = CLASS_NAMES.index("car")
_TRUCK = CLASS_NAMES.index("truck")
_PED = CLASS_NAMES.index("pedestrian")
_BIKE = CLASS_NAMES.index("bicycle")
_ROAD = CLASS_NAMES.index("road")
_BUILDING = CLASS_NAMES.index("building")
_VEGETATION = CLASS_NAMES.index("vegetation")
_BARRIER = CLASS_NAMES.index("barrier")

DYNAMIC_SPEED_MIN = 0.1

_ROAD_HALF_WIDTH = 3.5
_SIDEWALK_WIDTH = 2.0


@dataclass(frozen=True)
class AgentBox:
    """Rigid movable object: oriented BEV rectangle extruded over z bins."""

    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]  # length along heading, width
    yaw: float
    z_bins: tuple[int, int]  # half-open [lo, hi)
    velocity: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
            "z_bins": list(self.z_bins),
            "velocity": list(self.velocity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentBox":
        return cls(
            class_id=int(d["class_id"]),
            center=tuple(d["center"]),
            size=tuple(d["size"]),
            yaw=float(d["yaw"]),
            z_bins=tuple(int(v) for v in d["z_bins"]),
            velocity=tuple(d["velocity"]),
        )


@dataclass(frozen=True)
class SceneSample:
    """One generated scene with ground truth for all four tasks."""

    sensor: np.ndarray  # [2, nx, ny] float32
    occ: OccupancyGrid
    flow: FlowField
    plan: TrajectoryPlan
    command: str
    rng_seed: int
    agents: tuple[AgentBox, ...] = ()
    difficulty: str = "normal"

    def __post_init__(self):
        spec = self.occ.spec
        if self.sensor.shape != (2, spec.nx, spec.ny):
            raise ValueError(f"sensor shape {self.sensor.shape} != (2, {spec.nx}, {spec.ny})")
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        arr = np.ascontiguousarray(self.sensor, dtype=np.float32)
        arr.flags.writeable = False
        object.__setattr__(self, "sensor", arr)

    @property
    def spec(self) -> GridSpec:
        return self.occ.spec


def derive_command(waypoints: np.ndarray) -> str:
    """Map a 6-waypoint plan to one of the four driving commands."""
    pts = np.vstack([np.zeros((1, 2)), np.asarray(waypoints, dtype=np.float64)])
    path_len = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
    if path_len < STOP_PATH_LENGTH_M:
        return "stop"
    lateral = float(pts[-1, 1])
    if lateral > TURN_LATERAL_M:
        return "left"
    if lateral < -TURN_LATERAL_M:
        return "right"
    return "straight"


def rollout_bicycle(v0: float, accel: float, steer: float,
                    wheelbase: float = WHEELBASE_M,
                    duration: float = PLAN_HORIZON_S,
                    dt: float = 0.05) -> np.ndarray:
    """Integrate a kinematic bicycle from the origin; sample every 0.5 s."""
    steps = int(round(duration / dt))
    sample_every = int(round(FRAME_INTERVAL_S / dt))
    x = y = yaw = 0.0
    v = v0
    out = []
    for i in range(1, steps + 1):
        x += v * math.cos(yaw) * dt
        y += v * math.sin(yaw) * dt
        yaw += v / wheelbase * math.tan(steer) * dt
        v = max(0.0, v + accel * dt)
        if i % sample_every == 0:
            out.append((x, y))
    return np.asarray(out, dtype=np.float64)


def _ego_positions(waypoints: np.ndarray) -> np.ndarray:
    """Ego xy at t = 0, 0.5, ..., 3.0 (waypoints prefixed with the origin)."""
    return np.vstack([np.zeros((1, 2)), waypoints])


def agent_voxel_mask(agent: AgentBox, spec: GridSpec) -> np.ndarray:
    """Boolean [nx, ny, nz] mask of the voxels the agent's box covers.

    A voxel belongs to the box when its center lies inside the oriented
    rectangle and its z bin is in the agent's bin range.
    """
    xs = spec.x_min + (np.arange(spec.nx) + 0.5) * spec.voxel_size
    ys = spec.y_min + (np.arange(spec.ny) + 0.5) * spec.voxel_size
    dx = xs[:, None] - agent.center[0]
    dy = ys[None, :] - agent.center[1]
    c, s = math.cos(agent.yaw), math.sin(agent.yaw)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= agent.size[0] / 2) & (np.abs(v) <= agent.size[1] / 2)
    mask = np.zeros(spec.shape, dtype=bool)
    z_lo = max(0, agent.z_bins[0])
    z_hi = min(spec.nz, agent.z_bins[1])
    if z_hi > z_lo:
        mask[:, :, z_lo:z_hi] = inside[:, :, None]
    return mask


def _stamp_rect(labels: np.ndarray, spec: GridSpec, x0: float, x1: float,
                y0: float, y1: float, z_lo: int, z_hi: int, class_id: int) -> None:
    """Fill an axis-aligned world-frame box with a class id, clipped to grid."""
    ix0 = max(0, math.floor((x0 - spec.x_min) / spec.voxel_size))
    ix1 = min(spec.nx, math.ceil((x1 - spec.x_min) / spec.voxel_size))
    iy0 = max(0, math.floor((y0 - spec.y_min) / spec.voxel_size))
    iy1 = min(spec.ny, math.ceil((y1 - spec.y_min) / spec.voxel_size))
    z_lo = max(0, z_lo)
    z_hi = min(spec.nz, z_hi)
    if ix1 > ix0 and iy1 > iy0 and z_hi > z_lo:
        labels[ix0:ix1, iy0:iy1, z_lo:z_hi] = class_id


def _stamp_blob(labels: np.ndarray, spec: GridSpec, cx: float, cy: float,
                radius: float, z_hi: int, class_id: int) -> None:
    xs = spec.x_min + (np.arange(spec.nx) + 0.5) * spec.voxel_size
    ys = spec.y_min + (np.arange(spec.ny) + 0.5) * spec.voxel_size
    inside = (xs[:, None] - cx) ** 2 + (ys[None, :] - cy) ** 2 <= radius ** 2
    labels[:, :, 0:min(z_hi, spec.nz)][inside] = class_id


_DIFFICULTY_PARAMS = {
    "easy": {"agents": (2, 4), "buildings": (1, 3), "vegetation": (2, 5), "barrier_p": 0.3},
    "normal": {"agents": (2, 10), "buildings": (2, 5), "vegetation": (3, 8), "barrier_p": 0.5},
    "hard": {"agents": (6, 10), "buildings": (4, 7), "vegetation": (6, 12), "barrier_p": 0.8},
}

_COMMAND_PRIOR = {"straight": 0.45, "left": 0.2, "right": 0.2, "stop": 0.15}


def _draw_plan(rng: np.random.Generator, spec: GridSpec):
    """Sample a bicycle rollout whose derived command matches a drawn target."""
    names = list(_COMMAND_PRIOR)
    target = str(rng.choice(names, p=[_COMMAND_PRIOR[n] for n in names]))
    margin = min(spec.x_max, spec.y_max, -spec.x_min, -spec.y_min) - 1.0
    wp = None
    params = (0.0, 0.0, 0.0)
    for _ in range(60):
        if target == "stop":
            v0 = rng.uniform(0.0, 0.12)
            accel = -0.05
            steer = rng.uniform(-0.05, 0.05)
        elif target == "straight":
            v0 = rng.uniform(1.5, 5.0)
            accel = rng.uniform(-0.3, 0.3)
            steer = rng.uniform(-0.02, 0.02)
        else:
            sign = 1.0 if target == "left" else -1.0
            v0 = rng.uniform(2.5, 5.0)
            accel = rng.uniform(-0.2, 0.2)
            steer = sign * rng.uniform(0.15, 0.35)
        wp = rollout_bicycle(v0, accel, steer)
        params = (v0, accel, steer)
        if np.abs(wp).max() < margin and derive_command(wp) == target:
            break
    v0, accel, steer = params
    status = (v0, v0 / WHEELBASE_M * math.tan(steer), accel)
    return TrajectoryPlan(waypoints=wp, ego_status=status)


def _place_agents(rng: np.random.Generator, spec: GridSpec, plan: TrajectoryPlan,
                  n_agents: int, cross_x: float | None) -> tuple[AgentBox, ...]:
    ego_path = _ego_positions(plan.waypoints)  # [7, 2] at 0.5 s steps
    times = np.arange(ego_path.shape[0]) * FRAME_INTERVAL_S
    ego_radius = 0.5 * math.hypot(EGO_LENGTH_M, EGO_WIDTH_M)
    margin = min(spec.x_max, spec.y_max, -spec.x_min, -spec.y_min)

    templates = {
        _CAR: ((4.5, 1.9), 2, (1.0, 8.0)),
        _TRUCK: ((7.0, 2.5), 4, (1.0, 6.0)),
        _PED: ((0.6, 0.6), 3, (0.3, 1.5)),
        _BIKE: ((1.8, 0.7), 2, (0.5, 4.0)),
    }
    agents: list[AgentBox] = []
    attempts = 0
    while len(agents) < n_agents and attempts < 400:
        attempts += 1
        class_id = int(rng.choice([_CAR, _CAR, _CAR, _TRUCK, _PED, _PED, _BIKE]))
        (length, width), z_hi, (v_lo, v_hi) = templates[class_id]
        on_cross = cross_x is not None and class_id in (_CAR, _TRUCK) and rng.random() < 0.4

        if class_id in (_CAR, _TRUCK):
            if on_cross:
                lane = rng.choice([-1.75, 1.75])
                cx = cross_x + lane
                cy = rng.uniform(spec.y_min + 4.0, spec.y_max - 4.0)
                yaw = math.pi / 2 if lane > 0 else -math.pi / 2
            else:
                lane = rng.choice([-1.75, 1.75])
                cx = rng.uniform(spec.x_min + 4.0, spec.x_max - 4.0)
                cy = lane
                yaw = 0.0 if lane < 0 else math.pi
        elif class_id == _BIKE:
            side = rng.choice([-1.0, 1.0])
            cx = rng.uniform(spec.x_min + 2.0, spec.x_max - 2.0)
            cy = side * (_ROAD_HALF_WIDTH - 0.6)
            yaw = 0.0 if side < 0 else math.pi
        else:
            side = rng.choice([-1.0, 1.0])
            cx = rng.uniform(spec.x_min + 1.0, spec.x_max - 1.0)
            cy = side * rng.uniform(_ROAD_HALF_WIDTH + 0.4,
                                    _ROAD_HALF_WIDTH + _SIDEWALK_WIDTH - 0.4)
            yaw = rng.uniform(-math.pi, math.pi)

        parked = rng.random() < 0.25
        speed = 0.0 if parked else float(rng.uniform(v_lo, v_hi))
        vel = (speed * math.cos(yaw), speed * math.sin(yaw))
        half_diag = 0.5 * math.hypot(length, width)

        if max(abs(cx), abs(cy)) > margin - half_diag - 0.5:
            continue
        # Keep every future position clear of the ego at the matching time.
        centers = np.array([cx, cy]) + np.outer(times, vel)
        dists = np.linalg.norm(centers - ego_path, axis=1)
        if dists.min() <= half_diag + ego_radius + 0.5:
            continue
        # No overlap with already placed agents (conservative circle test).
        clear = True
        for other in agents:
            od = 0.5 * math.hypot(*other.size)
            if math.hypot(cx - other.center[0], cy - other.center[1]) <= half_diag + od + 0.3:
                clear = False
                break
        if not clear:
            continue
        agents.append(AgentBox(class_id=class_id, center=(cx, cy),
                               size=(length, width), yaw=yaw,
                               z_bins=(0, z_hi), velocity=vel))
    return tuple(agents)


def render_sensor(occ: OccupancyGrid, rng: np.random.Generator) -> np.ndarray:
    """Two BEV rasters: max occupied height (m) and top-class intensity.

    Both channels carry additive Gaussian noise so the encoder never sees
    the labels verbatim.
    """
    spec = occ.spec
    occupied = occ.occupied
    z_rank = np.arange(1, spec.nz + 1)
    top_rank = np.max(occupied * z_rank[None, None, :], axis=2)  # 0 when empty
    geometry = np.where(top_rank > 0, spec.z_min + top_rank * spec.dz, 0.0)

    top_idx = np.maximum(top_rank - 1, 0)
    top_class = np.take_along_axis(occ.labels, top_idx[:, :, None], axis=2)[:, :, 0]
    top_class = np.where(top_rank > 0, top_class, 0)
    appearance = top_class.astype(np.float64) / (len(occ.class_names) - 1)

    geometry = geometry + rng.normal(0.0, 0.02, size=geometry.shape)
    appearance = appearance + rng.normal(0.0, 0.05, size=appearance.shape)
    return np.stack([geometry, appearance]).astype(np.float32)


def generate_scene(seed: int, spec: GridSpec | None = None,
                   difficulty: str = "normal") -> SceneSample:
    """Deterministically build one scene from a seed."""
    if spec is None:
        spec = desk_spec()
    if difficulty not in _DIFFICULTY_PARAMS:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    params = _DIFFICULTY_PARAMS[difficulty]
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=[int(seed), DIFFICULTIES.index(difficulty)]))

    plan = _draw_plan(rng, spec)
    command = derive_command(plan.waypoints)

    labels = np.zeros(spec.shape, dtype=np.int16)

    # Main road along +x through the ego, optional cross road for variety.
    _stamp_rect(labels, spec, spec.x_min, spec.x_max,
                -_ROAD_HALF_WIDTH, _ROAD_HALF_WIDTH, 0, 1, _ROAD)
    cross_x = None
    if command in ("left", "right") or rng.random() < 0.35:
        cross_x = float(rng.uniform(4.0, min(12.0, spec.x_max - 6.0)))
        _stamp_rect(labels, spec, cross_x - _ROAD_HALF_WIDTH, cross_x + _ROAD_HALF_WIDTH,
                    spec.y_min, spec.y_max, 0, 1, _ROAD)

    # Vegetation blobs off the road.
    n_veg = int(rng.integers(params["vegetation"][0], params["vegetation"][1] + 1))
    placed = 0
    for _ in range(n_veg * 8):
        if placed >= n_veg:
            break
        cx = float(rng.uniform(spec.x_min + 1, spec.x_max - 1))
        cy = float(rng.choice([-1.0, 1.0])) * float(
            rng.uniform(_ROAD_HALF_WIDTH + 1.0, -spec.y_min - 1.5))
        if cross_x is not None and abs(cx - cross_x) < _ROAD_HALF_WIDTH + 1.0:
            continue
        radius = float(rng.uniform(0.8, 2.0))
        _stamp_blob(labels, spec, cx, cy, radius, int(rng.integers(1, 4)), _VEGETATION)
        placed += 1

    # Buildings beyond the sidewalk.
    n_bld = int(rng.integers(params["buildings"][0], params["buildings"][1] + 1))
    placed = 0
    for _ in range(n_bld * 10):
        if placed >= n_bld:
            break
        w = float(rng.uniform(3.0, 8.0))
        h = float(rng.uniform(3.0, 8.0))
        cx = float(rng.uniform(spec.x_min + w / 2 + 0.5, spec.x_max - w / 2 - 0.5))
        side = float(rng.choice([-1.0, 1.0]))
        lo = _ROAD_HALF_WIDTH + _SIDEWALK_WIDTH + 0.5
        hi = -spec.y_min - h / 2 - 0.5
        if hi <= lo:
            continue
        cy = side * float(rng.uniform(lo + h / 2, hi))
        if cross_x is not None and abs(cx - cross_x) < _ROAD_HALF_WIDTH + w / 2 + 1.0:
            continue
        z_hi = int(rng.integers(2, min(8, spec.nz) + 1))
        _stamp_rect(labels, spec, cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2,
                    0, z_hi, _BUILDING)
        placed += 1

    # Barriers hugging the road edges.
    for side in (-1.0, 1.0):
        if rng.random() < params["barrier_p"]:
            x0 = float(rng.uniform(spec.x_min + 1, spec.x_max - 8))
            x1 = x0 + float(rng.uniform(6.0, 20.0))
            cy = side * (_ROAD_HALF_WIDTH + 0.25)
            if cross_x is not None and x0 < cross_x + _ROAD_HALF_WIDTH and x1 > cross_x - _ROAD_HALF_WIDTH:
                continue
            _stamp_rect(labels, spec, x0, min(x1, spec.x_max - 0.5),
                        cy - 0.2, cy + 0.2, 0, 2, _BARRIER)

    # Movable agents stamped last so their voxels are theirs alone.
    n_agents = int(rng.integers(params["agents"][0], params["agents"][1] + 1))
    n_agents = max(2, n_agents)
    agents = _place_agents(rng, spec, plan, n_agents, cross_x)

    velocity = np.zeros(spec.shape + (2,), dtype=np.float32)
    dynamic = np.zeros(spec.shape, dtype=bool)
    for agent in agents:
        mask = agent_voxel_mask(agent, spec)
        labels[mask] = agent.class_id
        speed = math.hypot(*agent.velocity)
        if speed > DYNAMIC_SPEED_MIN:
            velocity[mask] = agent.velocity
            dynamic[mask] = True
        else:
            velocity[mask] = 0.0
            dynamic[mask] = False

    occ = OccupancyGrid(spec=spec, labels=labels)
    flow = FlowField(spec=spec, velocity=velocity, dynamic_mask=dynamic)
    sensor = render_sensor(occ, rng)
    return SceneSample(sensor=sensor, occ=occ, flow=flow, plan=plan,
                       command=command, rng_seed=int(seed), agents=agents,
                       difficulty=difficulty)


# ---------------------------------------------------------------------------
# Disk persistence and splits
# ---------------------------------------------------------------------------

def write_scene(sample: SceneSample, scene_dir: Path | str) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    write_array(scene_dir / "sensor.ocg", sample.sensor)
    write_occupancy(sample.occ, scene_dir)
    write_flow(sample.flow, scene_dir)
    write_plan(sample.plan, scene_dir)
    meta = {
        "command": sample.command,
        "rng_seed": sample.rng_seed,
        "difficulty": sample.difficulty,
        "ego_status": list(sample.plan.ego_status) if sample.plan.ego_status else None,
        "agents": [a.to_dict() for a in sample.agents],
    }
    (scene_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_scene(scene_dir: Path | str, spec: GridSpec) -> SceneSample:
    scene_dir = Path(scene_dir)
    meta = json.loads((scene_dir / "meta.json").read_text())
    ego_status = tuple(meta["ego_status"]) if meta.get("ego_status") else None
    return SceneSample(
        sensor=read_array(scene_dir / "sensor.ocg"),
        occ=read_occupancy(scene_dir, spec),
        flow=read_flow(scene_dir, spec),
        plan=read_plan(scene_dir, ego_status=ego_status),
        command=meta["command"],
        rng_seed=int(meta["rng_seed"]),
        agents=tuple(AgentBox.from_dict(d) for d in meta.get("agents", [])),
        difficulty=meta.get("difficulty", "normal"),
    )


def scene_seed(base_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the split seed and scene index."""
    ss = np.random.SeedSequence(entropy=[int(base_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_split(n_scenes: int, seed: int, out_dir: Path | str,
                   spec: GridSpec | None = None,
                   difficulty: str = "normal") -> tuple[Path, Path]:
    """Generate n scenes and write disjoint 85/15 train/val directories."""
    if n_scenes < 2:
        raise ValueError("need at least 2 scenes to split")
    if spec is None:
        spec = desk_spec()
    out_dir = Path(out_dir)
    n_train = int(round(n_scenes * 0.85))
    n_train = max(1, min(n_scenes - 1, n_train))

    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), 0xA11]))
    order = rng.permutation(n_scenes)
    assign = {"train": sorted(int(i) for i in order[:n_train]),
              "val": sorted(int(i) for i in order[n_train:])}

    paths = {}
    for split, indices in assign.items():
        split_dir = out_dir / split
        ids = []
        for i in indices:
            sid = f"scene_{i:05d}"
            sample = generate_scene(scene_seed(seed, i), spec, difficulty)
            write_scene(sample, split_dir / "scenes" / sid)
            ids.append(sid)
        manifest = SceneManifest(
            spec=spec, class_names=CLASS_NAMES, scene_ids=tuple(ids),
            extra={"seed": int(seed), "difficulty": difficulty, "split": split},
        )
        (split_dir / "manifest.json").write_text(manifest.to_json())
        paths[split] = split_dir
    return paths["train"], paths["val"]


def load_split_items(split_dir: Path | str) -> list[tuple[str, SceneSample]]:
    """Load (scene_id, scene) pairs of a split directory, in manifest order."""
    split_dir = Path(split_dir)
    manifest = SceneManifest.from_json((split_dir / "manifest.json").read_text())
    return [(sid, load_scene(split_dir / "scenes" / sid, manifest.spec))
            for sid in manifest.scene_ids]


def load_split(split_dir: Path | str) -> list[SceneSample]:
    """Load every scene of a split directory, in manifest order."""
    return [scene for _, scene in load_split_items(split_dir)]


def tree_digest(root: Path | str) -> str:
    """SHA-256 over every file (relative path + bytes) under a directory."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
