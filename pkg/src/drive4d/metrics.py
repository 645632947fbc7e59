"""Evaluation metrics: ray-level occupancy IoU, velocity error, composite
occupancy score, planning L2 / collision rate, and text-task scoring.

Ray casting uses incremental voxel traversal (one boundary crossing per
step), so reported depths are exact entry distances, not sampled ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, SpecMismatchError
from .occgrid import (
    BARRIER_ID,
    FRAME_INTERVAL_S,
    FREE_ID,
    MOVABLE_IDS,
    FlowField,
    GridSpec,
    OccupancyGrid,
    TrajectoryPlan,
)
from .qaengine import QaPair, displacements_to_waypoints, parse_answer

EGO_LENGTH_M = 4.1
EGO_WIDTH_M = 1.85
SENSOR_HEIGHT_M = 1.5

RAYIOU_THRESHOLDS_M = (1.0, 2.0, 4.0)
HORIZON_FRAMES = {"1s": 2, "2s": 4, "3s": 6}

# Scoring penalties for predictions that fail to parse: a velocity treated
# as off by 1 m/s, a trajectory treated as off by 10 m at every horizon.
UNPARSEABLE_FLOW_PENALTY = 1.0
UNPARSEABLE_L2_PENALTY = 10.0


# ---------------------------------------------------------------------------
# Ray queries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RayQuerySet:
    """Deterministic fan of rays from the ego at sensor height."""

    origins: np.ndarray  # [R, 3]
    directions: np.ndarray  # [R, 3] unit

    def __post_init__(self):
        o = np.ascontiguousarray(self.origins, dtype=np.float64)
        d = np.ascontiguousarray(self.directions, dtype=np.float64)
        if o.ndim != 2 or o.shape[1] != 3 or o.shape != d.shape:
            raise ValueError("origins and directions must both be [R, 3]")
        norms = np.linalg.norm(d, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValueError("directions must be unit-norm within 1e-9")
        o.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)

    def __len__(self) -> int:
        return self.origins.shape[0]


def make_ray_fan(spec: GridSpec, n_azimuth: int = 512, n_elevation: int = 32,
                 sensor_height: float = SENSOR_HEIGHT_M) -> RayQuerySet:
    """Azimuth x elevation fan centered on the ego.

    Elevations sweep from slightly below horizontal up toward the grid
    ceiling so both ground surfaces and tall structures get ray coverage.
    """
    az = np.linspace(0.0, 2.0 * math.pi, n_azimuth, endpoint=False)
    el = np.linspace(-0.35, 0.55, n_elevation)
    aa, ee = np.meshgrid(az, el, indexing="ij")
    d = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)],
                 axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    z0 = min(max(sensor_height, spec.z_min + 1e-6), spec.z_max - 1e-6)
    o = np.tile(np.array([0.0, 0.0, z0]), (d.shape[0], 1))
    return RayQuerySet(origins=o, directions=d)


def _grid_entry_interval(spec: GridSpec, origin: np.ndarray, direction: np.ndarray):
    """Slab test: [t0, t1] where the ray is inside the grid volume, or None."""
    lo = np.array([spec.x_min, spec.y_min, spec.z_min])
    hi = np.array([spec.x_max, spec.y_max, spec.z_max])
    t0, t1 = 0.0, math.inf
    for a in range(3):
        d = direction[a]
        if d == 0.0:
            if not (lo[a] <= origin[a] < hi[a]):
                return None
            continue
        ta = (lo[a] - origin[a]) / d
        tb = (hi[a] - origin[a]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t0 > t1:
        return None
    return t0, t1


def cast_ray(grid: OccupancyGrid, origin, direction):
    """First non-free voxel along a ray: (entry depth m, class id) or None.

    Reference single-ray implementation; `cast_rays` is the batched
    equivalent used by the metrics.
    """
    spec = grid.spec
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be unit-norm")
    interval = _grid_entry_interval(spec, o, d)
    if interval is None:
        return None
    t_entry = interval[0]

    sizes = np.array([spec.voxel_size, spec.voxel_size, spec.dz])
    mins = np.array([spec.x_min, spec.y_min, spec.z_min])
    dims = np.array(spec.shape)
    p = o + t_entry * d
    idx = np.clip(np.floor((p - mins) / sizes).astype(np.int64), 0, dims - 1)

    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdelta = np.where(d != 0.0, sizes / np.abs(d), np.inf)
        boundary = mins + (idx + (step > 0)) * sizes
        tmax = np.where(d != 0.0, (boundary - o) / d, np.inf)

    t_cur = t_entry
    for _ in range(int(dims.sum()) + 3):
        label = int(grid.labels[idx[0], idx[1], idx[2]])
        if label != FREE_ID:
            return (t_cur, label)
        axis = int(np.argmin(tmax))
        t_cur = float(tmax[axis])
        idx[axis] += step[axis]
        if idx[axis] < 0 or idx[axis] >= dims[axis]:
            return None
        tmax[axis] += tdelta[axis]
    return None


def cast_rays(grid: OccupancyGrid, rays: RayQuerySet):
    """Batched traversal: returns (depths [R], classes [R]); miss = class 0,
    depth = +inf."""
    spec = grid.spec
    o = rays.origins
    d = rays.directions
    n = len(rays)
    sizes = np.array([spec.voxel_size, spec.voxel_size, spec.dz])
    mins = np.array([spec.x_min, spec.y_min, spec.z_min])
    maxs = np.array([spec.x_max, spec.y_max, spec.z_max])
    dims = np.array(spec.shape)

    # Slab test per ray.
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (mins[None, :] - o) / d
        tb = (maxs[None, :] - o) / d
    t_lo = np.minimum(ta, tb)
    t_hi = np.maximum(ta, tb)
    zero = d == 0.0
    inside0 = (o >= mins[None, :]) & (o < maxs[None, :])
    t_lo = np.where(zero, np.where(inside0, -np.inf, np.inf), t_lo)
    t_hi = np.where(zero, np.where(inside0, np.inf, -np.inf), t_hi)
    t0 = np.maximum(t_lo.max(axis=1), 0.0)
    t1 = t_hi.min(axis=1)
    active = t0 <= t1

    depths = np.full(n, np.inf)
    classes = np.zeros(n, dtype=np.int64)

    p = o + t0[:, None] * d
    idx = np.clip(np.floor((p - mins[None, :]) / sizes[None, :]).astype(np.int64),
                  0, (dims - 1)[None, :])
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdelta = np.where(d != 0.0, sizes[None, :] / np.abs(d), np.inf)
        boundary = mins[None, :] + (idx + (step > 0)) * sizes[None, :]
        tmax = np.where(d != 0.0, (boundary - o) / d, np.inf)
    t_cur = t0.copy()

    labels = grid.labels
    for _ in range(int(dims.sum()) + 3):
        if not active.any():
            break
        ai = np.flatnonzero(active)
        lab = labels[idx[ai, 0], idx[ai, 1], idx[ai, 2]]
        hit = lab != FREE_ID
        hit_rows = ai[hit]
        depths[hit_rows] = t_cur[hit_rows]
        classes[hit_rows] = lab[hit]
        active[hit_rows] = False

        ai = np.flatnonzero(active)
        if len(ai) == 0:
            break
        axis = np.argmin(tmax[ai], axis=1)
        t_cur[ai] = tmax[ai, axis]
        idx[ai, axis] += step[ai, axis]
        out = (idx[ai, axis] < 0) | (idx[ai, axis] >= dims[axis])
        active[ai[out]] = False
        ai2 = ai[~out]
        tmax[ai2, axis[~out]] += tdelta[ai2, axis[~out]]
    return depths, classes


def ray_iou(pred: OccupancyGrid, gt: OccupancyGrid, rays: RayQuerySet,
            threshold: float) -> float:
    """Ray-level IoU: a query is TP when both first hits share class and
    depth within the threshold; a mismatched double hit is both FP and FN;
    rays missing in both grids are excluded."""
    if pred.spec != gt.spec:
        raise SpecMismatchError("prediction and ground truth use different grids")
    dp, cp = cast_rays(pred, rays)
    dg, cg = cast_rays(gt, rays)
    pred_hit = np.isfinite(dp)
    gt_hit = np.isfinite(dg)
    both = pred_hit & gt_hit
    with np.errstate(invalid="ignore"):
        tp = int(np.sum(both & (cp == cg) & (np.abs(dp - dg) <= threshold)))
    mismatched = int(both.sum()) - tp
    fp = int(np.sum(pred_hit & ~gt_hit)) + mismatched
    fn = int(np.sum(gt_hit & ~pred_hit)) + mismatched
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def ray_iou_sweep(pred: OccupancyGrid, gt: OccupancyGrid, rays: RayQuerySet,
                  thresholds=RAYIOU_THRESHOLDS_M) -> dict:
    out = {f"{t:g}m": ray_iou(pred, gt, rays, t) for t in thresholds}
    out["mean"] = float(np.mean([out[f"{t:g}m"] for t in thresholds]))
    return out


# ---------------------------------------------------------------------------
# Velocity error
# ---------------------------------------------------------------------------

def mave(pred_velocity: np.ndarray, gt: FlowField, gt_occ: OccupancyGrid) -> dict:
    """Per-movable-class mean L2 velocity error over dynamic voxels."""
    if pred_velocity.shape != gt.velocity.shape:
        raise SpecMismatchError("predicted velocity shape mismatch")
    out = {}
    errs = np.linalg.norm(pred_velocity.astype(np.float64)
                          - gt.velocity.astype(np.float64), axis=-1)
    for cid in MOVABLE_IDS:
        sel = (gt_occ.labels == cid) & gt.dynamic_mask
        if sel.any():
            from .occgrid import CLASS_NAMES
            out[CLASS_NAMES[cid]] = float(errs[sel].mean())
    out["mean"] = float(np.mean(list(out.values()))) if out else 0.0
    return out


def occ_score(rayiou_mean: float, mave_mean: float) -> float:
    """Composite occupancy quality: 0.9 IoU + 0.1 velocity term, times 100."""
    return 100.0 * (0.9 * rayiou_mean + 0.1 * max(0.0, 1.0 - mave_mean))


# ---------------------------------------------------------------------------
# Planning metrics
# ---------------------------------------------------------------------------

def plan_l2(pred: TrajectoryPlan, gt: TrajectoryPlan) -> dict:
    """Displacement error at the 1/2/3 s waypoints plus their average."""
    d = np.linalg.norm(pred.waypoints - gt.waypoints, axis=1)
    out = {h: float(d[f - 1]) for h, f in HORIZON_FRAMES.items()}
    out["avg"] = float(np.mean([out[h] for h in HORIZON_FRAMES]))
    return out


def ego_yaws(waypoints: np.ndarray) -> np.ndarray:
    """Heading at each waypoint from consecutive displacements; a step
    shorter than 1 mm inherits the previous heading."""
    pts = np.vstack([np.zeros((1, 2)), np.asarray(waypoints, dtype=np.float64)])
    seg = np.diff(pts, axis=0)
    yaws = np.zeros(len(seg))
    prev = 0.0
    for i, (dx, dy) in enumerate(seg):
        if math.hypot(dx, dy) >= 1e-3:
            prev = math.atan2(dy, dx)
        yaws[i] = prev
    return yaws


def _rect_axes(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, s], [-s, c]])


def rect_voxel_overlap(center: np.ndarray, yaw: float, length: float, width: float,
                       cell_center: np.ndarray, cell_size: float) -> bool:
    """Strict SAT overlap between an oriented rectangle and a square cell."""
    axes = np.vstack([_rect_axes(yaw), np.eye(2)])
    rect_half = np.array([length / 2.0, width / 2.0])
    delta = np.asarray(cell_center, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    for k, ax in enumerate(axes):
        center_dist = abs(float(np.dot(delta, ax)))
        if k < 2:
            r_rect = rect_half[k]
        else:
            r_rect = float(np.abs(_rect_axes(yaw) @ ax * rect_half).sum())
        r_cell = (cell_size / 2.0) * (abs(ax[0]) + abs(ax[1]))
        if center_dist >= r_rect + r_cell:
            return False
    return True


def advect_occupancy(occ: OccupancyGrid, flow: FlowField, dt: float) -> OccupancyGrid:
    """Future occupancy: dynamic voxels shift by velocity*dt, statics stay."""
    spec = occ.spec
    labels = occ.labels.copy()
    dyn = flow.dynamic_mask
    labels[dyn] = FREE_ID
    src = np.argwhere(dyn)
    if len(src):
        vel = flow.velocity[dyn].astype(np.float64)
        shift = np.round(vel * dt / spec.voxel_size).astype(np.int64)
        dst = src.copy()
        dst[:, 0] += shift[:, 0]
        dst[:, 1] += shift[:, 1]
        ok = ((dst[:, 0] >= 0) & (dst[:, 0] < spec.nx)
              & (dst[:, 1] >= 0) & (dst[:, 1] < spec.ny))
        dst = dst[ok]
        labels[dst[:, 0], dst[:, 1], dst[:, 2]] = occ.labels[dyn][ok]
    return OccupancyGrid(spec=spec, labels=labels, class_names=occ.class_names)


def _obstacle_cells(occ: OccupancyGrid, include_barriers: bool) -> np.ndarray:
    """BEV centers of columns containing movable (and optionally barrier)
    voxels at any height."""
    ids = list(MOVABLE_IDS) + ([BARRIER_ID] if include_barriers else [])
    mask2d = np.isin(occ.labels, ids).any(axis=2)
    idx = np.argwhere(mask2d)
    spec = occ.spec
    return np.column_stack([
        spec.x_min + (idx[:, 0] + 0.5) * spec.voxel_size,
        spec.y_min + (idx[:, 1] + 0.5) * spec.voxel_size,
    ])


def plan_collides_at(waypoints: np.ndarray, frame: int, occ_at_frame: OccupancyGrid,
                     include_barriers: bool = True) -> bool:
    """Ego rectangle at the frame's waypoint vs obstacle columns."""
    yaws = ego_yaws(waypoints)
    center = np.asarray(waypoints, dtype=np.float64)[frame - 1]
    yaw = float(yaws[frame - 1])
    cells = _obstacle_cells(occ_at_frame, include_barriers)
    if len(cells) == 0:
        return False
    # Cheap radius prefilter before the exact SAT test.
    reach = 0.5 * math.hypot(EGO_LENGTH_M, EGO_WIDTH_M) \
        + 0.75 * occ_at_frame.spec.voxel_size
    near = cells[np.linalg.norm(cells - center, axis=1) <= reach]
    return any(
        rect_voxel_overlap(center, yaw, EGO_LENGTH_M, EGO_WIDTH_M, c,
                           occ_at_frame.spec.voxel_size)
        for c in near
    )


def collision_rate(plans: list[TrajectoryPlan],
                   future_grids: list[dict],
                   include_barriers: bool = True) -> dict:
    """Fraction of samples whose plan hits an obstacle at each horizon.

    `future_grids[i]` maps horizon name ("1s", "2s", "3s") to the occupancy
    grid advected to that time for sample i.
    """
    if len(plans) != len(future_grids):
        raise ValueError("plans and future grids must align")
    out = {}
    for h, frame in HORIZON_FRAMES.items():
        n_hit = sum(
            plan_collides_at(p.waypoints, frame, grids[h], include_barriers)
            for p, grids in zip(plans, future_grids)
        )
        out[h] = n_hit / len(plans) if plans else 0.0
    out["avg"] = float(np.mean([out[h] for h in HORIZON_FRAMES]))
    return out


def future_grids_for_scene(occ: OccupancyGrid, flow: FlowField) -> dict:
    return {h: advect_occupancy(occ, flow, frame * FRAME_INTERVAL_S)
            for h, frame in HORIZON_FRAMES.items()}


# ---------------------------------------------------------------------------
# Text-task scoring
# ---------------------------------------------------------------------------

def qa_accuracy(references: list[QaPair], predictions: list[str],
                scenes: dict | None = None,
                include_barriers: bool = True) -> dict:
    """Score predicted answer strings against reference QA pairs.

    Categorical tasks use exact match after parsing; flow velocities and
    trajectories are parsed back to numbers and scored with mAVE / L2 (and
    collision rate when `scenes` maps scene ids to samples).  Unparseable
    predictions count as wrong or take fixed worst-case numeric penalties.
    """
    if len(references) != len(predictions):
        raise ValueError("references and predictions must align")
    hits = {}
    totals = {}
    unparseable = {}
    flow_errors = []
    l2_per_horizon = {h: [] for h in HORIZON_FRAMES}
    collision_flags = {h: [] for h in HORIZON_FRAMES}

    for ref, pred_text in zip(references, predictions):
        task = ref.task
        totals[task] = totals.get(task, 0) + 1
        try:
            pred = parse_answer(task, pred_text)
            parsed = True
        except ParseError:
            parsed = False
            unparseable[task] = unparseable.get(task, 0) + 1

        correct = False
        if task == "caption":
            correct = parsed and pred == ref.answer.strip()
        elif task == "occ_status":
            correct = parsed and pred == parse_answer(task, ref.answer)
        elif task == "action":
            correct = parsed and pred == parse_answer(task, ref.answer)
        elif task == "occ_class_flow":
            gt_name, gt_vx, gt_vy = parse_answer(task, ref.answer)
            if parsed:
                correct = pred[0] == gt_name
            if gt_name != "free":
                if parsed and pred[1] is not None:
                    flow_errors.append(math.hypot(pred[1] - gt_vx, pred[2] - gt_vy))
                else:
                    flow_errors.append(UNPARSEABLE_FLOW_PENALTY)
        else:  # trajectory
            gt_steps = parse_answer(task, ref.answer)
            gt_wp = displacements_to_waypoints(gt_steps)
            if parsed:
                pred_wp = displacements_to_waypoints(pred)
                err = np.linalg.norm(pred_wp - gt_wp, axis=1)
                for h, frame in HORIZON_FRAMES.items():
                    l2_per_horizon[h].append(float(err[frame - 1]))
                correct = bool(np.max(np.abs(pred_wp - gt_wp)) < 0.5)
                if scenes is not None and ref.scene_id in scenes:
                    sample = scenes[ref.scene_id]
                    grids = future_grids_for_scene(sample.occ, sample.flow)
                    for h, frame in HORIZON_FRAMES.items():
                        collision_flags[h].append(plan_collides_at(
                            pred_wp, frame, grids[h], include_barriers))
            else:
                for h in HORIZON_FRAMES:
                    l2_per_horizon[h].append(UNPARSEABLE_L2_PENALTY)
                    collision_flags[h].append(True)
        if correct:
            hits[task] = hits.get(task, 0) + 1

    report = {"accuracy": {}, "unparseable": unparseable, "counts": totals}
    for task, n in totals.items():
        report["accuracy"][task] = hits.get(task, 0) / n
    if flow_errors:
        report["flow_mave"] = float(np.mean(flow_errors))
    if any(l2_per_horizon.values()):
        l2 = {h: float(np.mean(v)) for h, v in l2_per_horizon.items() if v}
        l2["avg"] = float(np.mean(list(l2.values())))
        report["plan_l2"] = l2
    if scenes is not None and any(collision_flags.values()):
        col = {h: float(np.mean(v)) for h, v in collision_flags.items() if v}
        col["avg"] = float(np.mean(list(col.values())))
        report["plan_collision"] = col
    return report


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    rayiou: dict = field(default_factory=dict)
    mave: dict = field(default_factory=dict)
    occscore: float | None = None
    l2: dict = field(default_factory=dict)
    collision: dict = field(default_factory=dict)
    qa: dict = field(default_factory=dict)

    def validate(self) -> "MetricReport":
        for k, v in self.rayiou.items():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"rayiou[{k}]={v} outside [0, 1]")
        for k, v in self.mave.items():
            if v < 0:
                raise ValueError(f"mave[{k}]={v} negative")
        if self.occscore is not None and not (0.0 <= self.occscore <= 100.0):
            raise ValueError(f"occscore={self.occscore} outside [0, 100]")
        for name, d in (("l2", self.l2), ("collision", self.collision)):
            for k, v in d.items():
                if v < 0:
                    raise ValueError(f"{name}[{k}]={v} negative")
        for k, v in self.collision.items():
            if v > 1.0:
                raise ValueError(f"collision[{k}]={v} above 1")
        return self

    def to_dict(self) -> dict:
        return {"rayiou": self.rayiou, "mave": self.mave, "occscore": self.occscore,
                "l2": self.l2, "collision": self.collision, "qa": self.qa}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def pretty(self) -> str:
        lines = []
        if self.rayiou:
            lines.append("RayIoU: " + "  ".join(
                f"{k}={v:.4f}" for k, v in sorted(self.rayiou.items())))
        if self.mave:
            lines.append("mAVE:   " + "  ".join(
                f"{k}={v:.4f}" for k, v in sorted(self.mave.items())))
        if self.occscore is not None:
            lines.append(f"OccScore: {self.occscore:.2f}")
        if self.l2:
            lines.append("Plan L2 (m): " + "  ".join(
                f"{k}={v:.3f}" for k, v in sorted(self.l2.items())))
        if self.collision:
            lines.append("Collision rate: " + "  ".join(
                f"{k}={v:.3%}" for k, v in sorted(self.collision.items())))
        if self.qa:
            acc = self.qa.get("accuracy", {})
            if acc:
                lines.append("QA accuracy: " + "  ".join(
                    f"{k}={v:.3f}" for k, v in sorted(acc.items())))
            if "flow_mave" in self.qa:
                lines.append(f"QA flow mAVE: {self.qa['flow_mave']:.4f}")
            if "plan_l2" in self.qa:
                lines.append("QA plan L2: " + "  ".join(
                    f"{k}={v:.3f}" for k, v in sorted(self.qa['plan_l2'].items())))
        return "\n".join(lines)
