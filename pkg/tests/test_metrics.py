import math

import numpy as np
import pytest

from drive4d.errors import SpecMismatchError
from drive4d.occgrid import (
    CLASS_NAMES,
    FlowField,
    GridSpec,
    OccupancyGrid,
    TrajectoryPlan,
    desk_spec,
)
from drive4d.metrics import (
    MetricReport,
    RayQuerySet,
    advect_occupancy,
    cast_ray,
    cast_rays,
    collision_rate,
    ego_yaws,
    future_grids_for_scene,
    make_ray_fan,
    mave,
    occ_score,
    plan_collides_at,
    plan_l2,
    qa_accuracy,
    ray_iou,
    ray_iou_sweep,
    rect_voxel_overlap,
)
from drive4d.qaengine import QaPair, build_corpus, trajectory_answer
from drive4d.worldgen import generate_scene

CAR = CLASS_NAMES.index("car")
TRUCK = CLASS_NAMES.index("truck")
BARRIER = CLASS_NAMES.index("barrier")
ROAD = CLASS_NAMES.index("road")


def _cube_spec(n=16, size=1.0, dz=1.0):
    return GridSpec(nx=n, ny=n, nz=n, x_min=-n / 2 * size, y_min=-n / 2 * size,
                    z_min=0.0, voxel_size=size, dz=dz)


def _grid(spec, fill=None):
    labels = np.zeros(spec.shape, dtype=np.int16)
    if fill:
        for (x, y, z), c in fill.items():
            labels[x, y, z] = c
    return OccupancyGrid(spec=spec, labels=labels)


def march_ray(grid, origin, direction, step=1e-3, max_depth=None):
    """Brute-force oracle: sample the ray every millimeter."""
    spec = grid.spec
    if max_depth is None:
        max_depth = math.sqrt(
            (spec.x_max - spec.x_min) ** 2 + (spec.y_max - spec.y_min) ** 2
            + (spec.z_max - spec.z_min) ** 2) + 1.0
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    ts = np.arange(0.0, max_depth, step)
    pts = o[None, :] + ts[:, None] * d[None, :]
    ix = np.floor((pts[:, 0] - spec.x_min) / spec.voxel_size).astype(np.int64)
    iy = np.floor((pts[:, 1] - spec.y_min) / spec.voxel_size).astype(np.int64)
    iz = np.floor((pts[:, 2] - spec.z_min) / spec.dz).astype(np.int64)
    ok = ((ix >= 0) & (ix < spec.nx) & (iy >= 0) & (iy < spec.ny)
          & (iz >= 0) & (iz < spec.nz))
    labels = np.zeros(len(ts), dtype=np.int64)
    labels[ok] = grid.labels[ix[ok], iy[ok], iz[ok]]
    hits = np.flatnonzero(labels != 0)
    if len(hits) == 0:
        return None
    k = int(hits[0])
    return (float(ts[k]), int(labels[k]))


def _voxel_interval(spec, origin, direction, idx):
    """Exact ray-box interval for one voxel via the slab test."""
    lo = np.array([spec.x_min + idx[0] * spec.voxel_size,
                   spec.y_min + idx[1] * spec.voxel_size,
                   spec.z_min + idx[2] * spec.dz])
    hi = lo + np.array([spec.voxel_size, spec.voxel_size, spec.dz])
    t0, t1 = -np.inf, np.inf
    for a in range(3):
        if direction[a] == 0.0:
            if not (lo[a] <= origin[a] < hi[a]):
                return None
            continue
        ta = (lo[a] - origin[a]) / direction[a]
        tb = (hi[a] - origin[a]) / direction[a]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
    if t0 > t1:
        return None
    return (t0, t1)


def test_cast_ray_hand_case():
    # One car voxel spanning x in [5, 6) straight ahead of a sensor at the
    # origin voxel's height: entry depth is exactly 5 m.
    spec = desk_spec()
    grid = _grid(spec, {(25, 20, 2): CAR})
    origin = (0.0, 0.5, 1.6)  # inside voxel (20, 20, 2)
    hit = cast_ray(grid, origin, (1.0, 0.0, 0.0))
    assert hit is not None
    depth, cls = hit
    assert cls == CAR
    assert depth == pytest.approx(5.0, abs=1e-12)
    oracle = march_ray(grid, origin, (1.0, 0.0, 0.0))
    assert oracle[1] == CAR
    assert abs(depth - oracle[0]) <= 1e-3 + 1e-9


def test_cast_ray_empty_grid_misses():
    spec = _cube_spec()
    grid = _grid(spec)
    assert cast_ray(grid, (0.0, 0.0, 1.5), (1.0, 0.0, 0.0)) is None
    assert cast_ray(grid, (0.0, 0.0, 1.5), (0.0, 0.0, 1.0)) is None


def test_cast_ray_origin_inside_occupied():
    spec = _cube_spec()
    grid = _grid(spec, {(8, 8, 1): CAR})
    hit = cast_ray(grid, (0.5, 0.5, 1.5), (0.0, 1.0, 0.0))
    assert hit == (0.0, CAR)


def test_cast_ray_matches_marcher_on_random_grids():
    rng = np.random.default_rng(20240816)
    n_rays_total = 0
    for trial in range(10):
        spec = _cube_spec(16)
        labels = (rng.random(spec.shape) < 0.04) * rng.integers(
            1, len(CLASS_NAMES), size=spec.shape)
        grid = OccupancyGrid(spec=spec, labels=labels.astype(np.int16))
        for _ in range(100):
            origin = rng.uniform(-7.5, 7.5, size=3)
            origin[2] = rng.uniform(0.5, 15.5)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            dda = cast_ray(grid, origin, d)
            oracle = march_ray(grid, origin, d)
            n_rays_total += 1
            if oracle is not None:
                # The marcher samples real ray points, so the traversal
                # must hit too, no later than the sample and not earlier
                # than one step before it.
                assert dda is not None, (origin, d)
                assert dda[0] <= oracle[0] + 1e-9
                assert dda[0] >= oracle[0] - 1e-3 - 1e-9
                if abs(dda[0] - oracle[0]) <= 1e-3:
                    assert dda[1] == oracle[1]
            elif dda is not None:
                # The marcher can step over a sub-millimeter corner clip;
                # the hit is legitimate only if the exact interval through
                # that voxel is shorter than the marcher step.
                depth, _ = dda
                p = np.asarray(origin) + depth * d
                idx = np.floor((p - np.array([spec.x_min, spec.y_min, spec.z_min]))
                               / np.array([spec.voxel_size, spec.voxel_size, spec.dz]))
                idx = np.clip(idx, 0, np.array(spec.shape) - 1).astype(int)
                interval = _voxel_interval(spec, origin, d, idx)
                assert interval is not None
                assert interval[1] - interval[0] < 1e-3
    assert n_rays_total == 1000


def test_cast_rays_matches_single_ray():
    rng = np.random.default_rng(7)
    spec = _cube_spec(16)
    labels = (rng.random(spec.shape) < 0.05) * rng.integers(
        1, len(CLASS_NAMES), size=spec.shape)
    grid = OccupancyGrid(spec=spec, labels=labels.astype(np.int16))
    origins = rng.uniform(-6, 6, size=(300, 3))
    origins[:, 2] = rng.uniform(1, 15, size=300)
    dirs = rng.normal(size=(300, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = RayQuerySet(origins=origins, directions=dirs)
    depths, classes = cast_rays(grid, rays)
    for i in range(len(rays)):
        single = cast_ray(grid, origins[i], dirs[i])
        if single is None:
            assert not np.isfinite(depths[i])
            assert classes[i] == 0
        else:
            assert depths[i] == pytest.approx(single[0], abs=1e-9)
            assert classes[i] == single[1]


def test_ray_fan_properties():
    spec = desk_spec()
    fan = make_ray_fan(spec, n_azimuth=16, n_elevation=4)
    assert len(fan) == 64
    assert np.allclose(np.linalg.norm(fan.directions, axis=1), 1.0, atol=1e-9)
    fan2 = make_ray_fan(spec, n_azimuth=16, n_elevation=4)
    assert np.array_equal(fan.origins, fan2.origins)
    assert np.array_equal(fan.directions, fan2.directions)
    with pytest.raises(ValueError):
        RayQuerySet(origins=np.zeros((2, 3)), directions=np.full((2, 3), 2.0))


def test_ray_iou_identity_and_zero():
    rng = np.random.default_rng(3)
    spec = desk_spec()
    for seed in range(3):
        scene = generate_scene(seed)
        fan = make_ray_fan(spec, n_azimuth=64, n_elevation=8)
        sweep = ray_iou_sweep(scene.occ, scene.occ, fan)
        assert sweep["1m"] == 1.0 and sweep["2m"] == 1.0 and sweep["4m"] == 1.0
    scene = generate_scene(5)
    empty = _grid(desk_spec())
    fan = make_ray_fan(spec, n_azimuth=64, n_elevation=8)
    assert ray_iou(empty, scene.occ, fan, 1.0) == 0.0


def test_ray_iou_displaced_hit_threshold():
    # GT voxel x in [5, 6); the displaced predictions sit one and two
    # meters further along the same ray.
    spec = desk_spec()
    gt = _grid(spec, {(25, 20, 2): CAR})       # x in [5, 6)
    pred = _grid(spec, {(26, 20, 2): CAR})     # x in [6, 7): displaced 1.0 m
    pred15 = _grid(spec, {(27, 20, 2): CAR})   # x in [7, 8): displaced 2.0 m
    origin = np.array([[0.0, 0.5, 1.6]])
    rays = RayQuerySet(origins=origin, directions=np.array([[1.0, 0.0, 0.0]]))
    # 1.0 m displacement: inside every threshold.
    assert ray_iou(pred, gt, rays, 1.0) == 1.0
    # 2.0 m displacement: excluded at 1 m, included at 2 m and 4 m.
    assert ray_iou(pred15, gt, rays, 1.0) == 0.0
    assert ray_iou(pred15, gt, rays, 2.0) == 1.0
    assert ray_iou(pred15, gt, rays, 4.0) == 1.0


def test_ray_iou_class_mismatch_double_counts():
    spec = desk_spec()
    gt = _grid(spec, {(25, 20, 2): CAR})
    pred = _grid(spec, {(25, 20, 2): TRUCK})
    origin = np.array([[0.0, 0.5, 1.6]])
    rays = RayQuerySet(origins=origin, directions=np.array([[1.0, 0.0, 0.0]]))
    # One ray, both hit, wrong class: TP=0, FP=1, FN=1.
    assert ray_iou(pred, gt, rays, 4.0) == 0.0


def test_ray_iou_monotone_in_threshold():
    fan = make_ray_fan(desk_spec(), n_azimuth=48, n_elevation=6)
    for seed in range(5):
        gt = generate_scene(seed).occ
        pred = generate_scene(seed + 100).occ
        sweep = ray_iou_sweep(pred, gt, fan)
        assert sweep["1m"] <= sweep["2m"] + 1e-12
        assert sweep["2m"] <= sweep["4m"] + 1e-12


def test_ray_iou_spec_mismatch():
    fan = make_ray_fan(desk_spec(), 8, 2)
    a = _grid(desk_spec())
    b = _grid(_cube_spec(16))
    with pytest.raises(SpecMismatchError):
        ray_iou(a, b, fan, 1.0)


def test_mave_exact_cases():
    scene = generate_scene(9)
    perfect = mave(scene.flow.velocity.copy(), scene.flow, scene.occ)
    assert perfect["mean"] == 0.0
    # Constant (0.3, 0.4) offset on every voxel: each dynamic voxel errs by
    # exactly 0.5.
    shifted = scene.flow.velocity + np.array([0.3, 0.4], dtype=np.float32)
    report = mave(shifted, scene.flow, scene.occ)
    if scene.flow.dynamic_mask.any():
        assert report["mean"] == pytest.approx(0.5, abs=1e-6)


def test_mave_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    spec = _cube_spec(8)
    labels = rng.integers(0, len(CLASS_NAMES), size=spec.shape).astype(np.int16)
    grid = OccupancyGrid(spec=spec, labels=labels)
    dynamic = np.isin(labels, [1, 2, 3, 4]) & (rng.random(spec.shape) < 0.5)
    vel = np.zeros(spec.shape + (2,), dtype=np.float32)
    vel[dynamic] = rng.normal(size=(int(dynamic.sum()), 2)).astype(np.float32)
    flow = FlowField(spec=spec, velocity=vel, dynamic_mask=dynamic)
    pred = rng.normal(size=vel.shape).astype(np.float32)

    report = mave(pred, flow, grid)
    per_class = {}
    for cid, name in enumerate(CLASS_NAMES):
        if cid not in (1, 2, 3, 4):
            continue
        errs = []
        for x in range(spec.nx):
            for y in range(spec.ny):
                for z in range(spec.nz):
                    if labels[x, y, z] == cid and dynamic[x, y, z]:
                        dv = pred[x, y, z].astype(np.float64) - vel[x, y, z].astype(np.float64)
                        errs.append(math.hypot(dv[0], dv[1]))
        if errs:
            per_class[name] = sum(errs) / len(errs)
    for name, v in per_class.items():
        assert report[name] == pytest.approx(v, abs=1e-10)
    assert report["mean"] == pytest.approx(np.mean(list(per_class.values())), abs=1e-10)


def test_occ_score_extremes_and_published_row():
    assert occ_score(1.0, 0.0) == 100.0
    assert occ_score(0.0, 1.0) == 0.0
    assert occ_score(0.0, 2.5) == 0.0
    # Published operating point: IoU 0.493 with mAVE 0.509 lands within 1.0
    # of the reported 49.3 composite.
    assert abs(occ_score(0.493, 0.509) - 49.3) < 1.0


def test_plan_l2_cases():
    gt = TrajectoryPlan(waypoints=np.column_stack([np.linspace(1, 6, 6), np.zeros(6)]))
    same = plan_l2(gt, gt)
    assert same == {"1s": 0.0, "2s": 0.0, "3s": 0.0, "avg": 0.0}
    shifted = TrajectoryPlan(waypoints=gt.waypoints + np.array([1.0, 0.0]))
    report = plan_l2(shifted, gt)
    assert report["1s"] == pytest.approx(1.0)
    assert report["2s"] == pytest.approx(1.0)
    assert report["3s"] == pytest.approx(1.0)
    assert report["avg"] == pytest.approx(1.0)
    # Scalar oracle on random plans.
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = TrajectoryPlan(waypoints=rng.normal(size=(6, 2)))
        b = TrajectoryPlan(waypoints=rng.normal(size=(6, 2)))
        rep = plan_l2(a, b)
        for h, f in (("1s", 2), ("2s", 4), ("3s", 6)):
            dx = a.waypoints[f - 1, 0] - b.waypoints[f - 1, 0]
            dy = a.waypoints[f - 1, 1] - b.waypoints[f - 1, 1]
            assert rep[h] == pytest.approx(math.hypot(dx, dy), abs=1e-12)


def test_ego_yaws_fallback():
    wp = np.array([[1.0, 0.0], [1.0, 0.0005], [1.0, 0.001],
                   [2.0, 1.0], [3.0, 2.0], [3.0, 2.0]])
    yaws = ego_yaws(wp)
    assert yaws[0] == pytest.approx(0.0)
    # Sub-millimeter steps inherit the previous heading.
    assert yaws[1] == pytest.approx(0.0)
    assert yaws[2] == pytest.approx(0.0)
    assert yaws[3] == pytest.approx(math.atan2(1.0 - 0.001, 1.0), abs=1e-12)
    assert yaws[5] == pytest.approx(yaws[4])


def test_rect_voxel_overlap_strictness():
    # Axis-aligned rectangle 4.1 x 1.85 at origin; unit cell centered at
    # exactly touching distance along x: 4.1/2 + 0.5 = 2.55.
    center = np.array([0.0, 0.0])
    assert not rect_voxel_overlap(center, 0.0, 4.1, 1.85, np.array([2.55, 0.0]), 1.0)
    assert rect_voxel_overlap(center, 0.0, 4.1, 1.85, np.array([2.549, 0.0]), 1.0)
    # Tangent along y: 1.85/2 + 0.5 = 1.425.
    assert not rect_voxel_overlap(center, 0.0, 4.1, 1.85, np.array([0.0, 1.425]), 1.0)
    assert rect_voxel_overlap(center, 0.0, 4.1, 1.85, np.array([0.0, 1.424]), 1.0)
    # Rotated 45 degrees, cell on the +x axis: the binding separating axis
    # is the rectangle's width axis v = (-sin45, cos45).  Separation when
    # dist*sin45 >= W/2 + cell half-projection 0.5*(|v_x|+|v_y|) = sqrt(2)/2.
    crit = (1.85 / 2 + math.sqrt(2) / 2) / math.sin(math.pi / 4)
    assert not rect_voxel_overlap(center, math.pi / 4, 4.1, 1.85,
                                  np.array([crit + 1e-3, 0.0]), 1.0)
    assert rect_voxel_overlap(center, math.pi / 4, 4.1, 1.85,
                              np.array([crit - 1e-3, 0.0]), 1.0)


def test_advect_occupancy_moves_dynamics_only():
    spec = desk_spec()
    labels = np.zeros(spec.shape, dtype=np.int16)
    labels[10, 10, 0] = ROAD          # static
    labels[10, 12, 0] = CAR           # dynamic, 2 m/s +x
    vel = np.zeros(spec.shape + (2,), dtype=np.float32)
    vel[10, 12, 0] = (2.0, 0.0)
    dyn = np.zeros(spec.shape, dtype=bool)
    dyn[10, 12, 0] = True
    occ = OccupancyGrid(spec=spec, labels=labels)
    flow = FlowField(spec=spec, velocity=vel, dynamic_mask=dyn)
    future = advect_occupancy(occ, flow, 2.0)
    assert future.labels[10, 10, 0] == ROAD
    assert future.labels[10, 12, 0] == 0
    assert future.labels[14, 12, 0] == CAR


def test_collision_with_parked_car():
    spec = desk_spec()
    labels = np.zeros(spec.shape, dtype=np.int16)
    labels[30, 20, 0] = CAR  # centered at (10.5, 0.5)
    occ = OccupancyGrid(spec=spec, labels=labels)
    flow = FlowField(spec=spec, velocity=np.zeros(spec.shape + (2,), dtype=np.float32),
                     dynamic_mask=np.zeros(spec.shape, dtype=bool))
    # Plan drives straight through the parked car by 3 s.
    wp = np.column_stack([np.linspace(1.75, 10.5, 6), np.full(6, 0.5)])
    plan = TrajectoryPlan(waypoints=wp)
    grids = future_grids_for_scene(occ, flow)
    assert plan_collides_at(plan.waypoints, 6, grids["3s"])
    rate = collision_rate([plan], [grids])
    assert rate["3s"] == 1.0
    assert rate["avg"] >= 1.0 / 3.0
    # A plan that stays far from the car never collides.
    safe = TrajectoryPlan(waypoints=np.column_stack([np.linspace(0.5, 3, 6),
                                                     np.full(6, -2.0)]))
    assert collision_rate([safe], [grids])["avg"] == 0.0


def test_gt_plans_collision_free():
    for seed in range(25):
        s = generate_scene(seed)
        grids = future_grids_for_scene(s.occ, s.flow)
        rate = collision_rate([s.plan], [grids])
        assert rate["avg"] == 0.0, f"seed {seed} GT plan collides"


def test_collision_barrier_flag():
    spec = desk_spec()
    labels = np.zeros(spec.shape, dtype=np.int16)
    labels[30, 20, 0] = BARRIER
    occ = OccupancyGrid(spec=spec, labels=labels)
    flow = FlowField(spec=spec, velocity=np.zeros(spec.shape + (2,), dtype=np.float32),
                     dynamic_mask=np.zeros(spec.shape, dtype=bool))
    wp = np.column_stack([np.linspace(1.75, 10.5, 6), np.full(6, 0.5)])
    grids = future_grids_for_scene(occ, flow)
    assert plan_collides_at(wp, 6, grids["3s"], include_barriers=True)
    assert not plan_collides_at(wp, 6, grids["3s"], include_barriers=False)


def test_metrics_permutation_invariant():
    scenes = [generate_scene(s) for s in range(6)]
    plans = [s.plan for s in scenes]
    noisy = [TrajectoryPlan(waypoints=p.waypoints + 0.3) for p in plans]
    grids = [future_grids_for_scene(s.occ, s.flow) for s in scenes]
    fwd = collision_rate(noisy, grids)
    perm = collision_rate(noisy[::-1], grids[::-1])
    assert fwd == perm
    l2s = [plan_l2(a, b)["avg"] for a, b in zip(noisy, plans)]
    assert np.mean(l2s) == pytest.approx(np.mean(l2s[::-1]))


def test_qa_accuracy_perfect_and_flipped():
    scenes = [(f"s{i}", generate_scene(i)) for i in range(2)]
    corpus = build_corpus(scenes, seed=5)
    preds = [p.answer for p in corpus]
    report = qa_accuracy(corpus, preds, scenes=dict(scenes))
    for task, acc in report["accuracy"].items():
        assert acc == 1.0, task
    assert report.get("flow_mave", 0.0) == pytest.approx(0.0, abs=1e-9)
    assert report["plan_l2"]["avg"] == pytest.approx(0.0, abs=1e-9)
    assert report["plan_collision"]["avg"] == 0.0

    # Flip yes/no on exactly half of the status questions.
    status_idx = [i for i, p in enumerate(corpus) if p.task == "occ_status"]
    flipped = list(preds)
    for i in status_idx[: len(status_idx) // 2]:
        flipped[i] = "no" if corpus[i].answer == "yes" else "yes"
    report2 = qa_accuracy(corpus, flipped)
    assert report2["accuracy"]["occ_status"] == pytest.approx(
        1 - (len(status_idx) // 2) / len(status_idx))


def test_qa_accuracy_uniform_flow_error():
    # Textual flow answers offset by exactly 0.2 m/s must score mAVE 0.2.
    refs = []
    preds = []
    for i in range(10):
        ans = f"{{label: car}}, {{vx: {0.1 * i:.1f}, vy: 0.0}}"
        refs.append(QaPair(task="occ_class_flow", question="q", answer=ans,
                           scene_id=f"s{i}"))
        preds.append(f"{{label: car}}, {{vx: {0.1 * i + 0.2:.1f}, vy: 0.0}}")
    report = qa_accuracy(refs, preds)
    assert report["flow_mave"] == pytest.approx(0.2, abs=1e-9)
    assert report["accuracy"]["occ_class_flow"] == 1.0


def test_qa_accuracy_unparseable_penalties():
    refs = [
        QaPair(task="occ_status", question="q", answer="yes", scene_id="a"),
        QaPair(task="occ_class_flow", question="q",
               answer="{label: car}, {vx: 1.0, vy: 0.0}", scene_id="a"),
        QaPair(task="trajectory", question="q",
               answer=trajectory_answer(np.zeros((6, 2))), scene_id="a"),
    ]
    preds = ["banana", "gibberish", "nonsense"]
    report = qa_accuracy(refs, preds)
    assert report["accuracy"]["occ_status"] == 0.0
    assert report["accuracy"]["occ_class_flow"] == 0.0
    assert report["accuracy"]["trajectory"] == 0.0
    assert report["unparseable"] == {"occ_status": 1, "occ_class_flow": 1,
                                     "trajectory": 1}
    assert report["flow_mave"] == pytest.approx(1.0)
    assert report["plan_l2"]["avg"] == pytest.approx(10.0)


def test_metric_report_validation():
    r = MetricReport(rayiou={"1m": 0.5, "mean": 0.5}, mave={"mean": 0.3},
                     occscore=52.0, l2={"avg": 1.2}, collision={"avg": 0.01})
    r.validate()
    assert "RayIoU" in r.pretty()
    import json
    parsed = json.loads(r.to_json())
    assert parsed["occscore"] == 52.0
    bad = MetricReport(rayiou={"1m": 1.5})
    with pytest.raises(ValueError):
        bad.validate()
