"""Deterministic QA synthesis from scene ground truth, plus answer parsing.

Five task families share one record schema: scene captions, voxel occupancy
status (yes/no), voxel class + velocity, ego action, and a six-step future
trajectory rendered as per-frame displacements.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .occgrid import CLASS_NAMES, FREE_ID, GridSpec, OccToken, render_occ_token
from .worldgen import COMMANDS, SceneSample

TASKS = ("caption", "occ_status", "occ_class_flow", "action", "trajectory")

ACTION_TEXT = {
    "straight": "Go straight.",
    "left": "Turn left.",
    "right": "Turn right.",
    "stop": "Stop.",
}
_TEXT_ACTION = {v.lower(): k for k, v in ACTION_TEXT.items()}

ACTION_QUESTION = "What is the safe action of the ego car?"
TRAJECTORY_QUESTION = "Predict the future 6-frame trajectory of the ego car in the last."
OCC_STATUS_QUESTION = "Is the position {position} occupied?"
OCC_CLASS_QUESTION = (
    "What object is occupying position {position}? If there is an object, "
    "please provide its name and predict the velocity; otherwise, answer 'free'."
)

CAPTION_QUESTIONS = (
    "Describe the current driving scene.",
    "What does the scene around the ego car look like?",
    "Summarize the surroundings of the ego car.",
    "Give a brief description of the scene.",
    "What is happening around the ego car?",
    "Describe the objects and agents near the ego car.",
    "Provide an overview of the driving environment.",
)


def scene_preamble(spec: GridSpec) -> str:
    """Shared context sentence block for voxel-level questions.

    The two ego-position sentences disagree on purpose: the first speaks in
    world meters, the second in grid indices, and downstream code always
    interprets ``<OCC>`` coordinates as grid indices.
    """
    ego = render_occ_token(OccToken(spec.nx // 2, spec.ny // 2, 0))
    return (
        "Your task is to predict the 3D occupancy of the scene. "
        "Assume you are located at the point (0, 0, 0). "
        "The scene area around you (in front, behind, left, and right) is "
        f"divided into a {spec.nx}×{spec.ny} grid, with the bottom-left corner at "
        f"({spec.x_min:g}, {spec.y_min:g}) and the top-right corner at "
        f"({spec.x_max:g}, {spec.y_max:g}). "
        f"The height region is divided into {spec.nz} bins. "
        "We use <OCC>(x, y, z)</OCC> to represent the point at location (x, y) "
        "with a height of z. "
        f"Assume you are located at the point {ego}. "
        "Answer the below question."
    )


@dataclass(frozen=True)
class QaPair:
    task: str
    question: str
    answer: str
    scene_id: str
    frame: int = 0
    anchor: OccToken | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "occ_status" and self.answer not in ("yes", "no"):
            raise ValueError(f"occ_status answer must be yes/no, got {self.answer!r}")
        if self.task == "action" and self.answer not in ACTION_TEXT.values():
            raise ValueError(f"bad action answer {self.answer!r}")
        if self.task == "trajectory" and len(_PAIR_RE.findall(self.answer)) != 6:
            raise ValueError("trajectory answer must contain exactly 6 waypoints")

    def to_record(self) -> dict:
        meta = {}
        if self.anchor is not None:
            meta["anchor"] = [self.anchor.x, self.anchor.y, self.anchor.z]
        return {
            "scene_id": self.scene_id,
            "frame": self.frame,
            "task": self.task,
            "question": self.question,
            "answer": self.answer,
            "meta": meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QaPair":
        anchor = None
        if rec.get("meta", {}).get("anchor"):
            anchor = OccToken(*rec["meta"]["anchor"])
        return cls(task=rec["task"], question=rec["question"], answer=rec["answer"],
                   scene_id=rec["scene_id"], frame=int(rec.get("frame", 0)),
                   anchor=anchor)


# ---------------------------------------------------------------------------
# Answer formatting
# ---------------------------------------------------------------------------

def format_velocity(v: float) -> str:
    """Two decimals with one trailing zero stripped: 0.10 -> "0.1", 0 -> "0.0"."""
    s = f"{float(v):.2f}"
    if s == "-0.00":
        s = "0.00"
    if s.endswith("0"):
        s = s[:-1]
    return s


def format_coord(v: float) -> str:
    """Fixed two-decimal waypoint coordinate; negative zero normalized."""
    s = f"{float(v):.2f}"
    return "0.00" if s == "-0.00" else s


def class_flow_answer(class_id: int, vx: float, vy: float) -> str:
    if class_id == FREE_ID:
        return "free"
    name = CLASS_NAMES[class_id]
    return f"{{label: {name}}}, {{vx: {format_velocity(vx)}, vy: {format_velocity(vy)}}}"


def trajectory_answer(waypoints: np.ndarray) -> str:
    """Render cumulative waypoints as six per-frame displacement pairs."""
    wp = np.asarray(waypoints, dtype=np.float64)
    steps = np.diff(np.vstack([np.zeros((1, 2)), wp]), axis=0)
    pairs = ", ".join(f"({format_coord(x)}, {format_coord(y)})" for x, y in steps)
    return f"Future 6-frame trajectory: [{pairs}]."


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _sample_indices(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    if len(pool) == 0 or n == 0:
        return np.zeros((0,), dtype=np.int64)
    replace = len(pool) < n
    return rng.choice(pool, size=n, replace=replace)


def gen_occ_status_qa(scene: SceneSample, n: int, seed: int,
                      scene_id: str = "scene") -> list[QaPair]:
    """Balanced yes/no questions over occupied and free voxels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), 1]))
    spec = scene.spec
    occ_flat = scene.occ.occupied.ravel()
    occupied = np.flatnonzero(occ_flat)
    free = np.flatnonzero(~occ_flat)
    n_yes = n // 2
    picks_yes = _sample_indices(rng, occupied, n_yes)
    picks_no = _sample_indices(rng, free, n - len(picks_yes))
    preamble = scene_preamble(spec)

    pairs = []
    flat = list(picks_yes) + list(picks_no)
    answers = ["yes"] * len(picks_yes) + ["no"] * len(picks_no)
    for idx, ans in zip(flat, answers):
        x, y, z = np.unravel_index(int(idx), spec.shape)
        tok = OccToken(int(x), int(y), int(z))
        q = preamble + " " + OCC_STATUS_QUESTION.format(position=render_occ_token(tok))
        pairs.append(QaPair(task="occ_status", question=q, answer=ans,
                            scene_id=scene_id, anchor=tok))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def gen_occ_class_flow_qa(scene: SceneSample, n: int, seed: int,
                          scene_id: str = "scene") -> list[QaPair]:
    """Class + velocity questions cycling dynamic, static and free voxels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), 2]))
    spec = scene.spec
    occ_flat = scene.occ.occupied.ravel()
    dyn_flat = scene.flow.dynamic_mask.ravel()
    dynamic = np.flatnonzero(dyn_flat)
    static = np.flatnonzero(occ_flat & ~dyn_flat)
    free = np.flatnonzero(~occ_flat)
    pools = [dynamic if len(dynamic) else static, static, free]

    preamble = scene_preamble(spec)
    labels = scene.occ.labels.ravel()
    vel = scene.flow.velocity.reshape(-1, 2)

    pairs = []
    for i in range(n):
        pool = pools[i % 3]
        if len(pool) == 0:
            pool = free
        idx = int(rng.choice(pool))
        x, y, z = np.unravel_index(idx, spec.shape)
        tok = OccToken(int(x), int(y), int(z))
        q = preamble + " " + OCC_CLASS_QUESTION.format(position=render_occ_token(tok))
        ans = class_flow_answer(int(labels[idx]), float(vel[idx, 0]), float(vel[idx, 1]))
        pairs.append(QaPair(task="occ_class_flow", question=q, answer=ans,
                            scene_id=scene_id, anchor=tok))
    return pairs


def gen_action_qa(scene: SceneSample, scene_id: str = "scene") -> QaPair:
    return QaPair(task="action", question=ACTION_QUESTION,
                  answer=ACTION_TEXT[scene.command], scene_id=scene_id)


def gen_traj_qa(scene: SceneSample, scene_id: str = "scene") -> QaPair:
    return QaPair(task="trajectory", question=TRAJECTORY_QUESTION,
                  answer=trajectory_answer(scene.plan.waypoints), scene_id=scene_id)


def scene_caption(scene: SceneSample) -> str:
    """Rule-based scene description: agent census, motion, ego command."""
    counts: dict[int, int] = {}
    for agent in scene.agents:
        counts[agent.class_id] = counts.get(agent.class_id, 0) + 1
    if counts:
        parts = []
        for cid in sorted(counts):
            k = counts[cid]
            name = CLASS_NAMES[cid]
            parts.append(f"{k} {name}" + ("s" if k > 1 else ""))
        if len(parts) == 1:
            census = parts[0]
        else:
            census = ", ".join(parts[:-1]) + " and " + parts[-1]
        moving = sum(1 for a in scene.agents
                     if np.hypot(*a.velocity) > 0.1)
        if moving == 0:
            motion = "None of them are moving."
        elif moving == 1:
            motion = "1 of them is moving."
        else:
            motion = f"{moving} of them are moving."
        agents_text = f"There are {census} near the ego car. {motion}"
    else:
        agents_text = "There are no moving vehicles or pedestrians nearby."
    ego_text = {
        "straight": "The ego car goes straight along the road.",
        "left": "The ego car turns left at the intersection.",
        "right": "The ego car turns right at the intersection.",
        "stop": "The ego car is stopped.",
    }[scene.command]
    return f"{agents_text} {ego_text}"


def gen_caption(scene: SceneSample, n: int = 1, scene_id: str = "scene") -> list[QaPair]:
    """One canonical caption served under up to seven question phrasings."""
    answer = scene_caption(scene)
    return [QaPair(task="caption", question=CAPTION_QUESTIONS[i % len(CAPTION_QUESTIONS)],
                   answer=answer, scene_id=scene_id)
            for i in range(n)]


# ---------------------------------------------------------------------------
# Corpus assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QaMix:
    """Per-scene pair counts.  Defaults approximate an 84:420:140:24 blend of
    captions : occupancy : class+flow : planning per thousand scenes."""

    caption: int = 7
    occ_status: int = 35
    occ_class_flow: int = 12
    action: int = 1
    trajectory: int = 1

    @classmethod
    def parse(cls, text: str) -> "QaMix":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 5:
            raise ParseError("mix must be 5 comma-separated counts "
                             "(caption,occ_status,occ_class_flow,action,trajectory)")
        try:
            vals = [int(p) for p in parts]
        except ValueError as e:
            raise ParseError(f"bad mix value: {e}") from None
        if any(v < 0 for v in vals):
            raise ParseError("mix counts must be >= 0")
        return cls(*vals)


def build_corpus(scenes: list[tuple[str, SceneSample]], seed: int,
                 mix: QaMix | None = None) -> list[QaPair]:
    """All QA pairs for a scene list, ordered by scene id then task."""
    mix = mix or QaMix()
    out: list[QaPair] = []
    for i, (sid, scene) in enumerate(sorted(scenes, key=lambda t: t[0])):
        pair_seed = int(np.random.SeedSequence(entropy=[int(seed), i]).generate_state(1)[0])
        if mix.caption:
            out.extend(gen_caption(scene, mix.caption, scene_id=sid))
        if mix.occ_status:
            out.extend(gen_occ_status_qa(scene, mix.occ_status, pair_seed, scene_id=sid))
        if mix.occ_class_flow:
            out.extend(gen_occ_class_flow_qa(scene, mix.occ_class_flow, pair_seed, scene_id=sid))
        if mix.action:
            out.append(gen_action_qa(scene, scene_id=sid))
        if mix.trajectory:
            out.append(gen_traj_qa(scene, scene_id=sid))
    return out


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------

_LABEL_RE = re.compile(
    r"\{\s*label\s*:\s*([A-Za-z_]+)\s*\}\s*,\s*"
    r"\{\s*vx\s*:\s*(-?\d+(?:\.\d+)?)\s*,\s*vy\s*:\s*(-?\d+(?:\.\d+)?)\s*\}"
)
_PAIR_RE = re.compile(r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)")


def parse_answer(task: str, text: str):
    """Invert a generator's answer format into typed values.

    Returns: occ_status -> bool; occ_class_flow -> (name, vx, vy) with
    velocities None for "free"; action -> command string; trajectory ->
    float array [6, 2] of per-frame displacements; caption -> stripped text.
    """
    if task not in TASKS:
        raise ParseError(f"unknown task {task!r}")
    s = text.strip()
    if task == "caption":
        return s
    if task == "occ_status":
        low = s.lower().rstrip(".")
        if low == "yes":
            return True
        if low == "no":
            return False
        raise ParseError(f"occ_status answer must be yes or no, got {text!r}")
    if task == "occ_class_flow":
        if s.lower().rstrip(".").strip("'\"") == "free":
            return ("free", None, None)
        m = _LABEL_RE.search(s)
        if m is None:
            raise ParseError(f"unrecognized class/velocity answer: {text!r}")
        return (m.group(1), float(m.group(2)), float(m.group(3)))
    if task == "action":
        key = s.lower()
        if key in _TEXT_ACTION:
            return _TEXT_ACTION[key]
        key = key.rstrip(".")
        for rendered, cmd in _TEXT_ACTION.items():
            if key == rendered.rstrip("."):
                return cmd
        raise ParseError(f"unrecognized action answer: {text!r}")
    # trajectory
    pairs = _PAIR_RE.findall(s)
    if len(pairs) != 6:
        raise ParseError(f"trajectory answer must contain 6 pairs, found {len(pairs)}")
    return np.asarray([[float(a), float(b)] for a, b in pairs], dtype=np.float64)


def displacements_to_waypoints(steps: np.ndarray) -> np.ndarray:
    """Cumulative ego positions from per-frame displacement pairs."""
    return np.cumsum(np.asarray(steps, dtype=np.float64), axis=0)
