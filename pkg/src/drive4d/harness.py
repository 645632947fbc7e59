"""Two-stage training orchestration, evaluation, and checkpoint plumbing.

Stage 1 trains only the spatial projector against caption cross-entropy with
the language backbone and sensor encoder frozen.  Stage 2 jointly optimizes
the projector, backbone, and all task heads, keeping only the encoder frozen.
Both freeze contracts are enforced with parameter hashes, not convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .backbone import BOS, EOS, Vocabulary, build_vocabulary
from .errors import ConfigError, ShapeError, VersionError
from .losses import LossWeights, loss_flow, loss_llm, loss_occ, loss_total
from .metrics import (
    MetricReport,
    collision_rate,
    future_grids_for_scene,
    make_ray_fan,
    mave,
    occ_score,
    plan_l2,
    qa_accuracy,
    ray_iou_sweep,
)
from .model import Drive4dModel, ModelConfig, command_index, parameter_hash
from .occgrid import OccupancyGrid, TrajectoryPlan, write_jsonl
from .qaengine import (
    ACTION_QUESTION,
    ACTION_TEXT,
    CAPTION_QUESTIONS,
    OCC_CLASS_QUESTION,
    OCC_STATUS_QUESTION,
    TRAJECTORY_QUESTION,
    QaMix,
    QaPair,
    build_corpus,
    scene_preamble,
)
from .worldgen import SceneSample

PRESETS = ("text", "vision", "both")
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """One experiment: architecture, loss weights, schedule, and seeds."""

    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    preset: str = "both"
    seed: int = 0
    batch_size: int = 8
    lr: float = 3e-4
    stage1_lr: float = 3e-3
    weight_decay: float = 0.01
    stage1_steps: int = 300
    stage2_steps: int = 1500
    mix: str = "7,35,12,1,1"
    include_preamble: bool = False
    max_answer_tokens: int = 72

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        for name in ("batch_size", "stage1_steps", "stage2_steps",
                     "max_answer_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "stage1_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        QaMix.parse(self.mix)

    def qa_mix(self) -> QaMix:
        return QaMix.parse(self.mix)

    def effective_weights(self) -> LossWeights:
        """Loss weights after applying the ablation preset."""
        w = self.weights
        if self.preset == "text":
            return LossWeights(llm=w.llm, occ=0.0, flow=0.0, action=0.0,
                               flow_static=w.flow_static,
                               flow_dynamic=w.flow_dynamic)
        if self.preset == "vision":
            return LossWeights(llm=0.0, occ=w.occ, flow=w.flow, action=w.action,
                               flow_static=w.flow_static,
                               flow_dynamic=w.flow_dynamic)
        return w

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "model":
                out[f.name] = v.to_dict()
            elif f.name == "weights":
                out[f.name] = {g.name: getattr(v, g.name)
                               for g in fields(LossWeights)}
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "model" in kwargs and isinstance(kwargs["model"], dict):
            kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        if "weights" in kwargs and isinstance(kwargs["weights"], dict):
            wd = kwargs["weights"]
            wk = {f.name for f in fields(LossWeights)}
            bad = set(wd) - wk
            if bad:
                raise ConfigError(f"unknown loss weight keys: {sorted(bad)}")
            kwargs["weights"] = LossWeights(**wd)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# Corpus and scene preparation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainExample:
    scene_id: str
    task: str
    prompt: tuple[int, ...]
    answer: tuple[int, ...]


class SceneBundle:
    """Per-scene training targets as torch tensors."""

    def __init__(self, scene: SceneSample):
        self.sensor = torch.from_numpy(np.array(scene.sensor, dtype=np.float32))
        self.occ = torch.from_numpy(scene.occ.labels.astype(np.int64))
        self.flow = torch.from_numpy(np.array(scene.flow.velocity,
                                              dtype=np.float32))
        self.dynamic = torch.from_numpy(np.array(scene.flow.dynamic_mask))
        self.occupied = self.occ != 0
        self.plan = torch.from_numpy(np.array(scene.plan.waypoints,
                                              dtype=np.float32))
        self.command = command_index(scene.command)
        status = scene.plan.ego_status
        self.ego_status = torch.tensor(status if status is not None
                                       else (0.0, 0.0, 0.0), dtype=torch.float32)


def _stock_texts(spec) -> list[str]:
    """Fixed phrases every run must be able to tokenize, train split aside."""
    texts = [
        scene_preamble(spec),
        ACTION_QUESTION,
        TRAJECTORY_QUESTION,
        OCC_STATUS_QUESTION,
        OCC_CLASS_QUESTION,
        "yes no free",
        "{label: car}, {vx: 0.0, vy: 0.0}",
        "Future 6-frame trajectory: [(0.0, 0.0)].",
        "cars trucks pedestrians bicycles",
        "There are no moving vehicles or pedestrians nearby.",
        "None of them are moving. 1 of them is moving. 4 of them are moving.",
        "There are 2 cars near the ego car.",
        "The ego car goes straight along the road.",
        "The ego car turns left at the intersection.",
        "The ego car turns right at the intersection.",
        "The ego car is stopped.",
    ]
    texts.extend(CAPTION_QUESTIONS)
    texts.extend(ACTION_TEXT.values())
    return texts


def corpus_vocabulary(corpus: list[QaPair], spec) -> Vocabulary:
    texts = _stock_texts(spec)
    for pair in corpus:
        texts.append(pair.question)
        texts.append(pair.answer)
    return build_vocabulary(texts)


def build_examples(model: Drive4dModel, corpus: list[QaPair],
                   include_preamble: bool = False) -> list[TrainExample]:
    preamble = scene_preamble(model.cfg.grid) + " " if include_preamble else ""
    out = []
    for pair in corpus:
        prompt = tuple(model.encode_prompt(preamble + pair.question))
        answer = tuple(model.encode_answer(pair.answer))
        out.append(TrainExample(scene_id=pair.scene_id, task=pair.task,
                                prompt=prompt, answer=answer))
    return out


def collate_examples(examples: list[TrainExample]):
    """Right-pad prompt||answer rows; mask marks answer-token targets."""
    seqs = [list(ex.prompt) + list(ex.answer) for ex in examples]
    b = len(seqs)
    t = max(len(s) for s in seqs)
    ids = torch.zeros(b, t, dtype=torch.long)
    key_mask = torch.zeros(b, t, dtype=torch.bool)
    targets = torch.zeros(b, t - 1, dtype=torch.long)
    ans_mask = torch.zeros(b, t - 1, dtype=torch.bool)
    for i, (ex, s) in enumerate(zip(examples, seqs)):
        ids[i, :len(s)] = torch.tensor(s, dtype=torch.long)
        key_mask[i, :len(s)] = True
        targets[i, :len(s) - 1] = torch.tensor(s[1:], dtype=torch.long)
        ans_mask[i, len(ex.prompt) - 1:len(s) - 1] = True
    return ids, key_mask, targets, ans_mask


class EpochSampler:
    """Deterministic reshuffled epochs over example indices, looped forever."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ConfigError("cannot sample from an empty corpus")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[int(seed), 0xBA7C]))
        self._queue: list[int] = []

    def next_batch(self) -> list[int]:
        while len(self._queue) < self.batch_size:
            self._queue.extend(self.rng.permutation(self.n).tolist())
        batch, self._queue = (self._queue[:self.batch_size],
                              self._queue[self.batch_size:])
        return batch


# ---------------------------------------------------------------------------
# Shared training step
# ---------------------------------------------------------------------------

def _scene_rows(examples: list[TrainExample]):
    order: list[str] = []
    first_row: list[int] = []
    row_scene: list[int] = []
    for i, ex in enumerate(examples):
        if ex.scene_id not in order:
            order.append(ex.scene_id)
            first_row.append(i)
        row_scene.append(order.index(ex.scene_id))
    return order, first_row, row_scene


def training_step(model: Drive4dModel, examples: list[TrainExample],
                  bundles: dict[str, SceneBundle], weights: LossWeights,
                  generator: torch.Generator, text_only: bool = False) -> dict:
    """One forward pass computing the component losses.

    text_only skips the frozen perception and planner heads (stage 1).
    """
    order, first_row, row_scene = _scene_rows(examples)
    sensors = torch.stack([bundles[sid].sensor for sid in order])
    vision = model.vision_tokens(sensors)
    row_vision = vision[torch.tensor(row_scene)]

    ids, key_mask, targets, ans_mask = collate_examples(examples)
    combined = model(row_vision, ids, key_mask)
    n_vis = model.num_vision_tokens
    text_logits = model.text_logits(combined[:, n_vis:, :])[:, :-1]
    llm = loss_llm(text_logits, targets, ans_mask)
    if text_only:
        zero = llm.detach() * 0.0
        return {"total": weights.llm * llm, "llm": llm, "occ": zero,
                "flow": zero, "action": zero}

    scene_combined = combined[torch.tensor(first_row)]
    occ_logits, flow_pred = model.perception(scene_combined)
    occ_t = torch.stack([bundles[sid].occ for sid in order])
    flow_t = torch.stack([bundles[sid].flow for sid in order])
    dyn_t = torch.stack([bundles[sid].dynamic for sid in order])
    occupied_t = torch.stack([bundles[sid].occupied for sid in order])
    occ = loss_occ(occ_logits, occ_t)
    flow = loss_flow(flow_pred, flow_t, dyn_t, occupied_t,
                     w_static=weights.flow_static,
                     w_dynamic=weights.flow_dynamic)

    commands = torch.tensor([bundles[sid].command for sid in order])
    status = torch.stack([bundles[sid].ego_status for sid in order])
    plans = torch.stack([bundles[sid].plan for sid in order])
    cond = model.plan_condition(scene_combined, commands, status)
    action = model.plan_training_loss(cond, plans, generator=generator)

    total = loss_total(llm, occ, flow, action, weights)
    return {"total": total, "llm": llm, "occ": occ, "flow": flow,
            "action": action}


def _optim(params, lr: float, weight_decay: float, steps: int):
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps))
    return opt, sched


def build_model(cfg: RunConfig, vocab: Vocabulary) -> Drive4dModel:
    """Seeded construction so identical configs give identical weights."""
    torch.manual_seed(cfg.seed)
    return Drive4dModel(cfg.model, vocab)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage1_train(cfg: RunConfig, corpus: list[QaPair],
                 scenes: dict[str, SceneSample],
                 model: Drive4dModel | None = None,
                 log_path: str | None = None):
    """Caption-only projector training; backbone and encoder stay frozen."""
    captions = [p for p in corpus if p.task == "caption"]
    if not captions:
        raise ConfigError("stage 1 needs a nonempty caption corpus")
    if model is None:
        model = build_model(cfg, corpus_vocabulary(corpus, cfg.model.grid))
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.projector.parameters():
        p.requires_grad_(True)

    lm_hash = parameter_hash(model.lm)
    enc_hash = parameter_hash(model.encoder)
    bundles = {sid: SceneBundle(s) for sid, s in scenes.items()}
    examples = build_examples(model, captions, cfg.include_preamble)
    sampler = EpochSampler(len(examples), cfg.batch_size, cfg.seed)
    opt, sched = _optim(model.projector.parameters(), cfg.stage1_lr,
                        cfg.weight_decay, cfg.stage1_steps)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    history = []
    for step in range(cfg.stage1_steps):
        batch = [examples[i] for i in sampler.next_batch()]
        losses = training_step(model, batch, bundles,
                               cfg.effective_weights(), gen, text_only=True)
        opt.zero_grad(set_to_none=True)
        losses["llm"].backward()
        opt.step()
        sched.step()
        history.append({"stage": 1, "step": step,
                        "llm": float(losses["llm"].detach()),
                        "lr": float(sched.get_last_lr()[0])})

    if parameter_hash(model.lm) != lm_hash:
        raise RuntimeError("stage-1 freeze contract violated: backbone moved")
    if parameter_hash(model.encoder) != enc_hash:
        raise RuntimeError("stage-1 freeze contract violated: encoder moved")
    if log_path:
        write_jsonl(log_path, history)
    return model, history


def stage2_train(cfg: RunConfig, corpus: list[QaPair],
                 scenes: dict[str, SceneSample], model: Drive4dModel,
                 log_path: str | None = None):
    """Joint optimization of projector, backbone, and heads; encoder frozen."""
    if not corpus:
        raise ConfigError("stage 2 needs a nonempty corpus")
    for p in model.parameters():
        p.requires_grad_(True)
    for p in model.encoder.parameters():
        p.requires_grad_(False)

    enc_hash = parameter_hash(model.encoder)
    weights = cfg.effective_weights()
    bundles = {sid: SceneBundle(s) for sid, s in scenes.items()}
    examples = build_examples(model, corpus, cfg.include_preamble)
    sampler = EpochSampler(len(examples), cfg.batch_size, cfg.seed + 2)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt, sched = _optim(trainable, cfg.lr, cfg.weight_decay, cfg.stage2_steps)
    gen = torch.Generator().manual_seed(cfg.seed + 3)

    history = []
    for step in range(cfg.stage2_steps):
        batch = [examples[i] for i in sampler.next_batch()]
        losses = training_step(model, batch, bundles, weights, gen)
        opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        opt.step()
        sched.step()
        history.append({"stage": 2, "step": step,
                        "total": float(losses["total"].detach()),
                        "llm": float(losses["llm"].detach()),
                        "occ": float(losses["occ"].detach()),
                        "flow": float(losses["flow"].detach()),
                        "action": float(losses["action"].detach()),
                        "lr": float(sched.get_last_lr()[0])})

    if parameter_hash(model.encoder) != enc_hash:
        raise RuntimeError("stage-2 freeze contract violated: encoder moved")
    if log_path:
        write_jsonl(log_path, history)
    return model, history


def train_run(cfg: RunConfig, scenes: dict[str, SceneSample],
              corpus: list[QaPair] | None = None,
              log_path: str | None = None):
    """Stage 1 then stage 2 on one scene set; returns model and history."""
    if corpus is None:
        corpus = build_corpus(sorted(scenes.items()), cfg.seed,
                              mix=cfg.qa_mix())
    model = build_model(cfg, corpus_vocabulary(corpus, cfg.model.grid))
    model, hist1 = stage1_train(cfg, corpus, scenes, model=model)
    model, hist2 = stage2_train(cfg, corpus, scenes, model)
    history = hist1 + hist2
    if log_path:
        write_jsonl(log_path, history)
    return model, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _mean_dicts(dicts: list[dict]) -> dict:
    out: dict[str, float] = {}
    for key in sorted({k for d in dicts for k in d}):
        vals = [d[key] for d in dicts if key in d]
        out[key] = float(np.mean(vals))
    return out


@torch.no_grad()
def predict_scene(model: Drive4dModel, scene: SceneSample):
    """Greedy perception outputs as metric-ready containers."""
    spec = model.cfg.grid
    sensor = torch.from_numpy(np.array(scene.sensor, dtype=np.float32))
    occ_logits, flow_pred = model.perceive_scene(sensor)
    labels = occ_logits[0].argmax(dim=-1).numpy().astype(np.int16)
    grid = OccupancyGrid(spec=spec, labels=labels)
    return grid, flow_pred[0].numpy()


def evaluate(model: Drive4dModel, scenes: list[tuple[str, SceneSample]],
             corpus: list[QaPair] | None = None,
             n_azimuth: int = 512, n_elevation: int = 32,
             qa_scene_limit: int | None = None,
             sample_seed: int = 0, include_barriers: bool = True,
             decode_batch: int = 32,
             include_preamble: bool = False,
             max_new_tokens: int = 72) -> MetricReport:
    """Score a model on held-out scenes; every sub-metric is optional-safe."""
    model.eval()
    spec = model.cfg.grid
    fan = make_ray_fan(spec, n_azimuth, n_elevation)
    scenes = sorted(scenes, key=lambda t: t[0])

    iou_rows, mave_rows, l2_rows = [], [], []
    plans, futures = [], []
    gen = torch.Generator().manual_seed(sample_seed)
    with torch.no_grad():
        for sid, scene in scenes:
            pred_grid, pred_flow = predict_scene(model, scene)
            iou_rows.append(ray_iou_sweep(pred_grid, scene.occ, fan))
            mave_rows.append(mave(pred_flow, scene.flow, scene.occ))

            sensor = torch.from_numpy(np.array(scene.sensor, dtype=np.float32))
            vision = model.vision_tokens(sensor)[None]
            empty = torch.zeros(1, 0, dtype=torch.long)
            combined = model(vision, empty)
            status = scene.plan.ego_status
            status_t = torch.tensor([status if status is not None
                                     else (0.0, 0.0, 0.0)], dtype=torch.float32)
            cond = model.plan_condition(
                combined, torch.tensor([command_index(scene.command)]), status_t)
            sampled = model.sample_plan(cond, generator=gen)[0].numpy()
            pred_plan = TrajectoryPlan(waypoints=np.asarray(sampled, dtype=np.float64))
            l2_rows.append(plan_l2(pred_plan, scene.plan))
            plans.append(pred_plan)
            futures.append(future_grids_for_scene(scene.occ, scene.flow))

    rayiou = _mean_dicts(iou_rows)
    mave_out = _mean_dicts(mave_rows)
    collision = collision_rate(plans, futures, include_barriers=include_barriers)
    score = occ_score(rayiou.get("mean", 0.0), mave_out.get("mean", 0.0))

    qa = {}
    if corpus:
        scene_map = dict(scenes)
        refs = [p for p in corpus if p.scene_id in scene_map]
        if qa_scene_limit is not None:
            keep = set(sorted({p.scene_id for p in refs})[:qa_scene_limit])
            refs = [p for p in refs if p.scene_id in keep]
        preds = decode_answers(model, refs, scene_map, decode_batch,
                               include_preamble, max_new_tokens)
        qa = qa_accuracy(refs, preds, scenes=scene_map,
                         include_barriers=include_barriers)

    return MetricReport(rayiou=rayiou, mave=mave_out, occscore=score,
                        l2=_mean_dicts(l2_rows), collision=collision,
                        qa=qa).validate()


def decode_answers(model: Drive4dModel, pairs: list[QaPair],
                   scenes: dict[str, SceneSample], batch_size: int = 32,
                   include_preamble: bool = False,
                   max_new_tokens: int = 72) -> list[str]:
    """Batched greedy answers for QA pairs, one per reference."""
    preamble = scene_preamble(model.cfg.grid) + " " if include_preamble else ""
    vision_cache: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for sid in sorted({p.scene_id for p in pairs}):
            sensor = torch.from_numpy(
                np.array(scenes[sid].sensor, dtype=np.float32))
            vision_cache[sid] = model.vision_tokens(sensor)
    out: list[str] = []
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        vision = torch.stack([vision_cache[p.scene_id] for p in chunk])
        prompts = [model.encode_prompt(preamble + p.question) for p in chunk]
        out.extend(model.greedy_decode(vision, prompts,
                                       max_new_tokens=max_new_tokens))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: Drive4dModel, cfg: RunConfig) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "run_config": cfg.to_json(),
        "vocab": list(model.vocab.tokens),
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)


def load_checkpoint(path: str):
    """Returns (RunConfig, Drive4dModel) with bit-identical parameters."""
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint format {version!r}, expected {CHECKPOINT_VERSION}")
    cfg = RunConfig.from_json(payload["run_config"])
    vocab = Vocabulary(list(payload["vocab"]))
    model = Drive4dModel(cfg.model, vocab)
    params = payload["params"]
    state = model.state_dict()
    for name in sorted(set(params) - set(state)):
        raise ShapeError(f"checkpoint parameter {name} not in model")
    for name in sorted(set(state) - set(params)):
        raise ShapeError(f"model parameter {name} missing from checkpoint")
    for name, tensor in params.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ShapeError(
                f"parameter {name}: checkpoint shape {tuple(tensor.shape)} "
                f"!= model shape {tuple(state[name].shape)}")
    model.load_state_dict(params)
    model.eval()
    return cfg, model
