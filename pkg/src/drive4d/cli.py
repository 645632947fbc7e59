"""Command-line entry point: synthetic world generation, QA corpus export,
two-stage training, evaluation, plotting, and an end-to-end demo.

Exit codes: 0 on success, 1 on usage errors (bad flags or arguments),
2 on runtime failures (missing files, malformed inputs, training errors).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .errors import Drive4dError
from .harness import (
    RunConfig,
    build_corpus,
    evaluate,
    load_checkpoint,
    predict_scene,
    save_checkpoint,
    train_run,
)
from .model import command_index
from .occgrid import write_jsonl
from .qaengine import QaMix
from .viz import plot_history, plot_scene
from .worldgen import generate_split, load_split_items

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

WORKER_ENV = "DRIVE4D_NUM_WORKERS"


class UsageError(Exception):
    """Bad command-line arguments; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract here is 1.
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="drive4d",
        description="Desk-scale 4D occupancy, language, and planning stack.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    gw = sub.add_parser("gen-world", help="generate a train/val scene split")
    gw.add_argument("--out", required=True, help="output directory")
    gw.add_argument("--scenes", type=_positive_int, default=20,
                    help="number of scenes to generate (default 20)")
    gw.add_argument("--seed", type=int, default=0)
    gw.add_argument("--difficulty", choices=("easy", "normal", "hard"),
                    default="normal")
    gw.set_defaults(func=cmd_gen_world)

    gq = sub.add_parser("gen-qa", help="export a QA corpus as JSON lines")
    gq.add_argument("--scenes", required=True,
                    help="scene split directory (from gen-world)")
    gq.add_argument("--out", required=True, help="output .jsonl path")
    gq.add_argument("--seed", type=int, default=0)
    gq.add_argument("--mix", default="7,35,12,1,1",
                    help="per-scene pair counts: caption,occ_status,"
                         "occ_class_flow,action,trajectory")
    gq.set_defaults(func=cmd_gen_qa)

    tr = sub.add_parser("train", help="run the two-stage schedule")
    tr.add_argument("--scenes", required=True, help="training split directory")
    tr.add_argument("--out", required=True,
                    help="run directory for checkpoint, config, and logs")
    tr.add_argument("--config", help="run-config JSON file (defaults applied)")
    tr.add_argument("--seed", type=int, help="override the config seed")
    tr.add_argument("--mix", help="override the config QA mix")
    tr.add_argument("--preset", choices=("text", "vision", "both"),
                    help="ablation preset: text-only, vision-only, or both")
    tr.add_argument("--ego-status", choices=("on", "off"),
                    help="feed ego speed and yaw rate to the planner")
    tr.add_argument("--hidden", choices=("last", "weighted"),
                    help="decoder hidden-state readout mode")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a scene split")
    ev.add_argument("--ckpt", required=True, help="checkpoint file")
    ev.add_argument("--scenes", required=True, help="evaluation split directory")
    ev.add_argument("--out", default="metrics.json",
                    help="metric report JSON path (default metrics.json)")
    ev.add_argument("--seed", type=int, default=0,
                    help="seed for QA reference generation and plan sampling")
    ev.add_argument("--qa-limit", type=_positive_int,
                    help="score QA on at most this many scenes")
    ev.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render scene panels to PNG files")
    pl.add_argument("--scenes", required=True, help="scene split directory")
    pl.add_argument("--out", required=True, help="output directory")
    pl.add_argument("--ckpt", help="overlay model predictions from checkpoint")
    pl.add_argument("--limit", type=_positive_int, default=4,
                    help="number of scenes to render (default 4)")
    pl.add_argument("--seed", type=int, default=0,
                    help="seed for plan sampling")
    pl.set_defaults(func=cmd_plot)

    dm = sub.add_parser("demo",
                        help="tiny end-to-end run: world, QA, train, eval, plots")
    dm.add_argument("--out", required=True, help="demo output directory")
    dm.add_argument("--seed", type=int, default=0)
    dm.add_argument("--scenes", type=_positive_int, default=12,
                    help="number of scenes to generate (default 12)")
    dm.add_argument("--steps", type=_positive_int, default=300,
                    help="stage-2 steps (default 300)")
    dm.set_defaults(func=cmd_demo)

    return parser


def _load_items(path: str):
    split = Path(path)
    if not (split / "manifest.json").is_file():
        raise UsageError(f"{split} is not a scene split (missing manifest.json)")
    return load_split_items(split)


def cmd_gen_world(args) -> int:
    train_dir, val_dir = generate_split(args.scenes, args.seed, args.out,
                                        difficulty=args.difficulty)
    n_train = len(_load_items(str(train_dir)))
    n_val = len(_load_items(str(val_dir)))
    print(f"wrote {n_train} train scenes to {train_dir}")
    print(f"wrote {n_val} val scenes to {val_dir}")
    return EXIT_OK


def cmd_gen_qa(args) -> int:
    items = _load_items(args.scenes)
    corpus = build_corpus(items, args.seed, mix=QaMix.parse(args.mix))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, [p.to_record() for p in corpus])
    counts: dict[str, int] = {}
    for pair in corpus:
        counts[pair.task] = counts.get(pair.task, 0) + 1
    summary = "  ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    print(f"wrote {len(corpus)} pairs to {out} ({summary})")
    return EXIT_OK


def _resolve_config(args) -> RunConfig:
    """Config file plus flag overrides; flags win over the file."""
    data: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise UsageError("config root must be a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.mix is not None:
        data["mix"] = args.mix
    if args.preset is not None:
        data["preset"] = args.preset
    model = dict(data.get("model", {}))
    if args.ego_status is not None:
        model["use_ego_status"] = args.ego_status == "on"
    if args.hidden is not None:
        model["hidden_mode"] = args.hidden
    if model:
        data["model"] = model
    return RunConfig.from_dict(data)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    items = _load_items(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(items, cfg.seed, mix=cfg.qa_mix())
    t0 = time.monotonic()
    model, history = train_run(cfg, dict(items), corpus=corpus,
                               log_path=str(out / "history.jsonl"))
    elapsed = time.monotonic() - t0
    save_checkpoint(str(out / "checkpoint.pt"), model, cfg)
    (out / "config.json").write_text(cfg.to_json())
    plot_history(history, out / "loss_curves.png")
    last = history[-1]
    print(f"trained {len(history)} steps in {elapsed:.1f} s "
          f"(final total={last.get('total', last['llm']):.4f})")
    print(f"checkpoint: {out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model = load_checkpoint(args.ckpt)
    items = _load_items(args.scenes)
    corpus = build_corpus(items, args.seed, mix=cfg.qa_mix())
    report = evaluate(model, items, corpus=corpus,
                      qa_scene_limit=args.qa_limit,
                      sample_seed=args.seed,
                      include_preamble=cfg.include_preamble,
                      max_new_tokens=cfg.max_answer_tokens)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    print(report.pretty())
    print(f"report: {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    items = _load_items(args.scenes)[: args.limit]
    model = None
    if args.ckpt:
        model = load_checkpoint(args.ckpt)[1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, scene in items:
        pred_occ = pred_flow = pred_plan = None
        if model is not None:
            pred_occ, pred_flow = predict_scene(model, scene)
            with torch.no_grad():
                sensor = torch.from_numpy(
                    np.array(scene.sensor, dtype=np.float32))
                combined = model(model.vision_tokens(sensor[None]),
                                 torch.zeros((1, 0), dtype=torch.long))
                status = scene.plan.ego_status
                ego = (torch.tensor([list(status)], dtype=torch.float32)
                       if status else torch.zeros((1, 3)))
                cond = model.plan_condition(
                    combined, torch.tensor([command_index(scene.command)]), ego)
                gen = torch.Generator().manual_seed(args.seed)
                pred_plan = model.sample_plan(cond, generator=gen)[0].numpy()
        plot_scene(scene, out / f"{sid}.png", pred_occ=pred_occ,
                   pred_flow=pred_flow, pred_plan=pred_plan)
    print(f"wrote {len(items)} scene panels to {out}")
    return EXIT_OK


def cmd_demo(args) -> int:
    """World -> QA -> two-stage train -> eval -> plots, all desk-sized."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()

    train_dir, val_dir = generate_split(args.scenes, args.seed, out / "world")
    train_items = _load_items(str(train_dir))
    val_items = _load_items(str(val_dir))
    print(f"[demo] {len(train_items)} train / {len(val_items)} val scenes")

    cfg = RunConfig(seed=args.seed, stage1_steps=max(20, args.steps // 5),
                    stage2_steps=args.steps)
    corpus = build_corpus(train_items, cfg.seed, mix=cfg.qa_mix())
    write_jsonl(out / "qa_train.jsonl", [p.to_record() for p in corpus])
    print(f"[demo] {len(corpus)} training QA pairs")

    model, history = train_run(cfg, dict(train_items), corpus=corpus,
                               log_path=str(out / "history.jsonl"))
    save_checkpoint(str(out / "checkpoint.pt"), model, cfg)
    (out / "config.json").write_text(cfg.to_json())
    plot_history(history, out / "loss_curves.png")
    print(f"[demo] trained {len(history)} steps "
          f"({time.monotonic() - t0:.1f} s elapsed)")

    report = evaluate(model, val_items, n_azimuth=128, n_elevation=16,
                      sample_seed=cfg.seed,
                      include_preamble=cfg.include_preamble,
                      max_new_tokens=cfg.max_answer_tokens)
    (out / "metrics.json").write_text(report.to_json())

    plots = out / "plots"
    for sid, scene in val_items[:2]:
        pred_occ, pred_flow = predict_scene(model, scene)
        plot_scene(scene, plots / f"{sid}.png", pred_occ=pred_occ,
                   pred_flow=pred_flow)

    print(report.pretty())
    print(f"[demo] finished in {time.monotonic() - t0:.1f} s; "
          f"artifacts under {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    workers = os.environ.get(WORKER_ENV)
    if workers is not None:
        try:
            n = int(workers)
        except ValueError:
            print(f"error: {WORKER_ENV} must be an integer, got {workers!r}",
                  file=sys.stderr)
            return EXIT_RUNTIME
        if n > 0:
            torch.set_num_threads(n)

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Drive4dError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
