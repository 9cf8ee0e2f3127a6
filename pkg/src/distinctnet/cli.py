"""Command-line entry point wiring generators, training and evaluation.

One experiment = one run directory:
    runs/<name>/{config,checkpoints,reports,logs}
Every command stamps the exact configuration it ran with into
config/run.cfg (flat key=value, diff-able); rerunning against a run
directory whose stamped config differs is refused unless --force. Reports
are bit-deterministic for a fixed seed; wall-clock latency fields are only
written where timing is the point (ablation.csv) or explicitly requested
(--timing).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .errors import DistinctNetError, ConfigError, UsageError
from .evalkit import (baseline_foreground_iou, config_fingerprint, evaluate,
                      measure_latency, motion_stop_control,
                      motion_stop_experiment, object_to_distractor_confusion,
                      write_ablation_csv, write_decay_csv, ablation_sweep)
from .net import (NetConfig, build_distinctnet, extend_heads, forward_pair,
                  PLACEMENTS)
from .selfsup import (TrainConfig, extract_paste_point, finetune_stage2,
                      harvest_foreground, split_records, train_stage1)
from .synthgen import (GenConfig, SceneSequence, build_stage1_dataset,
                       build_stage2_dataset, gen_stage1_sequence,
                       read_dataset)

RUN_SUBDIRS = ("config", "checkpoints", "reports", "logs")


# ---------------------------------------------------------------------------
# run-directory + config plumbing
# ---------------------------------------------------------------------------

def _format_config(values: dict) -> str:
    lines = [f"{k}={values[k]}" for k in sorted(values)]
    return "\n".join(lines) + "\n"


def parse_config_file(path) -> dict:
    """Flat key=value file; blank lines and # comments ignored."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line (want key=value): {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _prepare_run_dir(run: Path, effective: dict, force: bool) -> None:
    cfg_path = run / "config" / "run.cfg"
    stamped = _format_config(effective)
    if cfg_path.exists() and cfg_path.read_text() != stamped and not force:
        raise ConfigError(
            f"run directory {run} was created with a different configuration; "
            f"pass --force to overwrite")
    for sub in RUN_SUBDIRS:
        (run / sub).mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(stamped)


def _coerce(text: str, default):
    if default is None:
        return None if text in ("None", "none", "") else text
    if isinstance(default, bool):
        return text in ("True", "true", "1", "yes")
    return type(default)(text)


def _merge_config(args, keys) -> dict:
    """Config-file values overridden by explicitly passed flags."""
    base = {}
    if getattr(args, "config", None):
        base = parse_config_file(args.config)
    effective = {}
    for key, default in keys.items():
        if key in args.__dict__ and args.__dict__[key] is not None:
            effective[key] = args.__dict__[key]
        elif key in base:
            effective[key] = _coerce(base[key], default)
        else:
            effective[key] = default
    return effective


def _net_config(v: dict, extra=(), recurrent=False) -> NetConfig:
    return NetConfig(input_h=int(v["height"]), input_w=int(v["width"]),
                     extra_classes=tuple(extra), recurrent=recurrent,
                     corr_after=v.get("corr_after", "block2"),
                     merge=v.get("merge", "correlation"))


def _gen_config(v: dict) -> GenConfig:
    return GenConfig(height=int(v["height"]), width=int(v["width"]),
                     frames_per_seq=int(v["frames"]),
                     sprite_frac=(float(v["sprite_min"]), float(v["sprite_max"])),
                     max_rotation_deg=float(v["rotation"]),
                     max_shift=None if v["shift"] in (None, "none") else int(v["shift"]),
                     distractors=bool(v["distractors"]),
                     occluder=not v["no_occluder"],
                     augment=not v["no_augment"],
                     bg_clutter=not v["no_clutter"])


GEN_DEFAULTS = dict(height=64, width=96, frames=10, sprite_min=0.30,
                    sprite_max=0.55, rotation=10.0, shift=None,
                    distractors=False, no_occluder=False, no_augment=False,
                    no_clutter=False)


def _add_gen_flags(p):
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int, help="frames per stage-1 sequence")
    p.add_argument("--sprite-min", dest="sprite_min", type=float)
    p.add_argument("--sprite-max", dest="sprite_max", type=float)
    p.add_argument("--rotation", type=float)
    p.add_argument("--shift", type=int)
    p.add_argument("--distractors", action="store_const", const=True)
    p.add_argument("--no-occluder", dest="no_occluder", action="store_const", const=True)
    p.add_argument("--no-augment", dest="no_augment", action="store_const", const=True)
    p.add_argument("--no-clutter", dest="no_clutter", action="store_const", const=True)


def _heads_from(v: dict) -> tuple:
    heads = [h for h in str(v["heads"]).split(",") if h]
    if v.get("gripper") and "gripper" not in heads:
        heads.append("gripper")
    if v.get("distractors") and "distractor" not in heads:
        heads.append("distractor")
    return tuple(heads)


def _load_model(model_run: Path, recurrent=False):
    cfg_vals = parse_config_file(model_run / "config" / "run.cfg")
    heads = tuple(h for h in cfg_vals.get("trained_heads", "").split(",") if h)
    net_cfg = NetConfig(
        input_h=int(cfg_vals["height"]), input_w=int(cfg_vals["width"]),
        extra_classes=heads,
        recurrent=cfg_vals.get("recurrent", "False") == "True",
        corr_after=cfg_vals.get("corr_after", "block2"),
        merge=cfg_vals.get("merge", "correlation"))
    model = build_distinctnet(net_cfg, seed=int(cfg_vals.get("seed", 0)))
    model.load_arrays(load_checkpoint(model_run / "checkpoints" / "model.dnkt"))
    return model, cfg_vals


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    keys = dict(GEN_DEFAULTS, stage=1, count=10, seed=0)
    v = _merge_config(args, keys)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"refusing to write into non-empty {out} (use --force)",
              file=sys.stderr)
        return 1
    gen_cfg = _gen_config(v)
    if int(v["stage"]) == 1:
        build_stage1_dataset(int(v["seed"]), int(v["count"]), gen_cfg, out)
    else:
        build_stage2_dataset(int(v["seed"]), int(v["count"]), gen_cfg, out)
    print(f"wrote {v['count']} stage-{v['stage']} items to {out}")
    return 0


def _train_keys():
    return dict(GEN_DEFAULTS, seed=0, epochs=10, steps=None, pairs_per_seq=5,
                recurrent=False, corr_after="block2", merge="correlation",
                heads="", gripper=False, bptt=3, static_prob=0.35)


def cmd_train(args) -> int:
    v = _merge_config(args, _train_keys())
    run = Path(args.run)
    effective = dict(v, command="train", data=str(args.data))
    _prepare_run_dir(run, effective, args.force)
    records = read_dataset(args.data)
    net_cfg = _net_config(v, recurrent=bool(v["recurrent"]))
    model = build_distinctnet(net_cfg, seed=int(v["seed"]))
    tcfg = TrainConfig(stage=1, epochs=int(v["epochs"]),
                       max_steps=None if v["steps"] in (None, "None") else int(v["steps"]),
                       pairs_per_sequence=int(v["pairs_per_seq"]),
                       seed=int(v["seed"]), bptt_len=int(v["bptt"]),
                       static_prob=float(v["static_prob"]))
    model, log = train_stage1(records, tcfg, model)
    save_checkpoint(model.params, run / "checkpoints" / "model.dnkt")
    log.to_csv(run / "logs" / "train_log.csv")
    val = split_records(records, "val")
    fingerprint = config_fingerprint(net_cfg, [int(v["seed"])])
    if val:
        report = evaluate(model, val, ("background", "foreground"),
                          fingerprint=fingerprint)
        (run / "reports" / "report.json").write_text(report.to_json())
    print(f"trained stage 1 for {len(log.rows)} steps -> {run}")
    return 0


def cmd_finetune(args) -> int:
    v = _merge_config(args, dict(_train_keys(), epochs=10, heads="manipulator,object",
                                 distractors=False))
    run = Path(args.run)
    heads = _heads_from(v)
    effective = dict(v, command="finetune", data=str(args.data),
                     model_run=str(args.model_run), trained_heads=",".join(heads))
    _prepare_run_dir(run, effective, args.force)
    model, model_cfg_vals = _load_model(Path(args.model_run))
    records = read_dataset(args.data)
    model = extend_heads(model, heads, seed=int(v["seed"]) + 1)
    tcfg = TrainConfig(stage=2, epochs=int(v["epochs"]),
                       max_steps=None if v["steps"] in (None, "None") else int(v["steps"]),
                       seed=int(v["seed"]))
    model, log = finetune_stage2(records, tcfg, model)
    save_checkpoint(model.params, run / "checkpoints" / "model.dnkt")
    log.to_csv(run / "logs" / "train_log.csv")
    # carry forward the geometry the loaded model was built with
    stamp = dict(effective, height=model.cfg.input_h, width=model.cfg.input_w,
                 recurrent=model.cfg.recurrent, corr_after=model.cfg.corr_after,
                 merge=model.cfg.merge)
    (run / "config" / "run.cfg").write_text(_format_config(stamp))
    val = split_records(records, "val")
    if val:
        classes = ("background", "foreground") + model.cfg.extra_classes
        fingerprint = config_fingerprint(model.cfg, [int(v["seed"])])
        report = evaluate(model, val, classes, fingerprint=fingerprint)
        (run / "reports" / "report.json").write_text(report.to_json())
    print(f"fine-tuned heads {heads} -> {run}")
    return 0


def cmd_eval(args) -> int:
    v = _merge_config(args, dict(seed=0, classes="", timing=False))
    run = Path(args.run)
    effective = dict(v, command="eval", data=str(args.data),
                     model_run=str(args.model_run))
    _prepare_run_dir(run, effective, args.force)
    model, _ = _load_model(Path(args.model_run))
    records = read_dataset(args.data)
    val = split_records(records, "val") or records
    if v["classes"]:
        classes = tuple(str(v["classes"]).split(","))
    else:
        classes = ("background", "foreground") + model.cfg.extra_classes
    latency = measure_latency(model, n_runs=10) if v["timing"] else None
    fingerprint = config_fingerprint(model.cfg, [int(v["seed"])])
    report = evaluate(model, val, classes, fingerprint=fingerprint,
                      latency_ms=latency)
    (run / "reports" / "report.json").write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_baseline(args) -> int:
    v = _merge_config(args, dict(tau=15, no_blur=False))
    run = Path(args.run)
    effective = dict(v, command="baseline", data=str(args.data))
    _prepare_run_dir(run, effective, args.force)
    records = read_dataset(args.data)
    val = split_records(records, "val") or records
    fg_iou = baseline_foreground_iou(val, tau=int(v["tau"]),
                                     blur=not v["no_blur"])
    import json
    payload = json.dumps({"foreground_iou": fg_iou, "tau": int(v["tau"]),
                          "blur": not v["no_blur"]}, indent=2, sort_keys=True)
    (run / "reports" / "baseline.json").write_text(payload)
    print(payload)
    return 0


def cmd_ablate(args) -> int:
    v = _merge_config(args, dict(seed=0, epochs=5, placements=",".join(PLACEMENTS),
                                 merges="correlation,co_attention", height=64,
                                 width=96, pairs_per_seq=5))
    run = Path(args.run)
    effective = dict(v, command="ablate", data=str(args.data),
                     test_data=str(args.test_data) if args.test_data else "")
    _prepare_run_dir(run, effective, args.force)
    records = read_dataset(args.data)
    test = read_dataset(args.test_data) if args.test_data else None
    base_cfg = _net_config(v)
    rows = ablation_sweep(base_cfg, str(v["placements"]).split(","),
                          str(v["merges"]).split(","), records,
                          test_dataset=test, epochs=int(v["epochs"]),
                          seed=int(v["seed"]),
                          train_overrides={"pairs_per_sequence":
                                           int(v["pairs_per_seq"])})
    write_ablation_csv(rows, run / "reports" / "ablation.csv")
    print((run / "reports" / "ablation.csv").read_text())
    return 0


def cmd_motionstop(args) -> int:
    v = _merge_config(args, dict(seed=0, n_move=10, n_static=5, repeats=5,
                                 control=False))
    run = Path(args.run)
    effective = dict(v, command="motionstop", model_run=str(args.model_run))
    _prepare_run_dir(run, effective, args.force)
    model, cfg_vals = _load_model(Path(args.model_run))
    gen_cfg = GenConfig(height=model.cfg.input_h, width=model.cfg.input_w,
                        frames_per_seq=int(v["n_move"]) + 1,
                        sprite_frac=(0.40, 0.60), max_rotation_deg=8.0)
    seqs = [gen_stage1_sequence(int(v["seed"]) * 1000 + k, gen_cfg)
            for k in range(int(v["repeats"]))]
    if v["control"]:
        curve = motion_stop_control(model, seqs, n_move=int(v["n_move"]),
                                    n_static=int(v["n_static"]),
                                    repeats=int(v["repeats"]))
    else:
        curve = motion_stop_experiment(model, seqs, n_move=int(v["n_move"]),
                                       n_static=int(v["n_static"]),
                                       repeats=int(v["repeats"]))
    write_decay_csv(curve, run / "reports" / "decay.csv")
    print((run / "reports" / "decay.csv").read_text())
    return 0


def cmd_pipeline(args) -> int:
    keys = dict(GEN_DEFAULTS, seed=0, stage1_count=40, stage2_count=300,
                epochs1=8, epochs2=8, steps1=None, steps2=None,
                pairs_per_seq=5, heads="manipulator,object", gripper=False,
                frames=5, sprite_min=0.40, sprite_max=0.60, rotation=8.0)
    v = _merge_config(args, keys)
    run = Path(args.run)
    heads = _heads_from(v)
    effective = dict(v, command="pipeline", trained_heads=",".join(heads))
    _prepare_run_dir(run, effective, args.force)
    seed = int(v["seed"])

    gen_cfg = _gen_config(v)
    data1 = run / "data" / "stage1"
    if not (data1 / "manifest.jsonl").exists() or args.force:
        build_stage1_dataset(seed, int(v["stage1_count"]), gen_cfg, data1)
    records1 = read_dataset(data1)

    net_cfg = _net_config(v)
    model = build_distinctnet(net_cfg, seed=seed)
    t1 = TrainConfig(stage=1, epochs=int(v["epochs1"]),
                     max_steps=None if v["steps1"] in (None, "None") else int(v["steps1"]),
                     pairs_per_sequence=int(v["pairs_per_seq"]), seed=seed)
    model, log1 = train_stage1(records1, t1, model)
    save_checkpoint(model.params, run / "checkpoints" / "stage1.dnkt")
    log1.to_csv(run / "logs" / "stage1_log.csv")

    # stage-2 data with self-supervised paste points from the stage-1 model
    def paste_fn(closed, open_):
        return extract_paste_point(model, closed, open_)

    data2 = run / "data" / "stage2"
    dist_cfg = replace(gen_cfg, distractors=bool(v["distractors"]))
    if not (data2 / "manifest.jsonl").exists() or args.force:
        build_stage2_dataset(seed + 1, int(v["stage2_count"]), dist_cfg, data2,
                             paste_point_fn=paste_fn)
    records2 = read_dataset(data2)

    model = extend_heads(model, heads, seed=seed + 2)
    t2 = TrainConfig(stage=2, epochs=int(v["epochs2"]),
                     max_steps=None if v["steps2"] in (None, "None") else int(v["steps2"]),
                     seed=seed)
    model, log2 = finetune_stage2(records2, t2, model)
    save_checkpoint(model.params, run / "checkpoints" / "model.dnkt")
    log2.to_csv(run / "logs" / "stage2_log.csv")
    stamp = dict(effective, height=model.cfg.input_h, width=model.cfg.input_w,
                 recurrent=model.cfg.recurrent, corr_after=model.cfg.corr_after,
                 merge=model.cfg.merge)
    (run / "config" / "run.cfg").write_text(_format_config(stamp))

    val = split_records(records2, "val")
    classes = ("background", "foreground") + model.cfg.extra_classes
    fingerprint = config_fingerprint(model.cfg, [seed])
    report = evaluate(model, val, classes, fingerprint=fingerprint)
    if bool(v["distractors"]):
        report.pixel_counts["object_to_distractor_confusion"] = {
            "rate_x1e6": int(round(object_to_distractor_confusion(model, val) * 1e6)),
            "intersection": 0, "union": 0, "pred": 0, "gt": 0}
    (run / "reports" / "report.json").write_text(report.to_json())
    print(report.to_json())
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distinct",
        description="siamese correlation segmentation: data generation, "
                    "two-stage training, evaluation harnesses")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_run=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true")
        if needs_run:
            p.add_argument("--run", required=True, help="run directory")

    p = sub.add_parser("gen", help="generate a dataset")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_gen_flags(p)
    common(p, needs_run=False)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="stage-1 moving-foreground training")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--pairs-per-seq", dest="pairs_per_seq", type=int)
    p.add_argument("--recurrent", action="store_const", const=True)
    p.add_argument("--corr-after", dest="corr_after")
    p.add_argument("--merge")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="stage-2 semantic fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--model-run", dest="model_run", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--heads")
    p.add_argument("--gripper", action="store_const", const=True)
    p.add_argument("--distractors", action="store_const", const=True)
    common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model-run", dest="model_run", required=True)
    p.add_argument("--classes")
    p.add_argument("--timing", action="store_const", const=True,
                   help="include wall-clock latency in the report")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline", help="change-detection baseline IoU")
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=int)
    p.add_argument("--no-blur", dest="no_blur", action="store_const", const=True)
    common(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("ablate", help="merge-type x placement sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--placements")
    p.add_argument("--merges")
    p.add_argument("--pairs-per-seq", dest="pairs_per_seq", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("motionstop", help="recurrent decay after motion stops")
    p.add_argument("--model-run", dest="model_run", required=True)
    p.add_argument("--n-move", dest="n_move", type=int)
    p.add_argument("--n-static", dest="n_static", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--control", action="store_const", const=True,
                   help="run without threading state (non-recurrent control)")
    common(p)
    p.set_defaults(fn=cmd_motionstop)

    p = sub.add_parser("pipeline", help="gen -> train -> harvest -> finetune -> eval")
    p.add_argument("--stage1-count", dest="stage1_count", type=int)
    p.add_argument("--stage2-count", dest="stage2_count", type=int)
    p.add_argument("--epochs1", type=int)
    p.add_argument("--epochs2", type=int)
    p.add_argument("--steps1", type=int)
    p.add_argument("--steps2", type=int)
    p.add_argument("--pairs-per-seq", dest="pairs_per_seq", type=int)
    p.add_argument("--heads")
    p.add_argument("--gripper", action="store_const", const=True)
    _add_gen_flags(p)
    common(p)
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DistinctNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
