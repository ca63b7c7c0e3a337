"""Command-line entry points: synth, train, eval, generate, grid, series, serve.

Every command prints its resolved configuration and seed, validates inputs
before doing work, and writes its outputs under ``--out`` together with a
``manifest.json``. Exit codes: 2 argument/validation errors, 3 missing input
files, 4 configuration errors, 5 numeric/training failures.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import counterfactual, evaluate, phantom, rawio, viz
from .model import (ConfigurationError, ModelConfig, build_conditioning,
                    load_checkpoint, model_from_checkpoint, save_checkpoint)
from .phantom import ChemoArm, TreatmentContext
from .sampling import SampleSpec, SamplingError, euler_sample
from .train import NumericError, TrainHyper, TrainingError, train

EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_NUMERIC = 5


class MissingInputError(FileNotFoundError):
    pass


def _print_resolved(command: str, resolved: dict):
    print(f"[flowup {command}] resolved configuration:")
    print(json.dumps(resolved, indent=2, sort_keys=True, default=str))


def _write_manifest(out_dir, command, resolved, outputs):
    manifest = {"command": command, "config": resolved, "outputs": sorted(outputs)}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True, default=str)
    return path


def _require_file(path, kind):
    if not os.path.exists(path):
        raise MissingInputError(f"{kind} not found: {path}")
    return path


def _load_cohort(path):
    _require_file(os.path.join(path, phantom.MANIFEST_NAME), "cohort manifest")
    return phantom.load_cohort(path)


def _find_record(records, record_id):
    for rec in records:
        if rec.id == record_id:
            return rec
    raise MissingInputError(f"record '{record_id}' not in cohort")


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    resolved = {"n": args.n, "size": args.size, "seed": args.seed,
                "out": args.out, "cohort_id": args.cohort_id}
    _print_resolved("synth", resolved)
    records = phantom.generate_cohort(args.n, args.size, seed=args.seed)
    out = _ensure_out(args.out)
    cohort_id = phantom.save_cohort(records, out, cohort_id=args.cohort_id)
    outputs = [phantom.MANIFEST_NAME] + \
        [f"{r.id}_baseline.rfc" for r in records] + \
        [f"{r.id}_dose.rfc" for r in records]
    _write_manifest(out, "synth", resolved | {"cohort_id": cohort_id}, outputs)
    print(f"wrote cohort '{cohort_id}' ({len(records)} records) to {out}")
    return 0


def _train_settings(args):
    model_cfg = {}
    hyper_cfg = {}
    if args.config:
        with open(_require_file(args.config, "training config")) as f:
            file_cfg = json.load(f)
        model_cfg.update(file_cfg.get("model", {}))
        hyper_cfg.update(file_cfg.get("hyper", {}))
    flag_model = {"use_dose": args.use_dose, "use_chemo": args.use_chemo,
                  "image_size": args.image_size}
    for key, value in flag_model.items():
        if value is not None:
            model_cfg[key] = value
    flag_hyper = {"batch": args.batch, "grad_accum": args.grad_accum,
                  "lr": args.lr, "epochs": args.epochs,
                  "steps_per_epoch": args.steps_per_epoch}
    for key, value in flag_hyper.items():
        if value is not None:
            hyper_cfg[key] = value
    hyper_cfg["seed"] = args.seed
    if "level_widths" in model_cfg:
        model_cfg["level_widths"] = tuple(model_cfg["level_widths"])
    if "attention_levels" in model_cfg:
        model_cfg["attention_levels"] = tuple(model_cfg["attention_levels"])
    if "dose_scale_range" in hyper_cfg:
        hyper_cfg["dose_scale_range"] = tuple(hyper_cfg["dose_scale_range"])
    return ModelConfig(**model_cfg), TrainHyper(**hyper_cfg)


def cmd_train(args):
    cohort_id, records = _load_cohort(args.cohort)
    config, hyper = _train_settings(args)
    if config.image_size != records[0].size:
        raise ConfigurationError(
            f"model image_size {config.image_size} != cohort size {records[0].size}")
    resolved = {"cohort": args.cohort, "cohort_id": cohort_id, "out": args.out,
                "seed": args.seed, "split_seed": args.split_seed,
                "model": config.to_dict(), "hyper": hyper.to_dict()}
    _print_resolved("train", resolved)
    if hyper.epochs == 0:
        print("warning: epochs=0, writing the initialized checkpoint unchanged")
    parts = evaluate.patient_split(records, seed=args.split_seed)
    ckpt = train(parts["train"], config, hyper, val_records=parts["val"])
    ckpt.metadata["cohort_id"] = cohort_id
    ckpt.metadata["split_seed"] = args.split_seed
    out = _ensure_out(args.out)
    ckpt_path = os.path.join(out, "checkpoint.rfckpt")
    save_checkpoint(ckpt, ckpt_path)
    _write_manifest(out, "train", resolved, ["checkpoint.rfckpt"])
    hist = ckpt.metadata["loss_history"]
    if hist["train"]:
        print(f"train loss {hist['train'][0]:.4f} -> {hist['train'][-1]:.4f}; "
              f"best val {min(hist['val']):.4f} at epoch {ckpt.metadata['best_epoch']}")
    print(f"wrote {ckpt_path}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cohort_id, records = _load_cohort(args.cohort)
    resolved = {"checkpoint": args.checkpoint, "cohort": args.cohort,
                "cohort_id": cohort_id, "split": args.split,
                "split_seed": args.split_seed, "n_steps": args.steps,
                "seed": args.seed, "morphometry": not args.no_morphometry,
                "out": args.out}
    _print_resolved("eval", resolved)
    out = _ensure_out(args.out)
    outputs = []
    field_sink = None
    if not args.no_morphometry:
        fields_dir = os.path.join(out, "fields")
        os.makedirs(fields_dir, exist_ok=True)

        def field_sink(record_id, day, kind, field):
            name = f"fields/{record_id}_day{day:04d}_{kind}.rfc"
            rawio.write_image(os.path.join(out, name), field.astype(np.float32))
            outputs.append(name)

    report = evaluate.evaluate_split(
        ckpt, records, split=args.split, split_seed=args.split_seed,
        n_steps=args.steps, seed=args.seed,
        include_morphometry=not args.no_morphometry, field_sink=field_sink)
    rows_dir = os.path.join(out, "rows")
    os.makedirs(rows_dir, exist_ok=True)
    for row in report["rows"]:
        name = f"rows/{row['record_id']}_day{row['day']:04d}.json"
        with open(os.path.join(out, name), "w") as f:
            json.dump(row, f, indent=1, sort_keys=True)
        outputs.append(name)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    outputs.append("report.json")
    _write_manifest(out, "eval", resolved, outputs)
    print(f"model    ssim {report['model']['ssim_mean']:.4f}  "
          f"mse {report['model']['mse_mean']:.5f}  "
          f"dice(tissue) {report['oracle_mask_dice']['model_tissue_mean']:.4f}")
    print(f"identity ssim {report['identity']['ssim_mean']:.4f}  "
          f"mse {report['identity']['mse_mean']:.5f}  "
          f"dice(tissue) {report['oracle_mask_dice']['identity_tissue_mean']:.4f}")
    print(f"wrote {out}/report.json")
    return 0


def _context_from_args(args):
    return TreatmentContext(args.days, ChemoArm(args.chemo), args.dose_scale)


def cmd_generate(args):
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cohort_id, records = _load_cohort(args.cohort)
    rec = _find_record(records, args.record)
    ctx = _context_from_args(args)
    resolved = {"checkpoint": args.checkpoint, "cohort_id": cohort_id,
                "record": rec.id, "context": dataclasses.asdict(ctx),
                "n_steps": args.steps, "seed": args.seed, "out": args.out}
    _print_resolved("generate", resolved)
    net = model_from_checkpoint(ckpt)
    bundle = build_conditioning(net.config, rec.baseline, rec.dose, ctx)
    pred = euler_sample(net, bundle, SampleSpec(n_steps=args.steps, seed=args.seed))
    oracle = phantom.oracle_followup(rec, ctx)
    out = _ensure_out(args.out)
    rawio.write_image(os.path.join(out, "prediction.rfc"), pred)
    rawio.write_image(os.path.join(out, "oracle_followup.rfc"), oracle)
    rawio.write_image(os.path.join(out, "diff_vs_baseline.rfc"), pred - rec.baseline)
    viz.save_png(pred, os.path.join(out, "prediction.png"))
    from . import metrics
    scores = {"mse": metrics.mse(pred, oracle),
              "ssim": metrics.ssim(pred, oracle)}
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(scores, f, indent=1, sort_keys=True)
    _write_manifest(out, "generate", resolved,
                    ["prediction.rfc", "oracle_followup.rfc",
                     "diff_vs_baseline.rfc", "prediction.png", "metrics.json"])
    print(f"mse {scores['mse']:.5f}  ssim {scores['ssim']:.4f}; wrote {out}")
    return 0


def cmd_grid(args):
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cohort_id, records = _load_cohort(args.cohort)
    rec = _find_record(records, args.record)
    ctx = _context_from_args(args)
    resolved = {"checkpoint": args.checkpoint, "cohort_id": cohort_id,
                "record": rec.id, "ref_context": dataclasses.asdict(ctx),
                "n_steps": args.steps, "seed": args.seed, "out": args.out}
    _print_resolved("grid", resolved)
    net = model_from_checkpoint(ckpt)
    grid = counterfactual.make_grid(net, rec, ctx, seed=args.seed,
                                    n_steps=args.steps)
    out = _ensure_out(args.out)
    outputs = []
    cells = []
    for i, chemo in enumerate(grid.chemo_axis):
        for j, ds in enumerate(grid.dose_axis):
            k = i * len(grid.dose_axis) + j
            img_name = f"cell_{chemo.value}_{ds:.1f}.rfc"
            diff_name = f"diff_{chemo.value}_{ds:.1f}.rfc"
            rawio.write_image(os.path.join(out, img_name), grid.images[k])
            rawio.write_image(os.path.join(out, diff_name), grid.diffs[k])
            outputs += [img_name, diff_name]
            cells.append({"chemo": chemo.value, "dose_scale": ds,
                          "image": img_name, "diff": diff_name})
    viz.grid_sheet(grid).save(os.path.join(out, "grid.png"))
    outputs.append("grid.png")
    with open(os.path.join(out, "grid.json"), "w") as f:
        json.dump({"record_id": grid.record_id, "seed": grid.seed,
                   "n_steps": grid.n_steps,
                   "display_threshold": grid.display_threshold,
                   "dose_axis": list(grid.dose_axis),
                   "chemo_axis": [c.value for c in grid.chemo_axis],
                   "reference_context": dataclasses.asdict(grid.ref_ctx),
                   "cells": cells}, f, indent=1, sort_keys=True, default=str)
    outputs.append("grid.json")
    _write_manifest(out, "grid", resolved, outputs)
    print(f"wrote 3x3 grid to {out}")
    return 0


def cmd_series(args):
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cohort_id, records = _load_cohort(args.cohort)
    rec = _find_record(records, args.record)
    days = [int(d) for d in args.days.split(",")]
    ctx = TreatmentContext(days[0], ChemoArm(args.chemo), args.dose_scale)
    resolved = {"checkpoint": args.checkpoint, "cohort_id": cohort_id,
                "record": rec.id, "days": days, "chemo": args.chemo,
                "dose_scale": args.dose_scale, "n_steps": args.steps,
                "seed": args.seed, "out": args.out}
    _print_resolved("series", resolved)
    net = model_from_checkpoint(ckpt)
    series = counterfactual.make_series(net, rec, ctx, days, seed=args.seed,
                                        n_steps=args.steps)
    out = _ensure_out(args.out)
    outputs = []
    for day, img in zip(series.days, series.images):
        name = f"day{day:04d}.rfc"
        rawio.write_image(os.path.join(out, name), img)
        outputs.append(name)
    for day, diff in zip(series.days[1:], series.diffs):
        name = f"diff_to_day{day:04d}.rfc"
        rawio.write_image(os.path.join(out, name), diff)
        outputs.append(name)
    viz.series_sheet(series).save(os.path.join(out, "series.png"))
    outputs.append("series.png")
    with open(os.path.join(out, "series.json"), "w") as f:
        json.dump({"record_id": series.record_id, "days": series.days,
                   "seed": series.seed, "n_steps": series.n_steps,
                   "display_threshold": series.display_threshold},
                  f, indent=1, sort_keys=True)
    outputs.append("series.json")
    _write_manifest(out, "series", resolved, outputs)
    print(f"wrote temporal series ({len(days)} timepoints) to {out}")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    checkpoint = os.environ.get("FLOWUP_CHECKPOINT", args.checkpoint)
    cohort = os.environ.get("FLOWUP_COHORT", args.cohort)
    port = int(os.environ.get("FLOWUP_PORT", args.port))
    resolved = {"checkpoint": checkpoint, "cohort": cohort, "port": port,
                "host": args.host, "ui": args.ui}
    _print_resolved("serve", resolved)
    _require_file(checkpoint, "checkpoint")
    _require_file(os.path.join(cohort, phantom.MANIFEST_NAME), "cohort manifest")
    app = create_app(checkpoint_path=checkpoint, cohort_dir=cohort)
    if args.ui:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=args.ui, html=True), name="ui")
    uvicorn.run(app, host=args.host, port=port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="flowup", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic cohort")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cohort-id", default=None)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train the velocity network")
    tp.add_argument("--cohort", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--seed", type=int, required=True)
    tp.add_argument("--split-seed", type=int, default=0)
    tp.add_argument("--config", default=None,
                    help="JSON file with {'model': {...}, 'hyper': {...}}")
    tp.add_argument("--image-size", type=int, default=None)
    tp.add_argument("--epochs", type=int, default=None)
    tp.add_argument("--batch", type=int, default=None)
    tp.add_argument("--grad-accum", type=int, default=None)
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--steps-per-epoch", type=int, default=None)
    tp.add_argument("--use-dose", dest="use_dose", action="store_true", default=None)
    tp.add_argument("--no-dose", dest="use_dose", action="store_false")
    tp.add_argument("--use-chemo", dest="use_chemo", action="store_true", default=None)
    tp.add_argument("--no-chemo", dest="use_chemo", action="store_false")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a cohort split")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--cohort", required=True)
    ep.add_argument("--split", choices=["train", "val", "test"], default="test")
    ep.add_argument("--split-seed", type=int, default=0)
    ep.add_argument("--steps", type=int, default=4)
    ep.add_argument("--seed", type=int, required=True)
    ep.add_argument("--no-morphometry", action="store_true")
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_eval)

    def add_generation_args(gp, with_days_list=False):
        gp.add_argument("--checkpoint", required=True)
        gp.add_argument("--cohort", required=True)
        gp.add_argument("--record", required=True)
        if with_days_list:
            gp.add_argument("--days", required=True,
                            help="comma-separated strictly increasing days")
        else:
            gp.add_argument("--days", type=int, required=True)
        gp.add_argument("--chemo", choices=[c.value for c in ChemoArm],
                        default=ChemoArm.ADJUVANT_TMZ.value)
        gp.add_argument("--dose-scale", type=float, default=1.0)
        gp.add_argument("--steps", type=int, default=4)
        gp.add_argument("--seed", type=int, required=True)
        gp.add_argument("--out", required=True)

    gp = sub.add_parser("generate", help="predict one follow-up image")
    add_generation_args(gp)
    gp.set_defaults(func=cmd_generate)

    rp = sub.add_parser("grid", help="3x3 counterfactual treatment grid")
    add_generation_args(rp)
    rp.set_defaults(func=cmd_grid)

    cp = sub.add_parser("series", help="temporal counterfactual series")
    add_generation_args(cp, with_days_list=True)
    cp.set_defaults(func=cmd_series)

    vp = sub.add_parser("serve", help="run the HTTP service")
    vp.add_argument("--checkpoint", required=True)
    vp.add_argument("--cohort", required=True)
    vp.add_argument("--port", type=int, default=8000)
    vp.add_argument("--host", default="127.0.0.1")
    vp.add_argument("--ui", default=None, help="static UI directory to mount at /")
    vp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericError, SamplingError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"invalid arguments: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
