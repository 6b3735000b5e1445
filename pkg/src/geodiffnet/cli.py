"""Command-line entry point: ``geodiffnet <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import load_cube, load_labels, resolve_bands, save_labels, select_pseudo_rgb
from .diffusion import extract_multi, patch_rng, save_unet_weights
from .exceptions import ConfigError, GeoDiffError
from .harness import (ExperimentConfig, load_config, load_data, render_label_map, run_experiment, sweep,
                      visualize_features, write_synth, fit_variant)
from .inference import (infer_scene, load_checkpoint, save_checkpoint, scene_for,
                        training_samples)
from .metrics import evaluate, format_table, table_csv
from .tiling import extract_patch, plan_tiles


def parse_int_set(text):
    """``"2-5,9,11"`` -> ``[2, 3, 4, 5, 9, 11]``."""
    out = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.update(range(int(lo), int(hi) + 1))
        else:
            out.add(int(part))
    if not out:
        raise ConfigError(f"empty set {text!r}")
    return sorted(out)


def _overrides(args):
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = args.out
    for flag, key in (("layer", "backbone.layer"), ("timestep", "backbone.timestep"),
                      ("schedule", "backbone.schedule"), ("channel_scale", "backbone.channel_scale"),
                      ("patch", "backbone.patch"), ("stride", "backbone.stride"),
                      ("weights", "backbone.weights_path"), ("bands", "data.bands"),
                      ("variant", "variant"), ("aggregation", "aggregation"),
                      ("cube", "data.cube"), ("train_labels", "data.train_labels"),
                      ("test_labels", "data.test_labels"), ("optimizer", "train.optimizer")):
        value = getattr(args, flag, None)
        if value is not None:
            o[key] = value
    return o


def _config(args):
    return load_config(args.config, _overrides(args))


def _out_dir(args, cfg):
    d = Path(args.out or cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_synth(args):
    cfg = _config(args)
    paths = write_synth(cfg, _out_dir(args, cfg))
    print(json.dumps(paths, indent=2))


def cmd_extract(args):
    cfg = _config(args)
    cube, _, _ = load_data(cfg)
    bb = cfg.backbone
    unet, schedule = bb.build()
    plan = plan_tiles(cube.height, cube.width, bb.patch, bb.stride)
    rgb = select_pseudo_rgb(cube, resolve_bands(bb.bands, cube.bands))
    feats = np.stack([
        extract_multi(unet, extract_patch(rgb, o, plan), bb.timestep, [bb.layer], schedule,
                      patch_rng(bb.noise_seed, i, bb.timestep))[bb.layer]
        for i, o in enumerate(plan.origins)])
    out = _out_dir(args, cfg) / f"features_L{bb.layer:02d}_t{bb.timestep:04d}.npz"
    np.savez(out, features=feats, origins=np.asarray(plan.origins), layer=bb.layer,
             timestep=bb.timestep)
    if args.save_weights:
        save_unet_weights(unet, _out_dir(args, cfg) / "unet.weights")
    print(out)


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    cube, train, _ = load_data(cfg)
    bb = cfg.backbone
    unet, schedule = bb.build()
    scene = scene_for(cube, bb, unet, schedule)
    feats, spectra, y = training_samples(scene, cube, train, bb.timestep, [bb.layer])
    train_cfg = replace(cfg.train, seed=cfg.seed, log_path=str(out / "train_log.jsonl"))
    model = fit_variant(cfg.variant, train_cfg, feats[bb.layer], spectra, y)
    save_checkpoint(out / "model.gdnf", model, bb)
    r = model.report_
    print(json.dumps({"checkpoint": str(out / "model.gdnf"), "iterations": r.iterations,
                      "stop_reason": r.stop_reason, "best_val_accuracy": r.best_val_accuracy}))


def cmd_infer(args):
    model, backbone = load_checkpoint(args.checkpoint)
    if args.weights:
        backbone = replace(backbone, weights_path=args.weights)
    cube = load_cube(args.cube)
    pred = infer_scene(model, cube, backbone, args.aggregation or "vote")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_labels(pred, out / "prediction.lblm")
    render_label_map(pred, path=out / "prediction.ppm")
    print(out / "prediction.lblm")


def cmd_eval(args):
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    result = evaluate(pred, truth, max(pred.n_classes, truth.n_classes))
    column = [(args.column, result)]
    text = format_table(column)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(text)
        (out / "metrics.csv").write_text(table_csv(column))
    print(text, end="")


def cmd_sweep(args):
    cfg = _config(args)
    variants = args.variants.split(",") if args.variants else None
    result = sweep(cfg, parse_int_set(args.layers), parse_int_set(args.timesteps), variants,
                   out_dir=_out_dir(args, cfg))
    for v in result.variants:
        for t in result.timesteps:
            cols = result.columns_for_timestep(t, v)
            if cols:
                print(f"# {v}, timestep {t}")
                print(format_table(cols))
    for key, msg in sorted(result.errors.items()):
        print(f"cell {key} failed: {msg}", file=sys.stderr)


def cmd_viz(args):
    cfg = _config(args)
    cube, _, _ = load_data(cfg)
    origin = tuple(int(v) for v in args.origin.split(","))
    out = _out_dir(args, cfg)
    cells = visualize_features(cube, origin, parse_int_set(args.layers), parse_int_set(args.timesteps),
                               args.k, cfg.backbone, out_dir=out, kmeans_seed=cfg.seed)
    print(f"{len(cells)} cluster maps written to {out}")


def cmd_render(args):
    labels = load_labels(args.labels)
    out = Path(args.out) if args.out else Path(args.labels).with_suffix(".ppm")
    if out.suffix != ".ppm":
        out.mkdir(parents=True, exist_ok=True)
        out = out / (Path(args.labels).stem + ".ppm")
    render_label_map(labels, path=out)
    print(out)


def cmd_run(args):
    if args.manifest:
        record = json.loads(Path(args.manifest).read_text())
        cfg = ExperimentConfig.from_dict(record["config"])
    else:
        cfg = _config(args)
    result = run_experiment(cfg, _out_dir(args, cfg))
    print(json.dumps({"metrics": result.metrics, "artifacts": result.artifacts}, indent=2))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="experiment seed (data generation and training)")
    common.add_argument("--out", help="output directory")

    backbone = argparse.ArgumentParser(add_help=False)
    backbone.add_argument("--layer", type=int, help="decoder layer 1-12 (bottom to top)")
    backbone.add_argument("--timestep", type=int, help="diffusion timestep")
    backbone.add_argument("--schedule", choices=("linear", "cosine"))
    backbone.add_argument("--channel-scale", type=int)
    backbone.add_argument("--patch", type=int)
    backbone.add_argument("--stride", type=int)
    backbone.add_argument("--weights", help="U-Net weight file")
    backbone.add_argument("--bands", help="preset (berlin, augsburg, synth) or r,g,b indices")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--cube")
    data.add_argument("--train-labels")
    data.add_argument("--test-labels")

    parser = argparse.ArgumentParser(prog="geodiffnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cube and label maps")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common, backbone, data], help="extract decoder features per patch")
    p.add_argument("--save-weights", action="store_true", help="also write the U-Net weight file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common, backbone, data], help="train a pixel classifier")
    p.add_argument("--variant", choices=("geodiffnet", "geodiffnet-f"))
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict a full scene from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--weights", help="U-Net weight file (overrides the checkpoint's backbone)")
    p.add_argument("--aggregation", choices=("vote", "logits"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score a predicted label map")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--column", default="Result", help="column header in the table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common, backbone, data], help="layer x timestep ablation")
    p.add_argument("--layers", default="2-11")
    p.add_argument("--timesteps", default="0")
    p.add_argument("--variants", help="comma-separated, default: the config's variant")
    p.add_argument("--variant", choices=("geodiffnet", "geodiffnet-f"))
    p.add_argument("--aggregation", choices=("vote", "logits"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("viz", parents=[common, backbone, data], help="k-means maps of decoder features")
    p.add_argument("--origin", default="0,0", help="patch origin row,col")
    p.add_argument("--layers", default="6-11")
    p.add_argument("--timesteps", default="0,50,100,200")
    p.add_argument("--k", type=int, default=6)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("render", parents=[common], help="render a label map as PPM")
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("run", parents=[common, backbone, data], help="train, infer and evaluate end to end")
    p.add_argument("--variant", choices=("geodiffnet", "geodiffnet-f"))
    p.add_argument("--aggregation", choices=("vote", "logits"))
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--manifest", help="replay the config recorded in a run manifest")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except GeoDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        # unparseable numbers and unreadable files surface here
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ValueError) else 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
