"""Experiment orchestration: single runs, layer x timestep sweeps, renders and feature plots.

Configuration files are INI-style (``[section]`` headers, ``key = value`` lines,
``#`` comments); see ``docs/formats.md`` for the full grammar and every key.
"""

from __future__ import annotations

import colorsys
import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .classifier import TrainConfig
from .cluster import kmeans_cluster
from .data import (LabelMap, SynthSpec, load_cube, load_labels, resolve_bands, save_cube,
                   save_labels, select_pseudo_rgb, synth_dataset)
from .diffusion import extract_multi, patch_rng
from .exceptions import ConfigError, DataError, GeoDiffError
from .inference import (VARIANTS, BackboneConfig, infer_scene, max_vote, mean_logits,
                        predict_patch, save_checkpoint, scene_for, training_samples)
from .metrics import evaluate, format_table, table_csv
from .tiling import extract_patch, plan_tiles

# class 0 is black; ids 1..15 get fixed, well separated colours
PALETTE = (
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 190), (0, 128, 128), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (128, 128, 128),
)


class PaletteError(ConfigError):
    pass


@dataclass
class ExperimentConfig:
    variant: str = "geodiffnet"
    seed: int = 0
    out: str = "runs/default"
    aggregation: str = "vote"
    cube: str | None = None
    train_labels: str | None = None
    test_labels: str | None = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}")
        if self.aggregation not in ("vote", "logits"):
            raise ConfigError("aggregation must be 'vote' or 'logits'")
        for name in ("cube", "train_labels"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name} file {path} does not exist")
        if self.test_labels is not None and not Path(self.test_labels).exists():
            raise ConfigError(f"test_labels file {self.test_labels} does not exist")
        if (self.cube is None) != (self.train_labels is None):
            raise ConfigError("cube and train_labels must be given together")
        if not 1 <= self.backbone.layer <= 12:
            raise ConfigError(f"layer {self.backbone.layer} outside [1, 12]")
        if not 0 <= self.backbone.timestep <= self.backbone.n_timesteps:
            raise ConfigError(f"timestep {self.backbone.timestep} outside [0, {self.backbone.n_timesteps}]")
        return self

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        if d["synth"]["rgb_bands"] is not None:
            d["synth"]["rgb_bands"] = list(d["synth"]["rgb_bands"])
        d["train"].pop("log_path")
        return d

    @classmethod
    def from_dict(cls, d):
        """Inverse of :meth:`to_dict`, e.g. to replay the ``config`` block of a manifest."""
        d = dict(d)
        synth = dict(d.pop("synth", {}))
        if synth.get("rgb_bands") is not None:
            synth["rgb_bands"] = tuple(synth["rgb_bands"])
        backbone = dict(d.pop("backbone", {}))
        if isinstance(backbone.get("bands"), list):
            backbone["bands"] = tuple(backbone["bands"])
        try:
            return cls(synth=SynthSpec(**synth), backbone=BackboneConfig(**backbone),
                       train=TrainConfig(**d.pop("train", {})), **d).validate()
        except TypeError as exc:
            raise ConfigError(f"malformed config record: {exc}") from exc

    def hash(self):
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# -- config files ----------------------------------------------------------------

def _coerce(value, current, name):
    if isinstance(current, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    v = value.strip()
    return None if v.lower() in ("", "none") else v


def _update(obj, items, section):
    known = {f.name for f in fields(obj)}
    changes = {}
    for key, value in items:
        key = key.replace("-", "_")
        if key == "weights":
            key = "weights_path"
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        current = getattr(obj, key)
        if (section, key) in (("backbone", "bands"), ("synth", "rgb_bands")):
            changes[key] = None if value.strip().lower() in ("", "none") else value.strip()
        else:
            changes[key] = _coerce(value, current, f"[{section}] {key}")
    return replace(obj, **changes)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read an INI config; ``overrides`` maps ``section.key`` (or ``key`` for [experiment]) to strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        section, _, k = key.rpartition(".")
        section = section or "experiment"
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, k, str(value))
    cfg = ExperimentConfig()
    for section in parser.sections():
        items = parser.items(section)
        if section == "experiment":
            exp = {}
            for k, v in items:
                k = k.replace("-", "_")
                if k not in ("variant", "seed", "out", "aggregation"):
                    raise ConfigError(f"[experiment] unknown key {k!r}")
                exp[k] = _coerce(v, getattr(cfg, k), f"[experiment] {k}")
            cfg = replace(cfg, **exp)
        elif section == "data":
            data = {}
            for k, v in items:
                k = k.replace("-", "_")
                if k == "bands":
                    cfg.backbone = replace(cfg.backbone, bands=v.strip())
                elif k in ("cube", "train_labels", "test_labels"):
                    data[k] = v.strip() or None
                else:
                    raise ConfigError(f"[data] unknown key {k!r}")
            cfg = replace(cfg, **data)
        elif section == "synth":
            cfg.synth = _update(cfg.synth, items, section)
        elif section == "backbone":
            cfg.backbone = _update(cfg.backbone, items, section)
        elif section == "train":
            cfg.train = _update(cfg.train, items, section)
        else:
            raise ConfigError(f"unknown section [{section}]")
    if isinstance(cfg.synth.rgb_bands, str):
        cfg.synth = replace(cfg.synth, rgb_bands=resolve_bands(cfg.synth.rgb_bands, cfg.synth.bands))
    if isinstance(cfg.backbone.bands, str) and cfg.backbone.bands.lower() not in ("synth", "berlin", "augsburg"):
        cfg.backbone = replace(cfg.backbone, bands=resolve_bands(cfg.backbone.bands))
    return cfg.validate()


# -- data -----------------------------------------------------------------------

def load_data(cfg: ExperimentConfig):
    """Return ``(cube, train_labels, test_labels)`` from files or the synthetic generator."""
    if cfg.cube is None:
        spec = cfg.synth
        if spec.rgb_bands is None and cfg.backbone.bands not in (None, "synth"):
            spec = replace(spec, rgb_bands=resolve_bands(cfg.backbone.bands, spec.bands))
        return synth_dataset(spec, cfg.seed)
    cube = load_cube(cfg.cube)
    train = load_labels(cfg.train_labels)
    test = load_labels(cfg.test_labels) if cfg.test_labels else None
    for lm in (train, test):
        if lm is not None and lm.shape != cube.shape[:2]:
            raise DataError(f"label map {lm.shape} does not match cube {cube.shape[:2]}")
    return cube, train, test


# -- rendering -------------------------------------------------------------------

def _ppm(rgb):
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def render_label_map(label_map, palette=PALETTE, path=None) -> bytes:
    """Binary PPM with one fixed colour per class id; id 0 is black."""
    labels = label_map.labels if isinstance(label_map, LabelMap) else np.asarray(label_map)
    pal = np.asarray(palette, dtype=np.uint8)
    if labels.size and (labels.min() < 0 or labels.max() >= len(pal)):
        raise PaletteError(f"class id {int(labels.max())} exceeds the {len(pal)}-entry palette")
    data = _ppm(pal[labels])
    if path is not None:
        Path(path).write_bytes(data)
    return data


def cluster_palette(k):
    if k <= len(PALETTE) - 1:
        return PALETTE[1:k + 1]
    hues = np.arange(k) / k
    return tuple(tuple(int(255 * c) for c in colorsys.hsv_to_rgb(h, 0.8, 0.95)) for h in hues)


def visualize_features(cube, origin, layers, timesteps, k=6, backbone: BackboneConfig | None = None,
                       out_dir=None, kmeans_seed=0, iters=100):
    """K-means cluster maps of decoder features for one patch, per (layer, timestep).

    Cluster colours are assigned independently in each image, so they do not
    correspond across layers or timesteps. Returns ``{(layer, t): ppm_bytes}``.
    """
    backbone = backbone or BackboneConfig()
    unet, schedule = backbone.build()
    plan = plan_tiles(cube.height, cube.width, backbone.patch, backbone.stride)
    if tuple(origin) not in plan.origins:
        raise ConfigError(f"origin {tuple(origin)} is not a tile origin")
    index = plan.origins.index(tuple(origin))
    rgb = select_pseudo_rgb(cube, resolve_bands(backbone.bands, cube.bands))
    patch = extract_patch(rgb, tuple(origin), plan)
    pal = np.asarray(cluster_palette(k), dtype=np.uint8)
    out = {}
    for t in timesteps:
        maps = extract_multi(unet, patch, t, sorted(layers), schedule,
                             patch_rng(backbone.noise_seed, index, t))
        for layer in sorted(layers):
            ids = kmeans_cluster(maps[layer], k, kmeans_seed, iters)
            out[(layer, t)] = _ppm(pal[ids])
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for (layer, t), data in out.items():
            (d / f"clusters_L{layer:02d}_t{t:04d}.ppm").write_bytes(data)
    return out


# -- experiments -------------------------------------------------------------------

@dataclass
class ExperimentResult:
    metrics: dict
    artifacts: dict
    config_hash: str


def fit_variant(variant, train_cfg, feats, spectra, y):
    cls = VARIANTS[variant]
    model = cls.from_config(train_cfg)
    if variant == "geodiffnet-f":
        return model.fit(feats, y, spectra=spectra)
    return model.fit(feats, y)


def _metrics_record(result):
    return {
        "per_class": [None if not np.isfinite(v) else float(v) for v in result["per_class"]],
        **{k: float(result[k]) for k in ("oa", "aa", "kappa", "miou", "mf1")},
        "n": int(result["n"]),
    }


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Train, infer the whole scene, evaluate, and write every artifact to ``out_dir``.

    Artifacts: ``model.gdnf`` checkpoint, ``prediction.lblm``, ``prediction.ppm``,
    ``metrics.txt`` / ``metrics.csv`` and ``manifest.json`` (plus the training log).
    """
    cfg.validate()
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cube, train, test = load_data(cfg)
    bb = cfg.backbone
    unet, schedule = bb.build()
    checksum = unet.checksum()
    scene = scene_for(cube, bb, unet, schedule)
    feats, spectra, y = training_samples(scene, cube, train, bb.timestep, [bb.layer])
    train_cfg = replace(cfg.train, seed=cfg.seed, log_path=str(out / "train_log.jsonl"))
    model = fit_variant(cfg.variant, train_cfg, feats[bb.layer], spectra, y)
    if unet.checksum() != checksum:
        raise GeoDiffError("backbone parameters changed during training")
    pred = infer_scene(model, cube, bb, cfg.aggregation, unet, schedule)

    artifacts = {
        "checkpoint": out / "model.gdnf",
        "prediction": out / "prediction.lblm",
        "render": out / "prediction.ppm",
        "metrics_txt": out / "metrics.txt",
        "metrics_csv": out / "metrics.csv",
        "manifest": out / "manifest.json",
        "train_log": out / "train_log.jsonl",
    }
    save_checkpoint(artifacts["checkpoint"], model, bb)
    save_labels(pred, artifacts["prediction"])
    render_label_map(pred, path=artifacts["render"])
    truth = test if test is not None else train
    result = evaluate(pred, truth, max(pred.n_classes, truth.n_classes))
    metrics = _metrics_record(result)
    column = [(f"Layer {bb.layer}", result)]
    artifacts["metrics_txt"].write_text(format_table(column))
    artifacts["metrics_csv"].write_text(table_csv(column))
    report = model.report_
    _dump_json(artifacts["manifest"], {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "backbone_checksum": checksum,
        "evaluated_on": "test" if test is not None else "train",
        "metrics": metrics,
        "training": {"iterations": report.iterations, "stop_reason": report.stop_reason,
                     "best_iteration": report.best_iteration,
                     "best_val_accuracy": report.best_val_accuracy},
    })
    return ExperimentResult(metrics, {k: str(v) for k, v in artifacts.items()}, cfg.hash())


@dataclass
class SweepResult:
    layers: list
    timesteps: list
    variants: list
    cells: dict  # (variant, layer, t) -> metrics dict
    errors: dict  # (variant, layer, t) -> message

    def grid(self, variant=None):
        variant = variant or self.variants[0]
        return {(l, t): self.cells.get((variant, l, t)) for l in self.layers for t in self.timesteps}

    def columns_for_timestep(self, t, variant=None):
        variant = variant or self.variants[0]
        return [(f"Layer {l}", self.cells[(variant, l, t)]) for l in self.layers
                if (variant, l, t) in self.cells]

    def columns_for_layer(self, layer, variant=None):
        variant = variant or self.variants[0]
        return [(f"TS {t}", self.cells[(variant, layer, t)]) for t in self.timesteps
                if (variant, layer, t) in self.cells]


def sweep(cfg: ExperimentConfig, layers, timesteps, variants=None, out_dir=None) -> SweepResult:
    """Evaluate every (layer, timestep) cell.

    Each timestep needs two backbone passes per patch (one to gather training
    features for every layer, one for inference), and the same features serve
    every variant. A failing cell is recorded in ``errors`` and the sweep carries on.
    """
    layers = sorted(set(int(l) for l in layers))
    timesteps = sorted(set(int(t) for t in timesteps))
    variants = list(variants or [cfg.variant])
    if not layers or not timesteps:
        raise ConfigError("sweep axes must be non-empty")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    cube, train, test = load_data(cfg)
    truth = test if test is not None else train
    unet, schedule = cfg.backbone.build()
    train_cfg = replace(cfg.train, seed=cfg.seed, log_path=None)
    cells, errors = {}, {}
    for t in timesteps:
        scene = scene_for(cube, replace(cfg.backbone, timestep=t), unet, schedule)
        plan = scene.plan
        feats, spectra, y = training_samples(scene, cube, train, t, layers)
        models = {}
        for v in variants:
            for layer in layers:
                try:
                    models[(v, layer)] = fit_variant(v, train_cfg, feats[layer], spectra, y)
                except GeoDiffError as exc:
                    errors[(v, layer, t)] = str(exc)
        patches = {key: [] for key in models}
        for i, origin in enumerate(plan.origins):
            maps = scene.patch_features(i, t, layers)
            spec_patch = extract_patch(cube.reflectance, origin, plan)
            for (v, layer), model in models.items():
                if (v, layer, t) in errors:
                    continue
                try:
                    patches[(v, layer)].append(predict_patch(
                        model, maps[layer], spec_patch if v == "geodiffnet-f" else None))
                except GeoDiffError as exc:
                    errors[(v, layer, t)] = str(exc)
        for (v, layer), model in models.items():
            if (v, layer, t) in errors:
                continue
            try:
                n_classes = int(max(model.classes_))
                if cfg.aggregation == "vote":
                    pred = max_vote([p[0] for p in patches[(v, layer)]], plan, n_classes=n_classes)
                else:
                    pred = mean_logits([p[1] for p in patches[(v, layer)]], plan, model.classes_)
                cells[(v, layer, t)] = evaluate(pred, truth, max(n_classes, truth.n_classes))
            except GeoDiffError as exc:
                errors[(v, layer, t)] = str(exc)
    result = SweepResult(layers, timesteps, variants, cells, errors)
    if out_dir is not None:
        write_sweep(result, out_dir, cfg)
    return result


def write_sweep(result: SweepResult, out_dir, cfg=None):
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for v in result.variants:
        for t in result.timesteps:
            cols = result.columns_for_timestep(t, v)
            if cols:
                (d / f"{v}_t{t:04d}.txt").write_text(format_table(cols))
                (d / f"{v}_t{t:04d}.csv").write_text(table_csv(cols))
        if len(result.timesteps) > 1:
            for layer in result.layers:
                cols = result.columns_for_layer(layer, v)
                if cols:
                    (d / f"{v}_L{layer:02d}.txt").write_text(format_table(cols))
                    (d / f"{v}_L{layer:02d}.csv").write_text(table_csv(cols))
    _dump_json(d / "sweep.json", {
        "config_hash": cfg.hash() if cfg else None,
        "cells": [{"variant": v, "layer": l, "timestep": t, **_metrics_record(r)}
                  for (v, l, t), r in sorted(result.cells.items())],
        "errors": [{"variant": v, "layer": l, "timestep": t, "error": msg}
                   for (v, l, t), msg in sorted(result.errors.items())],
    })


def write_synth(cfg: ExperimentConfig, out_dir):
    """Generate the configured synthetic scene and save it in the binary formats."""
    cube, train, test = synth_dataset(cfg.synth, cfg.seed)
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_cube(cube, d / "cube.hsic")
    save_labels(train, d / "train.lblm")
    save_labels(test, d / "test.lblm")
    return {"cube": str(d / "cube.hsic"), "train": str(d / "train.lblm"), "test": str(d / "test.lblm")}
