"""Scene-level feature extraction, patch prediction, max-vote aggregation and checkpoints.

Checkpoint layout (little-endian)::

    b"GDNF" | u32 version (1) | u32 len + UTF-8 JSON header | tensors

The header holds the variant, feature dim ``d``, band count ``b``, class list,
layer widths, the backbone settings and the U-Net config hash. Tensors use the
same record layout as U-Net weight files; z-score statistics are stored as
``scaler.mean`` / ``scaler.scale``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import GeoDiffNetClassifier, GeoDiffNetFClassifier, logits_to_labels
from .data import HsiCube, LabelMap, resolve_bands, select_pseudo_rgb
from .diffusion import (FrozenUNet, UNetConfig, _Reader, build_schedule, check_layer,
                        extract_multi, init_frozen_unet, load_unet_weights, patch_rng,
                        read_tensors, write_tensors)
from .exceptions import ConfigError, DataError, FormatError
from .tiling import TilePlan, extract_patch, plan_tiles

VARIANTS = {"geodiffnet": GeoDiffNetClassifier, "geodiffnet-f": GeoDiffNetFClassifier}


class AggregationError(DataError):
    pass


@dataclass
class BackboneConfig:
    layer: int = 11
    timestep: int = 0
    schedule: str = "linear"
    n_timesteps: int = 1000
    channel_scale: int = 8
    patch: int = 64
    stride: int = 32
    seed: int = 0
    noise_seed: int = 0
    bands: tuple | str = "synth"
    weights_path: str | None = None

    def unet_config(self):
        return UNetConfig(input_size=self.patch, channel_scale=self.channel_scale)

    def build(self):
        """Return ``(unet, schedule)``."""
        check_layer(self.layer)
        schedule = build_schedule(self.n_timesteps, self.schedule)
        if not 0 <= self.timestep <= schedule.T:
            raise ConfigError(f"timestep {self.timestep} outside [0, {schedule.T}]")
        cfg = self.unet_config()
        if self.weights_path:
            unet = load_unet_weights(self.weights_path, cfg)
        else:
            unet = init_frozen_unet(cfg, self.seed)
        return unet, schedule

    def to_dict(self):
        d = asdict(self)
        if not isinstance(d["bands"], str):
            d["bands"] = list(d["bands"])
        return d


@dataclass
class SceneFeatures:
    """Feature maps for every planned patch of one scene, computed on demand.

    Patch ``i`` at timestep ``t`` always uses the noise stream
    ``patch_rng(noise_seed, i, t)``, whatever layers are requested.
    """

    unet: FrozenUNet
    schedule: object
    plan: TilePlan
    rgb: np.ndarray
    noise_seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def patch_features(self, index, t, layers):
        key = (index, t)
        have = self._cache.get(key, {})
        missing = [l for l in layers if l not in have]
        if missing:
            patch = extract_patch(self.rgb, self.plan.origins[index], self.plan)
            have = {**have, **extract_multi(self.unet, patch, t, missing, self.schedule,
                                            patch_rng(self.noise_seed, index, t))}
        # keep only the most recent patch to bound memory
        self._cache = {key: have}
        return {l: have[l] for l in layers}


def nearest_patch_index(plan: TilePlan, row, col):
    """Index (into ``plan.origins``) of the covering patch whose centre is closest."""
    half = (plan.patch - 1) / 2
    best, best_d = None, None
    for i, (r, c) in enumerate(plan.origins):
        if r <= row < r + plan.patch and c <= col < c + plan.patch:
            d = (r + half - row) ** 2 + (c + half - col) ** 2
            if best_d is None or d < best_d:
                best, best_d = i, d
    return best


def training_samples(scene: SceneFeatures, cube: HsiCube, labels: LabelMap, t, layers):
    """Gather per-pixel features (one array per layer), spectra and labels of labeled pixels."""
    rows, cols = labels.labeled_pixels()
    if rows.size == 0:
        raise DataError("label map has no labeled pixels")
    owner = np.array([nearest_patch_index(scene.plan, r, c) for r, c in zip(rows, cols)])
    feats = {l: np.empty((rows.size, scene.unet.config.channels(l)), dtype=np.float32) for l in layers}
    for i in np.unique(owner):
        sel = np.flatnonzero(owner == i)
        r0, c0 = scene.plan.origins[i]
        maps = scene.patch_features(int(i), t, layers)
        for l in layers:
            feats[l][sel] = maps[l][rows[sel] - r0, cols[sel] - c0]
    spectra = cube.reflectance[rows, cols].astype(np.float64)
    return feats, spectra, labels.labels[rows, cols]


def predict_patch(model, features, spectra=None):
    """Class ids and logits for one ``(S, S, d)`` feature map."""
    s = features.shape[0]
    flat = features.reshape(s * s, -1)
    if isinstance(model, GeoDiffNetFClassifier):
        if spectra is None:
            raise ConfigError("the FiLM variant needs spectra")
        logits = model.decision_function(flat, spectra=spectra.reshape(s * s, -1))
    else:
        logits = model.decision_function(flat)
    return logits_to_labels(logits, model.classes_).reshape(s, s), logits.reshape(s, s, -1)


def predict_scene(model, cube: HsiCube, plan: TilePlan, scene: SceneFeatures, t, layer,
                  return_logits=False):
    """One class-id patch per plan origin, in plan order."""
    if (plan.height, plan.width) != cube.shape[:2]:
        raise ConfigError("tile plan does not match the cube")
    patches, logits = [], []
    for i, origin in enumerate(plan.origins):
        feats = scene.patch_features(i, t, [layer])[layer]
        spectra = extract_patch(cube.reflectance, origin, plan) if isinstance(model, GeoDiffNetFClassifier) else None
        ids, lg = predict_patch(model, feats, spectra)
        patches.append(ids)
        logits.append(lg)
    return (patches, logits) if return_logits else patches


def _as_patch_list(patches, plan):
    if isinstance(patches, dict):
        missing = [o for o in plan.origins if o not in patches]
        if missing:
            raise AggregationError(f"no patch for origin {missing[0]}")
        return [patches[o] for o in plan.origins]
    patches = list(patches)
    if len(patches) != len(plan):
        raise AggregationError(f"expected {len(plan)} patches, got {len(patches)}")
    return patches


def vote_grid(patches, plan: TilePlan, height, width, n_classes):
    """``H x W x C`` vote counters; votes falling in the padded area are dropped."""
    votes = np.zeros((height, width, n_classes), dtype=np.int64)
    rows_i = np.arange(height)[:, None]
    cols_i = np.arange(width)[None, :]
    for (r, c), patch in zip(plan.origins, _as_patch_list(patches, plan)):
        patch = np.asarray(patch)
        if patch.shape != (plan.patch, plan.patch):
            raise AggregationError(f"patch at {(r, c)} has shape {patch.shape}")
        h = max(0, min(plan.patch, height - r))
        w = max(0, min(plan.patch, width - c))
        if h == 0 or w == 0:
            continue
        sub = patch[:h, :w]
        if sub.min() < 1 or sub.max() > n_classes:
            raise AggregationError(f"class ids must lie in [1, {n_classes}]")
        np.add.at(votes, (rows_i[:h] + r, cols_i[:, :w] + c, sub - 1), 1)
    return votes


def max_vote(patches, plan: TilePlan, height=None, width=None, n_classes=None) -> LabelMap:
    """Per-pixel plurality over covering patches; ties go to the lowest class id."""
    height = plan.height if height is None else height
    width = plan.width if width is None else width
    plist = _as_patch_list(patches, plan)
    if n_classes is None:
        n_classes = int(max(np.max(p) for p in plist))
    votes = vote_grid(plist, plan, height, width, n_classes)
    return LabelMap(votes.argmax(axis=-1) + 1, n_classes)


def mean_logits(logit_patches, plan: TilePlan, classes, height=None, width=None) -> LabelMap:
    """Alternative aggregation: average logits over covering patches, then argmax."""
    height = plan.height if height is None else height
    width = plan.width if width is None else width
    plist = _as_patch_list(logit_patches, plan)
    k = plist[0].shape[-1]
    acc = np.zeros((height, width, k), dtype=np.float64)
    cnt = np.zeros((height, width, 1), dtype=np.int64)
    for (r, c), lg in zip(plan.origins, plist):
        h = max(0, min(plan.patch, height - r))
        w = max(0, min(plan.patch, width - c))
        acc[r:r + h, c:c + w] += lg[:h, :w]
        cnt[r:r + h, c:c + w] += 1
    labels = logits_to_labels(acc / cnt, classes)
    return LabelMap(labels, int(max(classes)))


def scene_for(cube: HsiCube, backbone: BackboneConfig, unet=None, schedule=None):
    if unet is None:
        unet, schedule = backbone.build()
    plan = plan_tiles(cube.height, cube.width, backbone.patch, backbone.stride)
    rgb = select_pseudo_rgb(cube, resolve_bands(backbone.bands, cube.bands))
    return SceneFeatures(unet, schedule, plan, rgb, backbone.noise_seed)


def infer_scene(model, cube: HsiCube, backbone: BackboneConfig, aggregation="vote",
                unet=None, schedule=None) -> LabelMap:
    """Full scene prediction: tile, predict every patch, aggregate."""
    scene = scene_for(cube, backbone, unet, schedule)
    patches, logits = predict_scene(model, cube, scene.plan, scene, backbone.timestep,
                                    backbone.layer, return_logits=True)
    n_classes = int(max(model.classes_))
    if aggregation == "vote":
        return max_vote(patches, scene.plan, n_classes=n_classes)
    if aggregation == "logits":
        return mean_logits(logits, scene.plan, model.classes_)
    raise ConfigError(f"unknown aggregation {aggregation!r}")


# -- checkpoints -------------------------------------------------------------

GDNF_MAGIC = b"GDNF"
GDNF_VERSION = 1


def save_checkpoint(path, model, backbone: BackboneConfig):
    header = model.header()
    header["backbone"] = backbone.to_dict()
    header["backbone_config_hash"] = backbone.unet_config().hash().hex()
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(GDNF_MAGIC)
        f.write(struct.pack("<II", GDNF_VERSION, len(raw)))
        f.write(raw)
        write_tensors(f, model.export_tensors())


def load_checkpoint(path):
    """Return ``(model, backbone_config)``."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4, "magic") != GDNF_MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    version = r.u32("version")
    if version != GDNF_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
    tensors = read_tensors(r)
    if r.pos != len(buf):
        raise FormatError(f"{path}: trailing bytes", offset=r.pos)
    bb = dict(header["backbone"])
    if isinstance(bb["bands"], list):
        bb["bands"] = tuple(bb["bands"])
    backbone = BackboneConfig(**bb)
    if backbone.unet_config().hash().hex() != header["backbone_config_hash"]:
        raise FormatError(f"{path}: backbone config hash mismatch")
    if header["variant"] not in VARIANTS:
        raise FormatError(f"{path}: unknown variant {header['variant']!r}")
    model = VARIANTS[header["variant"]].from_tensors(header, tensors)
    return model, backbone
