"""Forward diffusion, a frozen U-Net backbone and decoder feature extraction.

The U-Net follows the 64x64 guided-diffusion layout at reduced width: an encoder
with two residual blocks per resolution (64, 32, 16, 8), a bottleneck with
attention, and twelve decoder blocks numbered bottom (8x8) to top (64x64). Each
decoder block reproduces one row of ``DECODER_TABLE`` with channels divided by
``channel_scale``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .exceptions import ConfigError, FormatError

# (resolution at 64x64 input, channels, attention) for decoder layers 1..12
DECODER_TABLE = (
    (8, 768, True),
    (8, 768, True),
    (16, 768, True),
    (16, 576, True),
    (16, 576, True),
    (16, 576, True),
    (32, 576, True),
    (32, 384, True),
    (32, 384, True),
    (32, 384, True),
    (64, 384, False),
    (64, 192, False),
)
N_DECODER_LAYERS = len(DECODER_TABLE)
# encoder width per resolution, in table channel units
ENCODER_CHANNELS = {64: 192, 32: 384, 16: 576, 8: 768}

SCHEDULE_KINDS = ("linear", "cosine")
ALPHA_BAR_FLOOR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    kind: str

    @property
    def T(self):
        return len(self.alpha_bar) - 1

    def __getitem__(self, t):
        return self.alpha_bar[t]


def build_schedule(T=1000, kind="linear") -> NoiseSchedule:
    """Cumulative ``alpha_bar`` table for ``t = 0..T``.

    ``linear``: betas evenly spaced from 1e-4 to 0.02. ``cosine``: the squared-cosine
    curve with offset 0.008 and betas clipped at 0.999. If the raw curve drops below
    1e-5 it is mapped affinely onto (1e-5, 1], which keeps it strictly decreasing.
    """
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if alpha_bar[-1] <= ALPHA_BAR_FLOOR:
        alpha_bar = ALPHA_BAR_FLOOR + (1 - ALPHA_BAR_FLOOR) * alpha_bar
    alpha_bar.setflags(write=False)
    return NoiseSchedule(alpha_bar, kind)


def forward_noise(x0, t, schedule: NoiseSchedule, rng=None, noise=None):
    """Sample ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with ``eps ~ N(0, I)``.

    ``noise`` overrides the draw from ``rng``. ``t = 0`` returns ``x0`` unchanged.
    """
    x0 = np.asarray(x0)
    if int(t) != t or not 0 <= t <= schedule.T:
        raise ConfigError(f"timestep {t} outside [0, {schedule.T}]")
    t = int(t)
    if t == 0:
        return x0.copy()
    if noise is None:
        if rng is None:
            raise ConfigError("forward_noise needs an rng or explicit noise")
        noise = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t]
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float64
    return (math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * np.asarray(noise)).astype(dtype, copy=False)


def patch_rng(seed, patch_index, t):
    """Noise stream for one (patch, timestep); identical for every layer tapped."""
    return np.random.default_rng([int(seed), int(patch_index), int(t)])


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 64
    channel_scale: int = 8
    in_channels: int = 3
    heads: int = 4
    groups: int = 8
    time_embed_mult: int = 4

    def __post_init__(self):
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError("input_size must be a positive multiple of 8")
        if self.channel_scale < 1:
            raise ConfigError("channel_scale must be >= 1")
        for _, c, _ in DECODER_TABLE:
            if c % self.channel_scale or c // self.channel_scale < 8:
                raise ConfigError(
                    f"channel_scale {self.channel_scale} leaves {c}/{self.channel_scale} channels; need an integer >= 8")
            if (c // self.channel_scale) % self.heads:
                raise ConfigError(f"{c // self.channel_scale} channels not divisible by {self.heads} heads")

    def resolution(self, layer):
        return DECODER_TABLE[layer - 1][0] * self.input_size // 64

    def channels(self, layer):
        return DECODER_TABLE[layer - 1][1] // self.channel_scale

    def attention(self, layer):
        return DECODER_TABLE[layer - 1][2]

    def layer_shape(self, layer):
        r = self.resolution(layer)
        return (r, r, self.channels(layer))

    def encoder_channels(self, res_at_64):
        return ENCODER_CHANNELS[res_at_64] // self.channel_scale

    @property
    def base_channels(self):
        return self.encoder_channels(64)

    @property
    def time_embed_dim(self):
        return self.base_channels * self.time_embed_mult

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    def hash(self):
        return hashlib.sha256(self.to_json().encode()).digest()


def check_layer(layer):
    if int(layer) != layer or not 1 <= layer <= N_DECODER_LAYERS:
        raise ConfigError(f"decoder layer {layer} outside [1, {N_DECODER_LAYERS}]")
    return int(layer)


def _resblock_specs(prefix, cin, cout, temb):
    specs = [
        (f"{prefix}.norm1.g", (cin,), "ones"), (f"{prefix}.norm1.b", (cin,), "zeros"),
        (f"{prefix}.conv1.w", (3, 3, cin, cout), "conv"), (f"{prefix}.conv1.b", (cout,), "zeros"),
        (f"{prefix}.temb.w", (temb, cout), "dense"), (f"{prefix}.temb.b", (cout,), "zeros"),
        (f"{prefix}.norm2.g", (cout,), "ones"), (f"{prefix}.norm2.b", (cout,), "zeros"),
        (f"{prefix}.conv2.w", (3, 3, cout, cout), "conv"), (f"{prefix}.conv2.b", (cout,), "zeros"),
    ]
    if cin != cout:
        specs.append((f"{prefix}.skip.w", (1, 1, cin, cout), "conv"))
    return specs


def _attn_specs(prefix, c):
    return [
        (f"{prefix}.norm.g", (c,), "ones"), (f"{prefix}.norm.b", (c,), "zeros"),
        (f"{prefix}.qkv.w", (c, 3 * c), "dense"), (f"{prefix}.qkv.b", (3 * c,), "zeros"),
        (f"{prefix}.proj.w", (c, c), "dense"), (f"{prefix}.proj.b", (c,), "zeros"),
    ]


def parameter_specs(config: UNetConfig):
    """Ordered ``(name, shape, init)`` for every U-Net parameter."""
    base, temb = config.base_channels, config.time_embed_dim
    specs = [
        ("time.0.w", (base, temb), "dense"), ("time.0.b", (temb,), "zeros"),
        ("time.1.w", (temb, temb), "dense"), ("time.1.b", (temb,), "zeros"),
        ("enc.in.w", (3, 3, config.in_channels, base), "conv"), ("enc.in.b", (base,), "zeros"),
    ]
    c = base
    for res in (64, 32, 16, 8):
        cout = config.encoder_channels(res)
        for j in range(2):
            specs += _resblock_specs(f"enc.{res}.{j}", c, cout, temb)
            c = cout
    specs += _resblock_specs("mid.0", c, c, temb)
    specs += _attn_specs("mid.attn", c)
    specs += _resblock_specs("mid.1", c, c, temb)
    for layer in range(1, N_DECODER_LAYERS + 1):
        res64 = DECODER_TABLE[layer - 1][0]
        cout = config.channels(layer)
        specs += _resblock_specs(f"dec.{layer}", c + config.encoder_channels(res64), cout, temb)
        if config.attention(layer):
            specs += _attn_specs(f"dec.{layer}.attn", cout)
        c = cout
    return specs


def _init_param(rng, shape, kind):
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    fan_in = int(np.prod(shape[:-1]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class FrozenUNet:
    """Read-only U-Net. Parameters are locked against writes after construction."""

    def __init__(self, config: UNetConfig, params: dict):
        self.config = config
        expected = parameter_specs(config)
        names = [n for n, _, _ in expected]
        missing = [n for n in names if n not in params]
        if missing:
            raise WeightFormatError(f"missing tensor {missing[0]!r}")
        extra = sorted(set(params) - set(names))
        if extra:
            raise WeightFormatError(f"unexpected tensor {extra[0]!r}")
        self.params = {}
        for name, shape, _ in expected:
            arr = np.asarray(params[name])
            if arr.shape != tuple(shape):
                raise WeightFormatError(
                    f"tensor {name!r} has shape {arr.shape}, config expects {tuple(shape)}")
            arr = np.array(arr, dtype=np.float32, copy=True)
            arr.setflags(write=False)
            self.params[name] = arr

    @property
    def frozen(self):
        return True

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def _groups(self, c):
        return math.gcd(c, self.config.groups)

    def _resblock(self, prefix, x, temb):
        p = self.params
        cin = x.shape[-1]
        h = nn.group_norm(x, self._groups(cin), p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
        h = nn.conv2d(nn.silu(h), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
        h = h + (nn.silu(temb) @ p[f"{prefix}.temb.w"] + p[f"{prefix}.temb.b"])
        cout = h.shape[-1]
        h = nn.group_norm(h, self._groups(cout), p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
        h = nn.conv2d(nn.silu(h), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
        skip = x if cin == cout else nn.conv2d(x, p[f"{prefix}.skip.w"])
        return ((skip + h) / math.sqrt(2.0)).astype(np.float32)

    def _attention(self, prefix, x):
        p = self.params
        hh, ww, c = x.shape
        h = nn.group_norm(x, self._groups(c), p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
        tokens = h.reshape(hh * ww, c)
        out = nn.self_attention(tokens, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"],
                                p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"], self.config.heads)
        # residual is taken around the normalized branch, on the un-normalized input
        return (x + (out - tokens).reshape(hh, ww, c)).astype(np.float32)

    def time_embedding(self, t):
        p = self.params
        emb = nn.timestep_embedding(t, self.config.base_channels).astype(np.float32)
        emb = nn.silu(emb @ p["time.0.w"] + p["time.0.b"])
        return (emb @ p["time.1.w"] + p["time.1.b"]).astype(np.float32)

    def forward(self, x, t, layers=None):
        """Run the network on ``x`` (``S x S x 3``) at timestep ``t``.

        Returns ``{layer: activation}`` for the requested decoder layers (all
        twelve by default). Decoding stops after the highest requested layer.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float32)
        s = cfg.input_size
        if x.shape != (s, s, cfg.in_channels):
            raise ConfigError(f"expected input of shape {(s, s, cfg.in_channels)}, got {x.shape}")
        wanted = set(range(1, N_DECODER_LAYERS + 1)) if layers is None else {check_layer(l) for l in layers}
        last = max(wanted)
        p = self.params
        temb = self.time_embedding(t)

        h = nn.conv2d(x, p["enc.in.w"], p["enc.in.b"])
        skips = {}
        for res in (64, 32, 16, 8):
            for j in range(2):
                h = self._resblock(f"enc.{res}.{j}", h, temb)
            skips[res] = h
            if res != 8:
                h = nn.avg_pool2(h)
        h = self._resblock("mid.0", h, temb)
        h = self._attention("mid.attn", h)
        h = self._resblock("mid.1", h, temb)

        out = {}
        cur_res = 8
        for layer in range(1, last + 1):
            res64 = DECODER_TABLE[layer - 1][0]
            if res64 > cur_res:
                h = nn.upsample_nearest2(h)
                cur_res = res64
            h = np.concatenate([h, skips[res64]], axis=-1)
            h = self._resblock(f"dec.{layer}", h, temb)
            if cfg.attention(layer):
                h = self._attention(f"dec.{layer}.attn", h)
            if layer in wanted:
                out[layer] = h
        return out


class WeightFormatError(FormatError):
    pass


def init_frozen_unet(config: UNetConfig | None = None, seed=0) -> FrozenUNet:
    config = config or UNetConfig()
    rng = np.random.default_rng(seed)
    params = {name: _init_param(rng, shape, kind) for name, shape, kind in parameter_specs(config)}
    return FrozenUNet(config, params)


# -- weight files ------------------------------------------------------------
#
# magic "UNET" | 32-byte sha256 of the config JSON | u32 len + config JSON |
# u32 tensor count | per tensor: u32 len + UTF-8 name, u32 rank, u32 extents,
# float32 payload. Little-endian throughout.

UNET_MAGIC = b"UNET"


def write_tensors(f, tensors):
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"{self.path}: truncated while reading {what}", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def read_tensors(reader: _Reader):
    tensors = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(4 * n, f"payload of {name}"), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float32)
    return tensors


def save_unet_weights(unet: FrozenUNet, path):
    cfg_json = unet.config.to_json().encode()
    with open(path, "wb") as f:
        f.write(UNET_MAGIC)
        f.write(unet.config.hash())
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        write_tensors(f, unet.params)


def load_unet_weights(path, config: UNetConfig | None = None) -> FrozenUNet:
    """Load a weight file. If ``config`` is given the file must have been written for it."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4, "magic") != UNET_MAGIC:
        raise WeightFormatError(f"{path}: bad magic", offset=0)
    digest = r.take(32, "config hash")
    cfg_json = r.take(r.u32("config length"), "config").decode("utf-8")
    try:
        file_cfg = UNetConfig(**json.loads(cfg_json))
    except (TypeError, ValueError) as exc:
        raise WeightFormatError(f"{path}: unreadable config: {exc}", offset=40) from exc
    if file_cfg.hash() != digest:
        raise WeightFormatError(f"{path}: config hash does not match embedded config", offset=4)
    tensors = read_tensors(r)
    if r.pos != len(buf):
        raise WeightFormatError(f"{path}: trailing bytes", offset=r.pos)
    return FrozenUNet(config or file_cfg, tensors)


# -- feature extraction -------------------------------------------------------

def _check_patch(patch, config):
    patch = np.asarray(patch, dtype=np.float32)
    s = config.input_size
    if patch.shape != (s, s, 3):
        raise ConfigError(f"patch must be {s}x{s}x3, got {patch.shape}")
    if np.abs(patch).max() > 1 + 1e-6:
        raise ConfigError("patch values must lie in [-1, 1]")
    return patch


def extract_multi(unet: FrozenUNet, patch, t, layers, schedule: NoiseSchedule, rng):
    """Feature maps for several layers from one noise draw and one forward pass."""
    patch = _check_patch(patch, unet.config)
    layers = [check_layer(l) for l in layers]
    xt = forward_noise(patch, t, schedule, rng)
    acts = unet.forward(xt, t, layers)
    s = unet.config.input_size
    return {l: nn.resize_bilinear(acts[l], s, s).astype(np.float32) for l in layers}


def extract_features(unet: FrozenUNet, patch, t, layer, schedule: NoiseSchedule, rng):
    """Noise ``patch`` to timestep ``t``, tap decoder ``layer`` and resize it to patch size."""
    layer = check_layer(layer)
    return extract_multi(unet, patch, t, [layer], schedule, rng)[layer]


class DiffusionFeatureExtractor(TransformerMixin, BaseEstimator):
    """Transform pseudo-RGB patches ``(n, S, S, 3)`` into per-pixel decoder features ``(n, S, S, d)``.

    Sample ``i`` is noised with the stream ``patch_rng(noise_seed, patch_ids[i], timestep)``
    so results do not depend on batch order.
    """

    def __init__(self, layer=11, timestep=0, schedule="linear", n_timesteps=1000,
                 channel_scale=8, input_size=64, seed=0, noise_seed=0, weights_path=None):
        self.layer = layer
        self.timestep = timestep
        self.schedule = schedule
        self.n_timesteps = n_timesteps
        self.channel_scale = channel_scale
        self.input_size = input_size
        self.seed = seed
        self.noise_seed = noise_seed
        self.weights_path = weights_path

    def fit(self, X=None, y=None):
        check_layer(self.layer)
        self.schedule_ = build_schedule(self.n_timesteps, self.schedule)
        if not 0 <= self.timestep <= self.schedule_.T:
            raise ConfigError(f"timestep {self.timestep} outside [0, {self.schedule_.T}]")
        config = UNetConfig(input_size=self.input_size, channel_scale=self.channel_scale)
        if self.weights_path:
            self.unet_ = load_unet_weights(self.weights_path, config)
        else:
            self.unet_ = init_frozen_unet(config, self.seed)
        self.n_features_out_ = config.channels(self.layer)
        return self

    def transform(self, X, patch_ids=None):
        check_is_fitted(self, "unet_")
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3:
            X = X[None]
        ids = range(len(X)) if patch_ids is None else patch_ids
        return np.stack([
            extract_features(self.unet_, x, self.timestep, self.layer, self.schedule_,
                             patch_rng(self.noise_seed, i, self.timestep))
            for x, i in zip(X, ids)
        ])
