"""Hyperspectral cubes, label maps, pseudo-RGB selection and a synthetic scene generator.

Binary formats (all little-endian):

* cube: ``b"HSIC"``, ``H, W, B`` as uint32, then ``H*W*B`` float32 values,
  band-interleaved-by-pixel (row-major ``H x W x B``).
* label map: ``b"LBLM"``, ``H, W, C`` as uint32, then ``H*W`` uint16 class ids
  (0 = unlabeled).

Loaders reject bad magic, truncated payloads, trailing bytes and non-finite values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigError, DataError, FormatError

CUBE_MAGIC = b"HSIC"
LABEL_MAGIC = b"LBLM"
_HEADER = struct.Struct("<4sIII")

BAND_PRESETS = {
    "berlin": (40, 30, 15),
    "augsburg": (21, 11, 6),
}


@dataclass
class HsiCube:
    reflectance: np.ndarray  # (H, W, B)

    def __post_init__(self):
        r = np.asarray(self.reflectance)
        if r.ndim != 3 or min(r.shape) < 1:
            raise DataError(f"cube must be H x W x B with all extents >= 1, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise DataError("cube contains non-finite reflectance")
        self.reflectance = r

    @property
    def shape(self):
        return self.reflectance.shape

    @property
    def height(self):
        return self.reflectance.shape[0]

    @property
    def width(self):
        return self.reflectance.shape[1]

    @property
    def bands(self):
        return self.reflectance.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) ints, 0 = unlabeled
    n_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DataError(f"label map must be 2-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes}]")
        self.labels = lab.astype(np.int64, copy=False)

    @property
    def shape(self):
        return self.labels.shape

    def labeled_pixels(self):
        """Row/column indices of labeled pixels in row-major order."""
        return np.nonzero(self.labels)

    def __eq__(self, other):
        return (isinstance(other, LabelMap) and self.n_classes == other.n_classes
                and np.array_equal(self.labels, other.labels))


def save_cube(cube: HsiCube, path):
    h, w, b = cube.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CUBE_MAGIC, h, w, b))
        f.write(np.ascontiguousarray(cube.reflectance, dtype="<f4").tobytes())


def _read_header(buf, magic, path):
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header", offset=len(buf))
    got, a, b, c = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}", offset=0)
    return a, b, c


def load_cube(path) -> HsiCube:
    buf = Path(path).read_bytes()
    h, w, b = _read_header(buf, CUBE_MAGIC, path)
    if min(h, w, b) < 1:
        raise FormatError(f"{path}: zero extent in header {h}x{w}x{b}", offset=4)
    expected = _HEADER.size + 4 * h * w * b
    if len(buf) < expected:
        raise FormatError(
            f"{path}: truncated payload, header declares {h}x{w}x{b} floats "
            f"but only {(len(buf) - _HEADER.size) // 4} present", offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} trailing bytes", offset=expected)
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, b)
    bad = np.flatnonzero(~np.isfinite(data.ravel()))
    if bad.size:
        raise FormatError(f"{path}: non-finite value", offset=_HEADER.size + 4 * int(bad[0]))
    return HsiCube(data.astype(np.float32))


def save_labels(labels: LabelMap, path):
    h, w = labels.shape
    if labels.n_classes > 0xFFFF:
        raise DataError("class count does not fit in uint16")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(LABEL_MAGIC, h, w, labels.n_classes))
        f.write(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def load_labels(path) -> LabelMap:
    buf = Path(path).read_bytes()
    h, w, c = _read_header(buf, LABEL_MAGIC, path)
    expected = _HEADER.size + 2 * h * w
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated label payload for {h}x{w}", offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} trailing bytes", offset=expected)
    lab = np.frombuffer(buf, dtype="<u2", offset=_HEADER.size).reshape(h, w)
    over = np.flatnonzero(lab.ravel() > c)
    if over.size:
        raise FormatError(f"{path}: class id exceeds C={c}", offset=_HEADER.size + 2 * int(over[0]))
    return LabelMap(lab.astype(np.int64), c)


def resolve_bands(bands, n_bands=None):
    """Turn a preset name (``berlin``, ``augsburg``, ``synth``) or an index triple into indices."""
    if isinstance(bands, str):
        key = bands.strip().lower()
        if key == "synth":
            if n_bands is None:
                raise ConfigError("the synth band preset needs the band count")
            return (3 * n_bands // 4, n_bands // 2, n_bands // 4)
        if key in BAND_PRESETS:
            return BAND_PRESETS[key]
        parts = [p for p in key.replace(",", " ").split() if p]
        if len(parts) == 3 and all(p.isdigit() for p in parts):
            return tuple(int(p) for p in parts)
        raise ConfigError(f"unknown band preset {bands!r}")
    bands = tuple(int(b) for b in bands)
    if len(bands) != 3:
        raise ConfigError("exactly three band indices are required")
    return bands


def minmax_to_unit(x, axis=None):
    """Min-max scale to [-1, 1]; a constant slice maps to 0."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=axis, keepdims=True)
    hi = x.max(axis=axis, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)


def select_pseudo_rgb(cube: HsiCube, bands) -> np.ndarray:
    """Stack three bands into an ``(H, W, 3)`` image, each channel scaled to [-1, 1] over the scene."""
    idx = resolve_bands(bands, cube.bands)
    for i in idx:
        if not 0 <= i < cube.bands:
            raise ConfigError(f"band index {i} out of range for {cube.bands} bands")
    rgb = cube.reflectance[:, :, list(idx)]
    return np.clip(minmax_to_unit(rgb, axis=(0, 1)), -1.0, 1.0).astype(np.float32)


class SpectralScaler(TransformerMixin, BaseEstimator):
    """Per-band z-scoring fitted on training-pixel spectra.

    Thin wrapper over :class:`~sklearn.preprocessing.StandardScaler` so the
    statistics can be exported to and restored from a checkpoint.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.scaler_ = StandardScaler().fit(X)
        self.mean_ = self.scaler_.mean_
        self.scale_ = self.scaler_.scale_
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(f"expected {self.n_features_in_} bands, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    @classmethod
    def from_stats(cls, mean, scale):
        s = cls()
        s.mean_ = np.asarray(mean, dtype=np.float64)
        s.scale_ = np.asarray(scale, dtype=np.float64)
        s.n_features_in_ = s.mean_.shape[0]
        return s


# --- synthetic scenes -------------------------------------------------------

@dataclass
class SynthSpec:
    height: int = 64
    width: int = 64
    bands: int = 16
    n_classes: int = 4
    noise: float = 0.05
    train_fraction: float = 0.05
    spectra_only: bool = False
    rgb_bands: tuple | None = None  # defaults to the "synth" preset


def _prototypes(rng, c, b, rgb, spectra_only):
    """Class spectra in [0.1, 0.9], pairwise well separated.

    In spectra-only mode the pseudo-RGB bands are shared by every class.
    """
    rgb = list(rgb)
    other = [i for i in range(b) if i not in rgb]
    for _ in range(10_000):
        protos = rng.uniform(0.1, 0.9, size=(c, b))
        if spectra_only:
            protos[:, rgb] = 0.5
            cols = other
        else:
            cols = rgb
        d = np.linalg.norm(protos[:, None, cols] - protos[None, :, cols], axis=-1)
        full = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
        off = ~np.eye(c, dtype=bool)
        if d[off].min() >= 0.3 and full[off].min() >= 0.8:
            return protos
    raise ConfigError(f"could not draw {c} separated prototypes over {b} bands")


def _voronoi_regions(rng, h, w, c):
    for _ in range(1000):
        seeds = np.column_stack([rng.uniform(0, h, c), rng.uniform(0, w, c)])
        rr, cc = np.mgrid[0:h, 0:w]
        d = (rr[..., None] + 0.5 - seeds[:, 0]) ** 2 + (cc[..., None] + 0.5 - seeds[:, 1]) ** 2
        region = d.argmin(axis=-1)
        counts = np.bincount(region.ravel(), minlength=c)
        if counts.min() >= max(4, h * w // (4 * c)):
            return region + 1
    raise ConfigError("could not place non-empty class regions")


def synth_dataset(spec: SynthSpec, seed=0):
    """Generate ``(cube, train_labels, test_labels)`` for desk-scale experiments.

    Each class gets a prototype spectrum plus Gaussian noise of std ``spec.noise``.
    By default classes occupy Voronoi regions and differ in the pseudo-RGB bands;
    with ``spectra_only`` the class of each pixel is random and the pseudo-RGB
    bands carry no class signal. Train labels are a stratified subsample (at most
    ``train_fraction`` of each class, at least one pixel) removed from the test map.
    """
    h, w, b, c = spec.height, spec.width, spec.bands, spec.n_classes
    if c < 2:
        raise ConfigError("at least two classes are required")
    if h * w < 4 * c:
        raise ConfigError(f"scene {h}x{w} too small for {c} classes")
    if b < 3:
        raise ConfigError("need at least three bands")
    if not 0 < spec.train_fraction <= 0.05:
        raise ConfigError("train_fraction must be in (0, 0.05]")
    rgb = resolve_bands(spec.rgb_bands if spec.rgb_bands is not None else "synth", b)
    if len(set(rgb)) != 3 or max(rgb) >= b:
        raise ConfigError(f"invalid synthetic RGB bands {rgb}")
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, c, b, rgb, spec.spectra_only)
    if spec.spectra_only:
        classes = np.tile(np.arange(1, c + 1), -(-h * w // c))[: h * w]
        classes = rng.permutation(classes).reshape(h, w)
    else:
        classes = _voronoi_regions(rng, h, w, c)
    cube = protos[classes - 1]
    if spec.noise > 0:
        noise = rng.normal(0.0, spec.noise, size=cube.shape)
        if spec.spectra_only:
            # keep the pseudo-RGB bands free of per-pixel signal
            noise[:, :, list(rgb)] = 0.0
        cube = cube + noise
    cube = HsiCube(cube.astype(np.float32))

    train = np.zeros((h, w), dtype=np.int64)
    flat = classes.ravel()
    for k in range(1, c + 1):
        idx = np.flatnonzero(flat == k)
        n_train = max(1, int(np.floor(spec.train_fraction * idx.size)))
        pick = rng.choice(idx, size=n_train, replace=False)
        train.ravel()[pick] = k
    test = np.where(train > 0, 0, classes)
    return cube, LabelMap(train, c), LabelMap(test, c)
