"""Spectral branch: encode per-pixel spectra and regress FiLM parameters.

The regressor's last layer starts at zero and gamma is parameterized as
``1 + raw``, so an untrained branch leaves the spatial features untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError
from .nn import MLP, GradTape


@dataclass
class FilmParams:
    gamma: np.ndarray  # (..., d)
    beta: np.ndarray  # (..., d)

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise DimensionError(f"gamma {self.gamma.shape} and beta {self.beta.shape} differ")

    @property
    def dim(self):
        return self.gamma.shape[-1]


def build_encoder(n_bands, rng, hidden=128, embed=64, dtype=np.float64):
    return MLP.build([n_bands, hidden, embed], rng, name="encoder", dtype=dtype)


def build_regressor(feature_dim, rng, embed=64, hidden=128, dtype=np.float64):
    return MLP.build([embed, hidden, 2 * feature_dim], rng, name="regressor", dtype=dtype,
                     zero_last=True)


def encode_spectrum(encoder: MLP, s, cache=False):
    s = np.asarray(s)
    if s.shape[-1] != encoder.in_features:
        raise DimensionError(f"spectrum has {s.shape[-1]} bands, encoder expects {encoder.in_features}")
    return encoder.forward(s, cache=cache)


def regress_film(regressor: MLP, embedding, cache=False) -> FilmParams:
    embedding = np.asarray(embedding)
    if embedding.shape[-1] != regressor.in_features:
        raise DimensionError(
            f"embedding width {embedding.shape[-1]} does not match regressor input {regressor.in_features}")
    raw = regressor.forward(embedding, cache=cache)
    d = raw.shape[-1] // 2
    return FilmParams(1 + raw[..., :d], raw[..., d:])


def film_modulate(f, params: FilmParams):
    """Elementwise ``gamma * f + beta``."""
    f = np.asarray(f)
    if f.shape[-1] != params.dim:
        raise DimensionError(f"feature dim {f.shape[-1]} does not match FiLM dim {params.dim}")
    return params.gamma * f + params.beta


class FilmBranch:
    """Encoder + regressor + modulation with a joint backward pass."""

    def __init__(self, encoder: MLP, regressor: MLP):
        if regressor.in_features != encoder.out_features:
            raise DimensionError("encoder output width must equal regressor input width")
        self.encoder = encoder
        self.regressor = regressor
        self._features = None

    @property
    def feature_dim(self):
        return self.regressor.out_features // 2

    def forward(self, features, spectra, cache=True):
        emb = encode_spectrum(self.encoder, spectra, cache=cache)
        params = regress_film(self.regressor, emb, cache=cache)
        self._features = features if cache else None
        return film_modulate(features, params)

    def backward(self, upstream, tape: GradTape):
        """Gradients for the spectral branch; returns d/d(spectra)."""
        f = self._features
        d_raw = np.concatenate([upstream * f, upstream], axis=-1)
        d_emb = self.regressor.backward(d_raw, tape)
        return self.encoder.backward(d_emb, tape)

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.regressor.parameters()
