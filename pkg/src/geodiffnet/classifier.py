"""Pixel classifiers over frozen diffusion features.

:class:`GeoDiffNetClassifier` trains a two-layer MLP on spatial feature vectors.
:class:`GeoDiffNetFClassifier` adds the spectral FiLM branch in front of the same
MLP and trains both jointly. The two share their training loop: mini-batch
descent on cross-entropy, a stratified validation carve-out from the training
pixels, and patience-based early stopping that restores the best-validation
weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import SpectralScaler
from .exceptions import (AlignmentError, ConfigError, DegenerateLabelError,
                         DimensionError, DivergenceError)
from .film import FilmBranch, build_encoder, build_regressor
from .nn import MLP, SGD, Adam, GradTape, softmax, softmax_cross_entropy

OPTIMIZERS = {"sgd": SGD, "adam": Adam}


@dataclass
class TrainConfig:
    learning_rate: float = 0.003
    batch_size: int = 64
    max_epochs: int = 10
    patience: int = 1000
    optimizer: str = "adam"
    seed: int = 0
    validation_fraction: float = 0.1
    hidden: int = 128
    dtype: str = "float32"
    log_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in [0, 1)")

    def estimator_params(self):
        params = {f.name: getattr(self, f.name) for f in fields(self)}
        params["random_state"] = params.pop("seed")
        return params


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    best_val_accuracy: float = float("nan")
    best_iteration: int = 0
    stop_reason: str = "epochs exhausted"
    iterations: int = 0
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def stratified_split(targets, fraction, rng):
    """Return ``(train_idx, val_idx)``; every class keeps at least one training pixel."""
    train, val = [], []
    for c in np.unique(targets):
        idx = rng.permutation(np.flatnonzero(targets == c))
        n_val = min(int(np.floor(fraction * idx.size + 0.5)), idx.size - 1)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def logits_to_labels(logits, classes=None):
    """Argmax over the last axis (first maximum wins); ids are 1-based unless ``classes`` is given."""
    idx = np.argmax(np.asarray(logits), axis=-1)
    if classes is None:
        return idx + 1
    return np.asarray(classes)[idx]


class GeoDiffNetClassifier(ClassifierMixin, BaseEstimator):
    """Two-layer MLP (``d -> hidden -> C``) on frozen per-pixel spatial features."""

    def __init__(self, hidden=128, learning_rate=0.003, batch_size=64, max_epochs=10,
                 patience=1000, optimizer="adam", validation_fraction=0.1, random_state=0,
                 dtype="float32", log_path=None):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.optimizer = optimizer
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.dtype = dtype
        self.log_path = log_path

    @classmethod
    def from_config(cls, cfg: TrainConfig, **kwargs):
        return cls(**cfg.estimator_params(), **kwargs)

    def _train_config(self):
        return TrainConfig(self.learning_rate, self.batch_size, self.max_epochs, self.patience,
                           self.optimizer, self.random_state, self.validation_fraction,
                           self.hidden, self.dtype, self.log_path)

    def _rngs(self):
        # independent streams: classifier, encoder, regressor, data order
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.random_state).spawn(4)]

    # -- network plumbing, overridden by the FiLM variant ------------------------

    def _prepare(self, X, spectra=None, fitting=False):
        X = check_array(X, dtype=np.dtype(self.dtype))
        if fitting:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise DimensionError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X,)

    def _build(self, inputs, n_classes, rngs):
        d = inputs[0].shape[1]
        # zero output layer: training starts from uniform class probabilities
        self.classifier_ = MLP.build([d, self.hidden, n_classes], rngs[0], name="classifier",
                                     dtype=np.dtype(self.dtype), zero_last=True)

    def _forward(self, inputs, cache=False):
        return self.classifier_.forward(inputs[0], cache=cache)

    def _backward(self, grad, tape):
        self.classifier_.backward(grad, tape)

    def _parameters(self):
        return list(self.classifier_.parameters())

    # -- training -------------------------------------------------------------

    def fit(self, X, y, **kwargs):
        cfg = self._train_config()
        inputs = self._prepare(X, fitting=True, **kwargs)
        y = np.asarray(y).ravel()
        if y.shape[0] != inputs[0].shape[0]:
            raise AlignmentError(f"{inputs[0].shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(inputs[0])):
            raise ConfigError("features must be finite")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise DegenerateLabelError("training labels contain fewer than two classes")
        targets = np.searchsorted(self.classes_, y)

        rngs = self._rngs()
        self._build(inputs, self.classes_.size, rngs)
        data_rng = rngs[3]
        train_idx, val_idx = stratified_split(targets, cfg.validation_fraction, data_rng)
        if val_idx.size == 0:
            val_idx = train_idx

        def subset(idx):
            return tuple(a[idx] for a in inputs)

        val_inputs, val_targets = subset(val_idx), targets[val_idx]
        train_inputs, train_targets = subset(train_idx), targets[train_idx]

        def val_scores():
            logits = self._forward(val_inputs)
            acc = float(np.mean(np.argmax(logits, axis=1) == val_targets))
            return acc, float(softmax_cross_entropy(logits, val_targets)[0])

        def full_loss():
            return float(softmax_cross_entropy(self._forward(train_inputs), train_targets)[0])

        params = self._parameters()
        opt = OPTIMIZERS[cfg.optimizer](cfg.learning_rate)
        report = TrainReport(initial_loss=full_loss())
        best_acc, best_loss = val_scores()
        best_iter = 0
        best = [p.copy() for _, p in params]
        log = open(cfg.log_path, "w") if cfg.log_path else None
        it = 0
        try:
            for _ in range(cfg.max_epochs):
                order = data_rng.permutation(train_idx.size)
                for start in range(0, order.size, cfg.batch_size):
                    batch = order[start:start + cfg.batch_size]
                    tape = GradTape()
                    logits = self._forward(tuple(a[batch] for a in train_inputs), cache=True)
                    loss, grad = softmax_cross_entropy(logits, train_targets[batch])
                    it += 1
                    if not np.isfinite(loss):
                        raise DivergenceError("non-finite training loss", iteration=it)
                    self._backward(grad.astype(logits.dtype, copy=False), tape)
                    opt.step(params, tape)
                    report.losses.append(float(loss))
                    acc, val_loss = val_scores()
                    # patience counts from the last strict accuracy gain; among equally
                    # accurate iterations the lowest validation loss is kept
                    if acc > best_acc:
                        best_iter = it
                    if acc > best_acc or (acc == best_acc and val_loss < best_loss):
                        best_acc, best_loss = acc, val_loss
                        best = [p.copy() for _, p in params]
                    if log:
                        log.write(json.dumps({"iteration": it, "loss": float(loss), "val_oa": acc}) + "\n")
                    if it - best_iter >= cfg.patience:
                        report.stop_reason = "early-stopped"
                        break
                if report.stop_reason == "early-stopped":
                    break
        finally:
            if log:
                log.close()
        for (_, p), b in zip(params, best):
            p[...] = b
        report.iterations = it
        report.best_iteration = best_iter
        report.best_val_accuracy = best_acc
        report.final_loss = full_loss()
        self.report_ = report
        return self

    # -- prediction -----------------------------------------------------------

    def decision_function(self, X, **kwargs):
        check_is_fitted(self, "classes_")
        return self._forward(self._prepare(X, **kwargs))

    def predict_proba(self, X, **kwargs):
        return softmax(self.decision_function(X, **kwargs).astype(np.float64))

    def predict(self, X, **kwargs):
        return logits_to_labels(self.decision_function(X, **kwargs), self.classes_)

    # -- checkpoint support ---------------------------------------------------

    def export_tensors(self):
        return {name: p for name, p in self._parameters()}

    def header(self):
        return {"variant": "geodiffnet", "d": int(self.n_features_in_),
                "C": int(self.classes_.size), "classes": [int(c) for c in self.classes_],
                "hidden": int(self.hidden), "dtype": self.dtype}

    @classmethod
    def from_tensors(cls, header, tensors):
        model = cls(hidden=header["hidden"], dtype=header["dtype"])
        model.classes_ = np.asarray(header["classes"])
        model.n_features_in_ = header["d"]
        model._build(
            (np.zeros((1, header["d"])),), len(model.classes_),
            [np.random.default_rng(0)] * 4)
        model._load(tensors)
        return model

    def _load(self, tensors):
        for name, p in self._parameters():
            if name not in tensors:
                raise ConfigError(f"checkpoint lacks tensor {name!r}")
            if tensors[name].shape != p.shape:
                raise DimensionError(f"tensor {name!r} has shape {tensors[name].shape}, expected {p.shape}")
            p[...] = tensors[name]


class GeoDiffNetFClassifier(GeoDiffNetClassifier):
    """Spectrally modulated variant: ``MLP(gamma(s) * f + beta(s))``.

    Spectra are passed either as the ``spectra`` keyword or appended to ``X``
    after the first ``spatial_dim`` columns. They are z-scored per band with
    statistics from the training pixels.
    """

    def __init__(self, spatial_dim=None, encoder_hidden=128, embed_dim=64, film_hidden=128,
                 hidden=128, learning_rate=0.003, batch_size=64, max_epochs=10, patience=1000,
                 optimizer="adam", validation_fraction=0.1, random_state=0, dtype="float32",
                 log_path=None):
        super().__init__(hidden=hidden, learning_rate=learning_rate, batch_size=batch_size,
                         max_epochs=max_epochs, patience=patience, optimizer=optimizer,
                         validation_fraction=validation_fraction, random_state=random_state,
                         dtype=dtype, log_path=log_path)
        self.spatial_dim = spatial_dim
        self.encoder_hidden = encoder_hidden
        self.embed_dim = embed_dim
        self.film_hidden = film_hidden

    def _prepare(self, X, spectra=None, fitting=False):
        dtype = np.dtype(self.dtype)
        X = check_array(X, dtype=dtype)
        if spectra is None:
            if self.spatial_dim is None:
                raise ConfigError("pass spectra= or set spatial_dim to split X")
            if not 0 < self.spatial_dim < X.shape[1]:
                raise DimensionError(f"spatial_dim {self.spatial_dim} does not split {X.shape[1]} columns")
            X, spectra = X[:, :self.spatial_dim], X[:, self.spatial_dim:]
        spectra = check_array(spectra, dtype=np.float64)
        if spectra.shape[0] != X.shape[0]:
            raise AlignmentError(f"{X.shape[0]} feature rows but {spectra.shape[0]} spectra")
        if fitting:
            self.n_features_in_ = X.shape[1]
            self.n_bands_ = spectra.shape[1]
            self.scaler_ = SpectralScaler().fit(spectra)
        else:
            if X.shape[1] != self.n_features_in_:
                raise DimensionError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
            if spectra.shape[1] != self.n_bands_:
                raise DimensionError(f"expected {self.n_bands_} bands, got {spectra.shape[1]}")
        return X, self.scaler_.transform(spectra).astype(dtype)

    def _build(self, inputs, n_classes, rngs):
        super()._build(inputs, n_classes, rngs)
        dtype = np.dtype(self.dtype)
        d, b = inputs[0].shape[1], inputs[1].shape[1]
        self.encoder_ = build_encoder(b, rngs[1], self.encoder_hidden, self.embed_dim, dtype)
        self.regressor_ = build_regressor(d, rngs[2], self.embed_dim, self.film_hidden, dtype)
        self.film_ = FilmBranch(self.encoder_, self.regressor_)

    def modulated_features(self, inputs, cache=False):
        return self.film_.forward(inputs[0], inputs[1], cache=cache)

    def _forward(self, inputs, cache=False):
        return self.classifier_.forward(self.modulated_features(inputs, cache), cache=cache)

    def _backward(self, grad, tape):
        d_mod = self.classifier_.backward(grad, tape)
        self.film_.backward(d_mod, tape)

    def _parameters(self):
        return list(self.classifier_.parameters()) + list(self.film_.parameters())

    def header(self):
        h = super().header()
        h.update(variant="geodiffnet-f", b=int(self.n_bands_), encoder_hidden=int(self.encoder_hidden),
                 embed_dim=int(self.embed_dim), film_hidden=int(self.film_hidden))
        return h

    def export_tensors(self):
        tensors = super().export_tensors()
        tensors["scaler.mean"] = self.scaler_.mean_
        tensors["scaler.scale"] = self.scaler_.scale_
        return tensors

    @classmethod
    def from_tensors(cls, header, tensors):
        model = cls(encoder_hidden=header["encoder_hidden"], embed_dim=header["embed_dim"],
                    film_hidden=header["film_hidden"], hidden=header["hidden"], dtype=header["dtype"])
        model.classes_ = np.asarray(header["classes"])
        model.n_features_in_ = header["d"]
        model.n_bands_ = header["b"]
        model.scaler_ = SpectralScaler.from_stats(tensors["scaler.mean"], tensors["scaler.scale"])
        rng = np.random.default_rng(0)
        model._build((np.zeros((1, header["d"])), np.zeros((1, header["b"]))),
                     len(model.classes_), [rng] * 4)
        model._load(tensors)
        return model


def train_geodiffnet(features, labels, cfg: TrainConfig | None = None):
    """Fit the spatial-only classifier; returns ``(model, report)``."""
    model = GeoDiffNetClassifier.from_config(cfg or TrainConfig()).fit(features, labels)
    return model, model.report_


def train_geodiffnet_f(features, spectra, labels, cfg: TrainConfig | None = None, **widths):
    """Fit the FiLM variant; returns ``(model, report)``.

    The fitted model exposes ``encoder_``, ``regressor_`` and ``classifier_``.
    """
    features = np.asarray(features)
    spectra = np.asarray(spectra)
    if features.shape[0] != spectra.shape[0]:
        raise AlignmentError(f"{features.shape[0]} feature rows but {spectra.shape[0]} spectra")
    model = GeoDiffNetFClassifier.from_config(cfg or TrainConfig(), **widths)
    model.fit(features, labels, spectra=spectra)
    return model, model.report_


def predict_pixels(model: GeoDiffNetClassifier, features, spectra=None):
    """Class ids and logits for each row of ``features``."""
    kwargs = {} if spectra is None else {"spectra": spectra}
    logits = model.decision_function(features, **kwargs)
    return logits_to_labels(logits, model.classes_), logits
