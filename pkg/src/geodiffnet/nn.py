"""Dense-tensor and neural-network primitives on numpy.

The trainable sub-networks (spectral encoder, FiLM regressor, pixel classifier)
are plain MLPs and get exact reverse-mode gradients through :class:`MLP`.
Convolution, normalization and attention are forward-only: they are used by the
frozen U-Net, which is never differentiated.

Images are channels-last, ``(H, W, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError, StateError

ACTIVATIONS = ("identity", "relu")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]


def kaiming_uniform(rng, fan_out, fan_in, dtype=np.float64):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


def init_dense(in_features, out_features, activation="identity", rng=None,
               dtype=np.float64, zero=False):
    """Kaiming-uniform (fan-in) weights and zero bias; ``zero=True`` zeros the weights too."""
    if zero:
        weight = np.zeros((out_features, in_features), dtype=dtype)
    else:
        if rng is None:
            raise ConfigError("rng is required for non-zero initialization")
        weight = kaiming_uniform(rng, out_features, in_features, dtype)
    return DenseLayer(weight, np.zeros(out_features, dtype=dtype), activation)


def _apply_activation(z, activation):
    if activation == "relu":
        return np.maximum(z, 0)
    return z


def dense_forward(layer: DenseLayer, x):
    """``act(x @ W.T + b)`` over the last axis of ``x``."""
    x = np.asarray(x)
    if x.shape[-1] != layer.in_features:
        raise DimensionError(
            f"input width {x.shape[-1]} does not match layer input width {layer.in_features}"
        )
    return _apply_activation(x @ layer.weight.T + layer.bias, layer.activation)


class GradTape:
    """Per-parameter gradient buffers keyed by parameter name."""

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    def accumulate(self, name, grad):
        if name in self.grads:
            if self.grads[name].shape != grad.shape:
                raise DimensionError(f"gradient shape mismatch for {name}")
            self.grads[name] += grad
        else:
            self.grads[name] = np.array(grad, copy=True)

    def zero(self):
        for g in self.grads.values():
            g.fill(0)

    def __getitem__(self, name):
        return self.grads[name]

    def __contains__(self, name):
        return name in self.grads

    def items(self):
        return self.grads.items()


@dataclass
class MLP:
    """A stack of dense layers with a cached forward pass for backprop."""

    layers: list[DenseLayer]
    name: str = "mlp"
    _cache: list | None = field(default=None, repr=False)

    @classmethod
    def build(cls, widths, rng, name="mlp", dtype=np.float64, zero_last=False):
        """Hidden layers use ReLU, the last layer is linear."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            layers.append(init_dense(
                fan_in, fan_out, "identity" if last else "relu", rng, dtype,
                zero=last and zero_last,
            ))
        return cls(layers, name)

    @property
    def in_features(self):
        return self.layers[0].in_features

    @property
    def out_features(self):
        return self.layers[-1].out_features

    def forward(self, x, cache=True):
        x = np.asarray(x)
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = dense_forward(layer, x)
        self._cache = (inputs, x) if cache else None
        return x

    __call__ = forward

    def backward(self, upstream, tape: GradTape):
        """Accumulate parameter gradients into ``tape`` and return the input gradient."""
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a cached forward pass")
        inputs, out = self._cache
        grad = np.asarray(upstream)
        if grad.shape != out.shape:
            raise DimensionError(f"upstream {grad.shape} does not match output {out.shape}")
        # relu mask is taken from the layer's own output
        outputs = inputs[1:] + [out]
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            if layer.activation == "relu":
                grad = grad * (outputs[i] > 0)
            x = inputs[i]
            x2 = x.reshape(-1, x.shape[-1])
            g2 = grad.reshape(-1, grad.shape[-1])
            tape.accumulate(f"{self.name}.{i}.weight", g2.T @ x2)
            tape.accumulate(f"{self.name}.{i}.bias", g2.sum(axis=0))
            grad = grad @ layer.weight
        return grad

    def parameters(self):
        """Yield ``(name, array)`` in a fixed order; arrays are the live buffers."""
        for i, layer in enumerate(self.layers):
            yield f"{self.name}.{i}.weight", layer.weight
            yield f"{self.name}.{i}.bias", layer.bias

    def clear(self):
        self._cache = None


def backprop(network: MLP, x, upstream, tape: GradTape):
    """Backward pass of ``network`` for the cached forward evaluation of ``x``."""
    if network._cache is None:
        raise StateError("no forward pass cached")
    cached = network._cache[0][0]
    if cached is not x and (cached.shape != np.shape(x) or not np.array_equal(cached, x)):
        raise StateError("cached forward pass was computed for a different input")
    return network.backward(upstream, tape)


class SGD:
    def __init__(self, lr):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr

    def step(self, params, tape):
        for name, p in params:
            p -= self.lr * tape[name]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, tape):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params:
            g = tape[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    ``targets`` are 0-based class indices.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise DimensionError("targets must be a vector with one entry per row of logits")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1
    return loss, grad / n


# --- forward-only ops for the frozen backbone -------------------------------

def silu(x):
    return x / (1 + np.exp(-x))


def conv2d(x, weight, bias=None):
    """'Same' convolution with zero padding. ``weight`` is ``(kh, kw, cin, cout)``, odd kernel."""
    kh, kw, cin, cout = weight.shape
    h, w, c = x.shape
    if c != cin:
        raise DimensionError(f"conv expects {cin} input channels, got {c}")
    if kh == 1 and kw == 1:
        out = x.reshape(-1, c) @ weight.reshape(cin, cout)
    else:
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
        # win: (h, w, c, kh, kw) -> (h*w, kh*kw*c) matching the weight layout
        cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * c)
        out = cols @ weight.reshape(kh * kw * cin, cout)
    if bias is not None:
        out = out + bias
    return out.reshape(h, w, cout)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    h, w, c = x.shape
    if c % groups:
        raise ConfigError(f"{c} channels not divisible into {groups} groups")
    g = x.reshape(h * w, groups, c // groups)
    mean = g.mean(axis=(0, 2), keepdims=True)
    var = g.var(axis=(0, 2), keepdims=True)
    g = (g - mean) / np.sqrt(var + eps)
    return g.reshape(h, w, c) * gamma + beta


def avg_pool2(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def upsample_nearest2(x):
    return x.repeat(2, axis=0).repeat(2, axis=1)


def _bilinear_matrix(n_in, n_out, dtype):
    # half-pixel centres, edge-clamped
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1 - frac
        m[i, i1] += frac
    return m


def resize_bilinear(x, out_h, out_w):
    h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return x
    rows = _bilinear_matrix(h, out_h, x.dtype)
    cols = _bilinear_matrix(w, out_w, x.dtype)
    return np.einsum("ih,hwc,jw->ijc", rows, x, cols, optimize=True)


def self_attention(x, w_qkv, b_qkv, w_out, b_out, heads, return_weights=False):
    """Multi-head scaled dot-product self-attention with a residual add.

    ``x`` is ``(tokens, C)``; ``w_qkv`` is ``(C, 3C)`` and ``w_out`` is ``(C, C)``.
    """
    n, c = x.shape
    if heads < 1 or c % heads:
        raise ConfigError(f"{c} channels not divisible by {heads} heads")
    ch = c // heads
    qkv = x @ w_qkv + b_qkv
    q, k, v = (a.reshape(n, heads, ch).transpose(1, 0, 2) for a in np.split(qkv, 3, axis=1))
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(ch)
    weights = softmax(scores, axis=-1)
    out = (weights @ v).transpose(1, 0, 2).reshape(n, c)
    y = x + out @ w_out + b_out
    if return_weights:
        return y, weights
    return y


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding ``[cos(t f), sin(t f)]`` of a scalar timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = float(t) * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb
