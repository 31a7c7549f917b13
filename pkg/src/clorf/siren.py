"""Coordinate MLPs (SIREN and ReLU variants) with hand-written backprop and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._trig import scaled_sin, scaled_sincos

ACTIVATIONS = ("sine", "relu", "relu_pe")
ACTIVATION_TAGS = {"sine": 0, "relu": 1, "relu_pe": 2}
PE_FREQS = 6


@dataclass(frozen=True)
class SirenConfig:
    in_dim: int
    out_dim: int
    hidden_sizes: tuple[int, ...] = (256, 256)
    omega0: float = 30.0
    activation: str = "sine"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"in_dim and out_dim must be >= 1, got {self.in_dim}, {self.out_dim}")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden_sizes}")
        if not self.omega0 > 0:
            raise ValueError(f"omega0 must be positive, got {self.omega0}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")

    @property
    def feature_dim(self) -> int:
        """Width of the first layer's input after any positional encoding."""
        if self.activation == "relu_pe":
            return self.in_dim * (2 * PE_FREQS + 1)
        return self.in_dim

    @property
    def depth(self) -> int:
        """Number of weight matrices."""
        return len(self.hidden_sizes) + 1


@dataclass
class SirenNet:
    config: SirenConfig
    weights: list[np.ndarray]  # W_i has shape (fan_out, fan_in)
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        widths = [self.config.feature_dim, *self.config.hidden_sizes, self.config.out_dim]
        if len(self.weights) != len(widths) - 1:
            raise ValueError(f"expected {len(widths) - 1} layers, got {len(self.weights)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i}: shapes {w.shape}/{b.shape} do not chain "
                                 f"({widths[i]} -> {widths[i + 1]})")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: list[np.ndarray]) -> "SirenNet":
        return SirenNet(self.config, [p.copy() for p in params[0::2]], [p.copy() for p in params[1::2]])

    def copy(self) -> "SirenNet":
        return self.with_params(self.params())


def siren_init(config: SirenConfig) -> SirenNet:
    """SIREN initialization; ReLU variants use He-uniform bounds instead."""
    rng = np.random.default_rng(config.seed)
    widths = [config.feature_dim, *config.hidden_sizes, config.out_dim]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if config.activation == "sine":
            bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / config.omega0
        else:
            bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return SirenNet(config, weights, biases)


def positional_encoding(x: np.ndarray) -> np.ndarray:
    feats = []
    for k in range(PE_FREQS):
        feats.append(np.sin(2.0**k * np.pi * x))
        feats.append(np.cos(2.0**k * np.pi * x))
    feats.append(x)
    return np.concatenate(feats, axis=1)


def _check_inputs(net: SirenNet, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1 and net.config.in_dim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != net.config.in_dim:
        raise ValueError(f"inputs must be (batch, {net.config.in_dim}), got {x.shape}")
    return x


def _run(net: SirenNet, x: np.ndarray, keep: bool):
    cfg = net.config
    h = positional_encoding(x) if cfg.activation == "relu_pe" else x
    acts, derivs = [h], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if i == last:
            return z, (acts, derivs)
        if cfg.activation == "sine":
            if keep:
                h, d = scaled_sincos(z, cfg.omega0)
            else:
                h = scaled_sin(z, cfg.omega0)
        else:
            h = np.maximum(z, 0.0)
            d = (z > 0).astype(np.float64) if keep else None
        if keep:
            acts.append(h)
            derivs.append(d)


def forward(net: SirenNet, inputs) -> np.ndarray:
    """Evaluate the network on a (batch, in_dim) array; returns (batch, out_dim)."""
    out, _ = _run(net, _check_inputs(net, inputs), keep=False)
    return out


def forward_with_cache(net: SirenNet, inputs):
    """Like forward, also returning the intermediates backward() can reuse."""
    return _run(net, _check_inputs(net, inputs), keep=True)


def backward(net: SirenNet, inputs, upstream, cache=None) -> list[np.ndarray]:
    """Gradient of sum(upstream * forward(net, inputs)) w.r.t. [W1, c1, W2, c2, ...].

    Batch contributions are reduced by matrix products, so gradients
    accumulate over all rows of ``inputs``.
    """
    x = _check_inputs(net, inputs)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (x.shape[0], net.config.out_dim):
        raise ValueError(f"upstream must be {(x.shape[0], net.config.out_dim)}, got {g.shape}")
    if cache is None:
        _, cache = _run(net, x, keep=True)
    acts, derivs = cache
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = g.T @ acts[i]
        grads[2 * i + 1] = g.sum(axis=0)
        if i == 0:
            break
        g = (g @ net.weights[i]) * derivs[i - 1]
    return grads


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "AdamState":
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """One bias-corrected Adam update. Returns (new_params, new_state); inputs are untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"tensor {i}: shape mismatch {p.shape} / {g.shape} / {state.m[i].shape}")
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            idx = np.unravel_index(bad[0], g.shape)
            raise NonFiniteGradient(
                f"non-finite gradient at iteration {state.t + 1}, tensor {i} "
                f"(layer {i // 2}, {'weight' if i % 2 == 0 else 'bias'}), index {tuple(int(j) for j in idx)}")
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, t=t, m=new_m, v=new_v)
