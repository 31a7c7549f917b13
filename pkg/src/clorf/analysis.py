"""Numerical checks of the structural claims behind the factorization.

* the rank of a matrix function sampled from a discrete matrix never exceeds
  the matrix rank, and the full sample attains it;
* any rank-K matrix splits as U V^T with K columns each;
* a product of two bias-free sine MLPs is Lipschitz with an explicit constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import siren
from .siren import SirenNet

RANK_RTOL = 1e-10


def numerical_rank(m: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


@dataclass(frozen=True)
class DiscreteMatrixFunction:
    """f(s, b) = X[s1 * l2 + s2, b] on the integer lattice {0..l1-1} x {0..l2-1} x {0..n2-1}."""

    backing: np.ndarray
    spatial_index_shape: tuple[int, int]

    def __post_init__(self):
        x = np.asarray(self.backing, dtype=np.float64)
        l1, l2 = self.spatial_index_shape
        if x.ndim != 2 or l1 * l2 != x.shape[0]:
            raise ValueError(f"spatial index shape {l1}x{l2} does not cover {x.shape[0]} rows")
        object.__setattr__(self, "backing", x)

    def __call__(self, s1, s2, b):
        l1, l2 = self.spatial_index_shape
        s1, s2, b = np.asarray(s1), np.asarray(s2), np.asarray(b)
        if np.any((s1 < 0) | (s1 >= l1) | (s2 < 0) | (s2 >= l2) | (b < 0) | (b >= self.backing.shape[1])):
            raise IndexError("coordinate outside the function's domain")
        return self.backing[s1 * l2 + s2, b]

    def sample(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Sampled matrix M[i, j] = f(rows[i], cols[j]); rows are (s1, s2) pairs."""
        return self(rows[:, 0][:, None], rows[:, 1][:, None], cols[None, :])


def mf_rank_witness(dmf: DiscreteMatrixFunction, trials: int = 100, seed: int = 0):
    """Largest numerical rank over random sampled matrices and the full sample.

    Returns (max_rank, (n1', n2')) for the first matrix that reached the max.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    l1, l2 = dmf.spatial_index_shape
    n1, n2 = dmf.backing.shape
    # full sample: every coordinate exactly once, i.e. X itself
    s1, s2 = np.divmod(np.arange(n1), l2)
    full = dmf.sample(np.stack([s1, s2], axis=1), np.arange(n2))
    best, dims = numerical_rank(full), full.shape
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        m1 = int(rng.integers(1, 2 * n1 + 1))
        m2 = int(rng.integers(1, 2 * n2 + 1))
        rows = np.stack([rng.integers(0, l1, m1), rng.integers(0, l2, m1)], axis=1)
        cols = rng.integers(0, n2, m2)
        r = numerical_rank(dmf.sample(rows, cols))
        if r > best:
            best, dims = r, (m1, m2)
    return best, dims


def rank_factorize(m: np.ndarray, tol: float = RANK_RTOL):
    """Truncated-SVD rank factorization M = U V^T with U = U_K S_K, V = V_K."""
    m = np.asarray(m, dtype=np.float64)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    k = 0 if s.size == 0 or s[0] == 0.0 else int(np.sum(s > tol * s[0]))
    return u[:, :k] * s[:k], vt[:k].T.copy()


@dataclass(frozen=True)
class LipschitzCertificate:
    delta: float
    kappa: float
    eta: float   # largest operator 1-norm over every weight matrix of both nets
    zeta: float
    depth: int

    def to_csv_row(self) -> str:
        return f"{self.delta!r},{self.kappa!r},{self.eta!r},{self.zeta!r},{self.depth}"

    def describe(self) -> str:
        return (f"Lipschitz certificate: delta = eta^(2d+1) * kappa^(2d-2) * zeta = "
                f"{self.eta:.6g}^{2 * self.depth + 1} * {self.kappa:.6g}^{2 * self.depth - 2} * {self.zeta:.6g} "
                f"= {self.delta:.6g}\n"
                f"  depth d = {self.depth} weight matrices per net (final layer affine)\n"
                f"  valid only for bias-free nets; trained models carry biases and are not covered")


CERT_CSV_HEADER = "delta,kappa,eta,zeta,depth"


def zero_biases(net: SirenNet) -> SirenNet:
    return SirenNet(net.config, [w.copy() for w in net.weights], [np.zeros_like(b) for b in net.biases])


def operator_one_norm(w: np.ndarray) -> float:
    """Max absolute column sum, the norm induced by the vector l1 norm."""
    return float(np.abs(w).sum(axis=0).max())


def lipschitz_certificate(spatial_net: SirenNet, spectral_net: SirenNet, zeta: float) -> LipschitzCertificate:
    nets = (spatial_net, spectral_net)
    for name, net in zip(("spatial", "spectral"), nets):
        if any(np.any(b != 0) for b in net.biases):
            raise ValueError(f"{name} net has nonzero biases; the certificate covers bias-free nets only")
        if net.config.activation not in ("sine", "relu"):
            raise ValueError(f"{name} net activation {net.config.activation!r} does not vanish at 0")
    if spatial_net.config.depth != spectral_net.config.depth:
        raise ValueError(f"depth mismatch: {spatial_net.config.depth} vs {spectral_net.config.depth}")
    if spatial_net.config.activation != spectral_net.config.activation or \
            spatial_net.config.omega0 != spectral_net.config.omega0:
        raise ValueError("both nets must share the same activation")
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    cfg = spatial_net.config
    kappa = cfg.omega0 if cfg.activation == "sine" else 1.0
    d = cfg.depth
    eta = max(operator_one_norm(w) for net in nets for w in net.weights)
    return LipschitzCertificate(eta ** (2 * d + 1) * kappa ** (2 * d - 2) * zeta, kappa, eta, zeta, d)


def _sample_l1_ball(rng, n: int, zeta: float) -> np.ndarray:
    out = np.empty((0, 2))
    while out.shape[0] < n:
        cand = rng.uniform(-zeta, zeta, size=(2 * n, 2))
        out = np.concatenate([out, cand[np.abs(cand).sum(axis=1) <= zeta]])
    return out[:n]


def empirical_lipschitz_check(spatial_net: SirenNet, spectral_net: SirenNet, zeta: float,
                              samples: int = 10_000, seed: int = 0):
    """Count pairs violating |f1 - f2| <= delta (|s1 - s2|_1 + |b1 - b2|).

    Half of the pairs are independent draws from the domain, half are close
    neighbours. Returns (violations, max_ratio, certificate).
    """
    cert = lipschitz_certificate(spatial_net, spectral_net, zeta)
    rng = np.random.default_rng(seed)
    s1 = _sample_l1_ball(rng, samples, zeta)
    b1 = rng.uniform(-zeta, zeta, samples)
    s2 = _sample_l1_ball(rng, samples, zeta)
    b2 = rng.uniform(-zeta, zeta, samples)
    near = np.arange(samples) % 2 == 1
    eps = 10.0 ** rng.uniform(-6, -1, samples)
    s2[near] = s1[near] + eps[near, None] * rng.uniform(-1, 1, (near.sum(), 2))
    b2[near] = b1[near] + eps[near] * rng.uniform(-1, 1, near.sum())
    # keep perturbed points inside the domain
    scale = np.maximum(np.abs(s2).sum(axis=1) / zeta, 1.0)
    s2 = s2 / scale[:, None]
    b2 = np.clip(b2, -zeta, zeta)

    def f(s, b):
        return np.sum(siren.forward(spatial_net, s) * siren.forward(spectral_net, b[:, None]), axis=1)

    df = np.abs(f(s1, b1) - f(s2, b2))
    dist = np.abs(s1 - s2).sum(axis=1) + np.abs(b1 - b2)
    bound = cert.delta * dist
    keep = dist > 0
    violations = int(np.sum(df[keep] > bound[keep]))
    pos = keep & (bound > 0)
    max_ratio = float(np.max(df[pos] / bound[pos])) if np.any(pos) else 0.0
    return violations, max_ratio, cert
