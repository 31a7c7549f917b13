"""Continuous low-rank factorization: model, objective, training and inference.

The latent HR-HSI is modelled as Z = E A with E (L x K) produced row-wise by a
spectral network on band coordinates and A (K x N) produced column-wise by a
spatial network on pixel coordinates. Both nets are fitted to the LR-HSI and
HR-MSI observations through the known degradation operators.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import siren
from .cube import CoordinateGrid, FormatError, HsiCube, atomic_write, fold_spectral, make_grid, unfold_spectral
from .degrade import DegradationSpec, blur_decimate_operator
from .siren import AdamState, SirenConfig, SirenNet

log = logging.getLogger(__name__)

PRESETS = {
    "paper": {"spatial_hidden": (512,) * 5, "spectral_hidden": (128,) * 2, "lr": 3e-5, "max_iters": 30000},
    "desk": {"spatial_hidden": (128,) * 3, "spectral_hidden": (64,) * 2, "lr": 1e-4, "max_iters": 5000},
}


@dataclass
class ClorfModel:
    spatial_net: SirenNet   # (row, col) -> K coefficients, the columns of A
    spectral_net: SirenNet  # band coordinate -> K basis values, the rows of E
    train_dims: tuple[int, int, int]  # (H, W, L)

    def __post_init__(self):
        k = self.spatial_net.config.out_dim
        if self.spectral_net.config.out_dim != k:
            raise ValueError("spatial and spectral nets must share the rank K")
        if self.spatial_net.config.in_dim != 2 or self.spectral_net.config.in_dim != 1:
            raise ValueError("spatial net must take 2-D inputs and spectral net 1-D inputs")
        h, w, l = self.train_dims
        if k > min(l, h * w):
            raise ValueError(f"rank {k} exceeds min(L, N) = {min(l, h * w)}")

    @property
    def rank(self) -> int:
        return self.spatial_net.config.out_dim

    @property
    def train_grid(self) -> CoordinateGrid:
        return make_grid(*self.train_dims)

    def params(self) -> list[np.ndarray]:
        return self.spatial_net.params() + self.spectral_net.params()

    def with_params(self, params: list[np.ndarray]) -> "ClorfModel":
        n = 2 * len(self.spatial_net.weights)
        return ClorfModel(self.spatial_net.with_params(params[:n]),
                          self.spectral_net.with_params(params[n:]), self.train_dims)


def init_model(dims: tuple[int, int, int], rank: int, spatial_hidden=(128,) * 3, spectral_hidden=(64,) * 2,
               omega0: float = 30.0, activation: str = "sine", seed: int = 0) -> ClorfModel:
    spatial = siren.siren_init(SirenConfig(2, rank, tuple(spatial_hidden), omega0, activation, seed))
    spectral = siren.siren_init(SirenConfig(1, rank, tuple(spectral_hidden), omega0, activation, seed + 1))
    return ClorfModel(spatial, spectral, tuple(int(d) for d in dims))


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.25
    eta: float = 0.0025
    lr: float = 3e-5
    max_iters: int = 30000
    patience: int = 10
    min_rel_improve: float = 1e-4
    seed: int = 0
    log_every: int = 200

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be nonnegative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1 or self.log_every < 1 or self.max_iters < 0:
            raise ValueError("patience and log_every must be >= 1 and max_iters >= 0")


@dataclass(frozen=True)
class LossTerms:
    hsi_obs: float  # ||X - E A B S||_F^2 against the LR-HSI
    msi_obs: float  # ||Y - H E A||_F^2 against the HR-MSI
    tv: float

    def total(self, lam: float, eta: float) -> float:
        return self.hsi_obs + lam * self.msi_obs + eta * self.tv


@dataclass
class TrainReport:
    records: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    stop_reason: str = "max_iters"
    best_iter: int = -1
    best_total: float = math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "loss_hsi_obs", "loss_msi_obs", "loss_tv", "total"])
        for rec in self.records:
            w.writerow([rec[0], *(repr(float(v)) for v in rec[1:])])
        return buf.getvalue()


class DivergenceError(FloatingPointError):
    def __init__(self, msg, model=None, report=None):
        super().__init__(msg)
        self.model = model
        self.report = report


def assemble(model: ClorfModel, grid: CoordinateGrid):
    """(E_hat, A_hat): E_hat (L x K) row i is the spectral net at b_i; A_hat (K x N) column j the spatial net at o_j."""
    e_hat = siren.forward(model.spectral_net, grid.spectral)
    a_hat = siren.forward(model.spatial_net, grid.spatial).T
    return e_hat, a_hat


def reconstruct(model: ClorfModel, grid: CoordinateGrid) -> np.ndarray:
    e_hat, a_hat = assemble(model, grid)
    return e_hat @ a_hat


def infer(model: ClorfModel, dims: tuple[int, int, int]) -> HsiCube:
    """Evaluate the factorization on a fresh [-1, 1] grid of size (H', W', L')."""
    h, w, l = dims
    grid = make_grid(h, w, l)
    return fold_spectral(reconstruct(model, grid), h, w)


class FusionProblem:
    """Observations plus the linear operators linking them to the HR-HSI."""

    def __init__(self, lr_hsi: HsiCube, hr_msi: HsiCube, degr: DegradationSpec):
        h, w = hr_msi.height, hr_msi.width
        l = lr_hsi.bands
        if degr.srf.cols != l or degr.srf.rows != hr_msi.bands:
            raise ValueError(f"SRF is {degr.srf.rows}x{degr.srf.cols} but observations have "
                             f"{hr_msi.bands} MSI bands and {l} HSI bands")
        expect = (degr.down.out_size(h), degr.down.out_size(w))
        if (lr_hsi.height, lr_hsi.width) != expect:
            raise ValueError(f"LR-HSI is {lr_hsi.height}x{lr_hsi.width}, expected {expect[0]}x{expect[1]} "
                             f"for a {h}x{w} MSI at ratio {degr.down.ratio}, offset {degr.down.offset}")
        self.dims = (h, w, l)
        self.x = unfold_spectral(lr_hsi)
        self.y = unfold_spectral(hr_msi)
        self.srf = degr.srf.weights
        self.op = blur_decimate_operator(h, w, degr.psf, degr.down)
        self.op_t = self.op.T.tocsr()

    def apply_op(self, a: np.ndarray) -> np.ndarray:
        """a @ (B S) for a (rows x N) dense array."""
        return (self.op_t @ a.T).T


def loss_tv(a_hat: np.ndarray, dims: tuple[int, int]) -> float:
    """Anisotropic TV of each row of A reshaped to H x W, summed over rows."""
    h, w = dims
    if a_hat.shape[1] != h * w:
        raise ValueError(f"A has {a_hat.shape[1]} columns, expected {h}*{w}")
    a = a_hat.reshape(-1, h, w)
    return float(np.abs(np.diff(a, axis=1)).sum() + np.abs(np.diff(a, axis=2)).sum())


def _tv_subgradient(a_hat: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    a = a_hat.reshape(-1, h, w)
    g = np.zeros_like(a)
    sh = np.sign(np.diff(a, axis=1))
    sw = np.sign(np.diff(a, axis=2))
    g[:, 1:, :] += sh
    g[:, :-1, :] -= sh
    g[:, :, 1:] += sw
    g[:, :, :-1] -= sw
    return g.reshape(a_hat.shape)


def _check_grid(model: ClorfModel, problem: FusionProblem) -> None:
    if tuple(model.train_dims) != tuple(problem.dims):
        raise ValueError(f"model grid {model.train_dims} does not match observations {problem.dims}")


def loss_data(model: ClorfModel, problem: FusionProblem) -> tuple[float, float]:
    """(term_hsi_obs, term_msi_obs) for the model at its training grid."""
    _check_grid(model, problem)
    e_hat, a_hat = assemble(model, model.train_grid)
    r1 = e_hat @ problem.apply_op(a_hat) - problem.x
    r2 = (problem.srf @ e_hat) @ a_hat - problem.y
    return float(np.sum(r1 * r1)), float(np.sum(r2 * r2))


def loss_terms(model: ClorfModel, problem: FusionProblem) -> LossTerms:
    hsi, msi = loss_data(model, problem)
    _, a_hat = assemble(model, model.train_grid)
    return LossTerms(hsi, msi, loss_tv(a_hat, problem.dims[:2]))


def loss_total_and_grad(model: ClorfModel, problem: FusionProblem, config: TrainConfig):
    """Total objective and its gradient for every parameter, ordered as model.params().

    Returns (total, grads, LossTerms). The TV term uses sign(0) = 0.
    """
    _check_grid(model, problem)
    grid = model.train_grid
    e_hat, spec_cache = siren.forward_with_cache(model.spectral_net, grid.spectral)
    a_t, spat_cache = siren.forward_with_cache(model.spatial_net, grid.spatial)
    a_hat = a_t.T

    p = problem.apply_op(a_hat)
    r1 = e_hat @ p - problem.x
    he = problem.srf @ e_hat
    r2 = he @ a_hat - problem.y
    terms = LossTerms(float(np.sum(r1 * r1)), float(np.sum(r2 * r2)), loss_tv(a_hat, problem.dims[:2]))
    total = terms.total(config.lam, config.eta)

    d_e = 2.0 * r1 @ p.T + (2.0 * config.lam) * problem.srf.T @ (r2 @ a_hat.T)
    d_a = problem.op @ (2.0 * r1.T @ e_hat)  # (N x K), already transposed
    d_a = d_a.T + (2.0 * config.lam) * he.T @ r2
    if config.eta:
        d_a = d_a + config.eta * _tv_subgradient(a_hat, problem.dims[:2])

    grads = siren.backward(model.spatial_net, grid.spatial, d_a.T, spat_cache)
    grads += siren.backward(model.spectral_net, grid.spectral, d_e, spec_cache)
    return total, grads, terms


def train(lr_hsi: HsiCube, hr_msi: HsiCube, degr: DegradationSpec, model: ClorfModel,
          config: TrainConfig, callback=None):
    """Full-batch Adam on the fusion objective, starting from ``model``.

    Returns (best_model, TrainReport). The best-loss parameters are returned,
    not the last iterate.
    """
    problem = FusionProblem(lr_hsi, hr_msi, degr)
    _check_grid(model, problem)
    report = TrainReport()
    if config.max_iters == 0:
        return model, report

    params = model.params()
    state = AdamState.for_params(params, config.lr)
    best_params, best_total = params, math.inf
    plateau_ref, stale = math.inf, 0

    def record(it, terms, total):
        report.records.append((it, terms.hsi_obs, terms.msi_obs, terms.tv, total))

    it = 0
    try:
        while True:
            current = model.with_params(params) if it else model
            if it < config.max_iters:
                total, grads, terms = loss_total_and_grad(current, problem, config)
            else:
                terms = loss_terms(current, problem)
                total = terms.total(config.lam, config.eta)
            if not math.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at iteration {it}: hsi={terms.hsi_obs} msi={terms.msi_obs} tv={terms.tv}",
                    model.with_params(best_params), report)
            if total < best_total:
                best_total, best_params, report.best_iter = total, params, it

            last = it == config.max_iters
            if it % config.log_every == 0 or last:
                record(it, terms, total)
                log.info("iter %d  hsi %.6g  msi %.6g  tv %.6g  total %.6g", it,
                         terms.hsi_obs, terms.msi_obs, terms.tv, total)
                if callback is not None:
                    callback(it, terms, total)
                if best_total < plateau_ref * (1.0 - config.min_rel_improve):
                    plateau_ref, stale = best_total, 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        report.stop_reason = "early_stop"
                        break
            if last:
                report.stop_reason = "max_iters"
                break
            params, state = siren.adam_step(state, params, grads)
            it += 1
    except KeyboardInterrupt:
        report.stop_reason = "user"
    report.best_total = best_total
    return model.with_params(best_params), report


# checkpoint format ---------------------------------------------------------

CKPT_MAGIC = b"CLRF"
CKPT_VERSION = 1
_TAG_NAMES = {v: k for k, v in siren.ACTIVATION_TAGS.items()}


def _pack_net(net: SirenNet) -> bytes:
    out = [struct.pack("<BdI", siren.ACTIVATION_TAGS[net.config.activation], net.config.omega0, len(net.weights))]
    for w, b in zip(net.weights, net.biases):
        out.append(struct.pack("<II", *w.shape))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def model_to_bytes(model: ClorfModel) -> bytes:
    head = struct.pack("<4sIIIII", CKPT_MAGIC, CKPT_VERSION, model.rank, *model.train_dims)
    return head + _pack_net(model.spatial_net) + _pack_net(model.spectral_net)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def _unpack_net(r: _Reader, name: str, in_dim: int, rank: int) -> SirenNet:
    (tag,) = r.unpack("<B", f"{name} activation tag")
    if tag not in _TAG_NAMES:
        raise FormatError(f"{name} activation tag: unknown value {tag}")
    (omega0,) = r.unpack("<d", f"{name} omega0")
    if not (math.isfinite(omega0) and omega0 > 0):
        raise FormatError(f"{name} omega0: invalid value {omega0}")
    (n_layers,) = r.unpack("<I", f"{name} layer count")
    remaining = len(r.buf) - r.pos
    if n_layers == 0 or n_layers * 8 > remaining:
        raise FormatError(f"{name} layer count: {n_layers} inconsistent with {remaining} remaining bytes")
    weights, biases = [], []
    for i in range(n_layers):
        rows, cols = r.unpack("<II", f"{name} layer {i} shape")
        if rows == 0 or cols == 0 or rows * cols * 8 > len(r.buf) - r.pos:
            raise FormatError(f"{name} layer {i} shape: {rows}x{cols} exceeds remaining payload")
        w = np.frombuffer(r.take(8 * rows * cols, f"{name} layer {i} weights"), dtype="<f8")
        b = np.frombuffer(r.take(8 * rows, f"{name} layer {i} biases"), dtype="<f8")
        weights.append(w.reshape(rows, cols).astype(np.float64))
        biases.append(b.astype(np.float64))
    activation = _TAG_NAMES[tag]
    cfg = SirenConfig(in_dim, rank, tuple(w.shape[0] for w in weights[:-1]), omega0, activation)
    try:
        return SirenNet(cfg, weights, biases)
    except ValueError as exc:
        raise FormatError(f"{name} layers: {exc}") from None


def model_from_bytes(buf: bytes) -> ClorfModel:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad magic")
    r = _Reader(buf)
    _, version, rank, h, w, l = r.unpack("<4sIIIII", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"version: unsupported value {version}")
    if rank == 0 or 0 in (h, w, l):
        raise FormatError(f"header: zero rank or dimension ({rank}, {h}, {w}, {l})")
    spatial = _unpack_net(r, "spatial net", 2, rank)
    spectral = _unpack_net(r, "spectral net", 1, rank)
    if r.pos != len(buf):
        raise FormatError(f"trailing bytes: {len(buf) - r.pos}")
    try:
        return ClorfModel(spatial, spectral, (h, w, l))
    except ValueError as exc:
        raise FormatError(f"header: {exc}") from None


def save_model(model: ClorfModel, path) -> None:
    atomic_write(path, model_to_bytes(model))


def load_model(path) -> ClorfModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
