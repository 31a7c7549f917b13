"""Forward degradation model: PSF blur, decimation, spectral response and noise.

LR-HSI = noise(decimate(blur(Z))) and HR-MSI = noise(srf(Z)); the SRF acts on
the un-blurred ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cube import HsiCube


@dataclass(frozen=True)
class PsfKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise ValueError(f"PSF must be square with odd size, got {taps.shape}")
        if np.any(taps < 0):
            raise ValueError("PSF taps must be nonnegative")
        if abs(taps.sum() - 1.0) > 1e-12:
            raise ValueError(f"PSF taps must sum to 1, got {taps.sum()!r}")
        object.__setattr__(self, "taps", taps)

    @property
    def size(self) -> int:
        return self.taps.shape[0]


@dataclass(frozen=True)
class DownsampleSpec:
    ratio: int
    offset: int | None = None  # None -> ratio // 2

    def __post_init__(self):
        if self.ratio < 1:
            raise ValueError(f"ratio must be >= 1, got {self.ratio}")
        if self.offset is None:
            object.__setattr__(self, "offset", self.ratio // 2)
        if not 0 <= self.offset < self.ratio:
            raise ValueError(f"offset must lie in [0, ratio), got {self.offset} for ratio {self.ratio}")

    def out_size(self, n: int) -> int:
        return (n - self.offset - 1) // self.ratio + 1


@dataclass(frozen=True)
class SpectralResponse:
    weights: np.ndarray  # (l, L)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[0] > w.shape[1]:
            raise ValueError(f"SRF must be l x L with 1 <= l <= L, got {w.shape}")
        if np.any(w < 0):
            raise ValueError("SRF weights must be nonnegative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("SRF rows must sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"invalid SNR {self.snr_db}")

    @property
    def enabled(self) -> bool:
        return math.isfinite(self.snr_db)


@dataclass(frozen=True)
class DegradationSpec:
    psf: PsfKernel
    down: DownsampleSpec
    srf: SpectralResponse
    noise_hsi: NoiseSpec | None = None
    noise_msi: NoiseSpec | None = None


def gaussian_psf(size: int, sigma: float) -> PsfKernel:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"PSF size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    c = (size - 1) / 2
    i = np.arange(size) - c
    taps = np.exp(-(i[:, None] ** 2 + i[None, :] ** 2) / (2 * sigma**2))
    return PsfKernel(taps / taps.sum())


def _check_kernel_fits(k: int, height: int, width: int) -> None:
    if k > 2 * min(height, width) - 1:
        raise ValueError(f"kernel size {k} too large for {height}x{width} image (max {2 * min(height, width) - 1})")


def blur(cube: HsiCube, psf: PsfKernel) -> HsiCube:
    """Per-band 2-D convolution with mirror (edge not repeated) padding."""
    k = psf.size
    _check_kernel_fits(k, cube.height, cube.width)
    c = k // 2
    padded = np.pad(cube.data, ((0, 0), (c, c), (c, c)), mode="reflect")
    h, w = cube.height, cube.width
    out = np.zeros_like(cube.data)
    for a in range(k):
        for b in range(k):
            # convolution flips the kernel
            out += psf.taps[a, b] * padded[:, k - 1 - a:k - 1 - a + h, k - 1 - b:k - 1 - b + w]
    return HsiCube(out)


def downsample(cube: HsiCube, spec: DownsampleSpec) -> HsiCube:
    if spec.offset >= cube.height or spec.offset >= cube.width:
        raise ValueError(f"offset {spec.offset} leaves no samples in {cube.height}x{cube.width}")
    return HsiCube(cube.data[:, spec.offset::spec.ratio, spec.offset::spec.ratio])


def apply_srf(cube: HsiCube, srf: SpectralResponse) -> HsiCube:
    if srf.cols != cube.bands:
        raise ValueError(f"SRF expects {srf.cols} bands, cube has {cube.bands}")
    return HsiCube(np.tensordot(srf.weights, cube.data, axes=(1, 0)))


def gaussian_srf(out_bands: int, in_bands: int) -> SpectralResponse:
    """Row-stochastic stand-in for a sensor response: one Gaussian bump per output band."""
    if not 1 <= out_bands <= in_bands:
        raise ValueError(f"need 1 <= out_bands <= in_bands, got {out_bands}, {in_bands}")
    x = np.arange(in_bands, dtype=np.float64)
    centers = (np.arange(out_bands) + 0.5) * in_bands / out_bands - 0.5
    std = in_bands / (2 * out_bands)
    w = np.exp(-((x[None, :] - centers[:, None]) ** 2) / (2 * std**2))
    w = np.clip(w, 0.0, None)
    return SpectralResponse(w / w.sum(axis=1, keepdims=True))


# splitmix64 finalizer applied to a counter; one draw per (seed, index)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = np.uint64(seed % 2**64) + (counters.astype(np.uint64) + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def standard_normals(seed: int, count: int) -> np.ndarray:
    """Counter-based N(0, 1) variates; element e depends only on (seed, e).

    Elements 2p and 2p+1 share the Box-Muller pair built from counters 2p and
    2p+1: u1 = ((x >> 11) + 1) / 2**53 in (0, 1], u2 = (x >> 11) / 2**53 in
    [0, 1); element 2p takes the cosine branch, 2p+1 the sine branch.
    """
    idx = np.arange(count, dtype=np.uint64)
    pair = idx // np.uint64(2)
    x1 = splitmix64(seed, np.uint64(2) * pair)
    x2 = splitmix64(seed, np.uint64(2) * pair + np.uint64(1))
    scale = 2.0**-53
    u1 = ((x1 >> np.uint64(11)).astype(np.float64) + 1.0) * scale
    u2 = (x2 >> np.uint64(11)).astype(np.float64) * scale
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.where(idx % np.uint64(2) == 0, r * np.cos(theta), r * np.sin(theta))


def noise_sigma(signal: np.ndarray, snr_db: float) -> float:
    power = float(np.mean(np.square(signal)))
    if power == 0.0:
        raise ValueError("noise level undefined for an all-zero signal")
    return math.sqrt(power * 10.0 ** (-snr_db / 10.0))


def add_noise(cube: HsiCube, noise: NoiseSpec) -> HsiCube:
    if not noise.enabled:
        return cube
    sigma = noise_sigma(cube.data, noise.snr_db)
    z = standard_normals(noise.seed, cube.data.size).reshape(cube.data.shape)
    return HsiCube(cube.data + sigma * z)


def simulate(gt: HsiCube, psf: PsfKernel, down: DownsampleSpec, srf: SpectralResponse,
             noise_hsi: NoiseSpec | None = None, noise_msi: NoiseSpec | None = None):
    """Returns (lr_hsi, hr_msi) observations of the ground-truth cube."""
    lr = downsample(blur(gt, psf), down)
    hr = apply_srf(gt, srf)
    if noise_hsi is not None:
        lr = add_noise(lr, noise_hsi)
    if noise_msi is not None:
        hr = add_noise(hr, noise_msi)
    return lr, hr


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx > n - 1, period - idx, idx)


def blur_decimate_operator(height: int, width: int, psf: PsfKernel, down: DownsampleSpec) -> sp.csr_matrix:
    """Sparse N x n matrix M with unfold(decimate(blur(Z))) = unfold(Z) @ M."""
    k = psf.size
    _check_kernel_fits(k, height, width)
    c = k // 2
    ho, wo = down.out_size(height), down.out_size(width)
    oi, oj = np.meshgrid(down.offset + down.ratio * np.arange(ho),
                         down.offset + down.ratio * np.arange(wo), indexing="ij")
    a, b = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    src_r = _mirror(oi.ravel()[:, None] - (a.ravel()[None, :] - c), height)
    src_c = _mirror(oj.ravel()[:, None] - (b.ravel()[None, :] - c), width)
    rows = (src_r * width + src_c).ravel()
    cols = np.repeat(np.arange(ho * wo), k * k)
    vals = np.tile(psf.taps.ravel(), ho * wo)
    m = sp.coo_matrix((vals, (rows, cols)), shape=(height * width, ho * wo))
    return m.tocsr()
