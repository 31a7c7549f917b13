"""Full-reference quality metrics for HSI reconstructions and a bicubic baseline."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cube import HsiCube

PSNR_CAP = 100.0


@dataclass(frozen=True)
class MetricsReport:
    mpsnr: float
    mssim: float
    sam: float  # degrees
    ergas: float
    ratio_used: float

    def to_csv_row(self) -> str:
        ratio = int(self.ratio_used) if float(self.ratio_used).is_integer() else self.ratio_used
        return f"{self.mpsnr!r},{self.mssim!r},{self.sam!r},{self.ergas!r},{ratio}"


CSV_HEADER = "mpsnr,mssim,sam_deg,ergas,ratio"


def _pair(pred: HsiCube, ref: HsiCube):
    if pred.data.shape != ref.data.shape:
        raise ValueError(f"dimension mismatch: pred {pred.dims} vs ref {ref.dims}")
    return pred.data, ref.data


def _peaks(ref: np.ndarray, peak) -> np.ndarray:
    if peak is None:
        return ref.reshape(ref.shape[0], -1).max(axis=1)
    return np.full(ref.shape[0], float(peak))


def mpsnr(pred: HsiCube, ref: HsiCube, peak: float | None = None) -> float:
    """Mean per-band PSNR. Peak defaults to each reference band's maximum."""
    p, r = _pair(pred, ref)
    peaks = _peaks(r, peak)
    vals = []
    for l in range(r.shape[0]):
        if not np.any(r[l]):
            warnings.warn(f"band {l}: all-zero reference, skipped", RuntimeWarning, stacklevel=2)
            continue
        mse = float(np.mean((p[l] - r[l]) ** 2))
        vals.append(PSNR_CAP if mse == 0.0 else min(PSNR_CAP, 10.0 * math.log10(peaks[l] ** 2 / mse)))
    if not vals:
        raise ValueError("every reference band is all-zero")
    return float(np.mean(vals))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    tmp = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(tmp, k, axis=1) @ g


def ssim_band(pred: np.ndarray, ref: np.ndarray, peak: float, window: int = 11, sigma: float = 1.5) -> float:
    if min(ref.shape) < window:
        raise ValueError(f"image {ref.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx = _filter_valid(pred, g)
    my = _filter_valid(ref, g)
    sxx = _filter_valid(pred * pred, g) - mx * mx
    syy = _filter_valid(ref * ref, g) - my * my
    sxy = _filter_valid(pred * ref, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def mssim(pred: HsiCube, ref: HsiCube, peak: float | None = None) -> float:
    """Band-averaged SSIM, 11x11 Gaussian window (sigma 1.5), valid window centers only."""
    p, r = _pair(pred, ref)
    if min(r.shape[1:]) < 11:
        raise ValueError(f"image {r.shape[1]}x{r.shape[2]} smaller than the 11x11 window")
    peaks = _peaks(r, peak)
    vals = []
    for l in range(r.shape[0]):
        if peaks[l] == 0.0 and not np.any(r[l]):
            warnings.warn(f"band {l}: all-zero reference, skipped", RuntimeWarning, stacklevel=2)
            continue
        vals.append(ssim_band(p[l], r[l], peaks[l]))
    if not vals:
        raise ValueError("every reference band is all-zero")
    return float(np.mean(vals))


def sam(pred: HsiCube, ref: HsiCube) -> float:
    """Mean spectral angle in degrees over pixels whose spectra are both nonzero.

    The angle is atan2(|p ^ r|, p . r) with the wedge norm summed from the
    pairwise terms p_i r_j - p_j r_i. This stays accurate near 0 and 180
    degrees, and exactly collinear spectra give exactly 0.
    """
    p, r = _pair(pred, ref)
    if r.shape[0] < 2:
        raise ValueError("SAM needs at least two bands")
    p = p.reshape(p.shape[0], -1)
    r = r.reshape(r.shape[0], -1)
    ok = (np.linalg.norm(p, axis=0) >= 1e-12) & (np.linalg.norm(r, axis=0) >= 1e-12)
    if not np.any(ok):
        raise ValueError("all pixels have degenerate (near-zero) spectra")
    p, r = p[:, ok], r[:, ok]
    wedge = np.zeros(p.shape[1])
    for i in range(p.shape[0] - 1):
        d = p[i] * r[i + 1:] - p[i + 1:] * r[i]
        wedge += np.einsum("ij,ij->j", d, d)
    ang = np.arctan2(np.sqrt(wedge), np.einsum("ij,ij->j", p, r))
    return float(np.degrees(np.mean(ang)))


def ergas(pred: HsiCube, ref: HsiCube, ratio: float) -> float:
    p, r = _pair(pred, ref)
    if not ratio > 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    mu = r.reshape(r.shape[0], -1).mean(axis=1)
    if np.any(mu == 0):
        raise ValueError(f"reference band {int(np.flatnonzero(mu == 0)[0])} has zero mean")
    rmse = np.sqrt(np.mean((p - r).reshape(r.shape[0], -1) ** 2, axis=1))
    return float(100.0 / ratio * math.sqrt(np.mean((rmse / mu) ** 2)))


def evaluate(pred: HsiCube, ref: HsiCube, ratio: float, peak: float | None = None) -> MetricsReport:
    return MetricsReport(mpsnr(pred, ref, peak), mssim(pred, ref, peak), sam(pred, ref), ergas(pred, ref, ratio),
                         float(ratio))


def catmull_rom(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _cubic_taps(n_src: int, n_dst: int):
    """Base index, the four tap indices and their weights for every output sample.

    Output k sits at source position k (n_src - 1) / (n_dst - 1), so the end
    samples align; taps past either edge replicate the edge sample.
    """
    if n_dst == 1:
        pos = np.array([(n_src - 1) / 2])
    else:
        pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    base = np.floor(pos).astype(int)
    t = pos - base
    offs = np.arange(-1, 3)
    idx = np.clip(base[:, None] + offs[None, :], 0, n_src - 1)
    return base, idx, catmull_rom(t[:, None] - offs[None, :])


def cubic_weights(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst x n_src) interpolation matrix equivalent to bicubic_resample along one axis."""
    if n_src == 1:
        return np.ones((n_dst, 1))
    _, idx, w = _cubic_taps(n_src, n_dst)
    mat = np.zeros((n_dst, n_src))
    np.add.at(mat, (np.repeat(np.arange(n_dst), 4), idx.ravel()), w.ravel())
    return mat


def _resample_axis(data: np.ndarray, n_dst: int, axis: int) -> np.ndarray:
    x = np.moveaxis(data, axis, 0)
    if x.shape[0] == 1:
        out = np.broadcast_to(x, (n_dst, *x.shape[1:]))
    else:
        base, idx, w = _cubic_taps(x.shape[0], n_dst)
        anchor = x[base]
        # anchor + sum w (x_i - anchor): the weights sum to 1 only up to rounding,
        # this form still maps constants and knot samples through exactly
        out = anchor.copy()
        for j in range(4):
            out += w[:, j].reshape(-1, *[1] * (x.ndim - 1)) * (x[idx[:, j]] - anchor)
    return np.moveaxis(np.ascontiguousarray(out), 0, axis)


def bicubic_resample(cube: HsiCube, target: tuple[int, int, int]) -> HsiCube:
    """Separable Catmull-Rom resampling to (H', W', L'): width, then height, then bands."""
    h, w, l = target
    out = _resample_axis(cube.data, w, 2)
    out = _resample_axis(out, h, 1)
    return HsiCube(_resample_axis(out, l, 0))
