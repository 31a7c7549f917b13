"""Fast scaled sine/cosine for SIREN layers.

The float64 trig ufuncs in stock numpy wheels are scalar loops on most CPUs
and dominate training time. The kernel here is the fdlibm scheme: a
three-term Cody-Waite reduction by pi/2 followed by the degree-13/14 minimax
polynomials on [-pi/4, pi/4]; written branch-free so LLVM vectorizes it.
Results agree with libm to within 1 ulp. Arguments beyond REDUCTION_LIMIT
fall back to numpy.
"""

from __future__ import annotations

import numpy as np

REDUCTION_LIMIT = 1e5

_S = (-1.66666666666666324348e-01, 8.33333333332248946124e-03, -1.98412698298579493134e-04,
      2.75573137070700676789e-06, -2.50507602534068634195e-08, 1.58969099521155010221e-10)
_C = (4.16666666666666019037e-02, -1.38888888888741095749e-03, 2.48015872894767294178e-05,
      -2.75573143513906633035e-07, 2.08757232129817482790e-09, -1.13596475577881948265e-11)
_PIO2 = (1.57079632673412561417e+00, 6.07710050630396597660e-11, 2.02226624871116645580e-21)
_INV_PIO2 = 6.36619772367581382433e-01

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


if numba is not None:
    S1, S2, S3, S4, S5, S6 = _S
    C1, C2, C3, C4, C5, C6 = _C
    P1, P2, P3 = _PIO2

    @numba.njit(cache=True, boundscheck=False, inline="always")
    def _kernel(x):
        k = np.floor(x * _INV_PIO2 + 0.5)
        r = ((x - k * P1) - k * P2) - k * P3
        r2 = r * r
        sp = r + r * r2 * (S1 + r2 * (S2 + r2 * (S3 + r2 * (S4 + r2 * (S5 + r2 * S6)))))
        cp = 1.0 - 0.5 * r2 + r2 * r2 * (C1 + r2 * (C2 + r2 * (C3 + r2 * (C4 + r2 * (C5 + r2 * C6)))))
        q = np.int64(k) & 3
        odd = (q & 1) == 1
        a = cp if odd else sp
        b = sp if odd else cp
        sa = -1.0 if (q & 2) else 1.0
        sb = -1.0 if ((q + 1) & 2) else 1.0
        return sa * a, sb * b

    @numba.njit(cache=True, boundscheck=False)
    def _sin_loop(z, w, out):
        zf = z.ravel()
        of = out.ravel()
        big = False
        for i in range(zf.size):
            x = w * zf[i]
            big |= abs(x) > REDUCTION_LIMIT
            s, _ = _kernel(x)
            of[i] = s
        return big

    @numba.njit(cache=True, boundscheck=False)
    def _sincos_loop(z, w, s_out, c_out):
        zf = z.ravel()
        sf = s_out.ravel()
        cf = c_out.ravel()
        big = False
        for i in range(zf.size):
            x = w * zf[i]
            big |= abs(x) > REDUCTION_LIMIT
            s, c = _kernel(x)
            sf[i] = s
            cf[i] = w * c
        return big


def _fix_large(z, w, s, c=None):
    big = np.abs(w * z) > REDUCTION_LIMIT
    if np.any(big):
        s[big] = np.sin(w * z[big])
        if c is not None:
            c[big] = w * np.cos(w * z[big])


def scaled_sin(z: np.ndarray, w: float) -> np.ndarray:
    """sin(w * z) elementwise."""
    if numba is None:
        return np.sin(w * z)
    z = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty_like(z)
    if _sin_loop(z, float(w), out):
        _fix_large(z, w, out)
    return out


def scaled_sincos(z: np.ndarray, w: float):
    """(sin(w z), w cos(w z)): the activation and its derivative w.r.t. z."""
    if numba is None:
        return np.sin(w * z), w * np.cos(w * z)
    z = np.ascontiguousarray(z, dtype=np.float64)
    s = np.empty_like(z)
    c = np.empty_like(z)
    if _sincos_loop(z, float(w), s, c):
        _fix_large(z, w, s, c)
    return s, c
