"""Self-contained verification suites behind ``clorf verify``.

Each suite returns a list of Check records; a suite passes when all do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import analysis, degrade, fuse, siren, synth
from .cube import HsiCube

SUITES = ("gradcheck", "lipschitz", "mfrank", "tv", "noise")


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# gradient check -------------------------------------------------------------

def small_problem(seed: int = 0, snr_db: float = 30.0, height: int = 8, width: int = 8, bands: int = 6):
    """A tiny noisy fusion problem, used wherever exact derivatives are compared."""
    gt = synth.make_gt(height, width, bands, 3, seed)
    psf = degrade.gaussian_psf(3, 1.0)
    down = degrade.DownsampleSpec(2)
    srf = degrade.gaussian_srf(2, bands)
    lr, hr = degrade.simulate(gt, psf, down, srf, degrade.NoiseSpec(snr_db, 2 * seed),
                              degrade.NoiseSpec(snr_db, 2 * seed + 1))
    return gt, lr, hr, degrade.DegradationSpec(psf, down, srf)


def random_small_model(dims, rank: int = 2, seed: int = 0, spatial_hidden=(16, 16), spectral_hidden=(8,)):
    """Small model with nonzero biases so every parameter carries gradient signal."""
    model = fuse.init_model(dims, rank, spatial_hidden, spectral_hidden, seed=seed)
    rng = np.random.default_rng([seed, 1])
    params = [p + (rng.normal(0, 0.1, p.shape) if p.ndim == 1 else 0.0) for p in model.params()]
    return model.with_params(params)


def _tv_signs(model, problem):
    _, a_hat = fuse.assemble(model, model.train_grid)
    a = a_hat.reshape(-1, *problem.dims[:2])
    return np.sign(np.diff(a, axis=1)), np.sign(np.diff(a, axis=2))


def gradient_check(n_params: int = 100, seed: int = 0, step: float = 1e-6, lam: float = 0.8, eta: float = 0.05,
                   max_attempts: int = 1000):
    """Compare analytic gradients of the full objective to central differences.

    Parameters whose +-step perturbation flips the sign of any TV difference
    sit on a kink of the l1 term and are redrawn. Returns (max_rel_err, errors).
    """
    _, lr, hr, degr = small_problem(seed)
    problem = fuse.FusionProblem(lr, hr, degr)
    model = random_small_model(problem.dims, seed=seed)
    cfg = fuse.TrainConfig(lam=lam, eta=eta, lr=1e-4, max_iters=1)
    _, grads, _ = fuse.loss_total_and_grad(model, problem, cfg)
    params = model.params()
    n_spatial = 2 * len(model.spatial_net.weights)
    base_signs = _tv_signs(model, problem)
    rng = np.random.default_rng(seed)

    def total_at(t, idx, value):
        moved = [p.copy() for p in params]
        moved[t][idx] = value
        m = model.with_params(moved)
        return fuse.loss_terms(m, problem).total(lam, eta), m

    errors = []
    attempts = 0
    while len(errors) < n_params:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError("could not find enough parameters away from TV kinks")
        # alternate between the two nets so both are always covered
        lo, hi = (0, n_spatial) if len(errors) % 2 == 0 else (n_spatial, len(params))
        t = int(rng.integers(lo, hi))
        idx = tuple(int(rng.integers(0, s)) for s in params[t].shape)
        x0 = params[t][idx]
        fp, mp = total_at(t, idx, x0 + step)
        fm, mm = total_at(t, idx, x0 - step)
        if any(not np.array_equal(a, b) for m in (mp, mm) for a, b in zip(_tv_signs(m, problem), base_signs)):
            continue
        fd = (fp - fm) / (2 * step)
        an = grads[t][idx]
        denom = max(abs(fd), abs(an))
        errors.append(0.0 if denom == 0 else abs(fd - an) / denom)
    return max(errors), errors


def suite_gradcheck(seed: int = 0):
    max_err, errors = gradient_check(100, seed)
    ok = sum(e < 1e-5 for e in errors)
    return [Check("finite-difference gradients", ok == len(errors),
                  f"{ok}/{len(errors)} parameters within 1e-5 relative (max {max_err:.2e})")]


# Lipschitz certificate -------------------------------------------------------

def random_bias_free_pair(seed: int, rank: int = 3, depth: int = 2, width: int = 32, omega0: float = 30.0):
    hidden = (width,) * (depth - 1)
    spatial = siren.siren_init(siren.SirenConfig(2, rank, hidden, omega0, "sine", seed))
    spectral = siren.siren_init(siren.SirenConfig(1, rank, hidden, omega0, "sine", seed + 10_000))
    return analysis.zero_biases(spatial), analysis.zero_biases(spectral)


def suite_lipschitz(seed: int = 0, pairs: int = 10, samples: int = 10_000, zeta: float = 1.0):
    checks = []
    rng = np.random.default_rng(seed)
    for i in range(pairs):
        depth = int(rng.integers(2, 4))
        width = int(rng.integers(8, 65))
        rank = int(rng.integers(1, 6))
        sp_net, sc_net = random_bias_free_pair(seed * 1000 + i, rank, depth, width)
        viol, ratio, cert = analysis.empirical_lipschitz_check(sp_net, sc_net, zeta, samples, seed * 1000 + i)
        checks.append(Check(f"pair {i} (d={depth}, width={width}, K={rank})", viol == 0,
                            f"{viol} violations over {samples} pairs, delta={cert.delta:.3e}, max ratio {ratio:.3e}"))
    return checks


# MF-rank --------------------------------------------------------------------

def suite_mfrank(seed: int = 0, matrices: int = 20, trials: int = 100):
    checks = []
    rng = np.random.default_rng(seed)
    for i in range(matrices):
        rank = 1 + i % 5
        l1, l2 = 1, 1
        while l1 * l2 < rank:
            l1, l2 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        n1 = l1 * l2
        n2 = int(rng.integers(rank, 12))
        x = rng.normal(size=(n1, rank)) @ rng.normal(size=(rank, n2))
        got, dims = analysis.mf_rank_witness(analysis.DiscreteMatrixFunction(x, (l1, l2)), trials, seed * 100 + i)
        checks.append(Check(f"matrix {i} ({n1}x{n2}, split {l1}x{l2}, rank {rank})", got == rank,
                            f"max sampled rank {got} at {dims[0]}x{dims[1]}"))
    return checks


# TV -------------------------------------------------------------------------

def tv_reference(a_hat: np.ndarray, height: int, width: int) -> float:
    total = 0.0
    for k in range(a_hat.shape[0]):
        plane = a_hat[k].reshape(height, width)
        for i in range(height):
            for j in range(width):
                if i + 1 < height:
                    total += abs(plane[i + 1, j] - plane[i, j])
                if j + 1 < width:
                    total += abs(plane[i, j + 1] - plane[i, j])
    return total


def dyadic_matrix(rng, shape) -> np.ndarray:
    """Random multiples of 2**-10: differences and sums of these are exact in float64."""
    return rng.integers(-4096, 4097, size=shape) / 1024.0


def suite_tv(seed: int = 0, cases: int = 50):
    rng = np.random.default_rng(seed)
    exact = 0
    for _ in range(cases):
        k, h, w = (int(v) for v in rng.integers(1, 7, 3))
        a = dyadic_matrix(rng, (k, h * w))
        exact += fuse.loss_tv(a, (h, w)) == tv_reference(a, h, w)
    return [Check("TV vs double-loop reference", exact == cases, f"{exact}/{cases} exact matches")]


# noise ----------------------------------------------------------------------

def empirical_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10.0 * math.log10(np.mean(clean**2) / np.mean((noisy - clean) ** 2))


def suite_noise(seed: int = 0):
    rng = np.random.default_rng(seed)
    clean = HsiCube(rng.uniform(0.0, 1.0, size=(10, 100, 1000)))
    spec = degrade.NoiseSpec(30.0, seed)
    noisy = degrade.add_noise(clean, spec)
    snr = empirical_snr_db(clean.data, noisy.data)
    again = degrade.add_noise(clean, spec)
    off = degrade.add_noise(clean, degrade.NoiseSpec(math.inf, seed))
    z = degrade.standard_normals(seed, 1_000_000)
    return [
        Check("SNR at 30 dB over 1e6 samples", abs(snr - 30.0) <= 0.2, f"{snr:.4f} dB"),
        Check("same seed is bit-identical", np.array_equal(noisy.data, again.data)),
        Check("infinite SNR disables noise", np.array_equal(off.data, clean.data)),
        Check("variates are standard normal", abs(z.mean()) < 5e-3 and abs(z.std() - 1.0) < 5e-3,
              f"mean {z.mean():.2e}, std {z.std():.5f}"),
    ]


def run_suite(name: str, seed: int = 0) -> list[Check]:
    fn = {"gradcheck": suite_gradcheck, "lipschitz": suite_lipschitz, "mfrank": suite_mfrank,
          "tv": suite_tv, "noise": suite_noise}.get(name)
    if fn is None:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return fn(seed)
