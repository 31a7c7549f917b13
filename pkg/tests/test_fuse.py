import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clorf import siren
from clorf.cube import FormatError, HsiCube, fold_spectral, make_grid, unfold_spectral
from clorf.degrade import (DegradationSpec, DownsampleSpec, apply_srf, blur, downsample, gaussian_psf,
                           gaussian_srf)
from clorf.fuse import (PRESETS, ClorfModel, FusionProblem, TrainConfig, assemble, infer, init_model,
                        loss_data, loss_terms, loss_total_and_grad, loss_tv, model_from_bytes, model_to_bytes,
                        load_model, reconstruct, save_model, train)
from clorf.verify import gradient_check, random_small_model, small_problem, tv_reference


def tiny_setup(rng, h=6, w=6, l=3, k=2, ratio=2):
    psf = gaussian_psf(3, 1.0)
    down = DownsampleSpec(ratio)
    srf = gaussian_srf(2, l)
    gt = HsiCube(rng.uniform(size=(l, h, w)))
    lr = downsample(blur(gt, psf), down)
    hr = apply_srf(gt, srf)
    degr = DegradationSpec(psf, down, srf)
    model = random_small_model((h, w, l), rank=k, seed=int(rng.integers(1000)))
    return gt, lr, hr, degr, model


def zero_output(model):
    params = [np.zeros_like(p) for p in model.params()]
    return model.with_params(params)


def test_rank_one_single_voxel():
    model = init_model((1, 1, 1), 1, (8,), (8,), seed=3)
    grid = make_grid(1, 1, 1)
    phi = siren.forward(model.spatial_net, grid.spatial)[0, 0]
    psi = siren.forward(model.spectral_net, grid.spectral)[0, 0]
    assert reconstruct(model, grid)[0, 0] == pytest.approx(phi * psi, rel=1e-15)


def test_reconstruction_shape():
    model = init_model((5, 7, 4), 3, (8,), (8,))
    assert reconstruct(model, model.train_grid).shape == (4, 35)


def test_factor_form_entrywise(rng):
    model = random_small_model((9, 7, 11), rank=4, seed=2)
    grid = model.train_grid
    z = reconstruct(model, grid)
    for _ in range(100):
        i, j = int(rng.integers(11)), int(rng.integers(63))
        phi = siren.forward(model.spatial_net, grid.spatial[j:j + 1])[0]
        psi = siren.forward(model.spectral_net, grid.spectral[i:i + 1])[0]
        assert z[i, j] == pytest.approx(float(phi @ psi), rel=1e-12, abs=1e-14)


def test_loss_zero_for_exact_model(rng):
    """A model whose nets reproduce the GT's factors exactly gives zero data terms."""
    h, w, l, k = 6, 6, 3, 3
    psf, down, srf = gaussian_psf(3, 1.0), DownsampleSpec(2), gaussian_srf(2, l)
    model = init_model((h, w, l), k, (), (), seed=1)
    # single linear layers: E and A are affine in the coordinates, so the GT can be built from them
    gt = fold_spectral(reconstruct(model, model.train_grid), h, w)
    lr, hr = downsample(blur(gt, psf), down), apply_srf(gt, srf)
    hsi, msi = loss_data(model, FusionProblem(lr, hr, DegradationSpec(psf, down, srf)))
    assert hsi < 1e-28 and msi < 1e-28


def test_loss_of_zero_model_is_observation_energy(rng):
    _, lr, hr, degr, model = tiny_setup(rng)
    hsi, msi = loss_data(zero_output(model), FusionProblem(lr, hr, degr))
    assert hsi == pytest.approx(np.sum(lr.data**2), rel=1e-14)
    assert msi == pytest.approx(np.sum(hr.data**2), rel=1e-14)


def test_loss_matches_degrade_pipeline(rng):
    _, lr, hr, degr, model = tiny_setup(rng)
    z = fold_spectral(reconstruct(model, model.train_grid), 6, 6)
    want_hsi = np.sum((downsample(blur(z, degr.psf), degr.down).data - lr.data) ** 2)
    want_msi = np.sum((apply_srf(z, degr.srf).data - hr.data) ** 2)
    hsi, msi = loss_data(model, FusionProblem(lr, hr, degr))
    assert hsi == pytest.approx(want_hsi, rel=1e-12)
    assert msi == pytest.approx(want_msi, rel=1e-12)


def test_tv_constant_rows():
    assert loss_tv(np.full((3, 12), 0.4), (3, 4)) == 0.0


def test_tv_forced_example():
    assert loss_tv(np.array([[0.0, 1.0, 2.0, 3.0]]), (2, 2)) == 6.0


def test_tv_matches_double_loop(rng):
    a = rng.normal(size=(3, 20))
    assert loss_tv(a, (4, 5)) == pytest.approx(tv_reference(a, 4, 5), rel=1e-14)


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))
def test_tv_exact_on_dyadic(seed, k, h, w):
    rng = np.random.default_rng(seed)
    a = rng.integers(-512, 513, size=(k, h * w)) / 256.0
    assert loss_tv(a, (h, w)) == tv_reference(a, h, w)


def test_zero_everything_gives_zero_total_and_grads():
    psf, down, srf = gaussian_psf(3, 1.0), DownsampleSpec(2), gaussian_srf(2, 3)
    lr, hr = HsiCube(np.zeros((3, 2, 2))), HsiCube(np.zeros((2, 4, 4)))
    model = zero_output(init_model((4, 4, 3), 2, (8,), (8,)))
    total, grads, _ = loss_total_and_grad(model, FusionProblem(lr, hr, DegradationSpec(psf, down, srf)),
                                          TrainConfig(lam=0.0, eta=0.0))
    assert total == 0.0
    assert all(not np.any(g) for g in grads)


def test_gradients_match_finite_differences_4x4x3(rng):
    _, lr, hr, degr, _ = tiny_setup(rng, h=4, w=4, l=3, k=2)
    problem = FusionProblem(lr, hr, degr)
    model = random_small_model((4, 4, 3), rank=2, seed=11, spatial_hidden=(8, 8), spectral_hidden=(6,))
    cfg = TrainConfig(lam=0.9, eta=0.05)
    _, grads, _ = loss_total_and_grad(model, problem, cfg)
    params = model.params()
    step = 1e-6
    checked = 0
    for t, p in enumerate(params):
        for idx in list(np.ndindex(p.shape))[:6]:
            vals = []
            for s in (step, -step):
                moved = [q.copy() for q in params]
                moved[t][idx] += s
                m = model.with_params(moved)
                _, a = assemble(m, m.train_grid)
                a = a.reshape(-1, 4, 4)
                # stay away from TV kinks
                if min(np.abs(np.diff(a, axis=1)).min(), np.abs(np.diff(a, axis=2)).min()) < 1e-8:
                    break
                vals.append(loss_terms(m, problem).total(cfg.lam, cfg.eta))
            if len(vals) < 2:
                continue
            fd = (vals[0] - vals[1]) / (2 * step)
            an = grads[t][idx]
            assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an), 1e-6)
            checked += 1
    assert checked > 40


def test_gradient_check_helper():
    max_err, errs = gradient_check(40, seed=3)
    assert len(errs) == 40 and max_err < 1e-5


def test_doubling_lambda_adds_msi_term(rng):
    _, lr, hr, degr, model = tiny_setup(rng)
    problem = FusionProblem(lr, hr, degr)
    t1, _, terms = loss_total_and_grad(model, problem, TrainConfig(lam=0.7, eta=0.01))
    t2, _, _ = loss_total_and_grad(model, problem, TrainConfig(lam=1.4, eta=0.01))
    assert t2 - t1 == pytest.approx(0.7 * terms.msi_obs, rel=1e-12)


def test_problem_shape_mismatch(rng):
    _, lr, hr, degr, _ = tiny_setup(rng)
    with pytest.raises(ValueError, match="LR-HSI"):
        FusionProblem(HsiCube(np.zeros((3, 2, 2))), hr, degr)
    with pytest.raises(ValueError, match="SRF"):
        FusionProblem(lr, HsiCube(np.zeros((3, 6, 6))), degr)


def test_rank_limit():
    with pytest.raises(ValueError):
        init_model((2, 2, 3), 4, (8,), (8,))


def test_reference_defaults():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.eta, cfg.lr, cfg.max_iters) == (1.25, 0.0025, 3e-5, 30000)
    assert PRESETS["paper"]["spatial_hidden"] == (512,) * 5
    assert PRESETS["paper"]["spectral_hidden"] == (128,) * 2
    assert PRESETS["desk"]["lr"] == 1e-4


def test_zero_iterations_returns_initial_model():
    _, lr, hr, degr = small_problem(0)
    model = init_model((8, 8, 6), 2, (8,), (8,))
    out, report = train(lr, hr, degr, model, TrainConfig(max_iters=0))
    assert out is model
    assert report.records == []


@pytest.fixture(scope="module")
def short_run():
    _, lr, hr, degr = small_problem(1)
    model = init_model((8, 8, 6), 3, (32, 32), (16,), seed=4)
    cfg = TrainConfig(lam=1.0, eta=0.001, lr=1e-3, max_iters=400, log_every=20, patience=50)
    return (lr, hr, degr, model, cfg), train(lr, hr, degr, model, cfg)


def test_training_reduces_loss(short_run):
    _, (model, report) = short_run
    totals = [r[4] for r in report.records]
    assert report.best_total < 0.05 * totals[0]
    assert report.best_total <= min(totals)


def test_best_so_far_is_monotone(short_run):
    _, (_, report) = short_run
    best = np.minimum.accumulate([r[4] for r in report.records])
    assert np.all(np.diff(best) <= 0)


def test_returned_model_scores_best_total(short_run):
    (lr, hr, degr, _, cfg), (model, report) = short_run
    total = loss_terms(model, FusionProblem(lr, hr, degr)).total(cfg.lam, cfg.eta)
    assert total == pytest.approx(report.best_total, rel=1e-12)


def test_training_is_deterministic(short_run):
    (lr, hr, degr, model, cfg), (trained, report) = short_run
    again, report2 = train(lr, hr, degr, model, cfg)
    assert report2.records == report.records
    assert all(np.array_equal(a, b) for a, b in zip(trained.params(), again.params()))


def test_early_stop_on_plateau():
    _, lr, hr, degr = small_problem(2)
    model = init_model((8, 8, 6), 2, (8,), (8,))
    cfg = TrainConfig(lr=1e-12, max_iters=10_000, log_every=5, patience=3, min_rel_improve=1e-3)
    _, report = train(lr, hr, degr, model, cfg)
    assert report.stop_reason == "early_stop"
    assert report.records[-1][0] < 10_000


def test_report_csv(short_run):
    _, (_, report) = short_run
    lines = report.to_csv().splitlines()
    assert lines[0] == "iter,loss_hsi_obs,loss_msi_obs,loss_tv,total"
    assert len(lines) == len(report.records) + 1
    assert lines[1].startswith("0,")


def test_infer_at_training_dims_is_reconstruction():
    model = random_small_model((6, 5, 4), rank=2, seed=0)
    cube = infer(model, (6, 5, 4))
    assert np.array_equal(unfold_spectral(cube), reconstruct(model, model.train_grid))


def test_infer_spatial_upscale_shape():
    model = init_model((42, 42, 8), 4, (16,), (8,))
    assert infer(model, (168, 168, 8)).dims == (168, 168, 8)


def test_infer_spectral_upscale():
    model = random_small_model((8, 8, 50), rank=3, seed=1)
    coarse, dense = infer(model, (8, 8, 50)), infer(model, (8, 8, 93))
    assert dense.dims == (8, 8, 93)
    # the band-axis endpoints are shared coordinates
    assert np.array_equal(coarse.data[[0, -1]], dense.data[[0, -1]])


def test_infer_single_band():
    model = random_small_model((4, 4, 3), rank=2, seed=1)
    assert infer(model, (4, 4, 1)).dims == (4, 4, 1)


@pytest.mark.parametrize("activation", ["sine", "relu", "relu_pe"])
def test_checkpoint_round_trip(tmp_path, activation):
    model = init_model((6, 6, 5), 3, (8, 8), (4,), omega0=12.5, activation=activation, seed=2)
    model = random_small_model((6, 6, 5), rank=3) if activation == "sine" else model
    path = tmp_path / "m.clrf"
    save_model(model, path)
    back = load_model(path)
    assert back.train_dims == (6, 6, 5)
    assert back.spatial_net.config.activation == model.spatial_net.config.activation
    assert np.array_equal(infer(back, (9, 7, 8)).data, infer(model, (9, 7, 8)).data)
    assert model_to_bytes(back) == path.read_bytes()


def test_checkpoint_bad_magic():
    buf = bytearray(model_to_bytes(init_model((4, 4, 3), 2, (4,), (4,))))
    buf[:4] = b"NOPE"
    with pytest.raises(FormatError, match="bad magic"):
        model_from_bytes(bytes(buf))


def test_checkpoint_corrupt_layer_count():
    buf = bytearray(model_to_bytes(init_model((4, 4, 3), 2, (4,), (4,))))
    struct.pack_into("<I", buf, 24 + 1 + 8, 10**6)
    with pytest.raises(FormatError, match="spatial net layer count"):
        model_from_bytes(bytes(buf))


def test_checkpoint_corrupt_shape_field():
    buf = bytearray(model_to_bytes(init_model((4, 4, 3), 2, (4,), (4,))))
    struct.pack_into("<I", buf, 24 + 13, 10**6)
    with pytest.raises(FormatError, match="spatial net layer 0 shape"):
        model_from_bytes(bytes(buf))


def test_checkpoint_truncated():
    buf = model_to_bytes(init_model((4, 4, 3), 2, (4,), (4,)))
    with pytest.raises(FormatError, match="truncated spectral net"):
        model_from_bytes(buf[:-3])
    with pytest.raises(FormatError, match="trailing bytes"):
        model_from_bytes(buf + b"\0")


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(0, 1000))
def test_rank_bound_any_grid(h, w, l, seed):
    model = random_small_model((6, 6, 5), rank=3, seed=seed)
    z = reconstruct(model, make_grid(h, w, l))
    s = np.linalg.svd(z, compute_uv=False)
    if len(s) > 3 and s[0] > 0:
        assert s[3] < 1e-8 * s[0]
