import os
import struct

import numpy as np
import pytest

from thermoconv import ou_lab, sde
from thermoconv.errors import DimensionMismatch, SimulationBlowup
from thermoconv.matrix_kit import propagator


def scalar_ou_model(rate=1.0, noise=np.sqrt(2.0)):
    return sde.DiffusionModel(
        dim=1,
        drift=lambda z: -rate * z,
        noise_factor=np.array([[noise]]),
        A=np.array([[0.5 * noise**2]]),
    )


# ---------------------------------------------------------------------------
# counter RNG


def test_counter_normals_deterministic_and_chunk_invariant():
    full = sde.counter_normals(11, step=3, substep=1, path_lo=0, n_paths=100, n_slots=4)
    again = sde.counter_normals(11, 3, 1, 0, 100, 4)
    assert np.array_equal(full, again)
    part = sde.counter_normals(11, 3, 1, 40, 30, 4)
    assert np.array_equal(part, full[40:70])


def test_counter_normals_streams_differ():
    a = sde.counter_normals(11, 3, 1, 0, 50, 2)
    for other in [
        sde.counter_normals(12, 3, 1, 0, 50, 2),
        sde.counter_normals(11, 4, 1, 0, 50, 2),
        sde.counter_normals(11, 3, 2, 0, 50, 2),
        sde.counter_normals(11, 3, 1, 50, 50, 2),
    ]:
        assert np.abs(a - other).min() > 0


def test_counter_normals_moments():
    x = sde.counter_normals(987, 0, 0, 0, 400_000, 2)
    n = x.size
    assert abs(x.mean()) < 4.0 / np.sqrt(n)
    assert abs(x.var() - 1.0) < 4.0 * np.sqrt(2.0 / n)
    assert abs(np.mean(x**3)) < 4.0 * np.sqrt(15.0 / n)
    # adjacent streams essentially uncorrelated
    corr = np.corrcoef(x[:, 0], x[:, 1])[0, 1]
    assert abs(corr) < 4.0 / np.sqrt(x.shape[0])


def test_derive_seed_stable():
    assert sde.derive_seed(5, 7) == sde.derive_seed(5, 7)
    assert sde.derive_seed(5, 7) != sde.derive_seed(5, 8)


# ---------------------------------------------------------------------------
# integrate


def test_integrate_constant_path():
    model = sde.DiffusionModel(
        dim=2,
        drift=lambda z: np.zeros_like(z),
        noise_factor=np.zeros((2, 2)),
        A=np.zeros((2, 2)),
    )
    times, path = sde.integrate(model, np.array([1.0, -2.0]), 0.01, 1.0, seed=1)
    assert np.all(path == path[0])
    assert times[-1] == pytest.approx(1.0)


def test_integrate_deterministic_decay():
    model = sde.DiffusionModel(
        dim=1,
        drift=lambda z: -z,
        noise_factor=np.zeros((1, 1)),
        A=np.zeros((1, 1)),
    )
    _, path = sde.integrate(model, np.array([1.0]), 1e-3, 1.0, seed=1)
    assert abs(path[-1, 0] - np.exp(-1.0)) < 1e-3


def test_integrate_requires_integral_horizon():
    model = scalar_ou_model()
    with pytest.raises(DimensionMismatch):
        sde.integrate(model, np.array([0.0]), 1e-3, 0.0015, seed=1)


def test_blowup_raises():
    model = sde.DiffusionModel(
        dim=1,
        drift=lambda z: 50.0 * z,
        noise_factor=np.zeros((1, 1)),
        A=np.zeros((1, 1)),
    )
    with pytest.raises(SimulationBlowup):
        sde.integrate(model, np.array([1.0]), 0.1, 20.0, seed=1)


# ---------------------------------------------------------------------------
# ensemble


def test_ensemble_single_path_matches_integrate():
    model = scalar_ou_model()
    times, path = sde.integrate(model, np.array([0.7]), 1e-2, 1.0, seed=5)
    ens = sde.ensemble(
        model, sde.constant_sampler([0.7]), 1, 1e-2, [0.0, 0.5, 1.0], seed=5
    )
    for t, snap in zip(ens.times, ens.states[0]):
        k = int(round(t / 1e-2))
        assert np.array_equal(snap, path[k])


def test_ensemble_ou_moments():
    model = scalar_ou_model()
    n = 100_000
    ens = sde.ensemble(model, sde.constant_sampler([1.0]), n, 1e-3, [1.0], seed=2)
    x = ens.states[:, 0, 0]
    mean_se = x.std(ddof=1) / np.sqrt(n)
    assert abs(x.mean() - np.exp(-1.0)) <= 3 * mean_se + 2e-3  # bias O(dt)
    var = x.var(ddof=1)
    var_se = np.sqrt(2.0 / n) * var
    assert abs(var - (1.0 - np.exp(-2.0))) <= 3 * var_se + 2e-3


def test_ensemble_stationary_covariance_matches_lyapunov():
    block = ou_lab.BlockMatrix(np.array([[2.0, 1.0], [0.0, 1.0]]), 1, 1)
    me = ou_lab.build_ou(block, 0.1)
    model = ou_lab.ou_diffusion_model(me)
    n = 50_000
    ens = sde.ensemble(
        model, sde.gaussian_sampler(np.zeros(2), me.Sigma), n, 1e-3, [0.5, 1.0], seed=3
    )
    for j in range(len(ens.times)):
        sample = ens.states[:, j, :]
        cov = np.cov(sample.T)
        for a in range(2):
            for b in range(2):
                se = np.sqrt(
                    (me.Sigma[a, a] * me.Sigma[b, b] + me.Sigma[a, b] ** 2) / n
                )
                assert abs(cov[a, b] - me.Sigma[a, b]) <= 3 * se + 3e-3


def test_ensemble_substepping_stationary():
    """Substepping keeps the stiff fast block stable; the fast-block
    statistics carry the designed O(lambda_fast * 0.1 eps) substep bias
    (about 10 percent here) while the slow block stays sharp."""
    block = ou_lab.BlockMatrix(np.array([[2.0, 1.0], [0.0, 1.0]]), 1, 1)
    me = ou_lab.build_ou(block, 0.005)
    model = ou_lab.ou_diffusion_model(me)
    assert sde._n_substeps(model, 1e-3) == 2
    n = 30_000
    ens = sde.ensemble(
        model, sde.gaussian_sampler(np.zeros(2), me.Sigma), n, 1e-3, [0.5], seed=8
    )
    cov = np.cov(ens.states[:, 0, :].T)
    assert abs(cov[0, 0] - me.Sigma[0, 0]) <= 0.12 * me.Sigma[0, 0]
    se_slow = np.sqrt(2.0 / n) * me.Sigma[1, 1]
    assert abs(cov[1, 1] - me.Sigma[1, 1]) <= 3 * se_slow + 5e-3
    se_off = np.sqrt((me.Sigma[0, 0] * me.Sigma[1, 1] + me.Sigma[0, 1] ** 2) / n)
    assert abs(cov[0, 1] - me.Sigma[0, 1]) <= 3 * se_off + 2e-2


def test_ensemble_worker_count_invariance():
    model = scalar_ou_model()
    samp = sde.gaussian_sampler([0.0], [[1.0]])
    a = sde.ensemble(model, samp, 2000, 1e-2, [0.5], seed=4, n_workers=1)
    b = sde.ensemble(model, samp, 2000, 1e-2, [0.5], seed=4, n_workers=4)
    assert np.array_equal(a.states, b.states)


def test_ensemble_env_thread_cap(monkeypatch):
    monkeypatch.setenv("THERMOCONV_THREADS", "3")
    assert sde.n_workers_default() == 3
    monkeypatch.setenv("THERMOCONV_THREADS", "bogus")
    assert sde.n_workers_default() == 1


def test_weak_order_one_mean_ratio():
    """Halving dt roughly halves the drift discretization error.

    The same-noise difference of two runs started at z0 and 0 is exactly
    the deterministic part of the scheme, so the ratio test sees the pure
    O(dt) bias without Monte Carlo noise.
    """
    model = scalar_ou_model()
    errs = []
    for dt in [4e-3, 2e-3, 1e-3]:
        za = sde.ensemble(model, sde.constant_sampler([1.0]), 1, dt, [1.0], seed=6)
        zb = sde.ensemble(model, sde.constant_sampler([0.0]), 1, dt, [1.0], seed=6)
        diff = za.states[0, 0, 0] - zb.states[0, 0, 0]
        errs.append(abs(diff - np.exp(-1.0)))
    for e1, e2 in zip(errs, errs[1:]):
        assert 1.5 <= e1 / e2 <= 3.0


def test_weak_order_one_variance_ratio():
    """Sample variances track the scheme's exact variance recursion (3 SE),
    whose distance to the continuous value halves with dt."""
    model = scalar_ou_model()
    n = 60_000
    scheme_errs = []
    for dt in [4e-3, 2e-3, 1e-3]:
        steps = int(round(1.0 / dt))
        v_scheme = 0.0
        for _ in range(steps):
            v_scheme = (1.0 - dt) ** 2 * v_scheme + 2.0 * dt
        ens = sde.ensemble(model, sde.constant_sampler([0.0]), n, dt, [1.0], seed=13)
        var = ens.states[:, 0, 0].var(ddof=1)
        se = np.sqrt(2.0 / n) * v_scheme
        assert abs(var - v_scheme) <= 3 * se
        scheme_errs.append(abs(v_scheme - (1.0 - np.exp(-2.0))))
    for e1, e2 in zip(scheme_errs, scheme_errs[1:]):
        assert 1.5 <= e1 / e2 <= 3.0


# ---------------------------------------------------------------------------
# couple


def test_couple_identical_start_zero_energy():
    model = scalar_ou_model()
    _, _, _, energy = sde.couple(
        model, np.array([1.0]), np.array([1.0]), 1e-2, 0.5, seed=3
    )
    assert np.all(energy == 0.0)


def test_couple_linear_noise_cancellation():
    block = ou_lab.BlockMatrix(np.array([[2.0, 1.0], [0.0, 1.0]]), 1, 1)
    me = ou_lab.build_ou(block, 0.1)
    model = ou_lab.ou_diffusion_model(me)
    z1 = np.array([1.0, 0.0])
    z2 = np.array([0.0, 1.0])
    times, p1, p2, _ = sde.couple(model, z1, z2, 1e-3, 1.0, seed=9)
    # same-scheme deterministic recursion: run the zero-noise model
    det = sde.DiffusionModel(
        dim=2,
        drift=model.drift,
        noise_factor=np.zeros((2, 2)),
        A=np.eye(2),
        fast_dims=model.fast_dims,
        eps=model.eps,
    )
    _, sep = sde.integrate(det, z1 - z2, 1e-3, 1.0, seed=1)
    assert np.abs((p1 - p2) - sep).max() < 1e-10
    # and the scheme itself tracks the exact flow at O(dt)
    exact = (z1 - z2) @ propagator(me.Meps, 1.0).T
    assert np.abs((p1 - p2)[-1] - exact).max() < 5e-3


def test_couple_double_well_energy_bound():
    # drift -V'(x) with V = (x^2-1)^2/4, curvature bound parameter 1
    model = sde.DiffusionModel(
        dim=1,
        drift=lambda z: -(z**3 - z),
        noise_factor=np.array([[np.sqrt(2.0)]]),
        A=np.array([[1.0]]),
    )
    n_reps = 4000
    times, energies = sde.couple_ensemble(
        model, np.array([1.2]), np.array([-0.8]), n_reps, 1e-3, [0.5, 1.0], seed=12
    )
    e0 = (1.2 + 0.8) ** 2  # A = 1
    for j, t in enumerate(times):
        mean = energies[:, j].mean()
        se = energies[:, j].std(ddof=1) / np.sqrt(n_reps)
        assert mean <= np.exp(2.0 * t) * e0 * (1 + 3 * se / max(mean, 1e-12))


# ---------------------------------------------------------------------------
# mc_expectation


def test_mc_expectation_constant():
    states = np.zeros((10, 2))
    mean, se = sde.mc_expectation(states, lambda z: np.full(z.shape[0], 3.5))
    assert mean == 3.5 and se == 0.0


def test_mc_expectation_second_moment():
    x = sde.counter_normals(42, 0, 0, 0, 50_000, 1)
    mean, se = sde.mc_expectation(x, lambda z: z[:, 0] ** 2)
    assert abs(mean - 1.0) <= 3 * se


def test_mc_expectation_indicator_and_scalar_fallback():
    x = sde.counter_normals(43, 0, 0, 0, 2_000, 1)
    mean, _ = sde.mc_expectation(x, lambda z: float(z[0] > 0))  # per-state callable
    assert 0.0 <= mean <= 1.0


def test_mc_expectation_needs_two_paths():
    with pytest.raises(DimensionMismatch):
        sde.mc_expectation(np.zeros((1, 2)), lambda z: z[:, 0])


# ---------------------------------------------------------------------------
# model validation and binary dump


def test_model_validate_checks_noise_consistency():
    bad = sde.DiffusionModel(
        dim=1,
        drift=lambda z: -z,
        noise_factor=np.array([[1.0]]),
        A=np.array([[1.0]]),  # sigma sigma^T = 1 != 2A
    )
    with pytest.raises(DimensionMismatch):
        bad.validate(np.zeros((1, 1)))
    good = scalar_ou_model()
    good.validate(np.zeros((3, 1)))


def test_model_validate_block_diagonal_noise():
    model = sde.DiffusionModel(
        dim=2,
        drift=lambda z: -z,
        noise_factor=np.array([[1.0, 0.5], [0.0, 1.0]]),
        A=None,
        fast_dims=1,
        eps=0.1,
    )
    model.A = 0.5 * np.asarray(model.noise_factor) @ np.asarray(model.noise_factor).T
    with pytest.raises(DimensionMismatch):
        model.validate(np.zeros((1, 2)))


def test_binary_dump_layout(tmp_path):
    ens = sde.PathEnsemble(
        times=np.array([0.0, 1.0]),
        states=np.arange(12, dtype=float).reshape(2, 2, 3),
        seed=9,
    )
    path = os.path.join(tmp_path, "dump.bin")
    ens.to_binary(path)
    raw = open(path, "rb").read()
    n_paths, n_times, dim = struct.unpack("<3Q", raw[:24])
    assert (n_paths, n_times, dim) == (2, 2, 3)
    payload = np.frombuffer(raw[24:], dtype="<f8")
    assert np.array_equal(payload.reshape(2, 2, 3), ens.states)
    back = sde.PathEnsemble.from_binary(path, times=ens.times, seed=9)
    assert np.array_equal(back.states, ens.states)
