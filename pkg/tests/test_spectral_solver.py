import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from couette_lab import _kernels as K
from couette_lab import spectral_solver as S
from couette_lab.params_grid import FlowParams, ParamError, build_grid, validate_params


def loose(mu=0.05, mach=0.5, alpha=3.7, lam=None):
    return validate_params(FlowParams(mu=mu, mach=mach, alpha=alpha, lam=lam),
                           check_mach=False, check_alpha=False)


def scaled(state, amp, ops):
    c = state.coeffs * (amp / np.abs(ops.to_phys(state.coeffs)).max())
    return S.State2D(state.t, state.frame, c)


# ---------------------------------------------------------------- kernels


def test_expm3_matches_scipy():
    rng = np.random.default_rng(0)
    for scale in (1e-3, 1.0, 3.0, 30.0):
        a = scale * (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)))
        out = np.empty((3, 3), complex)
        K.expm3(a, out)
        ref = expm(a)
        assert np.abs(out - ref).max() <= 1e-12 * np.abs(ref).max()


@pytest.mark.parametrize("k,kap0,h", [(1, 0.5, 0.25), (1, 50.0, 0.25), (3, 200.0, 0.25), (1, -5.0, 1.0)])
def test_magnus_propagator_against_ode(k, kap0, h):
    mu, lam, mach = 1e-3, 1e-3, 0.2

    def A(t):
        o = np.empty((3, 3), complex)
        K.mode_matrix(float(k), kap0 - k * t, mu, lam + mu, 1 / mach**2, 1.0, o)
        return o

    y0 = np.array([1.0, 0.3, -0.2], complex)
    sol = solve_ivp(lambda t, y: A(t) @ y, (0, h), y0, rtol=1e-12, atol=1e-14, method="DOP853")
    out = np.empty((3, 3), complex)
    K.magnus_propagator(float(k), kap0, h, mu, lam + mu, 1 / mach**2, 1.0, 0.1, out)
    ref = sol.y[:, -1]
    assert np.abs(out @ y0 - ref).max() < 1e-7 * np.abs(ref).max()


# ---------------------------------------------------------------- initial data


def test_zero_only_data_has_no_nonzero_modes():
    p = validate_params(FlowParams(mu=1e-2, mach=0.09))
    g = build_grid(8, 256, 64.0)
    s, info = S.make_initial_data(p, g, 0, S.InitialSpec(kind="zero_only", masses=(p.amplitude, 0.0)))
    assert not np.any(s.coeffs[:, 1:, :])
    assert np.any(s.coeffs[:, 0, :])


def test_initial_data_is_deterministic_and_on_target():
    p = validate_params(FlowParams(mu=1e-2, mach=0.09))
    g = build_grid(8, 256, 64.0)
    a, ia = S.make_initial_data(p, g, 7, S.InitialSpec(width=1.0))
    b, _ = S.make_initial_data(p, g, 7, S.InitialSpec(width=1.0))
    c, _ = S.make_initial_data(p, g, 8, S.InitialSpec(width=1.0))
    assert np.array_equal(a.coeffs, b.coeffs)
    assert not np.array_equal(a.coeffs, c.coeffs)
    assert abs(ia["norm"] - ia["target"]) <= 1e-12 * ia["target"]
    assert ia["target"] == pytest.approx(p.mu**p.alpha)


def test_empty_band_is_an_error():
    p = validate_params(FlowParams(mu=1e-2, mach=0.09))
    g = build_grid(2, 64, 64.0)  # the dealiased lattice keeps k = 0 only
    with pytest.raises(ParamError, match="unreachable"):
        S.make_initial_data(p, g, 0, S.InitialSpec(kind="nonzero_only"))


def test_initial_state_is_real_and_dealiased():
    p = validate_params(FlowParams(mu=1e-2, mach=0.09))
    g = build_grid(8, 128, 64.0)
    s, _ = S.make_initial_data(p, g, 3, S.InitialSpec(width=1.0))
    ops = S.SpectralOps(g)
    assert np.array_equal(s.coeffs * ops.mask, s.coeffs)
    back = ops.to_spec(ops.to_phys(s.coeffs))
    assert np.abs(back - s.coeffs).max() <= 1e-14 * np.abs(s.coeffs).max()


# ---------------------------------------------------------------- right-hand side


def test_rhs_of_zero_state_is_zero():
    p = loose()
    g = build_grid(8, 64, 4 * np.pi)
    z = S.State2D(0.3, "moving", np.zeros((3, 8, 33), complex))
    assert not np.any(S.rhs(z, p, g))


def test_rhs_of_zero_mode_state_stays_zero_mode():
    p = loose()
    g = build_grid(8, 64, 4 * np.pi)
    s, _ = S.make_initial_data(p, g, 0, S.InitialSpec(kind="zero_only", width=1.0))
    s = scaled(s, 0.1, S.SpectralOps(g))
    d = S.rhs(s, p, g)
    assert not np.any(d[:, 1:, :])
    assert np.any(d[:, 0, :])


def test_linear_rhs_matches_symbol_matrix():
    p = loose(mu=0.03, mach=0.7, lam=0.02)
    g = build_grid(8, 64, 4 * np.pi)
    ops = S.SpectralOps(g)
    rng = np.random.default_rng(5)
    t = 1.7
    # one mode at a time against the hand-written 3x3 symbol
    for kk, jj in [(1, 3), (2, 10), (7, 5), (0, 4)]:
        if not ops.mask[kk, jj]:
            continue
        u = np.zeros((3,) + ops.shape_r, complex)
        v = rng.normal(size=3) + 1j * rng.normal(size=3)
        u[:, kk, jj] = v
        d = S.rhs(S.State2D(t, "moving", u), p, g, nonlinear=False)
        k = ops.k[kk]
        kap = ops.eta[jj] - k * t
        nu, lm, inv = p.mu, p.lam_value + p.mu, 1 / p.mach**2
        pp = k * k + kap * kap
        M = np.array([
            [0, -1j * k, -1j * kap],
            [-1j * k * inv, -nu * pp - lm * k * k, -1 - lm * k * kap],
            [-1j * kap * inv, -lm * k * kap, -nu * pp - lm * kap * kap],
        ])
        assert np.abs(d[:, kk, jj] - M @ v).max() <= 1e-13 * np.abs(M @ v).max()
        d[:, kk, jj] = 0
        assert not np.any(d)


def test_density_floor_aborts():
    p = loose()
    g = build_grid(8, 64, 4 * np.pi)
    ops = S.SpectralOps(g)
    phys = np.zeros((3, 8, 64))
    phys[0] = -0.95 * np.exp(-((g.grid1d.y[None, :]) ** 2))
    s = S.State2D(0.0, "moving", ops.to_spec(phys))
    tr = S.evolve(s, p, g, 0.1, 0.01, opts=S.StepOptions(acoustic_gate=False), check_wrap=False)
    assert tr.meta["status"] == "collapsed"
    assert tr.meta["final_t"] == 0.0


# ---------------------------------------------------------------- linear oracles


def test_zero_mode_linear_system_matches_matrix_exponential():
    p = validate_params(FlowParams(mu=0.01, mach=1.0), check_mach=False)
    g = build_grid(8, 64, 8 * np.pi)
    s, _ = S.make_initial_data(p, g, 1, S.InitialSpec(kind="zero_only", masses=(1e-7, 0.0)))
    tr = S.evolve(s, p, g, 1.0, 1e-3, opts=S.StepOptions(nonlinear=False, acoustic_gate=False))
    ops = S.SpectralOps(g)
    u0 = s.coeffs[:, 0, :]
    ex = np.zeros_like(u0)
    for j, e in enumerate(ops.eta):
        A = np.array([[0, -1j * e], [-1j * e / p.mach**2, -p.mubar * e * e]])
        ex[[0, 2], j] = expm(A) @ u0[[0, 2], j]
    got = tr.final_state.coeffs[:, 0, :]
    l2 = lambda f: math.sqrt(float(np.sum(np.abs(f) ** 2)))
    assert l2(got[[0, 2]] - ex[[0, 2]]) < 1e-8 * l2(ex[[0, 2]])


@pytest.fixture(scope="module")
def energy_setup():
    # lambda + mu = 0, no lift-up, no nonlinearity:
    # d/dt (|psi|^2/2 + |phi|^2/(2M^2)) = -mu |grad psi|^2
    mu = 0.02
    p = validate_params(FlowParams(mu=mu, mach=0.6, lam=-mu), check_mach=False, check_alpha=False)
    g = build_grid(8, 64, 4 * np.pi)
    ops = S.SpectralOps(g)
    s, _ = S.make_initial_data(p, g, 2, S.InitialSpec(width=1.0))
    s = scaled(s, 1.0, ops)
    w = np.full(ops.eta.size, 2.0)
    w[0] = 1.0
    w[-1] = 1.0

    def energy(c):
        e = 0.5 * (np.abs(c[1]) ** 2 + np.abs(c[2]) ** 2) + np.abs(c[0]) ** 2 / (2 * p.mach**2)
        return float(np.sum(e * w))

    def dissipation(c, t):
        _, _, pp = ops.symbols(t)
        return float(np.sum(mu * pp * (np.abs(c[1]) ** 2 + np.abs(c[2]) ** 2) * w))

    return p, g, s, w, energy, dissipation


def test_energy_identity_of_the_symbol(energy_setup):
    p, g, s, w, energy, dissipation = energy_setup
    for t in (0.0, 0.7, 3.1):
        x = S.State2D(t, "moving", s.coeffs)
        d = S.rhs(x, p, g, nonlinear=False, lift_up=False)
        c = x.coeffs
        dE = np.sum(w * np.real(np.conj(c[1]) * d[1] + np.conj(c[2]) * d[2]
                                + np.conj(c[0]) * d[0] / p.mach**2))
        D = dissipation(c, t)
        assert abs(dE + D) <= 1e-12 * D


def test_energy_identity_along_the_discrete_trajectory(energy_setup):
    p, g, s, w, energy, dissipation = energy_setup
    opts = S.StepOptions(nonlinear=False, lift_up=False, acoustic_gate=False)
    n, T = 2000, 0.5
    tr = S.evolve(s, p, g, T, T / n, sample_times=np.linspace(0, T, n + 1), store_states=True,
                  opts=opts, check_wrap=False)
    E = np.array([energy(x.coeffs) for x in tr.states])
    D = np.array([dissipation(x.coeffs, x.t) for x in tr.states])
    h = tr.times[1] - tr.times[0]
    dE = (E[:-4] - 8 * E[1:-3] + 8 * E[3:-1] - E[4:]) / (12 * h)
    err = np.abs(dE + D[2:-2]) / D[2:-2]
    assert err.max() < 1e-8


# ---------------------------------------------------------------- integrator


@pytest.fixture(scope="module")
def smooth_nonlinear():
    p = loose(mu=0.05, mach=0.5)
    g = build_grid(8, 32, 4 * np.pi)
    spec = S.InitialSpec(masses=(1, -0.5), layout="centered", width=1.0, band_eta=1.5)
    s, _ = S.make_initial_data(loose(mu=0.05, mach=0.5, alpha=0.0), g, 3, spec)
    return p, g, scaled(s, 0.3, S.SpectralOps(g))


def test_third_order_self_convergence(smooth_nonlinear):
    p, g, s = smooth_nonlinear
    sols = []
    for n in (8, 16, 32, 256):
        tr = S.evolve(s, p, g, 1.0, 1.0 / n, opts=S.StepOptions(acoustic_gate=False), check_wrap=False)
        sols.append(tr.final_state.coeffs)
    errs = [np.abs(x - sols[-1]).max() for x in sols[:-1]]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    assert all(6.0 < r < 10.0 for r in ratios), ratios


def test_mass_is_conserved(smooth_nonlinear):
    p, g, s = smooth_nonlinear
    T = 2.0
    tr = S.evolve(s, p, g, T, 1 / 32, opts=S.StepOptions(acoustic_gate=False), check_wrap=False)
    ops = S.SpectralOps(g)
    ref = float(np.sum(np.abs(ops.to_phys(s.coeffs)[0]))) * ops.cell
    m0 = s.coeffs[0, 0, 0].real * ops.cell
    m1 = tr.final_state.coeffs[0, 0, 0].real * ops.cell
    assert abs(m1 - m0) / (T * ref) < 1e-12


def test_linear_regime_agrees_with_linear_propagator():
    p = loose(mu=0.05, mach=0.5)
    g = build_grid(8, 64, 4 * np.pi)
    s, _ = S.make_initial_data(p, g, 3)
    s = S.State2D(0.0, "moving", 1e-10 * s.coeffs / np.abs(s.coeffs).max())
    a = S.evolve(s, p, g, 1.0, 1 / 64, opts=S.StepOptions(acoustic_gate=False), check_wrap=False)
    b = S.evolve(s, p, g, 1.0, 1 / 64, opts=S.StepOptions(nonlinear=False, acoustic_gate=False),
                 check_wrap=False)
    fa, fb = a.final_state.coeffs, b.final_state.coeffs
    assert np.abs(fa - fb).max() / np.abs(fb).max() < 1e-8


def test_trajectories_are_bit_identical(smooth_nonlinear):
    p, g, s = smooth_nonlinear
    runs = [S.evolve(s, p, g, 0.5, 1 / 16, opts=S.StepOptions(acoustic_gate=False), check_wrap=False)
            for _ in range(2)]
    assert np.array_equal(runs[0].final_state.coeffs, runs[1].final_state.coeffs)


def test_steps_preserve_mask_and_reality(smooth_nonlinear):
    p, g, s = smooth_nonlinear
    ops = S.SpectralOps(g)
    out = S.step(s, 0.1, p, g, S.StepOptions(acoustic_gate=False))
    assert np.array_equal(out.coeffs * ops.mask, out.coeffs)
    back = ops.to_spec(ops.to_phys(out.coeffs))
    assert np.abs(back - out.coeffs).max() <= 1e-14 * np.abs(out.coeffs).max()


def test_tabulated_propagators_match_direct_evaluation(monkeypatch):
    p = loose(mu=0.01, mach=0.3)
    g = build_grid(8, 64, 16.0)
    s, _ = S.make_initial_data(p, g, 4, S.InitialSpec(width=1.0))
    s = S.State2D(0.0, "moving", s.coeffs / np.abs(s.coeffs).max() * 1e-9)
    opts = S.StepOptions(acoustic_gate=False)
    dt = S.lattice_dt(g, 0.1)
    a = S.evolve(s, p, g, 10 * dt, dt, opts=opts, check_wrap=False)
    monkeypatch.setattr(S.LinearPropagator, "lattice_ratio", lambda self, t0, h: None)
    b = S.evolve(s, p, g, 10 * dt, dt, opts=opts, check_wrap=False)
    fa, fb = a.final_state.coeffs, b.final_state.coeffs
    assert np.abs(fa - fb).max() <= 1e-12 * np.abs(fa).max()


# ---------------------------------------------------------------- evolve


def test_zero_horizon_gives_initial_sample_only(smooth_nonlinear):
    p, g, s = smooth_nonlinear
    tr = S.evolve(s, p, g, 0.0, 0.1, observers={"x": lambda st_: 1.0}, store_states=True,
                  check_wrap=False)
    assert tr.times == [0.0]
    assert np.array_equal(tr.states[0].coeffs, s.coeffs)


def test_acoustic_gate_rejects_large_steps(smooth_nonlinear):
    p, g, s = smooth_nonlinear
    with pytest.raises(ParamError, match="stability bound"):
        S.evolve(s, p, g, 1.0, 1.0, check_wrap=False)


def test_no_wrap_is_checked_before_stepping():
    p = validate_params(FlowParams(mu=1e-2, mach=0.09))
    g = build_grid(8, 64, 16.0)
    s, _ = S.make_initial_data(p, g, 0, S.InitialSpec(width=1.0))
    with pytest.raises(ParamError):
        S.evolve(s, p, g, 10.0, 0.01)


def test_sample_times_are_increasing(smooth_nonlinear):
    p, g, s = smooth_nonlinear
    tr = S.evolve(s, p, g, 1.0, 1 / 16, sample_times=[0.5, 0.25, 1.0, 0.25],
                  observers={"a": lambda x: float(np.abs(x.coeffs).max())},
                  opts=S.StepOptions(acoustic_gate=False), check_wrap=False)
    assert np.all(np.diff(tr.times) > 0)
    assert len(tr.times) == 4


# ---------------------------------------------------------------- frames and files


@given(t=st.floats(min_value=-50, max_value=50, allow_nan=False), seed=st.integers(0, 50))
def test_frame_round_trip(t, seed):
    g = build_grid(8, 64, 4 * np.pi)
    rng = np.random.default_rng(seed)
    ops = S.SpectralOps(g)
    u = ops.to_spec(rng.normal(size=(3, 8, 64)))
    s = S.State2D(t, "moving", u)
    lab = S.frame_transform(s, "lab", g)
    back = S.frame_transform(lab, "moving", g)
    assert np.abs(back.coeffs - u).max() <= 1e-13 * np.abs(u).max()
    assert np.abs(lab.coeffs[:, 0, :] - u[:, 0, :]).max() <= 1e-13 * np.abs(u).max()


def test_frame_transform_is_identity_at_t0():
    g = build_grid(8, 64, 4 * np.pi)
    ops = S.SpectralOps(g)
    u = ops.to_spec(np.random.default_rng(1).normal(size=(3, 8, 64)))
    lab = S.frame_transform(S.State2D(0.0, "moving", u), "lab", g)
    assert np.abs(lab.coeffs - u).max() <= 1e-15 * np.abs(u).max()


def test_snapshot_round_trip(tmp_out):
    g = build_grid(8, 64, 4 * np.pi)
    ops = S.SpectralOps(g)
    u = ops.to_spec(np.random.default_rng(2).normal(size=(3, 8, 64)))
    s = S.State2D(2.5, "moving", u)
    path = tmp_out / "snap.cns"
    S.write_snapshot(path, s, g, {"config_hash": "abc"})
    back, (nx, ny, ly) = S.read_snapshot(path)
    assert (nx, ny, ly) == (8, 64, g.l_y)
    assert back.t == 2.5 and back.frame == "moving"
    assert np.abs(back.coeffs - u).max() <= 1e-13 * np.abs(u).max()
    raw = path.read_bytes()
    assert raw[:5] == b"CNSV1"
    assert len(raw) == 64 + 3 * 8 * 64 * 16


def test_snapshot_rejects_foreign_files(tmp_out):
    path = tmp_out / "junk.cns"
    path.write_bytes(b"\0" * 128)
    with pytest.raises(ValueError, match="magic"):
        S.read_snapshot(path)
