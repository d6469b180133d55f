import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from couette_lab import spectral_solver as S
from couette_lab.diagnostics import (
    FitError, NormSeries, classify_run, default_windows, fit_exponential, fit_power, norms,
    quadrature_l2, spectral_l2,
)
from couette_lab.params_grid import build_grid
from couette_lab.zero_mode_waves import heat_kernel


@pytest.fixture(scope="module")
def grid():
    return build_grid(8, 64, 4 * np.pi)


@pytest.fixture(scope="module")
def ops(grid):
    return S.SpectralOps(grid)


def random_state(ops, seed, t=0.0):
    rng = np.random.default_rng(seed)
    u = ops.to_spec(rng.normal(size=(3, ops.nx, ops.ny)))
    return S.State2D(t, "moving", u)


# ---------------------------------------------------------------- norms


def test_constant_field_norm_is_amplitude_times_root_area(grid, ops):
    c = 0.37
    phys = np.zeros((3, 8, 64))
    phys[0] = c
    s = S.State2D(0.0, "moving", ops.to_spec(phys))
    area = grid.area
    assert norms(s, grid, ["L2_phi"], ops)["L2_phi"] == pytest.approx(c * math.sqrt(area), rel=1e-13)


def test_single_cosine_mode(grid, ops):
    c = 1.3
    X = grid.x[:, None]
    Y = grid.grid1d.y[None, :]
    eta = 3 * ops.deta
    phys = np.zeros((3, 8, 64))
    phys[2] = c * np.cos(2 * X + eta * Y)
    s = S.State2D(0.0, "moving", ops.to_spec(phys))
    area = grid.area
    out = norms(s, grid, ["L2_psi2", "L2_grad_nonzero", "Linf_phi"], ops)
    assert out["L2_psi2"] == pytest.approx(c * math.sqrt(area / 2), rel=1e-13)
    assert out["L2_grad_nonzero"] == pytest.approx(c * math.sqrt(area / 2 * (4 + eta**2)), rel=1e-13)
    assert out["Linf_phi"] == 0.0


def test_gradient_uses_sheared_symbol(grid, ops):
    # at time t a moving-frame mode (k, eta) has lab wavenumber eta - k t
    t = 1.25
    s = random_state(ops, 3, t)
    u = s.coeffs.copy()
    u[:, 0, :] = 0
    s = S.State2D(t, "moving", u)
    kap = ops.eta[None, :] - ops.k[:, None] * t
    pp = ops.k[:, None] ** 2 + kap**2
    want = spectral_l2(u[:1], ops, pp[None]) + spectral_l2(u[1:], ops, pp[None])
    assert norms(s, grid, ["L2_grad_nonzero"], ops)["L2_grad_nonzero"] == pytest.approx(want, rel=1e-13)


def test_H0_is_L2(grid, ops):
    s = random_state(ops, 1, 0.4)
    out = norms(s, grid, ["H0", "L2_phi", "L2_psi1", "L2_psi2"], ops)
    l2 = math.sqrt(out["L2_phi"] ** 2 + out["L2_psi1"] ** 2 + out["L2_psi2"] ** 2)
    assert out["H0"] == pytest.approx(l2, rel=1e-13)


@pytest.mark.parametrize("t", [0.0, 2.0])
def test_H5_of_filtered_noise_equals_L2_of_noise(grid, ops, t):
    s = random_state(ops, 9, t)
    _, _, pp = ops.symbols(t)
    filt = S.State2D(t, "moving", s.coeffs * (1.0 + pp[None]) ** -2.5)
    h5 = norms(filt, grid, ["H5"], ops)["H5"]
    h0 = norms(s, grid, ["H0"], ops)["H0"]
    assert abs(h5 - h0) <= 1e-12 * h0


@given(seed=st.integers(0, 10_000))
def test_parseval_against_quadrature(seed):
    g = build_grid(8, 64, 4 * np.pi)
    ops = S.SpectralOps(g)
    s = random_state(ops, seed)
    f = ops.to_phys(s.coeffs)
    for i in range(3):
        a, b = spectral_l2(s.coeffs[i], ops), quadrature_l2(f[i], ops)
        assert abs(a - b) <= 1e-10 * b


def test_zero_mode_norms_ignore_nonzero_modes(grid, ops):
    s = random_state(ops, 4)
    u = s.coeffs.copy()
    u[:, 0, :] = 0
    out = norms(S.State2D(0.0, "moving", u), grid,
                ["L2_zero_phi_psi2", "L2_dy_zero_phi_psi2", "Linf_zero_psi1"], ops)
    assert out == {"L2_zero_phi_psi2": 0.0, "L2_dy_zero_phi_psi2": 0.0, "Linf_zero_psi1": 0.0}


def test_norms_refuse_lab_frame_and_unknown_names(grid, ops):
    s = random_state(ops, 0)
    with pytest.raises(ValueError):
        norms(S.State2D(0.0, "lab", s.coeffs), grid)
    with pytest.raises(KeyError, match="nope"):
        norms(s, grid, ["nope"])


# ---------------------------------------------------------------- series


def test_series_share_time_axis():
    with pytest.raises(ValueError):
        NormSeries("r", np.arange(3.0), {"a": [1.0, 2.0]})
    with pytest.raises(ValueError):
        NormSeries("r", np.arange(3.0), {"a": [1.0, np.nan, 2.0]})
    ns = NormSeries("r", np.arange(3.0), {"log_a": [0.0, -1.0, -np.inf]})
    assert ns["log_a"][-1] == -np.inf


# ---------------------------------------------------------------- power fits


def test_exact_power_law():
    t = np.linspace(10, 1000, 60)
    r = fit_power(t, 3.0 * (1 + t) ** -0.25, (10, 1000))
    assert abs(r.value + 0.25) < 1e-12
    assert r.half_width < 1e-12
    assert r.window == (10.0, 1000.0) and r.n_points == 60 and not r.trimmed


def test_constant_series_has_zero_exponent():
    t = np.linspace(0, 50, 20)
    assert abs(fit_power(t, np.full(t.size, 2.5)).value) < 1e-12


def test_heat_equation_gaussian_l2_decay():
    # variance nu*2*(1+t) with nu = 1/2: the L2 norm is exactly C (1+t)^(-1/4)
    y = np.linspace(-400, 400, 2**16, endpoint=False)
    dy = y[1] - y[0]
    t = np.geomspace(10, 1000, 25)
    vals = [math.sqrt(np.sum(heat_kernel(y, 1.0 + s, nu=0.5) ** 2) * dy) for s in t]
    r = fit_power(t, vals, (10, 1000))
    assert abs(r.value + 0.25) < 1e-9


def test_power_fit_refuses_bad_windows():
    t = np.linspace(0, 10, 20)
    v = (1 + t) ** -1.0
    with pytest.raises(FitError, match="degenerate"):
        fit_power(t, v, (5, 5))
    with pytest.raises(FitError, match="leaves"):
        fit_power(t, v, (0, 20))
    with pytest.raises(FitError, match="at least 8"):
        fit_power(t, v, (0, 2))


# ---------------------------------------------------------------- exponential fits


def test_exact_exponential():
    t = np.linspace(0, 40, 81)
    r = fit_exponential(t, 7.0 * np.exp(-0.3 * t))
    assert abs(r.value - 0.3) < 1e-12
    r_log = fit_exponential(t, math.log(7.0) - 0.3 * t, log_values=True)
    assert abs(r_log.value - 0.3) < 1e-12


def test_plateau_is_trimmed_and_flagged():
    t = np.linspace(0, 60, 121)
    v = np.exp(-t) + 1e-12  # zero-mode leakage floor
    r = fit_exponential(t, v)
    assert r.trimmed
    assert r.window[1] < 30
    assert abs(r.value - 1.0) < 0.05


def test_exact_zero_ends_the_window():
    t = np.linspace(0, 30, 31)
    v = np.exp(-0.5 * t)
    v[20:] = 0.0
    r = fit_exponential(t, v)
    assert r.trimmed and r.window[1] == 19.0
    assert abs(r.value - 0.5) < 1e-12


def test_viscous_mode_rate_is_bounded_by_symbol():
    # |f(t)| = exp(-mu int_0^t p) for a mode of the heat equation in sheared coordinates
    mu, k, eta = 1e-3, 1.0, 3.0
    t = np.linspace(0, 100, 401)
    integral = k * k * t + ((t * k - eta) ** 3 + eta**3) / (3 * k)
    v = np.exp(-mu * integral)
    win = default_windows(mu, 100.0)["exponential"]
    r = fit_exponential(t, v, win)
    sel = (t >= win[0]) & (t <= win[1])
    p = k * k + (eta - k * t[sel]) ** 2
    assert r.value >= mu * p.min()
    assert r.value <= mu * p.max()


@given(c=st.floats(1e-30, 1e30), rate=st.floats(1e-3, 2.0))
def test_fits_are_scale_invariant(c, rate):
    t = np.linspace(1, 20, 40)
    v = np.exp(-rate * t) * (1 + 0.1 * np.sin(t))
    a = fit_exponential(t, v, run_id="x", name="s")
    b = fit_exponential(t, c * v, run_id="x", name="s")
    assert abs(a.value - b.value) <= 1e-9 * max(1.0, abs(a.value))
    pa = fit_power(t, (1 + t) ** -0.7 * (1 + 0.1 * np.cos(t)), run_id="x", name="s")
    pb = fit_power(t, c * (1 + t) ** -0.7 * (1 + 0.1 * np.cos(t)), run_id="x", name="s")
    assert abs(pa.value - pb.value) <= 1e-9


def test_bootstrap_is_deterministic_per_run_id():
    t = np.linspace(0, 20, 40)
    v = np.exp(-0.2 * t) * (1 + 0.05 * np.sin(3 * t))
    a = fit_exponential(t, v, run_id="run-a", name="g")
    b = fit_exponential(t, v, run_id="run-a", name="g")
    c = fit_exponential(t, v, run_id="run-b", name="g")
    assert a.half_width == b.half_width
    assert a.half_width != c.half_width
    assert 0 < a.half_width < 0.05


def test_default_windows():
    w = default_windows(1e-3, 1000.0)
    assert w["power"] == (10.0, 1000.0)
    assert w["exponential"] == pytest.approx((20.0, 100.0))


# ---------------------------------------------------------------- classification


def series(values, times=None):
    v = np.asarray(values, dtype=float)
    t = np.arange(v.size, dtype=float) if times is None else times
    return NormSeries("c", t, {"a": v, "b": np.ones(v.size)})


def test_all_zero_run_is_stable():
    assert classify_run(series(np.zeros(10)), horizon=9.0) == "stable"


def test_growth_by_100_is_transition():
    assert classify_run(series(np.geomspace(1, 100, 10))) == "transitioned"


def test_growth_below_limit_is_stable():
    assert classify_run(series(np.geomspace(1, 9.9, 10))) == "stable"


def test_density_floor_is_collapse():
    assert classify_run(series(np.ones(3)), status="collapsed") == "collapsed"


def test_early_stop_is_inconclusive():
    assert classify_run(series(np.ones(5)), horizon=10.0) == "inconclusive"
    assert classify_run(series(np.ones(5)), status="blowup") == "inconclusive"


def test_tracked_subset_only():
    ns = series(np.geomspace(1, 100, 10))
    assert classify_run(ns, tracked=["b"]) == "stable"
    ns = NormSeries("c", np.arange(3.0), {"log_E": [0.0, 50.0, 100.0], "a": [1.0, 1.0, 1.0]})
    assert classify_run(ns) == "stable"  # log series are not inflation-tested
