"""Density, divergence and vorticity in the sheared frame, and a residual check.

With kappa = eta - k t and p = k^2 + kappa^2 (the symbol of minus the sheared
Laplacian) the split of a velocity (psi1, psi2) reads, mode by mode,

    A     =  i k psi1 + i kappa psi2           (divergence)
    Omega = -i kappa psi1 + i k psi2           (vorticity)
    B1 = (-i k A + i kappa Omega) / p,  B2 = (-i kappa A - i k Omega) / p.

B is the velocity rebuilt from (A, Omega); it differs from psi only in the
spatial mean, which the inverse Laplacian cannot see.

``residual_new_variable`` differentiates stored trajectories in time and
compares with the right-hand side of the (R, A, Omega) system written out
term by term, so the solver's primitive-variable equations and the
transformed system are checked against each other.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .params_grid import FlowParams, Grid2D
from .spectral_solver import SpectralOps, State2D, Trajectory

EQUATIONS = ("R", "A", "Omega")


@dataclass
class RAOState:
    t: float
    R: np.ndarray
    A: np.ndarray
    Omega: np.ndarray
    B: np.ndarray  # (2, n_x, n_y // 2 + 1)
    mean_dropped: bool = False  # the (0, 0) velocity mode was non-zero and is absent from B


def _inv_p(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = 1.0 / p[nz]
    return out


def helmholtz(state: State2D, grid: Grid2D, ops: SpectralOps | None = None) -> RAOState:
    if state.frame != "moving":
        raise ValueError("helmholtz expects a moving-frame state")
    ops = ops or SpectralOps(grid)
    ik, ika, p = ops.symbols(state.t)
    phi, s1, s2 = state.coeffs
    A = ik * s1 + ika * s2
    Om = -ika * s1 + ik * s2
    B = split_velocity(A, Om, ik, ika, p)
    dropped = bool(np.any(state.coeffs[1:, 0, 0] != 0))
    return RAOState(state.t, phi.copy(), A, Om, B, dropped)


def split_velocity(A, Om, ik, ika, p) -> np.ndarray:
    ip = _inv_p(p)
    return np.stack([(-ik * A + ika * Om) * ip, (-ika * A - ik * Om) * ip])


def reconstruct(rao: RAOState) -> np.ndarray:
    """Velocity coefficients (psi1, psi2) rebuilt from A and Omega (zero spatial mean)."""
    return rao.B.copy()


def dtp_symbol(t, k, eta):
    """d_t p as given by the closed form 2 k (k t - eta)."""
    return 2.0 * np.asarray(k) * (np.asarray(k) * t - np.asarray(eta))


# ---------------------------------------------------------------- residual


def transformed_rhs(p: FlowParams, ops: SpectralOps, rao: RAOState) -> dict:
    """Right-hand side of the (R, A, Omega) system at one instant, split into parts.

    Returns {"R": (linear, nonlinear), "A": ..., "Omega": ...}; both parts are
    full-lattice arrays, callers restrict to k != 0.
    """
    t = rao.t
    ik, ika, pp = ops.symbols(t)
    ip = _inv_p(pp)
    inv_m2 = 1.0 / p.mach**2
    nu = p.lam_value + 2.0 * p.mu
    R, A, Om = rao.R, rao.A, rao.Omega
    B1, B2 = rao.B
    kk = ik.imag
    kap = ika.imag

    lin_R = -A
    lin_A = (-2.0 * kk * kap * ip * A - 2.0 * kk * kk * ip * Om + inv_m2 * pp * R - nu * pp * A)
    lin_Om = A - p.mu * pp * Om

    stack = np.stack([R, A, Om, B1, B2,
                      ik * R, ika * R, ik * A, ika * A, ik * Om, ika * Om,
                      ik * B1, ika * B1, ik * B2, ika * B2])
    (r, a, om, b1, b2, rx, ry, ax, ay, ox, oy, b1x, b1y, b2x, b2y) = ops.to_phys(stack)
    q = r / (1.0 + r)
    press = (p.pressure_prime(1.0 + r) - 1.0) / (1.0 + r)
    # viscous flux V = q ((lam + 2 mu) grad A + mu grad_perp Omega), grad_perp = (-d_Y, d_X)
    v1 = q * (nu * ax - p.mu * oy)
    v2 = q * (nu * ay + p.mu * ox)
    # pressure fluxes (press - q) grad R, entering with -1/M^2 divergence
    pf1 = (press - q) * rx
    pf2 = (press - q) * ry
    prods = ops.to_spec(np.stack([
        a * r + b1 * rx + b2 * ry,
        b2y**2 + b1x**2 + 2.0 * b1y * b2x + b1 * ax + b2 * ay,
        a * om + b1 * ox + b2 * oy,
        v1, v2, pf1, pf2,
    ]))
    nl_R = -prods[0]
    div_v = ik * prods[3] + ika * prods[4]
    curl_v = -ika * prods[3] + ik * prods[4]
    nl_A = -prods[1] - div_v - inv_m2 * (ik * prods[5] + ika * prods[6])
    nl_Om = -prods[2] - curl_v
    m = ops.mask
    return {"R": (lin_R * m, nl_R), "A": (lin_A * m, nl_A), "Omega": (lin_Om * m, nl_Om)}


def _derivative_weights(times: np.ndarray, i: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference weights for d/dt at times[i] from the nearest samples."""
    half = order // 2
    idx = np.arange(i - half, i + half + 1)
    x = times[idx] - times[i]
    V = np.vander(x, idx.size, increasing=True).T
    rhs = np.zeros(idx.size)
    rhs[1] = 1.0
    return idx, np.linalg.solve(V, rhs)


def residual_new_variable(traj, p: FlowParams, grid: Grid2D, *, order: int = 4,
                          min_samples: int | None = None, workers: int = 1) -> dict:
    """Largest relative residual of each transformed equation over interior samples.

    ``traj`` is a :class:`Trajectory` with stored states or a list of
    moving-frame states.  Time derivatives use central differences of the
    given ``order`` (2 or 4).  Each residual is divided by the largest
    modulus among the terms of its equation on the same sample, so a
    vanishing state gives exactly zero.
    """
    states = traj.states if isinstance(traj, Trajectory) else list(traj)
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    need = order + 1 if min_samples is None else max(min_samples, order + 1)
    if len(states) < need:
        raise ValueError(f"residual check needs at least {need} stored samples, got {len(states)}")
    if any(s.frame != "moving" for s in states):
        raise ValueError("residual check expects moving-frame states")
    ops = SpectralOps(grid)
    times = np.array([s.t for s in states])
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample times must increase strictly")
    half = order // 2
    nz = np.zeros(ops.shape_r, dtype=bool)
    nz[1:] = True
    nz &= ops.mask

    def one(i):
        idx, w = _derivative_weights(times, i, order)
        rao_i = helmholtz(states[i], grid, ops)
        terms = transformed_rhs(p, ops, rao_i)
        raos = [helmholtz(states[j], grid, ops) for j in idx]
        res = {}
        for eq in EQUATIONS:
            d = sum(wj * getattr(r, eq) for wj, r in zip(w, raos))
            lin, nl = terms[eq]
            diff = np.abs(d - lin - nl)[nz]
            scale = max(float(np.max(np.abs(d[nz]), initial=0.0)),
                        float(np.max(np.abs(lin[nz]), initial=0.0)),
                        float(np.max(np.abs(nl[nz]), initial=0.0)))
            if scale == 0.0:
                res[eq] = (0.0, None)
                continue
            j = int(np.argmax(diff))
            kk_idx, jj = np.argwhere(nz)[j]
            res[eq] = (float(diff[j] / scale),
                       {"t": float(times[i]), "k": int(grid.k[kk_idx]), "eta": float(ops.eta[jj])})
        return res

    interior = range(half, len(states) - half)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, interior))
    else:
        results = [one(i) for i in interior]
    report = {"n_samples": len(states), "order": order, "max_residual": {}, "argmax": {}}
    for eq in EQUATIONS:
        best = max(results, key=lambda r: r[eq][0])
        report["max_residual"][eq] = best[eq][0]
        report["argmax"][eq] = best[eq][1]
    dt = np.diff(times)
    report["dt_sample"] = [float(dt.min()), float(dt.max())]
    report["finite"] = all(math.isfinite(v) for v in report["max_residual"].values())
    return report
