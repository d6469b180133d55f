"""Pseudo-spectral evolution of the perturbation of Couette flow in the sheared frame.

Fields are (phi, psi1, psi2): density perturbation and velocity perturbation.
They are stored as ``scipy.fft.rfft2`` coefficients over (k, eta) of the
sheared coordinates X = x - y t, Y = y, in which the Couette transport term
disappears and y-derivatives become multiplication by i (eta - k t).

Time stepping is an integrating-factor (Lawson) Runge-Kutta scheme of order
three.  The linear part, including lift-up, pressure and viscosity, is
propagated per mode by fourth-order Magnus steps of the 3x3 symbol (exact
exponential on the x-independent row, whose symbol is constant in time).
When the step is an integer multiple of 4 * d_eta the quarter-step
propagator of mode (k, eta) at time t depends only on (k, eta - k t) on a
lattice, so the propagators are tabulated once per k and re-used.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft

from . import _kernels as K
from .params_grid import FlowParams, Grid2D, ParamError, check_no_wrap

FIELDS = ("phi", "psi1", "psi2")
DENSITY_FLOOR = 0.1
_WORKERS = -1

# Ralston's third-order tableau: nodes 0, 1/2, 3/4; weights 2/9, 1/3, 4/9.
_RK_B = (2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0)


class NumericalAbort(RuntimeError):
    """A run had to stop; ``kind`` is 'collapsed' (density floor) or 'blowup'."""

    def __init__(self, kind: str, message: str, state: "State2D | None" = None):
        super().__init__(message)
        self.kind = kind
        self.state = state


@dataclass
class State2D:
    t: float
    frame: str
    coeffs: np.ndarray  # (3, n_x, n_y // 2 + 1) complex
    collapsed: bool = False

    def copy(self) -> "State2D":
        return State2D(self.t, self.frame, self.coeffs.copy(), self.collapsed)

    @property
    def zero_row(self) -> np.ndarray:
        return self.coeffs[:, 0, :]


# ---------------------------------------------------------------------------
# transforms and wavenumber bookkeeping


class SpectralOps:
    """Transforms, masks and sheared symbols for one grid."""

    def __init__(self, grid: Grid2D):
        self.grid = grid
        nx, ny = grid.shape
        self.nx, self.ny = nx, ny
        self.k = grid.k.astype(float)
        self.eta = 2.0 * np.pi * np.fft.rfftfreq(ny, d=grid.grid1d.dy)
        self.deta = grid.grid1d.deta
        kmask = np.abs(grid.k) < grid.dealias * nx / 2
        jmask = np.arange(self.eta.size) < grid.dealias * ny / 2
        self.mask = np.outer(kmask, jmask)
        self.kmask = kmask
        self.jmax = int(np.count_nonzero(jmask))
        self.shape_r = (nx, self.eta.size)
        self.cell = grid.dx * grid.grid1d.dy

    def to_phys(self, fh):
        return sfft.irfft2(fh, s=(self.nx, self.ny), axes=(-2, -1), workers=_WORKERS)

    def to_spec(self, f):
        return sfft.rfft2(f, axes=(-2, -1), workers=_WORKERS) * self.mask

    def kappa(self, t: float) -> np.ndarray:
        return self.eta[None, :] - self.k[:, None] * t

    def symbols(self, t: float):
        """(i k, i kappa, p) on the half-spectrum lattice at time t."""
        kap = self.kappa(t)
        ik = 1j * np.broadcast_to(self.k[:, None], kap.shape)
        return ik, 1j * kap, self.k[:, None] ** 2 + kap**2


class ZeroRowOps:
    """The same interface restricted to x-independent fields (the k = 0 row)."""

    def __init__(self, ops: SpectralOps):
        self.parent = ops
        self.nx = ops.nx
        self.ny = ops.ny
        self.eta = ops.eta
        self.mask = ops.mask[0]

    # the k = 0 coefficient of a 2-D transform is n_x times the 1-D transform
    def to_phys(self, fh):
        return sfft.irfft(fh, n=self.ny, axis=-1, workers=_WORKERS) / self.nx

    def to_spec(self, f):
        return sfft.rfft(f, axis=-1, workers=_WORKERS) * (self.nx * self.mask)

    def symbols(self, t: float):
        z = np.zeros_like(self.eta)
        return 0j * z, 1j * self.eta, self.eta**2


# ---------------------------------------------------------------------------
# linear part


@dataclass(frozen=True)
class LinearOptions:
    lift_up: bool = True
    max_phase: float = 0.1


def linear_symbol(p: FlowParams, k, kap, lift_up: bool = True) -> np.ndarray:
    """3x3 linear symbol(s) at wavenumber k and sheared wavenumber kap (broadcast)."""
    k = np.asarray(k, dtype=float)
    kap = np.asarray(kap, dtype=float)
    k, kap = np.broadcast_arrays(k, kap)
    out = np.zeros(k.shape + (3, 3), dtype=complex)
    mu, lm = p.mu, p.lam_value + p.mu
    inv = 1.0 / p.mach**2
    pp = k**2 + kap**2
    out[..., 0, 1] = -1j * k
    out[..., 0, 2] = -1j * kap
    out[..., 1, 0] = -1j * k * inv
    out[..., 1, 1] = -mu * pp - lm * k * k
    out[..., 1, 2] = -(1.0 if lift_up else 0.0) - lm * k * kap
    out[..., 2, 0] = -1j * kap * inv
    out[..., 2, 1] = -lm * k * kap
    out[..., 2, 2] = -mu * pp - lm * kap * kap
    return out


def apply_linear(p: FlowParams, ops: SpectralOps, t: float, u: np.ndarray,
                 lift_up: bool = True) -> np.ndarray:
    """Linear part of the time derivative, evaluated with explicit symbols."""
    ik, ika, pp = ops.symbols(t)
    phi, s1, s2 = u
    lm = p.lam_value + p.mu
    A = ik * s1 + ika * s2
    out = np.empty_like(u)
    out[0] = -(ik * s1 + ika * s2)
    out[1] = -(1.0 if lift_up else 0.0) * s2 - ik * phi / p.mach**2 - p.mu * pp * s1 + lm * ik * A
    out[2] = -ika * phi / p.mach**2 - p.mu * pp * s2 + lm * ika * A
    return out * ops.mask


class LinearPropagator:
    """Quarter-step propagators of the linear system, forward in time only."""

    def __init__(self, p: FlowParams, ops: SpectralOps, opts: LinearOptions = LinearOptions()):
        self.p = p
        self.ops = ops
        self.opts = opts
        self._args = (p.mu, p.lam_value + p.mu, 1.0 / p.mach**2, 1.0 if opts.lift_up else 0.0,
                      opts.max_phase)
        self._zero_cache: dict = {}
        self._tables: dict = {}
        self.jmax = ops.jmax
        self.kvals = ops.k
        self.active_k = np.nonzero(ops.kmask & (ops.k != 0))[0]
        self.stats = {"magnus_evals": 0}

    # exact propagator of the k = 0 row
    def zero_row(self, h: float) -> np.ndarray:
        key = round(h, 15)
        if key not in self._zero_cache:
            if len(self._zero_cache) > 8:
                self._zero_cache.clear()
            eta = self.ops.eta[: self.jmax]
            mats = linear_symbol(self.p, 0.0, eta, self.opts.lift_up) * h
            out = np.empty_like(mats)
            K.expm_batch(np.ascontiguousarray(mats), out)
            self._zero_cache[key] = out
        return self._zero_cache[key]

    def lattice_ratio(self, t0: float, h: float):
        """Integer m with h = m d_eta and t0 = n d_eta, or None."""
        d = self.ops.deta
        m = h / d
        n = t0 / d
        if abs(m - round(m)) < 1e-9 * max(1.0, m) and abs(n - round(n)) < 1e-7 * max(1.0, n) and round(m) > 0:
            return int(round(m)), int(round(n))
        return None

    def _table(self, row: int, m: int, J_lo: int, J_hi: int):
        """Propagators over one quarter step of m*d_eta for kappa_0 = J d_eta, J in [J_lo, J_hi).

        The requested window slides monotonically in time, so the table is
        re-allocated with some slack and stale entries are dropped.
        """
        key = (row, m)
        d = self.ops.deta
        k = self.kvals[row]
        tab = self._tables.get(key)
        if tab is None:
            # step sizes only change at schedule levels: tables of other sizes are stale
            for old in [q for q in self._tables if q[0] == row and q[1] != m]:
                del self._tables[old]
        if tab is not None:
            lo, arr = tab
            if lo <= J_lo and J_hi <= lo + arr.shape[0]:
                return lo, arr
        slack = max(256, (J_hi - J_lo) // 4)
        new_lo, new_hi = J_lo - slack, J_hi + slack
        out = np.empty((new_hi - new_lo, 3, 3), dtype=complex)
        filled = np.zeros(new_hi - new_lo, dtype=bool)
        if tab is not None:
            lo, arr = tab
            ov_lo, ov_hi = max(lo, new_lo), min(lo + arr.shape[0], new_hi)
            if ov_lo < ov_hi:
                out[ov_lo - new_lo: ov_hi - new_lo] = arr[ov_lo - lo: ov_hi - lo]
                filled[ov_lo - new_lo: ov_hi - new_lo] = True
        todo = np.nonzero(~filled)[0]
        if todo.size:
            kap0 = (todo + new_lo) * d
            buf = np.empty((todo.size, 3, 3), dtype=complex)
            K.magnus_batch(np.full(todo.size, k), kap0.astype(float), m * d, *self._args, buf)
            out[todo] = buf
            self.stats["magnus_evals"] += todo.size
        self._tables[key] = (new_lo, out)
        return new_lo, out

    def apply(self, t0: float, h: float, vecs: list[np.ndarray], rows=None) -> list[np.ndarray]:
        """Propagate each (3, n_x, n_r) array in ``vecs`` from t0 to t0 + h (modifies copies)."""
        jm = self.jmax
        outs = [np.zeros_like(v) for v in vecs]
        Z = self.zero_row(h)
        for v, o in zip(vecs, outs):
            o[:, 0, :jm] = np.einsum("nij,jn->in", Z, v[:, 0, :jm])
        rows = self.active_k if rows is None else rows
        if len(rows) == 0:
            return outs
        lat = self.lattice_ratio(t0, h)
        jidx = np.arange(jm)
        for r in rows:
            k = self.kvals[r]
            if lat is not None:
                m, n = lat
                J = jidx - int(round(k)) * n
                lo, tab = self._table(r, m, int(J.min()), int(J.max()) + 1)
                idx = (J - lo).astype(np.int64)
                for v, o in zip(vecs, outs):
                    src = np.ascontiguousarray(v[:, r, :jm])
                    dst = np.empty_like(src)
                    K.apply_gather(tab, idx, src, dst)
                    o[:, r, :jm] = dst
            else:
                kap0 = self.ops.eta[:jm] - k * t0
                mats = np.empty((jm, 3, 3), dtype=complex)
                K.magnus_batch(np.full(jm, k), kap0, h, *self._args, mats)
                self.stats["magnus_evals"] += jm
                for v, o in zip(vecs, outs):
                    src = np.ascontiguousarray(v[:, r, :jm])
                    dst = np.empty_like(src)
                    K.apply_batch(mats, src, dst)
                    o[:, r, :jm] = dst
        return outs


# ---------------------------------------------------------------------------
# nonlinear part


def nonlinear_terms(p: FlowParams, ops, t: float, u: np.ndarray, check_floor: bool = True):
    """Right-hand side of the perturbation system minus its linear part.

    ``ops`` is a :class:`SpectralOps` (full lattice) or :class:`ZeroRowOps`
    (x-independent fields).  Products and quotients are formed pointwise on
    the collocation grid and projected back with the dealiasing mask.
    """
    ik, ika, pp = ops.symbols(t)
    phi_h, s1_h, s2_h = u
    lm = p.lam_value + p.mu
    A = ik * s1_h + ika * s2_h
    visc1 = -p.mu * pp * s1_h + lm * ik * A
    visc2 = -p.mu * pp * s2_h + lm * ika * A
    stack = np.stack([phi_h, s1_h, s2_h, ik * phi_h, ika * phi_h, ik * s1_h, ika * s1_h,
                      ik * s2_h, ika * s2_h, visc1, visc2])
    (phi, s1, s2, phx, phy, s1x, s1y, s2x, s2y, v1, v2) = ops.to_phys(stack)
    rho = 1.0 + phi
    if check_floor:
        rmin = float(rho.min())
        if not np.isfinite(rmin):
            raise NumericalAbort("blowup", f"non-finite density at t={t:.6g}")
        if rmin <= DENSITY_FLOOR:
            raise NumericalAbort("collapsed", f"density collapse: min(1+phi)={rmin:.4g} at t={t:.6g}")
    q = phi / rho
    inv_m2 = 1.0 / p.mach**2
    press = (q - (p.pressure_prime(rho) - 1.0) / rho) * inv_m2
    n1 = -(s1 * s1x + s2 * s1y) - q * v1 + press * phx
    n2 = -(s1 * s2x + s2 * s2y) - q * v2 + press * phy
    prods = ops.to_spec(np.stack([phi * s1, phi * s2, n1, n2]))
    out = np.empty_like(u)
    out[0] = -(ik * prods[0] + ika * prods[1]) * ops.mask
    out[1] = prods[2]
    out[2] = prods[3]
    return out


def rhs(state: State2D, p: FlowParams, grid: Grid2D, *, nonlinear: bool = True,
        lift_up: bool = True, ops: SpectralOps | None = None) -> np.ndarray:
    """Time derivative of the moving-frame coefficients."""
    if state.frame != "moving":
        raise ValueError("rhs expects a moving-frame state")
    ops = ops or SpectralOps(grid)
    du = apply_linear(p, ops, state.t, state.coeffs, lift_up)
    if nonlinear:
        du = du + nonlinear_terms(p, ops, state.t, state.coeffs)
    return du


# ---------------------------------------------------------------------------
# stepping


@dataclass
class StepOptions:
    nonlinear: bool = True
    lift_up: bool = True
    acoustic_gate: bool = True
    drop_tol: float = 0.0  # rows below drop_tol * reference amplitude are zeroed
    max_phase: float = 0.1


def cfl_limit(state: State2D, p: FlowParams, grid: Grid2D, acoustic: bool = True,
              ops: SpectralOps | None = None) -> float:
    """Largest admissible dt: 0.5 * min(dx / |psi|_inf, M dx) (acoustic part optional)."""
    ops = ops or SpectralOps(grid)
    dx = min(grid.dx, grid.grid1d.dy)
    vel = ops.to_phys(state.coeffs[1:])
    vmax = float(np.max(np.abs(vel))) if vel.size else 0.0
    lims = [math.inf if vmax == 0 else dx / vmax]
    if acoustic:
        lims.append(p.mach * dx)
    return 0.5 * min(lims)


class Stepper:
    """Holds propagator tables and the active-row bookkeeping for a run."""

    def __init__(self, p: FlowParams, grid: Grid2D, opts: StepOptions = StepOptions()):
        self.p = p
        self.grid = grid
        self.opts = opts
        self.ops = SpectralOps(grid)
        self.zops = ZeroRowOps(self.ops)
        self.prop = LinearPropagator(p, self.ops, LinearOptions(opts.lift_up, opts.max_phase))
        self.rows = list(self.prop.active_k)
        self.ref_amp: float | None = None

    def _prune(self, u: np.ndarray):
        if self.ref_amp is None:
            self.ref_amp = float(np.max(np.abs(u))) or 1.0
        keep = []
        thr = self.opts.drop_tol * self.ref_amp
        for r in self.rows:
            amp = float(np.max(np.abs(u[:, r, :])))
            if amp > thr and amp > 0.0:
                keep.append(r)
            else:
                u[:, r, :] = 0.0
        self.rows = keep

    def _N(self, t, u):
        if not self.opts.nonlinear:
            return np.zeros_like(u)
        if not self.rows:
            out = np.zeros_like(u)
            out[:, 0, :] = nonlinear_terms(self.p, self.zops, t, u[:, 0, :])
            return out
        return nonlinear_terms(self.p, self.ops, t, u)

    def step(self, state: State2D, h: float) -> State2D:
        if not h > 0:
            raise ValueError("dt must be positive")
        if state.frame != "moving":
            raise ValueError("the stepper works in the moving frame")
        u0 = state.coeffs.copy()
        if self.opts.drop_tol > 0:
            self._prune(u0)
        t0 = state.t
        q = h / 4.0
        P = lambda j, vs: self.prop.apply(t0 + j * q, q, vs, self.rows)
        if not self.opts.nonlinear:
            w = [u0]
            for j in range(4):
                w = P(j, w)
            u1 = w[0]
        else:
            k1 = self._N(t0, u0)
            w, x = P(1, P(0, [u0, k1]))
            u2 = w + 0.5 * h * x
            k2 = self._N(t0 + 0.5 * h, u2)
            w, x, y = P(2, [w, x, k2])
            u3 = w + 0.75 * h * y
            k3 = self._N(t0 + 0.75 * h, u3)
            b1, b2, b3 = _RK_B
            (u1,) = P(3, [w + h * (b1 * x + b2 * y + b3 * k3)])
        if not np.all(np.isfinite(u1)):
            raise NumericalAbort("blowup", f"non-finite coefficients after step to t={t0 + h:.6g}",
                                 state)
        return State2D(t0 + h, "moving", u1 * self.ops.mask)


def step(state: State2D, dt: float, p: FlowParams, grid: Grid2D,
         opts: StepOptions = StepOptions()) -> State2D:
    """One integrating-factor RK3 step (builds a fresh :class:`Stepper`)."""
    return Stepper(p, grid, opts).step(state, dt)


def lattice_dt(grid: Grid2D, target: float) -> float:
    """Closest step to ``target`` that keeps the propagator tables re-usable (multiple of 4 d_eta)."""
    d = 4.0 * grid.grid1d.deta
    return max(1, round(target / d)) * d


# ---------------------------------------------------------------------------
# frames


def frame_transform(state: State2D, target: str, grid: Grid2D) -> State2D:
    """Switch between lab coordinates and sheared coordinates X = x - y t."""
    if target not in ("lab", "moving"):
        raise ValueError("target frame must be 'lab' or 'moving'")
    if state.frame == target or state.t == 0.0:
        return State2D(state.t, target, state.coeffs.copy(), state.collapsed)
    ops = SpectralOps(grid)
    f = sfft.irfft2(state.coeffs, s=grid.shape, axes=(-2, -1), workers=_WORKERS)
    mixed = sfft.fft(f, axis=-2, workers=_WORKERS)
    sign = 1.0 if target == "moving" else -1.0
    phase = np.exp(sign * 1j * ops.k[:, None] * state.t * grid.grid1d.y[None, :])
    g = sfft.ifft(mixed * phase, axis=-2, workers=_WORKERS).real
    return State2D(state.t, target, sfft.rfft2(g, axes=(-2, -1), workers=_WORKERS), state.collapsed)


# ---------------------------------------------------------------------------
# initial data


@dataclass
class InitialSpec:
    """Shape of the initial perturbation before rescaling.

    ``masses`` are the wave masses (eta_1, eta_2) of the x-averaged part.
    ``layout`` 'wave' centres each wave's Gaussian at the position of the
    corresponding diffusion wave at t = 0 (y = -c, +c); 'centered' puts both
    at y = 0.  The non-zero part is a seeded random field supported on
    1 <= |k| <= band_k, |eta| <= band_eta.
    """

    kind: str = "full"  # full | zero_only | nonzero_only
    masses: tuple = (1.0, -1.0)
    layout: str = "wave"
    width: float = 0.15
    band_k: int = 1
    band_eta: float = 2.0
    nonzero_weight: float = 1.0
    norm_target: float = 1.0
    psi1_zero_mode: bool = False


def _h5_norm(ops: SpectralOps, u: np.ndarray, s: int = 5) -> float:
    ik, ika, pp = ops.symbols(0.0)
    w = (1.0 + pp) ** s
    wt = np.full(ops.eta.size, 2.0)
    wt[0] = 1.0
    if ops.ny % 2 == 0:
        wt[-1] = 1.0
    tot = np.sum(w[None] * np.abs(u) ** 2 * wt[None, None, :])
    return math.sqrt(tot * ops.cell / (ops.nx * ops.ny))


def _data_norm(ops: SpectralOps, u: np.ndarray) -> tuple[float, float, float]:
    h5 = _h5_norm(ops, u)
    phys = ops.to_phys(u)
    phi, psi2 = phys[0], phys[2]
    l1 = float(np.sum(np.abs(phi)) + np.sum(np.abs((1.0 + phi) * psi2))) * ops.cell
    return h5 + l1, h5, l1


def make_initial_data(p: FlowParams, grid: Grid2D, seed: int = 0,
                      spec: InitialSpec = InitialSpec()) -> tuple[State2D, dict]:
    """Initial perturbation rescaled so that |.|_{H^5} + |(phi, m2)|_{L^1} = norm_target * mu^alpha."""
    from scipy.optimize import brentq

    from .zero_mode_waves import eigen_frame, reconstruct

    if spec.kind not in ("full", "zero_only", "nonzero_only"):
        raise ValueError(f"unknown initial data kind {spec.kind!r}")
    ops = SpectralOps(grid)
    y = grid.grid1d.y
    nx = grid.n_x
    u = np.zeros((3,) + ops.shape_r, dtype=complex)
    if spec.kind != "nonzero_only":
        frame = eigen_frame(p)
        sig = spec.width
        centers = (-p.cbar, p.cbar) if spec.layout == "wave" else (0.0, 0.0)
        if spec.layout not in ("wave", "centered"):
            raise ValueError(f"unknown layout {spec.layout!r}")
        g = np.stack([m * np.exp(-((y - c) ** 2) / (2 * sig * sig)) / math.sqrt(2 * math.pi * sig * sig)
                      for m, c in zip(spec.masses, centers)])
        rho_p, mom = reconstruct(g, frame)
        zero = np.zeros((3, nx, grid.n_y))
        zero[0] += rho_p[None, :]
        zero[2] += (mom / (1.0 + rho_p))[None, :]
        u += ops.to_spec(zero)
    if spec.kind != "zero_only":
        rng = np.random.default_rng(seed)
        kk = np.abs(ops.k)[:, None]
        sel = (kk >= 1) & (kk <= spec.band_k) & (ops.eta[None, :] <= spec.band_eta) & ops.mask
        if not np.any(sel):
            raise ParamError("requested norm unreachable: the non-zero band contains no grid modes")
        coeff = (rng.standard_normal((3,) + ops.shape_r) + 1j * rng.standard_normal((3,) + ops.shape_r))
        coeff *= sel[None]
        nz = ops.to_spec(ops.to_phys(coeff))  # enforce Hermitian symmetry
        nz[:, 0, :] = 0.0
        nrm = _h5_norm(ops, nz)
        if nrm == 0:
            raise ParamError("requested norm unreachable: empty non-zero band")
        zn = _h5_norm(ops, u) or 1.0
        u += nz * (spec.nonzero_weight * zn / nrm if spec.kind == "full" else 1.0)
    if not np.any(u):
        raise ParamError("requested norm unreachable: the data shape is identically zero")
    target = spec.norm_target * p.amplitude
    f = lambda s: _data_norm(ops, s * u)[0] - target
    s1 = target / _data_norm(ops, u)[0]
    lo, hi = 0.5 * s1, 2.0 * s1
    while f(hi) < 0:
        hi *= 2.0
    scale = brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=200)
    u = u * scale
    total, h5, l1 = _data_norm(ops, u)
    dy = grid.grid1d.dy
    phys0 = ops.to_phys(u)
    w0 = np.stack([phys0[0].mean(axis=0), (phys0[2] * (1 + phys0[0])).mean(axis=0)])
    from .zero_mode_waves import wave_masses

    info = {"norm": total, "h5": h5, "l1": l1, "target": target, "scale": scale,
            "wave_masses": wave_masses(w0, p, dy).tolist()}
    return State2D(0.0, "moving", u), info


# ---------------------------------------------------------------------------
# zero-mode extraction


def zero_mode_profiles(state: State2D, grid: Grid2D):
    """x-averaged phi, psi1, psi2 and the x-averaged wall-normal momentum."""
    from .zero_mode_waves import ZeroModeProfile

    ops = SpectralOps(grid)
    zr = sfft.irfft(state.coeffs[:, 0, :], n=grid.n_y, axis=-1) / grid.n_x
    phys = ops.to_phys(state.coeffs) if np.any(state.coeffs[:, 1:, :]) else None
    if phys is None:
        mom2 = (1.0 + zr[0]) * zr[2]
    else:
        mom2 = ((1.0 + phys[0]) * phys[2]).mean(axis=0)
    return ZeroModeProfile(t=state.t, phi=zr[0], psi1=zr[1], psi2=zr[2], mom2=mom2)


# ---------------------------------------------------------------------------
# evolution driver


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    final_state: State2D | None = None

    def record(self, t: float, values: dict, state: State2D | None):
        if self.times and not t > self.times[-1]:
            raise ValueError("trajectory times must increase strictly")
        self.times.append(float(t))
        for k, v in values.items():
            self.series.setdefault(k, []).append(float(v))
        if state is not None:
            self.states.append(state.copy())


def evolve(initial: State2D, p: FlowParams, grid: Grid2D, T: float,
           dt: float | Callable[[float], float], *, sample_times=None,
           observers: dict | None = None, store_states: bool = False,
           opts: StepOptions = StepOptions(), check_wrap: bool = True,
           callback: Callable[[State2D], None] | None = None) -> Trajectory:
    """Advance to time T; record observers at the first step reaching each sample time.

    ``dt`` may be a function of t (e.g. a growing schedule).  A density
    collapse or blow-up stops the run early; the reason is kept in ``meta``.
    """
    if check_wrap and T > 0:
        check_no_wrap(p, grid, T)
    stepper = Stepper(p, grid, opts)
    observers = observers or {}
    traj = Trajectory(meta={"params": p.as_dict(), "grid": [grid.n_x, grid.n_y, grid.l_y],
                            "T": T, "status": "completed"})
    samples = sorted(set(float(s) for s in (sample_times if sample_times is not None else [])))
    samples = [s for s in samples if s <= T + 1e-12]
    sched = dt if callable(dt) else (lambda t, d=float(dt): d)
    h0 = sched(initial.t)
    if not h0 > 0:
        raise ValueError("dt must be positive")
    gate = cfl_limit(initial, p, grid, opts.acoustic_gate, stepper.ops)
    if h0 > gate:
        kind = "acoustic/CFL" if opts.acoustic_gate else "CFL"
        raise ParamError(f"dt={h0:.4g} exceeds the {kind} stability bound {gate:.4g}")

    def observe(s: State2D):
        vals = {name: fn(s) for name, fn in observers.items()}
        traj.record(s.t, vals, s if store_states else None)
        if callback is not None:
            callback(s)

    state = initial
    observe(state)
    nxt = 0
    while nxt < len(samples) and samples[nxt] <= state.t + 1e-12:
        nxt += 1
    while state.t < T - 1e-12:
        h = min(sched(state.t), T - state.t)
        try:
            state = stepper.step(state, h)
        except NumericalAbort as exc:
            traj.meta["status"] = exc.kind
            traj.meta["message"] = str(exc)
            traj.meta["t_abort"] = state.t
            break
        if nxt < len(samples) and state.t >= samples[nxt] - 1e-12:
            observe(state)
            while nxt < len(samples) and samples[nxt] <= state.t + 1e-12:
                nxt += 1
    traj.meta["final_t"] = state.t
    traj.meta["active_rows"] = len(stepper.rows)
    traj.meta["magnus_evals"] = stepper.prop.stats["magnus_evals"]
    traj.final_state = state
    return traj


# ---------------------------------------------------------------------------
# snapshots

_MAGIC = b"CNSV1\x00\x00\x00"
_HEADER = struct.Struct("<8sqqddq16x")
assert _HEADER.size == 64


def full_spectrum(state: State2D, grid: Grid2D) -> np.ndarray:
    """(3, n_x, n_y) complex coefficients in numpy ``fft2`` ordering."""
    f = sfft.irfft2(state.coeffs, s=grid.shape, axes=(-2, -1))
    return sfft.fft2(f, axes=(-2, -1))


def write_snapshot(path, state: State2D, grid: Grid2D, meta: dict | None = None) -> None:
    """64-byte header then (phi, psi1, psi2) spectra as little-endian (re, im) float64 pairs.

    A JSON sidecar ``<path>.json`` carries the provenance header.
    """
    spec = full_spectrum(state, grid)
    tag = 0 if state.frame == "lab" else 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, grid.n_x, grid.n_y, grid.l_y, state.t, tag))
        fh.write(np.ascontiguousarray(spec).astype("<c16").tobytes())
    side = dict(meta or {})
    side.update({"t": state.t, "frame": state.frame, "n_x": grid.n_x, "n_y": grid.n_y,
                 "l_y": grid.l_y,
                 "sha256": hashlib.sha256(spec.astype("<c16").tobytes()).hexdigest()})
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def read_snapshot(path) -> tuple[State2D, tuple[int, int, float]]:
    with open(path, "rb") as fh:
        head = fh.read(64)
        magic, nx, ny, ly, t, tag = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError("not a field snapshot (bad magic)")
        data = np.frombuffer(fh.read(), dtype="<c16")
    spec = data.reshape(3, nx, ny)
    f = sfft.ifft2(spec, axes=(-2, -1)).real
    coeffs = sfft.rfft2(f, axes=(-2, -1))
    return State2D(t, "lab" if tag == 0 else "moving", coeffs), (int(nx), int(ny), float(ly))
