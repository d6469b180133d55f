"""One-dimensional wave ansatz for the x-averaged (zero-mode) fields.

The zero-mode density/momentum pair is split along the acoustic eigenvectors
into two scalar waves travelling with speeds -c and +c.  Each carries a viscous
Burgers profile (closed form), a coupled correction Xi driven by quadratic
interactions, a derivative correction, and the streamwise velocity carries a
heat-equation profile theta_A that absorbs the lift-up forcing.

Time integration of the Xi and theta_A equations uses an exponential
trapezoid rule in Fourier space.  Every source term is interpolated in the
frame moving with the wave that carries it, which keeps the quadrature error
tied to the slow self-similar decay instead of the fast translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.special import erfc

from .params_grid import FlowParams, Grid1D, check_no_wrap

_FFT_WORKERS = -1


class WaveError(RuntimeError):
    """Numerical failure while constructing a wave family."""


# ---------------------------------------------------------------------------
# eigen-decomposition of the acoustic system


@dataclass(frozen=True)
class EigenFrame:
    L: np.ndarray
    R: np.ndarray
    sigma: np.ndarray

    @property
    def identity_error(self) -> float:
        return float(np.max(np.abs(self.L @ self.R - np.eye(2))))


def eigen_frame(p: FlowParams) -> EigenFrame:
    c = p.cbar
    a = p.a_coeff
    L = np.array([[-1.0, 1.0 / c], [1.0, 1.0 / c]]) / (2.0 * a)
    R = a * np.array([[-1.0, 1.0], [c, c]])
    # R carries a factor a and L a factor 1/a, so L @ R = I for any a
    return EigenFrame(L=L, R=R, sigma=np.array([-c, c]))


def diagonalize(w: np.ndarray, frame: EigenFrame) -> np.ndarray:
    """Map (density, momentum) profiles, shape (2, ...), to wave coordinates."""
    w = np.asarray(w)
    if w.shape[0] != 2:
        raise ValueError(f"expected leading dimension 2, got shape {w.shape}")
    return np.tensordot(frame.L, w, axes=(1, 0))


def reconstruct(v: np.ndarray, frame: EigenFrame) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[0] != 2:
        raise ValueError(f"expected leading dimension 2, got shape {v.shape}")
    return np.tensordot(frame.R, v, axes=(1, 0))


def wave_masses(w0: np.ndarray, p: FlowParams, dy: float) -> np.ndarray:
    """Masses eta_i = l_i . integral of w(y, 0)."""
    frame = eigen_frame(p)
    total = np.asarray(w0).sum(axis=-1) * dy
    return frame.L @ total


# ---------------------------------------------------------------------------
# closed-form Burgers waves


def _gamma_profile(z: np.ndarray, eta_i: float, mubar: float, order: int = 0):
    em1 = math.expm1(eta_i / mubar)
    if em1 == 0.0:
        return np.zeros_like(z, dtype=float)
    g = em1 * np.exp(-z * z) / (math.sqrt(math.pi) * (1.0 + 0.5 * em1 * erfc(z)))
    if order == 0:
        return g
    g1 = -2.0 * z * g + g * g
    if order == 1:
        return g1
    if order == 2:
        return -2.0 * g - 2.0 * z * g1 + 2.0 * g * g1
    raise ValueError("only derivatives up to order 2 have closed forms")


def hopf_cole_theta(i: int, eta_i: float, p: FlowParams, y, t: float, order: int = 0):
    """Burgers diffusion wave of side ``i`` (1 travels left, 2 right) and mass ``eta_i``.

    ``order`` selects the y-derivative (0, 1 or 2), all in closed form.
    """
    if i not in (1, 2):
        raise ValueError("side must be 1 or 2")
    if t < 0:
        raise ValueError("t must be non-negative")
    mubar = p.mubar
    tau = 1.0 + t
    sign = 1.0 if i == 1 else -1.0
    width = math.sqrt(2.0 * mubar * tau)
    z = (np.asarray(y, dtype=float) + sign * p.cbar * tau) / width
    scale = math.sqrt(mubar / (2.0 * tau)) / width**order
    return scale * _gamma_profile(z, eta_i, mubar, order)


def burgers_residual(i: int, eta_i: float, p: FlowParams, y, t: float, dt: float = 1e-3,
                     dy: float | None = None) -> np.ndarray:
    """Fourth-order finite-difference residual of the Burgers equation for theta_i."""
    y = np.asarray(y, dtype=float)
    if dy is None:
        dy = 1e-2 * math.sqrt(p.mubar * (1.0 + t))
    f = lambda yy, tt: hopf_cole_theta(i, eta_i, p, yy, tt)
    th_t = (-f(y, t + 2 * dt) + 8 * f(y, t + dt) - 8 * f(y, t - dt) + f(y, t - 2 * dt)) / (12 * dt)
    q = lambda yy: 0.5 * f(yy, t) ** 2
    flux = (-q(y + 2 * dy) + 8 * q(y + dy) - 8 * q(y - dy) + q(y - 2 * dy)) / (12 * dy)
    th_y = (-f(y + 2 * dy, t) + 8 * f(y + dy, t) - 8 * f(y - dy, t) + f(y - 2 * dy, t)) / (12 * dy)
    th_yy = (-f(y + 2 * dy, t) + 16 * f(y + dy, t) - 30 * f(y, t) + 16 * f(y - dy, t)
             - f(y - 2 * dy, t)) / (12 * dy * dy)
    sigma = -p.cbar if i == 1 else p.cbar
    return th_t + sigma * th_y + flux - 0.5 * p.mubar * th_yy


def lp_norm(f: np.ndarray, dy: float, pnorm: float) -> float:
    if math.isinf(pnorm):
        return float(np.max(np.abs(f)))
    return float((np.sum(np.abs(f) ** pnorm) * dy) ** (1.0 / pnorm))


def theta_lp_scaling(i: int, eta_i: float, p: FlowParams, grid: Grid1D, times,
                     k: int = 0, pnorm: float = 2.0) -> float:
    """Log-log slope of the L^p norm of the k-th derivative of theta_i against 1 + t."""
    times = np.asarray(times, dtype=float)
    if times.size < 8:
        raise ValueError(f"need at least 8 samples to fit a scaling exponent, got {times.size}")
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    y = grid.y
    vals = [lp_norm(hopf_cole_theta(i, eta_i, p, y, t, order=k), grid.dy, pnorm) for t in times]
    slope, _ = np.polyfit(np.log1p(times), np.log(vals), 1)
    return float(slope)


def heat_kernel(y, t: float, c: float = 0.0, nu: float = 1.0):
    """Gaussian of variance nu*t centred at c*t (fundamental solution of u_t + c u_y = (nu/2) u_yy)."""
    if not t > 0:
        raise ValueError(f"heat kernel needs t > 0, got {t}")
    if not nu > 0:
        raise ValueError(f"heat kernel needs nu > 0, got {nu}")
    y = np.asarray(y, dtype=float)
    return np.exp(-((y - c * t) ** 2) / (2.0 * nu * t)) / math.sqrt(2.0 * math.pi * nu * t)


# ---------------------------------------------------------------------------
# spectral helpers on the periodized line


class Spectral1D:
    """Real FFT helpers bound to one grid."""

    def __init__(self, grid: Grid1D):
        self.grid = grid
        self.n = grid.n_y
        self.eta = 2.0 * np.pi * np.fft.rfftfreq(self.n, d=grid.dy)
        self.ik = 1j * self.eta
        self.ik[-1] = 0.0  # drop the Nyquist mode from odd derivatives
        # Fourier phase convention: transforms are taken relative to y[0],
        # so a shift by d multiplies mode eta by exp(-i eta d).

    def fwd(self, f):
        return sfft.rfft(f, workers=_FFT_WORKERS)

    def inv(self, fh):
        return sfft.irfft(fh, n=self.n, workers=_FFT_WORKERS)

    def dy(self, f, order: int = 1):
        fh = self.fwd(f)
        if order % 2:
            fh = fh * self.ik**order
        else:
            fh = fh * (-(self.eta**2)) ** (order // 2)
        return self.inv(fh)

    def shift(self, fh, d):
        """Translate by +d (profile value at y moves to y + d)."""
        return fh * np.exp(-1j * self.eta * d)


def antiderivative(f: np.ndarray, grid: Grid1D, mass_tol: float | None = None) -> np.ndarray:
    """Cumulative integral from the left edge of a zero-mass profile.

    Computed spectrally so that differentiating the result returns ``f`` to
    round-off; the constant is fixed so the left edge value is 0.
    """
    f = np.asarray(f, dtype=float)
    dy = grid.dy
    l1 = float(np.sum(np.abs(f)) * dy)
    if l1 == 0.0:
        return np.zeros_like(f)
    mass = float(np.sum(f) * dy)
    tol = 1e-8 * l1 if mass_tol is None else mass_tol
    if abs(mass) >= tol:
        raise ValueError(
            f"anti-derivative requires zero-mass input (mass {mass:.3e}, tolerance {tol:.3e})"
        )
    sp = Spectral1D(grid)
    fh = sp.fwd(f - mass / (2.0 * grid.l_y))
    Fh = np.zeros_like(fh)
    Fh[1:-1] = fh[1:-1] / sp.ik[1:-1]
    F = sp.inv(Fh)
    return F - F[0]


# ---------------------------------------------------------------------------
# exponential trapezoid on co-moving sources


def phi_functions(z: np.ndarray):
    """phi_1(z) = (e^z - 1)/z and phi_2(z) = (e^z - 1 - z)/z^2, stable near 0."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 0.2
    p1 = np.empty_like(z)
    p2 = np.empty_like(z)
    zb = z[~small]
    e = np.expm1(zb)
    p1[~small] = e / zb
    p2[~small] = (e - zb) / (zb * zb)
    zs = z[small]
    t1 = np.zeros_like(zs)
    t2 = np.zeros_like(zs)
    term = np.ones_like(zs)
    fact1, fact2 = 1.0, 2.0
    for m in range(12):
        t1 += term / fact1
        t2 += term / fact2
        term = term * zs
        fact1 *= m + 2
        fact2 *= m + 3
    p1[small] = t1
    p2[small] = t2
    return p1, p2


class _StepCoeffs:
    """Cached exp/phi tables for one linear symbol and one step size."""

    def __init__(self, L: np.ndarray, eta: np.ndarray, h: float, carriers):
        self.E = np.exp(L * h)
        self.terms = {}
        for c in carriers:
            z = (L + 1j * c * eta) * h
            p1, p2 = phi_functions(z)
            r = np.exp(-1j * c * eta * h)
            self.terms[c] = (h * (p1 - p2) * r, h * p2)

    def apply(self, u0, src0: dict, src1: dict):
        out = self.E * u0
        for c, (w0, w1) in self.terms.items():
            s0 = src0.get(c)
            s1 = src1.get(c)
            if s0 is not None:
                out = out + w0 * s0
            if s1 is not None:
                out = out + w1 * s1
        return out


def _coeff_cache_key(h):
    return round(h, 14)


# ---------------------------------------------------------------------------
# coupled waves Xi and the streamwise profile theta_A


@dataclass
class WaveSet:
    """All ansatz profiles at one time instant (arrays over the y grid)."""

    t: float
    theta: np.ndarray  # (2, n)
    xi: np.ndarray  # (2, n)
    c_tilde: np.ndarray  # (2, n)
    curly_c: np.ndarray  # (2, n)
    theta_A: np.ndarray
    V_tilde: np.ndarray | None = None  # (2, n)
    xi_tilde: np.ndarray | None = None  # (2, n)
    curly_A: np.ndarray | None = None

    def masses(self, dy: float) -> dict:
        return {
            "theta": (self.theta.sum(axis=1) * dy).tolist(),
            "xi": (self.xi.sum(axis=1) * dy).tolist(),
        }


@dataclass
class ZeroModeProfile:
    """x-averages of density, velocities and wall-normal momentum."""

    t: float
    phi: np.ndarray
    psi1: np.ndarray
    psi2: np.ndarray
    mom2: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return np.stack([self.phi, self.mom2])

    def consistency_gap(self) -> float:
        """max |mom2 - (1 + phi) psi2|; zero when no non-zero modes are present."""
        return float(np.max(np.abs(self.mom2 - (1.0 + self.phi) * self.psi2)))


def corrections(theta: np.ndarray, xi: np.ndarray, p: FlowParams, grid: Grid1D):
    """Derivative corrections C~_i and combined profiles C_i = theta_i + Xi_i + C~_i."""
    sp = Spectral1D(grid)
    coef = p.mubar / (4.0 * p.cbar)
    d = np.stack([sp.dy(theta[k] + xi[k]) for k in range(2)])
    c_tilde = np.stack([-coef * d[1], coef * d[0]])
    return c_tilde, theta + xi + c_tilde


def tilde_v(v: np.ndarray, curly_c: np.ndarray, dy: float | None = None):
    """Remainder v_i - C_i; with ``dy`` also returns its masses."""
    vt = np.asarray(v) - np.asarray(curly_c)
    if dy is None:
        return vt
    return vt, vt.sum(axis=-1) * dy


def assemble_curly_A(psi1, V_tilde, xi_tilde, theta_A, p: FlowParams):
    """Streamwise zero mode with the lift-up profile and theta_A removed."""
    a = p.a_coeff
    return (np.asarray(psi1) - a * (V_tilde[1] - V_tilde[0] + xi_tilde[1] - xi_tilde[0])
            - np.asarray(theta_A))


def cancellation_source(theta, xi, c_tilde, p: FlowParams, v_tilde=None):
    """Quadratic source left after the wave construction, evaluated pointwise.

    With ``v_tilde`` omitted the zero-mode fields are built from the ansatz
    alone.  Returns (source, theta-quadratic reference |theta_1|^2/2+|theta_2|^2/2).
    """
    frame = eigen_frame(p)
    v = theta + xi + c_tilde
    if v_tilde is not None:
        v = v + v_tilde
    rho_p, mom = reconstruct(v, frame)
    e3 = -(p.ppp / (2.0 * p.mach**2)) * rho_p**2 - mom**2
    kap = p.kappa
    src = (e3 / (2.0 * p.a_coeff * p.cbar)
           + 0.5 * theta[0] ** 2 + 0.5 * theta[1] ** 2
           + theta[0] * xi[0] + theta[1] * xi[1]
           + kap * (theta[0] * xi[1] + theta[1] * xi[0]))
    return src, 0.5 * (theta[0] ** 2 + theta[1] ** 2)


def geometric_mesh(t0: float, t1: float, eps: float, h_max: float, h_min: float = 1e-6):
    """Step sizes h ~ eps (1 + t) between t0 and t1, landing exactly on t1.

    Steps are h_max / 2^j (the largest not above eps (1 + t)), so the exponential
    coefficients of a step size are computed once and reused.
    """
    ts = [t0]
    t = t0
    while t < t1 - 1e-13:
        raw = min(h_max, max(h_min, eps * (1.0 + t)))
        h = h_max * 2.0 ** math.floor(math.log2(raw / h_max) + 1e-12)
        n = max(1, math.ceil((t1 - t) / h - 1e-9))
        h = (t1 - t) / n if n <= 2 else h
        t = min(t1, t + h)
        ts.append(t)
    ts[-1] = t1
    return np.array(ts)


class WaveMarcher:
    """Advances Xi_1, Xi_2 and theta_A together on a shared time mesh.

    The remainder profiles v~_i, when supplied, are interpolated in the frame
    of their own wave between consecutive calls of :meth:`advance`.
    """

    def __init__(self, p: FlowParams, grid: Grid1D, masses, *, eps: float = 2e-3,
                 h_max: float = 2.0, tol: float = 1e-10, max_iter: int = 50,
                 with_theta_A: bool = True):
        self.p = p
        self.grid = grid
        self.masses = np.asarray(masses, dtype=float)
        self.sp = Spectral1D(grid)
        self.eps = eps
        self.h_max = h_max
        self.tol = tol
        self.max_iter = max_iter
        self.with_theta_A = with_theta_A
        c = p.cbar
        self.sig = (-c, c)
        eta = self.sp.eta
        self.L_xi = [-1j * s * eta - 0.5 * p.mubar * eta**2 for s in self.sig]
        self.L_A = -p.mu * eta**2 + 0j
        nr = eta.size
        self.t = 0.0
        self.xi_hat = np.zeros((2, nr), dtype=complex)
        self.thA_hat = np.zeros(nr, dtype=complex)
        self.vt_hat = None  # (2, nr) at self.t
        self._coeffs: dict = {}
        self._src_cache = None
        self._theta_memo: dict = {}
        self._vt_changed = False
        self.steps = 0
        self.max_picard = 0

    # ----- sources

    def theta(self, t: float) -> np.ndarray:
        y = self.grid.y
        return np.stack([hopf_cole_theta(i + 1, self.masses[i], self.p, y, t) for i in range(2)])

    def _xi_sources(self, th, xi_phys, th2_hat):
        """Per-carrier Fourier sources of the Xi equations (right-hand sides)."""
        kap = self.p.kappa
        P1 = th[0] * (xi_phys[0] + kap * xi_phys[1])
        P2 = th[1] * (xi_phys[1] + kap * xi_phys[0])
        P1h = self.sp.fwd(P1)
        P2h = self.sp.fwd(P2)
        ik = self.sp.ik
        s1, s2 = self.sig
        src1 = {s1: -ik * P1h, s2: -ik * (0.5 * th2_hat[1] + P2h)}
        src2 = {s1: -ik * (0.5 * th2_hat[0] + P1h), s2: -ik * P2h}
        return src1, src2, max(np.abs(P1).max(), np.abs(P2).max())

    def _thA_sources(self, th, xi_phys, thA_hat, vt_phys):
        p = self.p
        a, c, mu_b, lam = p.a_coeff, p.cbar, p.mubar, p.lam_value
        sp = self.sp
        coef = mu_b / (4.0 * c)
        dthxi = [sp.dy(th[k] + xi_phys[k]) for k in range(2)]
        ct1 = -coef * dthxi[1]  # located with wave 2
        ct2 = coef * dthxi[0]  # located with wave 1
        # groupings by location: wave-1 and wave-2 pieces of the combined profiles
        W1 = th[0] + xi_phys[0] + ct2
        W2 = th[1] + xi_phys[1] + ct1
        D1 = -th[0] + ct2  # pieces of C2 - Xi2 - C1 + Xi1
        D2 = th[1] - ct1
        G1 = ct2 - th[0] - xi_phys[0]  # pieces of C2 - C1
        G2 = th[1] + xi_phys[1] - ct1
        thA_y = sp.inv(sp.ik * thA_hat)
        s1, s2 = self.sig
        f1 = (-a * c * (th[0] + ct2) + 0.5 * a * th[0] ** 2
              - a * c * W1 * thA_y + a * a * c * W1 * D1)
        f2 = (-a * c * (th[1] + ct1) - 0.5 * a * th[1] ** 2
              - a * c * W2 * thA_y + a * a * c * W2 * D2)
        f0 = a * a * c * (W1 * D2 + W2 * D1)
        if vt_phys is not None:
            f1 = f1 - a * c * vt_phys[0] * thA_y + a * a * c * vt_phys[0] * G1
            f2 = f2 - a * c * vt_phys[1] * thA_y + a * a * c * vt_phys[1] * G2
            f0 = f0 + a * a * c * (vt_phys[0] * G2 + vt_phys[1] * G1)
        xi1h = sp.fwd(xi_phys[0])
        xi2h = sp.fwd(xi_phys[1])
        lam_term = -0.5 * a * lam * sp.ik
        return {
            s1: sp.fwd(f1) + lam_term * (-xi1h),
            s2: sp.fwd(f2) + lam_term * xi2h,
            0.0: sp.fwd(f0),
        }

    def _coeff(self, kind: str, h: float, idx: int = 0):
        key = (kind, idx, _coeff_cache_key(h))
        if key not in self._coeffs:
            if len(self._coeffs) > 64:
                self._coeffs.clear()
            eta = self.sp.eta
            if kind == "xi":
                self._coeffs[key] = _StepCoeffs(self.L_xi[idx], eta, h, self.sig)
            else:
                self._coeffs[key] = _StepCoeffs(self.L_A, eta, h, (self.sig[0], 0.0, self.sig[1]))
        return self._coeffs[key]

    def _theta_pair(self, t):
        """theta profiles and the transforms of their squares, memoized per time level."""
        hit = self._theta_memo.get(t)
        if hit is None:
            th = self.theta(t)
            th2h = np.stack([self.sp.fwd(th[0] ** 2), self.sp.fwd(th[1] ** 2)])
            if len(self._theta_memo) > 2:
                self._theta_memo.pop(next(iter(self._theta_memo)))
            hit = self._theta_memo[t] = (th, th2h)
        return hit

    def _sources_at(self, t, xi_hat, thA_hat, vt_phys):
        th, th2h = self._theta_pair(t)
        xi_phys = np.stack([self.sp.inv(xi_hat[0]), self.sp.inv(xi_hat[1])])
        s1, s2, pmax = self._xi_sources(th, xi_phys, th2h)
        sa = self._thA_sources(th, xi_phys, thA_hat, vt_phys) if self.with_theta_A else None
        return th, th2h, (s1, s2), sa, pmax

    # ----- marching

    def _step(self, h: float, vt1_phys):
        t0 = self.t
        t1 = t0 + h
        if self._src_cache is None or self._src_cache[0] != t0 or self._vt_changed:
            vt0 = None if self.vt_hat is None else np.stack([self.sp.inv(v) for v in self.vt_hat])
            self._src_cache = (t0,) + self._sources_at(t0, self.xi_hat, self.thA_hat, vt0)
        _, th0, th2h0, xs0, sa0, _ = self._src_cache
        cx = [self._coeff("xi", h, 0), self._coeff("xi", h, 1)]
        ca = self._coeff("A", h) if self.with_theta_A else None
        # predictor: freeze the sources at t0 translated with their carriers
        xi_new = np.stack([cx[i].apply(self.xi_hat[i], xs0[i], {}) for i in range(2)])
        th_new = self.thA_hat
        if self.with_theta_A:
            th_new = ca.apply(self.thA_hat, sa0, {})
        prev_norm = None
        for it in range(self.max_iter):
            _, th2h1, xs1, sa1, pmax = self._sources_at(t1, xi_new, th_new, vt1_phys)
            xi_next = np.stack([cx[i].apply(self.xi_hat[i], xs0[i], xs1[i]) for i in range(2)])
            th_next = th_new
            if self.with_theta_A:
                th_next = ca.apply(self.thA_hat, sa0, sa1)
            diff = math.sqrt(np.sum(np.abs(xi_next - xi_new) ** 2) + np.sum(np.abs(th_next - th_new) ** 2))
            size = math.sqrt(np.sum(np.abs(xi_next) ** 2) + np.sum(np.abs(th_next) ** 2))
            xi_new, th_new = xi_next, th_next
            if not np.isfinite(diff):
                raise WaveError(f"Picard iteration produced non-finite values (largest source {pmax:.3e})")
            if diff <= self.tol * max(size, 1e-300) or size == 0.0:
                self.max_picard = max(self.max_picard, it + 1)
                break
            if prev_norm is not None and diff > prev_norm and it > 3:
                raise WaveError(
                    f"Picard iteration is not contracting at t={t1:.4g}: "
                    f"largest source amplitude {pmax:.3e}"
                )
            prev_norm = diff
        else:
            raise WaveError(f"Picard iteration did not converge in {self.max_iter} sweeps "
                            f"(largest source amplitude {pmax:.3e})")
        self.xi_hat, self.thA_hat = xi_new, th_new
        self.t = t1
        # sources of the last iterate agree with the converged state to ``tol``
        self._src_cache = (t1, None, th2h1, xs1, sa1, pmax)
        self.steps += 1

    def advance(self, t_target: float, vt_target=None):
        """March to ``t_target``; ``vt_target`` is the (2, n) remainder profile there."""
        if t_target < self.t - 1e-13:
            raise ValueError("cannot march backwards")
        if t_target <= self.t:
            return
        mesh = geometric_mesh(self.t, t_target, self.eps, self.h_max)
        vt_end_hat = None
        self._vt_changed = (vt_target is None) != (self.vt_hat is None)
        if vt_target is not None:
            vt_end_hat = np.stack([self.sp.fwd(v) for v in np.asarray(vt_target)])
        t_start = self.t
        vt_start_hat = self.vt_hat
        span = t_target - t_start
        for t_next in mesh[1:]:
            vt1 = None
            if vt_end_hat is not None:
                vt1 = self._interp_vt(vt_start_hat, vt_end_hat, t_start, span, t_next)
            self._step(t_next - self.t, vt1)
            self._vt_changed = False
        self.vt_hat = vt_end_hat

    def _interp_vt(self, start_hat, end_hat, t_start, span, t):
        w = (t - t_start) / span
        out = []
        for i, s in enumerate(self.sig):
            e = self.sp.shift(end_hat[i], -s * (t_start + span - t))
            if start_hat is None:
                vh = w * e
            else:
                b = self.sp.shift(start_hat[i], s * (t - t_start))
                vh = (1.0 - w) * b + w * e
            out.append(self.sp.inv(vh))
        return np.stack(out)

    # ----- outputs

    def xi(self) -> np.ndarray:
        return np.stack([self.sp.inv(self.xi_hat[k]) for k in range(2)])

    def xi_tilde(self) -> np.ndarray:
        out = []
        for k in range(2):
            fh = self.xi_hat[k]
            Fh = np.zeros_like(fh)
            Fh[1:-1] = fh[1:-1] / self.sp.ik[1:-1]
            F = self.sp.inv(Fh)
            out.append(F - F[0])
        return np.stack(out)

    def theta_A(self) -> np.ndarray:
        return self.sp.inv(self.thA_hat)

    def waveset(self, v=None, psi1=None) -> WaveSet:
        th = self.theta(self.t)
        xi = self.xi()
        ct, cc = corrections(th, xi, self.p, self.grid)
        ws = WaveSet(t=self.t, theta=th, xi=xi, c_tilde=ct, curly_c=cc,
                     theta_A=self.theta_A(), xi_tilde=self.xi_tilde())
        if v is not None:
            vt = tilde_v(v, cc)
            ws.V_tilde = np.stack([antiderivative(vt[k], self.grid, mass_tol=np.inf)
                                   for k in range(2)])
            if psi1 is not None:
                ws.curly_A = assemble_curly_A(psi1, ws.V_tilde, ws.xi_tilde, ws.theta_A, self.p)
        return ws


@dataclass
class WaveFamily:
    times: np.ndarray
    xi: np.ndarray  # (nt, 2, n)
    xi_tilde: np.ndarray
    theta_A: np.ndarray  # (nt, n)
    stats: dict = field(default_factory=dict)


def _march_family(p, grid, masses, times, eps, h_max, tol, with_theta_A, check_wrap=True):
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValueError("times must be non-negative and strictly increasing")
    if check_wrap:
        check_no_wrap(p, grid, float(times[-1]))
    m = WaveMarcher(p, grid, masses, eps=eps, h_max=h_max, tol=tol, with_theta_A=with_theta_A)
    xs, xts, tas = [], [], []
    for t in times:
        m.advance(float(t))
        xs.append(m.xi())
        xts.append(m.xi_tilde())
        tas.append(m.theta_A())
    return WaveFamily(times=times, xi=np.array(xs), xi_tilde=np.array(xts), theta_A=np.array(tas),
                      stats={"steps": m.steps, "max_picard": m.max_picard})


def solve_coupled_xi(p: FlowParams, grid: Grid1D, masses, times, *, eps: float = 2e-3,
                     h_max: float = 2.0, tol: float = 1e-10) -> WaveFamily:
    """Coupled waves Xi_1, Xi_2 (zero initial data) sampled at ``times``."""
    return _march_family(p, grid, masses, times, eps, h_max, tol, with_theta_A=False)


def solve_theta_A(p: FlowParams, grid: Grid1D, masses, times, *, eps: float = 2e-3,
                  h_max: float = 2.0, tol: float = 1e-10) -> WaveFamily:
    """theta_A (and the Xi family it depends on) with the remainder v~ set to zero."""
    return _march_family(p, grid, masses, times, eps, h_max, tol, with_theta_A=True)


def xi_residual(p: FlowParams, grid: Grid1D, masses, t: float, *, dt: float = 1e-2,
                eps: float = 2e-3, h_max: float = 2.0, interior: float = 0.8):
    """Relative residual of the Xi and theta_A equations at time ``t``.

    The families are marched to five equally spaced times around ``t`` and the
    time derivative is taken with a fourth-order stencil; space derivatives are
    spectral.  Returns {"xi1", "xi2", "theta_A"} -> residual / largest term.
    """
    if t - 2 * dt <= 0:
        raise ValueError("t must exceed 2*dt")
    ts = t + dt * np.arange(-2, 3)
    fam = solve_theta_A(p, grid, masses, ts, eps=eps, h_max=h_max)
    sp = Spectral1D(grid)
    w = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * dt)
    xi_t = np.tensordot(w, fam.xi, axes=(0, 0))
    thA_t = np.tensordot(w, fam.theta_A, axes=(0, 0))
    y = grid.y
    th = np.stack([hopf_cole_theta(i + 1, masses[i], p, y, t) for i in range(2)])
    xi = fam.xi[2]
    thA = fam.theta_A[2]
    kap = p.kappa
    G = th[0] * xi[0] + th[1] * xi[1] + kap * (th[0] * xi[1] + th[1] * xi[0])
    mask = np.abs(y) < interior * grid.l_y
    out = {}
    for i, (sig, other) in enumerate(((-p.cbar, 1), (p.cbar, 0))):
        terms = [xi_t[i], sig * sp.dy(xi[i]), sp.dy(0.5 * th[other] ** 2 + G),
                 -0.5 * p.mubar * sp.dy(xi[i], 2)]
        res = sum(terms)
        scale = max(np.max(np.abs(tt[mask])) for tt in terms)
        out[f"xi{i + 1}"] = float(np.max(np.abs(res[mask])) / scale) if scale > 0 else 0.0
    ct, cc = corrections(th, xi, p, grid)
    a, c = p.a_coeff, p.cbar
    thA_y = sp.dy(thA)
    rhs_terms = [
        -a * c * (cc[0] + cc[1] - xi[0] - xi[1]),
        -0.5 * a * p.lam_value * sp.dy(xi[1] - xi[0]),
        0.5 * a * (th[0] ** 2 - th[1] ** 2),
        -a * c * (cc[0] + cc[1]) * thA_y,
        a * a * c * (cc[0] + cc[1]) * (cc[1] - xi[1] - cc[0] + xi[0]),
    ]
    lhs_terms = [thA_t, -p.mu * sp.dy(thA, 2)]
    res = sum(lhs_terms) - sum(rhs_terms)
    scale = max(np.max(np.abs(tt[mask])) for tt in lhs_terms + rhs_terms)
    out["theta_A"] = float(np.max(np.abs(res[mask])) / scale) if scale > 0 else 0.0
    return out
