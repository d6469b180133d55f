"""Time-dependent Fourier weights m1, m2, omega and the weighted energy.

All symbols live on the sheared lattice (t, k, eta) with k != 0.  The
weights are evaluated in log form because m2 ranges over
exp(+-N pi/2), far outside double precision for the default N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

BRANCH_ONE, BRANCH_FAR, BRANCH_MID, BRANCH_CAP = 1, 2, 3, 4


@dataclass(frozen=True)
class MultiplierConfig:
    mu: float
    mach: float = 1.0
    vartheta: float = 1024.0
    C0: float = 2000.0
    C0_prime: float = 20.0
    delta: float = 0.5

    @property
    def N(self) -> float:
        return self.C0 * max(1.0, self.mach**4)

    @property
    def C_tilde(self) -> float:
        return self.C0_prime * max(1.0, self.mach**4)

    @property
    def vartheta_1(self) -> float:
        th = self.vartheta
        return max(2.0 / (th * (th * th - 1.0)), 4.0 / th)

    @property
    def omega_max(self) -> float:
        return 1.0 + self.vartheta**2 * self.mu ** (-2.0 / 3.0)

    @property
    def gamma(self) -> float:
        return self.mach * self.mu ** (1.0 / 3.0) / 4.0

    def violated_hypotheses(self) -> list[str]:
        out = []
        if not self.vartheta > 1000:
            out.append(f"vartheta = {self.vartheta} must exceed 1000")
        if not (self.vartheta_1 < self.delta < 1):
            out.append(
                f"delta = {self.delta} must lie in (vartheta_1, 1) = ({self.vartheta_1:.4g}, 1)"
            )
        if not (10 <= self.C0_prime <= self.C0 / 100):
            out.append(f"C0' = {self.C0_prime} must satisfy 10 <= C0' <= C0/100 = {self.C0 / 100}")
        if self.mu <= 0:
            out.append("mu must be positive")
        return out


@numba.njit(cache=True)
def _rates(mu13, N, width, cap, t, k, eta):
    """Rational part of the symbols: (s, p, dtp, omega, dlog m1, dlog m2, dlog omega, branch).

    Everything is written through s = t - eta/k, using p = k^2 (1 + s^2)
    and d_t p = 2 k^2 s.
    """
    r = eta / k
    s = t - r
    q = 1.0 + s * s
    k2 = k * k
    p = k2 * q
    dtp = 2.0 * k2 * s
    dlm1 = 2.0 * mu13 / (mu13 * mu13 * s * s + 1.0)
    dlm2 = N / q
    if eta * k > 0 and t >= 0 and t <= r:
        om = 1.0
        dlom = 0.0
        br = 1
    elif eta * k <= 0 and abs(r) >= width and t >= 0:
        om = cap
        dlom = 0.0
        br = 2
    elif t >= r and t < r + width:
        om = q
        dlom = 2.0 * s / q
        br = 3
    else:
        om = cap
        dlom = 0.0
        br = 4
    return s, p, dtp, om, dlm1, dlm2, dlom, br


@numba.njit(cache=True)
def _point(mu, N, vartheta, t, k, eta):
    """Return (p, dtp, log m1, log m2, omega, dlog m1, dlog m2, dlog omega, branch)."""
    mu13 = mu ** (1.0 / 3.0)
    width = vartheta / mu13
    cap = 1.0 + vartheta * vartheta / (mu13 * mu13)
    s, p, dtp, om, dlm1, dlm2, dlom, br = _rates(mu13, N, width, cap, t, k, eta)
    lm1 = 2.0 * math.atan(mu13 * s)
    lm2 = N * math.atan(s)
    return p, dtp, lm1, lm2, om, dlm1, dlm2, dlom, br


@numba.njit(cache=True)
def _symbols_flat(mu, N, vartheta, t, k, eta, out):
    for i in range(t.size):
        p, dtp, lm1, lm2, om, d1, d2, d3, br = _point(mu, N, vartheta, t[i], k[i], eta[i])
        out[0, i] = p
        out[1, i] = dtp
        out[2, i] = lm1
        out[3, i] = lm2
        out[4, i] = om
        out[5, i] = d1
        out[6, i] = d2
        out[7, i] = d3
        out[8, i] = br


@dataclass
class SymbolGrid:
    t: np.ndarray
    k: np.ndarray
    eta: np.ndarray
    p: np.ndarray
    dtp: np.ndarray
    log_m1: np.ndarray
    log_m2: np.ndarray
    omega: np.ndarray
    dlog_m1: np.ndarray
    dlog_m2: np.ndarray
    dlog_omega: np.ndarray
    branch: np.ndarray

    @property
    def m1(self):
        return np.exp(self.log_m1)

    @property
    def m2(self):
        return np.exp(self.log_m2)

    def log_Q(self, n: int, power: float | None = None) -> np.ndarray:
        """log of m1^-1 m2^-1 omega^-(3+2n)/4 p^(power/2); power defaults to n."""
        power = n if power is None else power
        return (-self.log_m1 - self.log_m2 - (3 + 2 * n) / 4.0 * np.log(self.omega)
                + 0.5 * power * np.log(self.p))


def eval_symbols(cfg: MultiplierConfig, t, k, eta) -> SymbolGrid:
    """Closed-form p, d_t p, m1, m2, omega and their log-derivatives (broadcasting)."""
    t, k, eta = np.broadcast_arrays(np.asarray(t, float), np.asarray(k, float),
                                    np.asarray(eta, float))
    if np.any(k == 0):
        raise ValueError("multipliers are defined on non-zero modes only (k = 0 given)")
    shape = t.shape
    out = np.empty((9, t.size))
    _symbols_flat(cfg.mu, cfg.N, cfg.vartheta, t.ravel().copy(), k.ravel().copy(),
                  eta.ravel().copy(), out)
    f = [o.reshape(shape) for o in out]
    return SymbolGrid(t, k, eta, f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7],
                      f[8].astype(np.int8))


def omega_one_sided(cfg: MultiplierConfig, k: float, eta: float) -> dict:
    """Both one-sided values of omega at t = eta/k + vartheta mu^(-1/3).

    The middle branch tends to p/k^2 = 1 + (vartheta mu^(-1/3))^2 from the left;
    the last branch is the constant cap.  With the convention used here the
    point itself takes the right value.
    """
    if k == 0:
        raise ValueError("multipliers are defined on non-zero modes only (k = 0 given)")
    w = cfg.vartheta * cfg.mu ** (-1.0 / 3.0)
    t_star = eta / k + w
    left = 1.0 + w * w
    at = float(eval_symbols(cfg, t_star, k, eta).omega)
    return {"t": t_star, "left": left, "right": cfg.omega_max, "value": at,
            "jump": cfg.omega_max - left}


# ---------------------------------------------------------------- lattice check

SLACK_NAMES = (
    "prop_first",       # delta(dm1+dm2+mu p) + domega - dp/p - delta mu^1/3
    "prop_second",      # delta(dm1+dm2+mu^1/3) + domega - dp/p - delta/2 mu^1/3
    "dissipation_floor",  # mu p + dm1 + dm2 - mu^1/3
    "omega_lower",      # omega - 1
    "omega_upper",      # 1 - omega / (1 + vartheta^2 mu^-2/3)
    "omega_over_p",     # 1 - omega k^2 / p
    "dtp_bound",        # 1 - |dt p| / (2 |k| sqrt p)
    "m1_range",         # pi - |log m1|
    "m2_range",         # N pi/2 - |log m2|
)


@numba.njit(cache=True)
def _scan_prop(mu, N, vartheta, delta, k_max, eta_max, deta, t_max, dt, mins, arg):
    n_eta = int(round(2 * eta_max / deta)) + 1
    n_t = int(round(t_max / dt)) + 1
    mu13 = mu ** (1.0 / 3.0)
    width = vartheta / mu13
    cap = 1.0 + vartheta * vartheta / (mu13 * mu13)
    sl = np.empty(9)
    for kk in range(1, k_max + 1):
        k = float(kk)
        for j in range(n_eta):
            eta = -eta_max + j * deta
            for i in range(n_t):
                t = i * dt
                s, p, dtp, om, d1, d2, dom, br = _rates(mu13, N, width, cap, t, k, eta)
                q = p / (k * k)
                rate = 2.0 * s / q
                sl[0] = delta * (d1 + d2 + mu * p) + dom - rate - delta * mu13
                sl[1] = delta * (d1 + d2 + mu13) + dom - rate - 0.5 * delta * mu13
                sl[2] = mu * p + d1 + d2 - mu13
                sl[3] = om - 1.0
                sl[4] = 1.0 - om / cap
                sl[5] = 1.0 - om / q
                sl[6] = 1.0 - abs(s) / math.sqrt(q)
                for c in range(7):
                    if sl[c] < mins[c]:
                        mins[c] = sl[c]
                        arg[c, 0] = t
                        arg[c, 1] = k
                        arg[c, 2] = eta
            # |log m1| and |log m2| grow with |s|, and s is monotone in t, so
            # their smallest slack along this (k, eta) line sits at an end point.
            for t in (0.0, (n_t - 1) * dt):
                s = t - eta / k
                sl[7] = math.pi - abs(2.0 * math.atan(mu13 * s))
                sl[8] = 0.5 * N * math.pi - abs(N * math.atan(s))
                for c in range(7, 9):
                    if sl[c] < mins[c]:
                        mins[c] = sl[c]
                        arg[c, 0] = t
                        arg[c, 1] = k
                        arg[c, 2] = eta


def check_multiplier_prop(
    cfg: MultiplierConfig,
    k_max: int = 32,
    eta_max: float = 200.0,
    deta: float = 0.05,
    t_max: float = 300.0,
    dt: float = 0.05,
    tol: float = 1e-12,
) -> dict:
    """Evaluate the multiplier inequalities and range bounds on a (t, k, eta) lattice.

    Only k > 0 is scanned: every symbol is invariant under (k, eta) -> (-k, -eta).
    """
    mins = np.full(len(SLACK_NAMES), np.inf)
    arg = np.zeros((len(SLACK_NAMES), 3))
    _scan_prop(cfg.mu, cfg.N, cfg.vartheta, cfg.delta, int(k_max), float(eta_max),
               float(deta), float(t_max), float(dt), mins, arg)
    checks = {}
    for q, name in enumerate(SLACK_NAMES):
        checks[name] = {
            "min_slack": float(mins[q]),
            "argmin": {"t": float(arg[q, 0]), "k": int(arg[q, 1]), "eta": float(arg[q, 2])},
            "pass": bool(mins[q] >= -tol),
        }
    violated = cfg.violated_hypotheses()
    return {
        "mu": cfg.mu,
        "vartheta": cfg.vartheta,
        "delta": cfg.delta,
        "N": cfg.N,
        "lattice": {"k_max": k_max, "eta_max": eta_max, "deta": deta,
                    "t_max": t_max, "dt": dt},
        "checks": checks,
        "hypotheses_violated": violated,
        "pass": all(c["pass"] for c in checks.values()),
    }


# ---------------------------------------------------------------- commutators


@numba.njit(cache=True)
def _log_weight(mu, N, vartheta, t, k, eta, n, power, with_rate):
    p, dtp, lm1, lm2, om, d1, d2, dom, br = _point(mu, N, vartheta, t, k, eta)
    lw = -lm1 - lm2 - (3.0 + 2.0 * n) / 4.0 * math.log(om) + 0.5 * power * math.log(p)
    sign = 1.0
    if with_rate:
        if dtp == 0.0:
            return -np.inf, 1.0, p
        lw += math.log(abs(dtp) / p)
        sign = 1.0 if dtp > 0 else -1.0
    return lw, sign, p


@numba.njit(cache=True)
def _log_abs_diff(l1, s1, l2, s2):
    if l1 == -np.inf and l2 == -np.inf:
        return -np.inf
    m = max(l1, l2)
    d = s1 * math.exp(l1 - m) - s2 * math.exp(l2 - m)
    if d == 0.0:
        return -np.inf
    return m + math.log(abs(d))


@numba.njit(cache=True)
def _comm_log_ratio(mu, N, vartheta, item, n, alpha, t, k, eta, xi):
    """log(lhs / rhs) of one commutator bound at one lattice point (-inf if lhs = 0)."""
    if xi == 0.0:
        return -np.inf
    power = n + 1.0 if item == 2 else float(alpha)
    with_rate = item == 3
    l1, s1, p1 = _log_weight(mu, N, vartheta, t, k, eta, n, power, with_rate)
    l2, s2, p2 = _log_weight(mu, N, vartheta, t, k, eta - xi, n, power, with_rate)
    ld = _log_abs_diff(l1, s1, l2, s2)
    if ld == -np.inf:
        return -np.inf
    bracket = math.sqrt(1.0 + xi * xi)
    if item == 2:
        if eta - xi - k * t == 0.0:
            return -np.inf
        lhs = math.log(abs(eta - xi - k * t)) + ld
        rhs = math.log(abs(xi)) + n * math.log(bracket) + 0.5 * (1.0 + n) * math.log(p2)
    else:
        lhs = math.log(abs(k)) + ld
        if alpha == 0:
            rhs = math.log(abs(xi))
        else:
            rhs = (math.log(abs(xi)) + (alpha - 1.0) * math.log(bracket)
                   + 0.5 * alpha * math.log(p2))
    return lhs - rhs


@numba.njit(cache=True)
def _scan_comm(mu, N, vartheta, item, n, alpha, k_max, t_max, dt, eta_max, deta,
               xi_max, dxi, out):
    n_t = int(round(t_max / dt)) + 1
    n_eta = int(round(2 * eta_max / deta)) + 1
    n_xi = int(round(2 * xi_max / dxi)) + 1
    best = -np.inf
    for kk in range(1, k_max + 1):
        k = float(kk)
        for i in range(n_t):
            t = i * dt
            for j in range(n_eta):
                eta = -eta_max + j * deta
                for q in range(n_xi):
                    xi = -xi_max + q * dxi
                    if abs(xi) < 0.5 * dxi:
                        continue
                    r = _comm_log_ratio(mu, N, vartheta, item, n, alpha, t, k, eta, xi)
                    if r > best:
                        best = r
                        out[0] = t
                        out[1] = k
                        out[2] = eta
                        out[3] = xi
    return best


def commutator_log_ratio(cfg: MultiplierConfig, item: int, n: int, alpha: int, t, k, eta, xi) -> float:
    """Natural log of lhs / rhs of one commutator bound at a single point (-inf when xi = 0)."""
    return float(_comm_log_ratio(cfg.mu, cfg.N, cfg.vartheta, int(item), int(n), int(alpha),
                                 float(t), float(k), float(eta), float(xi)))


def commutator_ratio(cfg: MultiplierConfig, item: int, n: int, alpha: int, t, k, eta, xi) -> float:
    """lhs / rhs at a single point; 0 when xi = 0, inf when the ratio exceeds double range."""
    lr = commutator_log_ratio(cfg, item, n, alpha, t, k, eta, xi)
    if lr == -math.inf:
        return 0.0
    return math.exp(lr) if lr < 709.0 else math.inf


@dataclass(frozen=True)
class CommutatorLattice:
    k_max: int = 4
    t_max: float = 40.0
    dt: float = 0.5
    eta_max: float = 16.0
    deta: float = 0.25
    xi_max: float = 8.0
    dxi: float = 0.25

    def refined(self) -> "CommutatorLattice":
        return CommutatorLattice(self.k_max, self.t_max, self.dt / 2, self.eta_max,
                                 self.deta / 2, self.xi_max, self.dxi / 2)


def commutator_max(cfg: MultiplierConfig, item: int, n: int, alpha: int,
                   lattice: CommutatorLattice) -> tuple[float, dict]:
    """Largest log ratio |lhs| / rhs of one commutator bound over the lattice.

    item 1: k T^alpha against |xi| <xi>^(alpha-1) p^(alpha/2)(eta - xi)
    item 2: |eta - xi - k t| T^(n+1) against |xi| <xi>^n p^((1+n)/2)(eta - xi)
    item 3: as item 1 with the d_t p / p weighted difference
    """
    if item not in (1, 2, 3):
        raise ValueError("item must be 1, 2 or 3")
    where = np.zeros(4)
    lg = _scan_comm(cfg.mu, cfg.N, cfg.vartheta, item, n, alpha, lattice.k_max,
                    lattice.t_max, lattice.dt, lattice.eta_max, lattice.deta,
                    lattice.xi_max, lattice.dxi, where)
    return float(lg), {"t": where[0], "k": int(where[1]), "eta": where[2], "xi": where[3]}


def commutator_scan(cfg: MultiplierConfig, n: int, alpha: int,
                    lattice: CommutatorLattice | None = None,
                    growth_limit: float = 1.5) -> dict:
    """Brute-force commutator constants with a 2x refinement stability check.

    Ratios are returned as natural logarithms; growth is exp(difference).
    The fine lattice contains the coarse one, so growth >= 1.
    """
    lattice = lattice or CommutatorLattice()
    fine = lattice.refined()
    # the shear item always carries p^((n+1)/2), independent of alpha
    items = {"k_T": 1, "k_P": 3, "shear_T": 2}
    report = {"n": n, "alpha": alpha, "mu": cfg.mu, "N": cfg.N, "items": {}}
    ok = True
    for name, item in items.items():
        lc, wc = commutator_max(cfg, item, n, alpha, lattice)
        lf, wf = commutator_max(cfg, item, n, alpha, fine)
        growth = math.exp(lf - lc) if np.isfinite(lc) and np.isfinite(lf) else math.inf
        finite = bool(np.isfinite(lf))
        stable = finite and growth < growth_limit
        ok = ok and stable
        report["items"][name] = {
            "log_max_coarse": lc, "log_max_fine": lf, "argmax_fine": wf,
            "growth": growth, "finite": finite, "stable": stable,
        }
    report["pass"] = ok
    return report


# ---------------------------------------------------------------- weighted energy


def _nonzero_symbols(cfg, t, k, eta):
    kk = np.broadcast_to(k[:, None], (k.size, eta.size)).astype(float)
    ee = np.broadcast_to(eta[None, :], (k.size, eta.size))
    return eval_symbols(cfg, np.full(kk.shape, float(t)), kk, ee)


def weighted_Z(R, A, Omega, t: float, k, eta, cfg: MultiplierConfig, n: int,
               unit_weights: bool = False):
    """Z1, Z2, Z3 on the non-zero rows (k != 0) of spectral arrays.

    Returned arrays have the shape of the k != 0 sub-lattice; the zero row
    is excluded by construction.  ``unit_weights`` replaces m1, m2, omega by 1.
    """
    if n not in (0, 1):
        raise ValueError("n must be 0 or 1")
    k = np.asarray(k)
    sel = k != 0
    sg = _nonzero_symbols(cfg, t, k[sel], np.asarray(eta))
    if unit_weights:
        lq = 0.5 * n * np.log(sg.p)
    else:
        lq = sg.log_Q(n)
    M = cfg.mach
    with np.errstate(over="ignore", invalid="ignore"):
        q = np.exp(lq)
        parts = (np.sqrt(sg.p) * R[sel] / M, A[sel], R[sel] + Omega[sel] - cfg.mu * M * M * A[sel])
        # a vanishing coefficient stays zero even where the weight overflows
        Z1, Z2, Z3 = (np.where(f == 0, 0.0, q * f) for f in parts)
    return Z1, Z2, Z3, sg


def energy_En(Z1, Z2, Z3, sg: SymbolGrid, cfg: MultiplierConfig, norm_factor: float = 1.0) -> dict:
    """Weighted energy with its cross terms and coercivity ratio.

    ``norm_factor`` converts sums over spectral coefficients into squared L2 norms.
    """
    M = cfg.mach
    p, dtp = sg.p, sg.dtp
    w1 = 1.0 + M * M * dtp**2 / p**3
    a1 = norm_factor * np.sum(w1 * np.abs(Z1) ** 2)
    a2 = norm_factor * np.sum(np.abs(Z2) ** 2)
    a3 = norm_factor * np.sum(np.abs(Z3) ** 2)
    c1 = norm_factor * np.sum(np.real(dtp / p**1.5 * Z1 * np.conj(Z2)))
    c2 = norm_factor * np.sum(np.real(Z1 * np.conj(Z2)) / np.sqrt(p))
    E = 0.5 * (a1 + a2 + a3) + 0.25 * M * c1 - cfg.gamma * c2
    den = a1 + a2 + a3
    return {
        "E": float(E),
        "z1": float(a1), "z2": float(a2), "z3": float(a3),
        "cross_rate": float(0.25 * M * c1), "cross_gamma": float(-cfg.gamma * c2),
        "coercivity": float(E / den) if den > 0 else float("nan"),
    }


def embedding_constant(k_max: int, eta: np.ndarray, t: float) -> float:
    """Cauchy-Schwarz constant sqrt(sum p^-2) over the lattice |k| <= k_max, k != 0."""
    k = np.concatenate([np.arange(-k_max, 0), np.arange(1, k_max + 1)]).astype(float)
    p = k[:, None] ** 2 + (np.asarray(eta)[None, :] - k[:, None] * t) ** 2
    return float(np.sqrt(np.sum(p**-2.0)))


def check_embedding_L1(f_hat: np.ndarray, k, eta, t: float) -> dict:
    """Lattice sum of |f_hat| on k != 0 against the l2 norm of p f_hat.

    Cauchy-Schwarz gives ratio <= sqrt(sum p^-2), which is the pass threshold.
    """
    k = np.asarray(k)
    eta = np.asarray(eta)
    sel = k != 0
    fn = f_hat[sel]
    p = k[sel, None].astype(float) ** 2 + (eta[None, :] - k[sel, None] * t) ** 2
    lhs = float(np.sum(np.abs(fn)))
    rhs = float(np.sqrt(np.sum(np.abs(p * fn) ** 2)))
    kmax = int(np.max(np.abs(k))) if k.size else 1
    const = embedding_constant(kmax, eta, t)
    ratio = lhs / rhs if rhs > 0 else 0.0
    return {"lhs": lhs, "rhs": rhs, "ratio": ratio, "constant": const,
            "pass": bool(ratio <= const * (1 + 1e-12))}


def log_energy_En(R, A, Omega, t: float, k, eta, cfg: MultiplierConfig, n: int,
                  norm_factor: float = 1.0, weights=None) -> dict:
    """Natural log of the weighted energy, safe for any size of the weights.

    Each Fourier mode contributes exp(2 log Q) times a quadratic form in the
    unweighted (Z1, Z2, Z3); the form is positive definite mode by mode, so
    the total is a log-sum-exp.  ``weights`` multiplies each mode's
    contribution (use 2 for the doubled half-spectrum columns).
    """
    Z1, Z2, Z3, sg = weighted_Z(R, A, Omega, t, k, eta, cfg, n, unit_weights=True)
    base = 0.5 * n * np.log(sg.p)
    # undo the p^(n/2) already applied so the full log weight is added once below
    z1, z2, z3 = (Z * np.exp(-base) for Z in (Z1, Z2, Z3))
    M = cfg.mach
    p, dtp = sg.p, sg.dtp
    e = (0.5 * ((1.0 + M * M * dtp**2 / p**3) * np.abs(z1) ** 2 + np.abs(z2) ** 2 + np.abs(z3) ** 2)
         + np.real(z1 * np.conj(z2)) * (0.25 * M * dtp / p**1.5 - cfg.gamma / np.sqrt(p)))
    lq = sg.log_Q(n)
    if weights is not None:
        e = e * np.broadcast_to(weights, np.shape(R))[np.asarray(k) != 0]
    pos = e > 0
    if not np.any(pos):
        return {"log_E": -math.inf, "negative_modes": int(np.count_nonzero(e < 0))}
    from scipy.special import logsumexp

    logE = float(logsumexp(2.0 * lq[pos] + np.log(e[pos]))) + math.log(norm_factor)
    return {"log_E": logE, "negative_modes": int(np.count_nonzero(e < 0))}
