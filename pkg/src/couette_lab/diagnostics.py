"""Norms of solver states, decay-rate fits and run classification.

Spectral norms use Parseval on the ``rfft2`` half spectrum:
int |f|^2 = (cell area) / (n_x n_y) * sum over the full spectrum |c|^2, where
the interior half-spectrum columns stand for two full-spectrum entries.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .params_grid import Grid2D
from .spectral_solver import SpectralOps, State2D

NORM_NAMES = (
    "L2_phi", "L2_psi1", "L2_psi2",
    "L2_zero_phi_psi2", "L2_dy_zero_phi_psi2",
    "Linf_psi1", "Linf_zero_psi1", "Linf_phi",
    "L2_grad_nonzero", "L2_grad2_nonzero",
    "H0", "H1", "H2", "H3", "H4", "H5",
)


class FitError(ValueError):
    """The requested fit window cannot support a fit."""


# ---------------------------------------------------------------- norms


def half_spectrum_weights(ops: SpectralOps) -> np.ndarray:
    """Multiplicity of each rfft column in the full spectrum (1 or 2)."""
    w = np.full(ops.eta.size, 2.0)
    w[0] = 1.0
    if ops.ny % 2 == 0:
        w[-1] = 1.0
    return w


def spectral_l2(coeffs: np.ndarray, ops: SpectralOps, weight=None) -> float:
    """Parseval L2 norm of one or several stacked fields, optionally with a symbol weight |w|^2."""
    a2 = np.abs(coeffs) ** 2
    if weight is not None:
        a2 = a2 * weight
    w = half_spectrum_weights(ops)
    tot = float(np.sum(a2 * w))
    return math.sqrt(tot * ops.cell / (ops.nx * ops.ny))


def quadrature_l2(f: np.ndarray, ops: SpectralOps) -> float:
    """Real-space rectangle rule (spectrally exact for band-limited fields)."""
    return math.sqrt(float(np.sum(np.abs(f) ** 2)) * ops.cell)


def norms(state: State2D, grid: Grid2D, which=NORM_NAMES, ops: SpectralOps | None = None) -> dict:
    """Named norms of a moving-frame state.

    Derivatives use the sheared symbols, so gradients are the lab-frame
    gradients.  Sup norms are taken on the collocation grid; they are frame
    independent because the shear map permutes points of the torus.
    """
    if state.frame != "moving":
        raise ValueError("norms expect a moving-frame state")
    unknown = set(which) - set(NORM_NAMES)
    if unknown:
        raise KeyError(f"unknown norm names: {sorted(unknown)}")
    ops = ops or SpectralOps(grid)
    u = state.coeffs
    _, _, pp = ops.symbols(state.t)
    out: dict[str, float] = {}
    phys = None

    def real_fields():
        nonlocal phys
        if phys is None:
            phys = ops.to_phys(u)
        return phys

    for name in which:
        if name == "L2_phi":
            out[name] = spectral_l2(u[0], ops)
        elif name == "L2_psi1":
            out[name] = spectral_l2(u[1], ops)
        elif name == "L2_psi2":
            out[name] = spectral_l2(u[2], ops)
        elif name == "L2_zero_phi_psi2":
            out[name] = spectral_l2(u[[0, 2], :1, :], ops)
        elif name == "L2_dy_zero_phi_psi2":
            out[name] = spectral_l2(u[[0, 2], :1, :], ops, weight=ops.eta[None, None, :] ** 2)
        elif name == "Linf_psi1":
            out[name] = float(np.max(np.abs(real_fields()[1])))
        elif name == "Linf_phi":
            out[name] = float(np.max(np.abs(real_fields()[0])))
        elif name == "Linf_zero_psi1":
            row = np.zeros_like(u[1])
            row[0] = u[1, 0]
            out[name] = float(np.max(np.abs(ops.to_phys(row))))
        elif name in ("L2_grad_nonzero", "L2_grad2_nonzero"):
            s = 1 if name == "L2_grad_nonzero" else 2
            wgt = pp[None, 1:, :] ** s
            out[name] = (spectral_l2(u[:1, 1:, :], ops, weight=wgt)
                         + spectral_l2(u[1:, 1:, :], ops, weight=wgt))
        else:  # H^s, s = 0..5
            s = int(name[1:])
            out[name] = spectral_l2(u, ops, weight=(1.0 + pp[None]) ** s)
    return out


# ---------------------------------------------------------------- series


@dataclass
class NormSeries:
    """Time series sharing one time axis.  Names starting with ``log_`` hold natural logs."""

    run_id: str
    times: np.ndarray
    series: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must increase strictly")
        clean = {}
        for name, vals in self.series.items():
            v = np.asarray(vals, dtype=float)
            if v.shape != self.times.shape:
                raise ValueError(f"series {name!r} has {v.size} samples, time axis has {self.times.size}")
            bad = ~np.isfinite(v)
            if name.startswith("log_"):
                bad &= ~np.isneginf(v)  # log of an exactly zero norm
            if np.any(bad):
                raise ValueError(f"series {name!r} contains non-finite values")
            clean[name] = v
        self.series = clean

    def __getitem__(self, name: str) -> np.ndarray:
        return self.series[name]

    def names(self) -> list[str]:
        return list(self.series)


@dataclass
class FitResult:
    model: str  # "power" | "exponential"
    value: float  # exponent for power fits; decay rate (positive = decay) for exponential fits
    half_width: float
    window: tuple
    n_points: int
    intercept: float
    trimmed: bool = False
    series: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def _subseed(run_id: str, name: str) -> int:
    h = hashlib.sha256(f"{run_id}/{name}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _ols(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef[0], coef[1], A


def _bootstrap_halfwidth(x, y, slope, icpt, A, n_boot: int, seed: int) -> float:
    res = y - (slope * x + icpt)
    scale = float(np.max(np.abs(y))) if y.size else 0.0
    if not np.any(np.abs(res) > 1e-13 * max(scale, 1.0)):
        return 0.0
    rng = np.random.default_rng(seed)
    fit = slope * x + icpt
    draws = rng.integers(0, res.size, size=(n_boot, res.size))
    ys = fit[None, :] + res[draws]
    coefs, *_ = np.linalg.lstsq(A, ys.T, rcond=None)
    lo, hi = np.percentile(coefs[0], [2.5, 97.5])
    return float(0.5 * (hi - lo))


def _window(times, window):
    t = np.asarray(times, dtype=float)
    if window is None:
        return np.ones(t.size, dtype=bool), (float(t[0]), float(t[-1]))
    t0, t1 = float(window[0]), float(window[1])
    if not t1 > t0:
        raise FitError(f"degenerate fit window [{t0}, {t1}]")
    if t0 < t[0] - 1e-9 or t1 > t[-1] + 1e-9:
        raise FitError(f"fit window [{t0}, {t1}] leaves the sampled range [{t[0]}, {t[-1]}]")
    sel = (t >= t0 - 1e-9) & (t <= t1 + 1e-9)
    return sel, (t0, t1)


def _as_log(values, log_values: bool, name: str):
    v = np.asarray(values, dtype=float)
    if log_values:
        return v
    with np.errstate(divide="ignore"):
        out = np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf)
    if np.any(v < 0):
        raise FitError(f"series {name!r} has negative values; norms expected")
    return out


def _plateau_start(t, y, frac: float) -> int | None:
    """Start of a trailing plateau, or None.

    The candidate plateau is the longest suffix lying within one decade of the
    median of the final quarter.  It counts as a plateau when its own slope is
    flatter than ``frac`` times the slope of the preceding part.
    """
    n = y.size
    if n < 6:
        return None
    floor = float(np.median(y[-max(2, n // 4):]))
    band = math.log(10.0)
    i = n
    while i > 0 and y[i - 1] <= floor + band:
        i -= 1
    if i == 0 or n - i < 3 or i < 2:
        return None
    s_pre = np.polyfit(t[:i + 1], y[:i + 1], 1)[0]
    s_suf = np.polyfit(t[i:], y[i:], 1)[0]
    if s_pre < 0 and abs(s_suf) < frac * abs(s_pre):
        return i
    return None


def _fit(kind, times, values, window, *, log_values, name, run_id, n_boot, min_points, trim, frac):
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size != np.asarray(values).size:
        raise FitError("times and values must be 1-D arrays of equal length")
    sel, win = _window(t, window)
    t = t[sel]
    y = _as_log(values, log_values, name)[sel]
    trimmed = False
    if trim:
        bad = ~np.isfinite(y)
        if np.any(bad):  # an exactly vanishing norm is the ultimate floor
            cut = int(np.argmax(bad))
            t, y, trimmed = t[:cut], y[:cut], True
        if kind == "exponential":
            i = _plateau_start(t, y, frac)
            if i is not None:
                t, y, trimmed = t[:i], y[:i], True
    elif not np.all(np.isfinite(y)):
        raise FitError(f"series {name!r} has zero or non-finite values in the window")
    if t.size < min_points:
        raise FitError(f"fit of {name!r} needs at least {min_points} points, window has {t.size}")
    if np.ptp(t) == 0:
        raise FitError("degenerate window: all sample times coincide")
    x = np.log1p(t) if kind == "power" else t
    slope, icpt, A = _ols(x, y)
    hw = _bootstrap_halfwidth(x, y, slope, icpt, A, n_boot, _subseed(run_id, name))
    value = slope if kind == "power" else -slope
    return FitResult(kind, float(value), hw, (float(t[0]), float(t[-1])) if trimmed else win,
                     int(t.size), float(icpt), trimmed, name)


def fit_power(times, values, window=None, *, log_values: bool = False, name: str = "",
              run_id: str = "", n_boot: int = 200, min_points: int = 8, trim: bool = True) -> FitResult:
    """Exponent b of value ~ C (1 + t)^b by least squares in log-log coordinates."""
    return _fit("power", times, values, window, log_values=log_values, name=name, run_id=run_id,
                n_boot=n_boot, min_points=min_points, trim=trim, frac=0.1)


def fit_exponential(times, values, window=None, *, log_values: bool = False, name: str = "",
                    run_id: str = "", n_boot: int = 200, min_points: int = 8, trim: bool = True,
                    plateau_frac: float = 0.1) -> FitResult:
    """Decay rate r of value ~ C e^{-r t}; a trailing floor is cut off and flagged."""
    return _fit("exponential", times, values, window, log_values=log_values, name=name,
                run_id=run_id, n_boot=n_boot, min_points=min_points, trim=trim, frac=plateau_frac)


def default_windows(mu: float, t_final: float) -> dict:
    m = mu ** (-1.0 / 3.0)
    return {"power": (10.0, t_final), "exponential": (2.0 * m, 10.0 * m)}


# ---------------------------------------------------------------- classification

CLASSES = ("stable", "transitioned", "collapsed", "inconclusive")


def classify_run(ns: NormSeries, inflation_limit: float = 10.0, horizon: float | None = None,
                 status: str = "completed", tracked=None) -> str:
    """Operational stability verdict.

    stable: every tracked norm stays within ``inflation_limit`` times its
    initial value up to the horizon; transitioned: some norm exceeds that;
    collapsed: the density floor stopped the run; inconclusive: the run ended
    early for another reason, or did not reach the horizon.
    """
    if status == "collapsed":
        return "collapsed"
    names = list(tracked) if tracked is not None else [n for n in ns.names() if not n.startswith("log_")]
    t = ns.times
    upto = np.ones(t.size, dtype=bool) if horizon is None else t <= horizon + 1e-9
    for name in names:
        v = np.asarray(ns[name])[upto]
        if v.size == 0:
            continue
        if np.any(v > inflation_limit * v[0]):
            return "transitioned"
    reached = horizon is None or (t.size > 0 and t[-1] >= horizon - 1e-9)
    if status != "completed" or not reached:
        return "inconclusive"
    return "stable"
