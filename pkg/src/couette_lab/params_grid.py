"""Physical parameters, derived constants and discretization grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

ALPHA_MIN = 11.0 / 3.0


class ParamError(ValueError):
    """Raised when a parameter set violates a model or grid hypothesis."""


@dataclass(frozen=True)
class FlowParams:
    """Viscosities, Mach number, pressure exponent and data-size exponent.

    ``lam`` is the second viscosity; ``None`` means "same as ``mu``".
    """

    mu: float
    mach: float
    alpha: float = 3.7
    lam: float | None = None
    gamma_law: float = 2.0

    @property
    def lam_value(self) -> float:
        return self.mu if self.lam is None else float(self.lam)

    @property
    def mubar(self) -> float:
        return 2.0 * self.mu + self.lam_value

    @property
    def cbar(self) -> float:
        return 1.0 / self.mach

    @property
    def ppp(self) -> float:
        # P(rho) = rho^g / g  =>  P'(1) = 1, P''(1) = g - 1
        return self.gamma_law - 1.0

    @property
    def a_coeff(self) -> float:
        return 2.0 / (self.ppp * self.cbar + 2.0 * self.cbar)

    @property
    def kappa(self) -> float:
        """Cross-coupling weight of the coupled diffusion waves."""
        return (2.0 - self.ppp) / (2.0 + self.ppp)

    @property
    def amplitude(self) -> float:
        return self.mu**self.alpha

    def pressure_prime(self, rho):
        return np.power(rho, self.gamma_law - 1.0)

    def as_dict(self) -> dict:
        return {
            "mu": self.mu,
            "lambda": self.lam_value,
            "mach": self.mach,
            "gamma_law": self.gamma_law,
            "alpha": self.alpha,
        }


def mach_bound(mu: float, lam: float) -> float:
    """Largest Mach number allowed by the stability hypothesis."""
    return min((lam + 2.0 * mu) ** -0.5, mu ** (-1.0 / 3.0)) / 50.0


def validate_params(
    p: FlowParams, *, check_mach: bool = True, check_alpha: bool = True
) -> FlowParams:
    """Check the hypotheses and return a copy with ``lam`` filled in.

    ``check_mach`` and ``check_alpha`` exist for studies that deliberately
    leave the proven regime (1-D wave experiments, threshold scans); the
    positivity requirements are always enforced.
    """
    for name in ("mu", "mach", "alpha", "gamma_law"):
        v = getattr(p, name)
        if not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ParamError(f"{name} must be a finite number, got {v!r}")
    if p.lam is not None and not math.isfinite(p.lam):
        raise ParamError(f"lambda must be finite, got {p.lam!r}")
    if p.mu <= 0:
        raise ParamError(f"mu must be positive, got {p.mu}")
    lam = p.lam_value
    if p.mu + lam < 0:
        raise ParamError(f"mu + lambda must be non-negative, got {p.mu + lam}")
    if p.mach <= 0:
        raise ParamError(f"Mach number must be positive, got {p.mach}")
    if p.gamma_law <= 1:
        raise ParamError(f"gamma_law must exceed 1, got {p.gamma_law}")
    if check_mach:
        bound = mach_bound(p.mu, lam)
        if p.mach > bound:
            raise ParamError(
                f"Mach number {p.mach} exceeds the stability bound "
                f"M <= min((lambda+2mu)^-1/2, mu^-1/3)/50 = {bound:.6g}"
            )
    if check_alpha and not p.alpha > ALPHA_MIN:
        raise ParamError(
            f"alpha must exceed 11/3 (initial data of size mu^alpha), got {p.alpha}"
        )
    return replace(p, mu=float(p.mu), lam=float(lam), mach=float(p.mach),
                   alpha=float(p.alpha), gamma_law=float(p.gamma_law))


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid1D:
    """Periodized interval [-l_y, l_y) with ``n_y`` points."""

    n_y: int
    l_y: float

    def __post_init__(self):
        if not _is_pow2(int(self.n_y)):
            raise ParamError(f"n_y must be a power of two, got {self.n_y}")
        if not (self.l_y > 0 and math.isfinite(self.l_y)):
            raise ParamError(f"l_y must be positive, got {self.l_y}")

    @property
    def dy(self) -> float:
        return 2.0 * self.l_y / self.n_y

    @property
    def y(self) -> np.ndarray:
        return -self.l_y + self.dy * np.arange(self.n_y)

    @property
    def eta(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_y, d=self.dy)

    @property
    def deta(self) -> float:
        return np.pi / self.l_y

    @property
    def index(self) -> np.ndarray:
        """Signed integer wavenumber index j with eta = j * deta."""
        return np.fft.fftfreq(self.n_y, d=1.0 / self.n_y).astype(np.int64)


@dataclass(frozen=True)
class Grid2D:
    """2*pi-periodic x (integer wavenumbers) times a periodized y interval."""

    n_x: int
    grid1d: Grid1D
    dealias: float = 2.0 / 3.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.n_x < 2 or self.n_x % 2:
            raise ParamError(f"n_x must be a positive even integer, got {self.n_x}")
        if not (0 < self.dealias <= 1):
            raise ParamError(f"dealias fraction must lie in (0, 1], got {self.dealias}")

    @property
    def n_y(self) -> int:
        return self.grid1d.n_y

    @property
    def l_y(self) -> float:
        return self.grid1d.l_y

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.grid1d.n_y)

    @property
    def k(self) -> np.ndarray:
        return np.fft.fftfreq(self.n_x, d=1.0 / self.n_x).astype(np.int64)

    @property
    def eta(self) -> np.ndarray:
        return self.grid1d.eta

    @property
    def x(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_x) / self.n_x

    @property
    def dx(self) -> float:
        return 2.0 * np.pi / self.n_x

    @property
    def area(self) -> float:
        return 2.0 * np.pi * 2.0 * self.l_y

    @property
    def mask(self) -> np.ndarray:
        """Boolean (n_x, n_y) array of retained modes under the dealias rule."""
        if "mask" not in self._cache:
            kx = np.abs(self.k) < self.dealias * (self.n_x / 2)
            ky = np.abs(self.grid1d.index) < self.dealias * (self.n_y / 2)
            self._cache["mask"] = np.outer(kx, ky)
        return self._cache["mask"]

    def kappa(self, t: float) -> np.ndarray:
        """Sheared wall-normal wavenumber eta - k t on the (k, eta) lattice."""
        return self.eta[None, :] - self.k[:, None] * t

    def symbol_p(self, t: float) -> np.ndarray:
        return self.k[:, None].astype(float) ** 2 + self.kappa(t) ** 2


def build_grid(n_x: int, n_y: int, l_y: float, dealias: float = 2.0 / 3.0) -> Grid2D:
    return Grid2D(int(n_x), Grid1D(int(n_y), float(l_y)), float(dealias))


def wrap_margin(p: FlowParams, t_final: float) -> float:
    """Distance needed to keep both traveling waves inside the box up to ``t_final``."""
    return p.cbar * t_final + 6.0 * math.sqrt(p.mubar * t_final)


def check_no_wrap(p: FlowParams, grid: Grid1D | Grid2D, t_final: float) -> None:
    l_y = grid.l_y
    need = wrap_margin(p, t_final)
    if not need < l_y:
        raise ParamError(
            f"l_y = {l_y} too small for t_final = {t_final}: traveling waves reach "
            f"{need:.4g}; increase l_y or shorten the run"
        )
