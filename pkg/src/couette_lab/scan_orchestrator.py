"""Single runs with their fits, experiment matrices over (mu, alpha, seed), threshold tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    FitError, NormSeries, classify_run, default_windows, fit_exponential, fit_power, norms,
)
from .multipliers import MultiplierConfig, log_energy_En
from .params_grid import ALPHA_MIN, FlowParams, Grid2D, validate_params
from .spectral_solver import (
    InitialSpec, SpectralOps, StepOptions, evolve, lattice_dt, make_initial_data,
    zero_mode_profiles,
)

OUTSIDE_LABEL = "outside proven regime — empirical only"
STABILITY_NOTE = ("stability is operational: every tracked norm stays within inflation_limit "
                  "times its initial value up to the horizon; it is not a function-space statement")
# psi1 is left out on purpose: lift-up lets its zero mode grow by up to mu^(-2/3)
# relative to the data (in L2 it keeps growing like sqrt(t) as the waves sweep)
TRACKED = ("L2_phi", "L2_psi2", "Linf_phi")
BASIC_NORMS = ("L2_phi", "L2_psi1", "L2_psi2", "L2_zero_phi_psi2", "L2_dy_zero_phi_psi2",
               "Linf_psi1", "Linf_phi", "L2_grad_nonzero", "L2_grad2_nonzero", "H0", "H5")


def worker_budget(default: int = 1) -> int:
    raw = os.environ.get("COUETTE_LAB_THREADS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"COUETTE_LAB_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"COUETTE_LAB_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------- single run


@dataclass(frozen=True)
class RunSpec:
    params: FlowParams
    grid: Grid2D
    t_final: float
    dt: float | None = None  # None: lattice-compatible step near dt_target
    dt_target: float = 0.1
    dt_growth: float = 0.0  # step grows like dt_growth * t once that exceeds dt_target
    dt_max: float = 1.0
    seed: int = 0
    n_samples: int = 101
    sample_spacing: str = "linear"  # linear | log
    initial: InitialSpec = field(default_factory=InitialSpec)
    step: StepOptions = field(default_factory=lambda: StepOptions(acoustic_gate=False))
    observers: str = "basic"  # basic | energy | waves
    run_id: str = ""
    check_wrap: bool = True
    inflation_limit: float = 10.0


def sample_times(t_final: float, n: int, spacing: str = "linear") -> np.ndarray:
    n = max(2, int(n))
    if spacing == "linear":
        return np.linspace(0.0, t_final, n)
    if spacing == "log":
        return np.concatenate([[0.0], np.geomspace(min(1.0, t_final), t_final, n - 1)])
    raise ValueError(f"unknown sample spacing {spacing!r}")


def step_schedule(spec: RunSpec):
    """Step size as a function of time.

    Targets of at least one lattice unit are snapped to a lattice multiple so the
    propagator tables are reused; smaller targets are kept as they are.  A growing
    step moves through doubling levels dt_target * 2^j (never above dt_growth * t
    or dt_max), so a whole run needs only a handful of propagator tables.
    """
    grid = spec.grid
    if spec.dt is not None:
        return spec.dt
    unit = lattice_dt(grid, 0.0)
    base = spec.dt_target if spec.dt_target < unit else lattice_dt(grid, spec.dt_target)
    if spec.dt_growth <= 0:
        return base
    levels = [base]
    while 2 * levels[-1] <= spec.dt_max * (1 + 1e-12):
        nxt = 2 * levels[-1]
        levels.append(lattice_dt(grid, nxt) if nxt >= unit else nxt)

    def h(t):
        target = min(spec.dt_max, spec.dt_growth * t)
        j = 0
        while j + 1 < len(levels) and levels[j + 1] <= target * (1 + 1e-12):
            j += 1
        return levels[j]

    return h


def _energy_observer(p: FlowParams, grid: Grid2D, ops: SpectralOps):
    from .moving_frame_helmholtz import helmholtz

    cfg = MultiplierConfig(mu=p.mu, mach=p.mach)
    w = np.broadcast_to(np.where(np.arange(ops.eta.size) == 0, 1.0, 2.0), ops.shape_r)
    norm = ops.cell / (ops.nx * ops.ny)

    def obs(s):
        rao = helmholtz(s, grid, ops)
        sel = ops.mask
        R, A, O = (np.where(sel, f, 0.0) for f in (rao.R, rao.A, rao.Omega))
        out = {}
        for n in (0, 1):
            out[f"log_En_{n}"] = log_energy_En(R, A, O, s.t, ops.k, ops.eta, cfg, n,
                                               norm_factor=norm, weights=w)["log_E"]
        return out

    return obs


class _WaveObserver:
    """Tracks the wave ansatz alongside a 2-D run and measures the remainder A."""

    def __init__(self, p: FlowParams, grid: Grid2D, masses):
        from .zero_mode_waves import Spectral1D, WaveMarcher, diagonalize, eigen_frame

        self.p = p
        self.grid = grid
        self.frame = eigen_frame(p)
        self.diag = diagonalize
        self.marcher = WaveMarcher(p, grid.grid1d, masses, eps=0.01)
        self.sp = Spectral1D(grid.grid1d)
        self.dy = grid.grid1d.dy

    def __call__(self, s):
        from .zero_mode_waves import corrections

        zp = zero_mode_profiles(s, self.grid)
        v = self.diag(zp.w, self.frame)
        m = self.marcher
        if s.t > m.t:
            # the remainder target needs Xi at s.t, which is what the march computes;
            # Xi from the previous sample is used instead (it varies slowly)
            th = m.theta(s.t)
            m_xi_guess = m.xi()
            _, cc = corrections(th, m_xi_guess, self.p, self.grid.grid1d)
            m.advance(s.t, vt_target=v - cc)
        ws = m.waveset(v=v, psi1=zp.psi1)
        A = ws.curly_A
        Ay = self.sp.dy(A)
        l2 = lambda f: math.sqrt(float(np.sum(f * f)) * self.dy * 2.0 * math.pi)
        return {
            "L2_A": l2(A),
            "L2_A_y": l2(Ay),
            "Linf_theta_A": float(np.max(np.abs(ws.theta_A))),
            "Linf_zero_psi1": float(np.max(np.abs(zp.psi1))),
            "L2_vtilde": l2(v - ws.curly_c),
        }


def run_single(spec: RunSpec) -> tuple[NormSeries, dict]:
    """Evolve one configuration and return its norm series and metadata (with fits and class)."""
    p, grid = spec.params, spec.grid
    t0 = time.perf_counter()
    state, info = make_initial_data(p, grid, spec.seed, spec.initial)
    ops = SpectralOps(grid)
    dt = step_schedule(spec)
    obs = {"_norms": lambda s: norms(s, grid, BASIC_NORMS, ops)}
    if spec.observers in ("energy", "waves"):
        obs["_energy"] = _energy_observer(p, grid, ops)
    if spec.observers == "waves":
        obs["_waves"] = _WaveObserver(p, grid, info["wave_masses"])
    elif spec.observers not in ("basic", "energy"):
        raise ValueError(f"unknown observer set {spec.observers!r}")

    def combined(s):
        out = {}
        for fn in obs.values():
            out.update(fn(s))
        return out

    rows: list[dict] = []
    traj = evolve(state, p, grid, spec.t_final, dt, sample_times=sample_times(spec.t_final, spec.n_samples, spec.sample_spacing),
                  observers={"all": lambda s: rows.append(combined(s)) or 0.0}, opts=spec.step,
                  check_wrap=spec.check_wrap)
    names = list(rows[0]) if rows else []
    ns = NormSeries(spec.run_id, np.array(traj.times), {n: [r[n] for r in rows] for n in names})
    meta = dict(traj.meta)
    meta.update({"run_id": spec.run_id, "seed": spec.seed,
                 "dt": dt if not callable(dt) else {"start": dt(0.0), "end": dt(spec.t_final)},
                 "initial": info,
                 "wall_time": time.perf_counter() - t0, "version": __version__})
    meta["classification"] = classify_run(ns, spec.inflation_limit, spec.t_final,
                                          traj.meta["status"], TRACKED)
    meta["fits"] = standard_fits(ns, p, spec.t_final)
    return ns, meta


def _safe_fit(fn, ns, name, window, **kw):
    try:
        return fn(ns.times, ns[name], window, name=name, run_id=ns.run_id, **kw).to_dict()
    except (FitError, KeyError) as exc:
        return {"error": str(exc), "series": name}


def standard_fits(ns: NormSeries, p: FlowParams, t_final: float) -> dict:
    win = default_windows(p.mu, t_final)
    out = {
        "zero_exponent": _safe_fit(fit_power, ns, "L2_zero_phi_psi2", win["power"]),
        "grad_exponent": _safe_fit(fit_power, ns, "L2_dy_zero_phi_psi2", win["power"]),
    }
    ew = (win["exponential"][0], min(win["exponential"][1], t_final))
    out["ed_rate"] = _safe_fit(fit_exponential, ns, "L2_grad_nonzero", ew)
    if "log_En_0" in ns.series:
        out["energy_rate"] = _safe_fit(fit_exponential, ns, "log_En_0", ew, log_values=True)
    return out


# ---------------------------------------------------------------- matrices


@dataclass
class ScanRecord:
    mu: float
    alpha: float
    seed: int
    grid_id: str
    classification: str
    zero_exponent: float = math.nan
    grad_exponent: float = math.nan
    ed_rate: float = math.nan
    ed_rate_norm: float = math.nan
    psi1_sup_ratio: float = math.nan
    status: str = ""
    error: str = ""
    wall_time: float = math.nan  # kept out of scan.csv so reruns compare byte for byte


CSV_FIELDS = [f.name for f in fields(ScanRecord) if f.name != "wall_time"]


def grid_id(grid: Grid2D) -> str:
    return f"{grid.n_x}x{grid.n_y}_ly{grid.l_y:g}_d{grid.dealias:.6g}"


def cell_id(mu: float, alpha: float, seed: int, gid: str) -> str:
    return f"mu{mu:.6g}_a{alpha:.6g}_s{seed}_{gid}"


def _fit_value(fit: dict) -> float:
    return float(fit["value"]) if "value" in fit else math.nan


def run_cell(mu: float, alpha: float, seed: int, base: RunSpec, horizon_factor: float = 10.0,
             check_alpha: bool = True) -> ScanRecord:
    """One matrix cell; every failure ends up in the record instead of propagating."""
    gid = grid_id(base.grid)
    t0 = time.perf_counter()
    try:
        p = validate_params(replace(base.params, mu=mu, alpha=alpha, lam=None if base.params.lam is None
                                    else base.params.lam), check_alpha=check_alpha)
        T = horizon_factor * mu ** (-1.0 / 3.0)
        spec = replace(base, params=p, t_final=T, seed=seed, run_id=cell_id(mu, alpha, seed, gid))
        ns, meta = run_single(spec)
        fits = meta["fits"]
        rate = _fit_value(fits["ed_rate"])
        psi1 = float(np.max(ns["Linf_psi1"])) / mu ** (alpha - 2.0 / 3.0)
        return ScanRecord(mu, alpha, seed, gid, meta["classification"],
                          _fit_value(fits["zero_exponent"]), _fit_value(fits["grad_exponent"]),
                          rate, rate / mu ** (1.0 / 3.0), psi1, meta["status"], "",
                          time.perf_counter() - t0)
    except Exception as exc:  # recorded, never dropped
        return ScanRecord(mu, alpha, seed, gid, "inconclusive", status="error",
                          error=f"{type(exc).__name__}: {exc}", wall_time=time.perf_counter() - t0)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def header_lines(meta: dict) -> list[str]:
    return [f"# {k}: {meta[k]}" for k in sorted(meta)]


def records_to_csv(records: list[ScanRecord], meta: dict) -> str:
    buf = io.StringIO()
    for line in header_lines(meta):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sorted(records, key=lambda r: (r.mu, r.alpha, r.seed)):
        d = asdict(r)
        w.writerow([_fmt(d[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def read_scan_csv(path) -> list[ScanRecord]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        kw = {}
        for f in fields(ScanRecord):
            if f.name not in row:
                continue
            raw = row[f.name]
            if f.name in ("seed",):
                kw[f.name] = int(raw)
            elif f.name in ("grid_id", "classification", "status", "error"):
                kw[f.name] = raw
            else:
                kw[f.name] = float(raw)
        out.append(ScanRecord(**kw))
    return out


def _spec_hash(base: RunSpec, horizon_factor: float) -> str:
    d = {"params": base.params.as_dict(), "grid": grid_id(base.grid), "dt": base.dt,
         "dt_target": base.dt_target, "n_samples": base.n_samples, "initial": asdict(base.initial),
         "step": asdict(base.step), "horizon_factor": horizon_factor,
         "inflation_limit": base.inflation_limit, "version": __version__}
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _cell_job(args):
    mu, alpha, seed, base, hf, check_alpha = args
    return run_cell(mu, alpha, seed, base, hf, check_alpha)


def run_matrix(mus, alphas, seeds, base: RunSpec, *, horizon_factor: float = 10.0,
               out_dir=None, workers: int | None = None, check_alpha: bool = True,
               timestamp: str | None = None) -> list[ScanRecord]:
    """Run (or resume) every (mu, alpha, seed) cell; the table is sorted and deterministic.

    With ``out_dir`` each finished cell is stored as JSON under ``cells/`` and
    re-used on the next call, and ``scan.csv`` / ``summary.json`` are written.
    """
    cells = sorted({(float(m), float(a), int(s)) for m in mus for a in alphas for s in seeds})
    if not cells:
        raise ValueError("empty matrix")
    gid = grid_id(base.grid)
    cfg_hash = _spec_hash(base, horizon_factor)
    cache = Path(out_dir) / "cells" if out_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    done: dict = {}
    todo = []
    for c in cells:
        path = cache / f"{cell_id(*c, gid)}.json" if cache is not None else None
        if path is not None and path.exists():
            d = json.loads(path.read_text())
            if d.get("config_hash") == cfg_hash:
                done[c] = ScanRecord(**d["record"])
                continue
        todo.append(c)
    n_workers = workers if workers is not None else worker_budget()
    jobs = [(m, a, s, base, horizon_factor, check_alpha) for (m, a, s) in todo]
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(n_workers, len(jobs))) as ex:
            results = list(ex.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]
    for c, rec in zip(todo, results):
        done[c] = rec
        if cache is not None:
            path = cache / f"{cell_id(*c, gid)}.json"
            path.write_text(json.dumps({"config_hash": cfg_hash, "record": asdict(rec)},
                                       sort_keys=True, default=_json_default))
    records = [done[c] for c in cells]
    if out_dir is not None:
        write_outputs(records, Path(out_dir), cfg_hash, timestamp)
    return records


def _json_default(o):
    if isinstance(o, float) and math.isnan(o):
        return None
    raise TypeError(type(o))


def write_outputs(records: list[ScanRecord], out_dir: Path, cfg_hash: str,
                  timestamp: str | None = None) -> None:
    ts = timestamp or time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    meta = {"config_hash": cfg_hash, "version": __version__, "timestamp": ts,
            "stability": STABILITY_NOTE}
    (out_dir / "scan.csv").write_text(records_to_csv(records, meta))
    summary = {"meta": meta, "counts": {}, "wall_time": {}}
    for r in records:
        summary["counts"][r.classification] = summary["counts"].get(r.classification, 0) + 1
        summary["wall_time"][cell_id(r.mu, r.alpha, r.seed, r.grid_id)] = r.wall_time
    alphas = {r.alpha for r in records}
    if len(alphas) >= 2:
        summary["threshold"] = threshold_summary(records)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True,
                                                     default=_json_default))


# ---------------------------------------------------------------- thresholds


def threshold_summary(records) -> dict:
    """Per mu: largest alpha seen unstable and smallest alpha seen stable.

    An alpha counts as unstable when any seed transitioned or collapsed and as
    stable when every seed was stable; inconclusive cells are ignored.
    """
    alphas = {r.alpha for r in records}
    if len(alphas) < 2:
        raise ValueError("threshold summary needs at least two alpha values")
    out = {}
    for mu in sorted({r.mu for r in records}):
        by_alpha: dict = {}
        for r in records:
            if r.mu == mu:
                by_alpha.setdefault(r.alpha, []).append(r.classification)
        stable = sorted(a for a, cl in by_alpha.items() if cl and all(c == "stable" for c in cl))
        unstable = sorted(a for a, cl in by_alpha.items()
                          if any(c in ("transitioned", "collapsed") for c in cl))
        entry = {
            "largest_unstable_alpha": unstable[-1] if unstable else None,
            "smallest_stable_alpha": stable[0] if stable else None,
            "alphas": {repr(a): by_alpha[a] for a in sorted(by_alpha)},
            "empirical_only_alphas": [a for a in sorted(by_alpha) if a <= ALPHA_MIN],
            "label_below_11_3": OUTSIDE_LABEL,
        }
        if not unstable:
            entry["boundary"] = "no transition observed"
        elif not stable:
            entry["boundary"] = "no stable cell observed"
        else:
            lo, hi = unstable[-1], min((a for a in stable if a > unstable[-1]), default=None)
            entry["boundary"] = {"between": [lo, hi]} if hi is not None else "non-monotone"
            entry["monotone"] = bool(unstable[-1] < stable[0])
        out[repr(mu)] = entry
    return out


def render_table(records) -> str:
    """Plain-text table of a scan (the ``report`` subcommand)."""
    cols = ["mu", "alpha", "seed", "classification", "ed_rate_norm", "zero_exponent",
            "grad_exponent", "psi1_sup_ratio"]
    rows = [[_short(getattr(r, c)) for c in cols]
            for r in sorted(records, key=lambda r: (r.mu, r.alpha, r.seed))]
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    lines.append("")
    lines.append(STABILITY_NOTE)
    if any(r.alpha <= ALPHA_MIN for r in records):
        lines.append(f"alpha <= 11/3: {OUTSIDE_LABEL}")
    return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4g}"
    return str(v)
