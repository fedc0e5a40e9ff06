"""Synthetic load profiles, DC dispatch to measurements, scaling and windowing."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import GridCase, ObservationMatrix
from .io import load_arrays, save_arrays


class DispatchError(RuntimeError):
    pass


# ------------------------------------------------------------- load profiles

def synth_regional_profiles(n_regions: int, days: int, steps_per_day: int = 288, seed: int = 0,
                            interp_factor: int = 3, ar_phi: float = 0.98,
                            ar_std: float = 0.06) -> np.ndarray:
    """Positive regional load curves, shape (n_regions, days * steps_per_day).

    Each region is a two-harmonic daily shape times a weekly sinusoid times
    (1 + AR(1) noise). The curve is generated at ``steps_per_day //
    interp_factor`` points per day and linearly interpolated, so columns whose
    index is not a multiple of ``interp_factor`` are interpolated points.
    """
    if steps_per_day % interp_factor:
        raise ValueError("steps_per_day must be a multiple of interp_factor")
    rng = np.random.default_rng(seed)
    base_per_day = steps_per_day // interp_factor
    n_base = days * base_per_day + 1
    hours = np.arange(n_base) * 24.0 / base_per_day
    out = np.empty((n_regions, n_base))
    for r in range(n_regions):
        a1, a2 = rng.uniform(0.15, 0.3), rng.uniform(0.05, 0.15)
        p1, p2 = rng.uniform(14, 20), rng.uniform(7, 11)
        w_amp, w_phase = rng.uniform(0.05, 0.12), rng.uniform(0, 2 * np.pi)
        daily = 1 + a1 * np.cos(2 * np.pi * (hours - p1) / 24) + a2 * np.cos(4 * np.pi * (hours - p2) / 24)
        weekly = 1 + w_amp * np.cos(2 * np.pi * hours / (24 * 7) + w_phase)
        eps = np.empty(n_base)
        eps[0] = rng.normal(0, ar_std)
        innov = rng.normal(0, ar_std * np.sqrt(1 - ar_phi ** 2), n_base)
        for k in range(1, n_base):
            eps[k] = ar_phi * eps[k - 1] + innov[k]
        out[r] = daily * weekly * np.maximum(1 + eps, 0.2)
    fine = np.arange(days * steps_per_day) / interp_factor
    return np.vstack([np.interp(fine, np.arange(n_base), row) for row in out])


@dataclass
class LoadProfileSet:
    L: np.ndarray  # (n_profiles, N) p.u.
    interval_minutes: float = 5.0
    interp_factor: int = 3
    l_max: np.ndarray | None = None  # per-region peak after rescaling
    weights: np.ndarray | None = None  # (n_loads, n_regions) mixture weights
    dirichlet_alpha: float | None = None
    load_buses: tuple[int, ...] | None = None

    @property
    def n_steps(self) -> int:
        return self.L.shape[1]

    @property
    def region_assignment(self) -> np.ndarray | None:
        """Dominant region of each load."""
        return None if self.weights is None else np.argmax(self.weights, axis=1)


def rescale_profiles(raw: np.ndarray, l_max_range: tuple[float, float] = (0.25, 2.75), seed: int = 0,
                     interval_minutes: float = 5.0, interp_factor: int = 3) -> LoadProfileSet:
    """Scale each regional curve so that its peak equals a random l_max."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise ValueError("raw profiles must be non-negative")
    peaks = raw.max(axis=1)
    if np.any(peaks <= 0):
        raise ValueError(f"regions {np.flatnonzero(peaks <= 0).tolist()} are all zero")
    rng = np.random.default_rng(seed)
    l_max = rng.uniform(l_max_range[0], l_max_range[1], size=raw.shape[0])
    return LoadProfileSet(l_max[:, None] * raw / peaks[:, None], interval_minutes, interp_factor, l_max)


def assign_loads(profiles: LoadProfileSet, n_loads: int, alpha: float = 0.2, seed: int = 0,
                 jitter: float = 0.02, load_buses: tuple[int, ...] | None = None) -> LoadProfileSet:
    """Mix regional curves into per-bus loads with symmetric Dirichlet weights.

    Interpolated points get an extra uniform multiplicative jitter of +/- ``jitter``.
    """
    n_regions = profiles.L.shape[0]
    if n_loads < n_regions:
        raise ValueError("need at least as many loads as regions")
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.full(n_regions, alpha), size=n_loads)
    L = w @ profiles.L
    interp = np.arange(L.shape[1]) % profiles.interp_factor != 0
    L[:, interp] *= 1 + rng.uniform(-jitter, jitter, size=(n_loads, int(interp.sum())))
    return LoadProfileSet(L, profiles.interval_minutes, profiles.interp_factor, profiles.l_max, w, alpha,
                          load_buses)


def fit_to_capacity(loads: LoadProfileSet, case: GridCase, headroom: float = 0.8) -> tuple[LoadProfileSet, float]:
    """Uniformly shrink loads whose peak total exceeds ``headroom`` x generation capacity.

    Returns the (possibly) rescaled set and the factor applied.
    """
    cap = sum(g.pmax for g in case.generators) - sum(b.gs for b in case.buses)
    peak = loads.L.sum(axis=0).max()
    factor = min(1.0, headroom * cap / peak) if peak > 0 else 1.0
    out = LoadProfileSet(loads.L * factor, loads.interval_minutes, loads.interp_factor, loads.l_max,
                         loads.weights, loads.dirichlet_alpha, loads.load_buses)
    return out, factor


# ----------------------------------------------------------------- dispatch

def stepped_costs(case: GridCase, n_steps: int, steps_per_period: int, spread: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic/linear cost coefficients per (step, generator), re-drawn every period."""
    rng = np.random.default_rng(seed)
    c2 = np.array([max(g.cost[0], 1e-6) for g in case.generators])
    c1 = np.array([g.cost[1] for g in case.generators])
    n_periods = -(-n_steps // steps_per_period)
    f2 = rng.uniform(1 - spread, 1 + spread, size=(n_periods, len(c2)))
    f1 = rng.uniform(1 - spread, 1 + spread, size=(n_periods, len(c1)))
    period = np.arange(n_steps) // steps_per_period
    return c2 * f2[period], c1 * f1[period]


def economic_dispatch(demand: np.ndarray, pmin: np.ndarray, pmax: np.ndarray,
                      c2: np.ndarray, c1: np.ndarray, iters: int = 200) -> np.ndarray:
    """Equal-incremental-cost dispatch for each demand level.

    demand: (N,); c2, c1: (N, G) or (G,). Returns P_g with shape (N, G) and
    exact balance sum(P_g) == demand.
    """
    demand = np.asarray(demand, dtype=float)
    c2 = np.broadcast_to(c2, (len(demand), len(pmin)))
    c1 = np.broadcast_to(c1, (len(demand), len(pmin)))
    if np.any(demand > pmax.sum() + 1e-12) or np.any(demand < pmin.sum() - 1e-12):
        bad = int(np.flatnonzero((demand > pmax.sum() + 1e-12) | (demand < pmin.sum() - 1e-12))[0])
        raise DispatchError(f"dispatch infeasible at time step {bad}: demand {demand[bad]:.4f} p.u. "
                            f"outside [{pmin.sum():.4f}, {pmax.sum():.4f}]")

    def output(lam):
        return np.clip((lam[:, None] - c1) / (2 * c2), pmin, pmax)

    lo = (c1 + 2 * c2 * pmin).min(axis=1) - 1.0
    hi = (c1 + 2 * c2 * pmax).max(axis=1) + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        over = output(mid).sum(axis=1) > demand
        hi = np.where(over, mid, hi)
        lo = np.where(over, lo, mid)
    P = output(0.5 * (lo + hi))
    # close the remaining mismatch on units with room to move
    gap = demand - P.sum(axis=1)
    room = np.where(gap[:, None] > 0, pmax - P, P - pmin)
    share = room / np.maximum(room.sum(axis=1, keepdims=True), 1e-300)
    return P + gap[:, None] * share


def dc_power_flow(case: GridCase, obs: ObservationMatrix, injections: np.ndarray) -> np.ndarray:
    """Angles (n-1, N) solving the reduced B-matrix system for net injections (n, N)."""
    n_inj = case.n_buses
    B = np.delete(obs.H[:n_inj], case.bus_ids.index(case.slack_bus), axis=0)
    P = np.delete(injections, case.bus_ids.index(case.slack_bus), axis=0)
    return np.linalg.solve(B, P)


@dataclass
class MeasurementSeries:
    Z_raw: np.ndarray  # (m, N) noisy measurements, p.u.
    noise_std: np.ndarray  # (m,)
    noise_level: float
    Z_clean: np.ndarray | None = None  # noiseless measurements
    states: np.ndarray | None = None  # (n-1, N) true angles
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.Z_raw.shape[0]

    @property
    def n_steps(self) -> int:
        return self.Z_raw.shape[1]

    def slice(self, start: int, stop: int) -> MeasurementSeries:
        return MeasurementSeries(
            self.Z_raw[:, start:stop], self.noise_std, self.noise_level,
            None if self.Z_clean is None else self.Z_clean[:, start:stop],
            None if self.states is None else self.states[:, start:stop],
            dict(self.meta, offset=self.meta.get("offset", 0) + start))


def step_noise(seed: int, step: int, std: np.ndarray) -> np.ndarray:
    """Measurement noise for one time step from a (seed, step)-derived stream."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step,)))
    return rng.standard_normal(len(std)) * std


def noise_scale(Z_clean: np.ndarray, floor: float = 0.01) -> np.ndarray:
    """Per-measurement magnitude: mean absolute noiseless value, floored (p.u.)."""
    return np.maximum(np.abs(Z_clean).mean(axis=1), floor)


def dispatch_and_measure(case: GridCase, obs: ObservationMatrix, loads: LoadProfileSet,
                         noise_level: float = 0.01, seed: int = 0, cost_spread: float = 0.1,
                         cost_period: int = 288, noise_std: np.ndarray | None = None) -> MeasurementSeries:
    """Dispatch generation for every step and assemble noisy measurements.

    Generator costs are re-drawn every ``cost_period`` steps by factors in
    [1 - cost_spread, 1 + cost_spread]. Noise is Gaussian with per-measurement
    standard deviation ``noise_level`` x mean absolute noiseless value unless
    ``noise_std`` is given.
    """
    ids = case.bus_ids
    idx = case.bus_index()
    N = loads.n_steps
    load_buses = loads.load_buses or tuple(case.load_buses)
    if len(load_buses) != loads.L.shape[0]:
        raise ValueError("number of load profiles does not match the number of load buses")
    Pd = np.zeros((len(ids), N))
    for k, bus in enumerate(load_buses):
        Pd[idx[bus]] += loads.L[k]
    Gs = np.array([case.buses[[b.id for b in case.buses].index(bid)].gs for bid in ids])
    demand = Pd.sum(axis=0) + Gs.sum()

    pmin = np.array([g.pmin for g in case.generators])
    pmax = np.array([g.pmax for g in case.generators])
    c2, c1 = stepped_costs(case, N, cost_period, cost_spread, seed)
    Pg = economic_dispatch(demand, pmin, pmax, c2, c1)
    Cg = np.zeros((len(ids), len(case.generators)))
    for j, g in enumerate(case.generators):
        Cg[idx[g.bus], j] = 1.0

    # shift-transformer terms enter P_bus and P_f as constants and are removed here
    A = case.incidence()
    b = np.array([br.b for br in case.branches])
    shift = np.array([br.shift for br in case.branches])
    Pf_shift = -b * shift
    Pbus_shift = A.T @ Pf_shift
    injections = Cg @ Pg.T - Pd - Gs[:, None] - Pbus_shift[:, None]
    theta = dc_power_flow(case, obs, injections)
    Z_clean = obs.H @ theta
    std = noise_level * noise_scale(Z_clean) if noise_std is None else np.asarray(noise_std, dtype=float)
    noise = np.column_stack([step_noise(seed, k, std) for k in range(N)]) if N else np.zeros((obs.m, 0))
    return MeasurementSeries(Z_clean + noise, std, noise_level, Z_clean, theta,
                             {"seed": seed, "generation": Pg.T})


# ------------------------------------------------------------------ scaling

@dataclass(frozen=True)
class MinMaxScaler:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.hi <= self.lo

    @property
    def span(self) -> np.ndarray:
        return np.where(self.constant, 1.0, self.hi - self.lo)

    def apply(self, Z: np.ndarray) -> np.ndarray:
        """Scale columns of measurements (attributes on axis 0)."""
        Z = np.asarray(Z, dtype=float)
        shape = (-1,) + (1,) * (Z.ndim - 1)
        out = (Z - self.lo.reshape(shape)) / self.span.reshape(shape)
        return np.where(self.constant.reshape(shape), 0.0, out)

    def invert(self, S: np.ndarray) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        shape = (-1,) + (1,) * (S.ndim - 1)
        return S * self.span.reshape(shape) + self.lo.reshape(shape)

    def to_dict(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> MinMaxScaler:
        return cls(np.asarray(d["min"], dtype=float), np.asarray(d["max"], dtype=float))


def fit_scaler(Z_raw: np.ndarray) -> MinMaxScaler:
    Z_raw = np.asarray(Z_raw, dtype=float)
    if Z_raw.ndim != 2 or Z_raw.shape[1] == 0:
        raise ValueError("need a non-empty (m, N) training range")
    return MinMaxScaler(Z_raw.min(axis=1), Z_raw.max(axis=1))


# ---------------------------------------------------------------- windowing

@dataclass(frozen=True)
class WindowTensor:
    """Sliding windows with stride 1; ``windows[i][:, j]`` is column ``start + i + j``."""

    windows: np.ndarray  # (count, m, T)
    T: int
    start: int = 0

    @property
    def count(self) -> int:
        return self.windows.shape[0]


def make_windows(Z_scaled: np.ndarray, T: int = 6, start: int = 0) -> WindowTensor:
    Z_scaled = np.asarray(Z_scaled, dtype=float)
    if Z_scaled.shape[1] < T:
        raise ValueError(f"series of length {Z_scaled.shape[1]} is shorter than the window length {T}")
    view = sliding_window_view(Z_scaled, T, axis=1)  # (m, count, T)
    return WindowTensor(view.transpose(1, 0, 2), T, start)


def split_windows(count: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random partition of window indices into train and validation sets."""
    perm = np.random.default_rng(seed).permutation(count)
    k = int(round(train_fraction * count))
    return np.sort(perm[:k]), np.sort(perm[k:])


# -------------------------------------------------------------- persistence

def save_series(path: str | Path, series: MeasurementSeries, scaler: MinMaxScaler | None = None,
                config_hash: str = "", seed: int | None = None, extra: dict | None = None) -> None:
    arrays = {"Z_raw": series.Z_raw, "noise_std": series.noise_std}
    if series.Z_clean is not None:
        arrays["Z_clean"] = series.Z_clean
    if series.states is not None:
        arrays["states"] = series.states
    manifest = {
        "shape": list(series.Z_raw.shape),
        "noise_level": series.noise_level,
        "scaler": None if scaler is None else scaler.to_dict(),
        "seed": series.meta.get("seed") if seed is None else seed,
        "config_hash": config_hash,
        "offset": series.meta.get("offset", 0),
    }
    manifest.update(extra or {})
    save_arrays(path, "measurement_series", manifest, arrays)


def load_series(path: str | Path) -> tuple[MeasurementSeries, MinMaxScaler | None, dict]:
    header, arrays = load_arrays(path, "measurement_series")
    scaler = None if header.get("scaler") is None else MinMaxScaler.from_dict(header["scaler"])
    series = MeasurementSeries(arrays["Z_raw"], arrays["noise_std"], float(header["noise_level"]),
                               arrays.get("Z_clean"), arrays.get("states"),
                               {"seed": header.get("seed"), "offset": header.get("offset", 0)})
    return series, scaler, header


def series_to_csv(path: str | Path, series: MeasurementSeries, tags=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        names = [f"{t.kind}:{t.ref}" for t in tags] if tags is not None else [f"z{j}" for j in range(series.m)]
        w.writerow(["step"] + names)
        for k in range(series.n_steps):
            w.writerow([k] + [repr(float(v)) for v in series.Z_raw[:, k]])
