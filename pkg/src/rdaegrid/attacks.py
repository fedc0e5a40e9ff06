"""Stealthy FDIA synthesis, availability masks, replay attacks and campaigns."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .estimation import WlsEstimator
from .grid import ObservationMatrix, critical_measurements, observable_after_mask, observable_masks
from .io import config_hash

DEFAULT_MUS = tuple(s * v for v in (0.03, 0.05, 0.07, 0.10, 0.15, 0.20, 0.30) for s in (1, -1))


class InfeasibleMaskError(RuntimeError):
    pass


def contaminated_set(obs: ObservationMatrix, bus: int) -> frozenset[int]:
    """Rows touched by an attack on the angle of ``bus``."""
    return frozenset(np.flatnonzero(obs.H[:, obs.column_of(bus)]).tolist())


def synth_fdia(obs: ObservationMatrix, bus: int, mu: float, x_ref: np.ndarray | None = None,
               relative: bool = True) -> np.ndarray:
    """Perfect single-state attack ``a = H c`` with ``c`` nonzero only at ``bus``.

    In relative mode the shift is ``mu * x_ref[bus]``; otherwise it is ``mu`` radians.
    """
    col = obs.column_of(bus)
    if relative:
        if x_ref is None:
            raise ValueError("relative attacks need a reference state")
        shift = mu * float(x_ref[col])
    else:
        shift = mu
    return shift * obs.H[:, col]


def attack_neighborhood(obs: ObservationMatrix, bus: int) -> frozenset[int]:
    """Measurements adjacent to the contaminated set, excluding that set.

    The contaminated set contains the injection rows of ``bus`` and its
    neighbours. Every measurement that touches one of those buses (its
    injection, an incident flow, or a neighbouring injection) belongs to the
    neighbourhood unless it is itself contaminated.
    """
    Ia = contaminated_set(obs, bus)
    centre = [tag.ref for r, tag in enumerate(obs.index_map) if r in Ia and tag.kind == "inj"]
    cols = [obs.all_buses.index(b) for b in centre]
    touched = np.flatnonzero(np.any(obs.H_full[:, cols] != 0, axis=1))
    return frozenset(touched.tolist()) - Ia


@dataclass(frozen=True)
class AvailabilityMask:
    d: np.ndarray  # bool (m,), True = unavailable
    scheme: str = "none"  # none | mcar | mar

    @property
    def gamma(self) -> float:
        return float(self.d.sum()) / len(self.d)

    @property
    def indices(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.d).tolist())

    @classmethod
    def empty(cls, m: int) -> AvailabilityMask:
        return cls(np.zeros(m, dtype=bool), "none")

    @classmethod
    def from_indices(cls, m: int, idx: Iterable[int], scheme: str) -> AvailabilityMask:
        d = np.zeros(m, dtype=bool)
        d[list(idx)] = True
        return cls(d, scheme)


class MaskSampler:
    """Draws legal availability masks; the critical set is computed once per grid."""

    def __init__(self, obs: ObservationMatrix, max_retries: int = 200):
        self.obs = obs
        self.max_retries = max_retries
        self.critical = critical_measurements(obs)

    def mcar(self, gamma_range: tuple[float, float], exclusions: Iterable[int] = (),
             rng: np.random.Generator | int = 0) -> AvailabilityMask:
        lo, hi = gamma_range
        if not 0.0 <= lo <= hi <= 0.5:
            raise ValueError("gamma_range must lie within [0, 0.5]")
        rng = np.random.default_rng(rng)
        m = self.obs.m
        pool = np.array(sorted(set(range(m)) - set(exclusions) - self.critical), dtype=int)
        for _ in range(self.max_retries):
            ratio = rng.uniform(lo, hi) if hi > lo else lo
            k = min(int(np.floor(ratio * m + 1e-9)), len(pool))
            chosen = rng.choice(pool, size=k, replace=False) if k else np.array([], dtype=int)
            if observable_after_mask(self.obs, chosen):
                return AvailabilityMask.from_indices(m, chosen.tolist(), "mcar")
        raise InfeasibleMaskError(f"no observable mask found in {self.max_retries} draws for gamma {gamma_range}")

    def mcar_many(self, gamma: float, count: int, exclusions: Iterable[int] = (),
                  rng: np.random.Generator | int = 0) -> np.ndarray:
        """``count`` legal MCAR masks at a fixed ratio, as a (count, m) bool array.

        Same law as repeated :meth:`mcar` calls with ``(gamma, gamma)``, drawn and
        checked for observability in bulk; illegal draws are redrawn.
        """
        if not 0.0 <= gamma <= 0.5:
            raise ValueError("gamma must lie within [0, 0.5]")
        rng = np.random.default_rng(rng)
        m = self.obs.m
        pool = np.array(sorted(set(range(m)) - set(exclusions) - self.critical), dtype=int)
        k = min(int(np.floor(gamma * m + 1e-9)), len(pool))
        out = np.zeros((count, m), dtype=bool)
        todo = np.arange(count)
        for _ in range(self.max_retries):
            if not len(todo) or not k:
                return out
            # the k smallest of uniform keys give a uniform k-subset of the pool
            picks = pool[np.argpartition(rng.random((len(todo), len(pool))), k - 1, axis=1)[:, :k]]
            d = np.zeros((len(todo), m), dtype=bool)
            np.put_along_axis(d, picks, True, axis=1)
            ok = observable_masks(self.obs, d)
            out[todo[ok]] = d[ok]
            todo = todo[~ok]
        raise InfeasibleMaskError(f"no observable mask found in {self.max_retries} draws for gamma {gamma}")

    def mar(self, bus: int) -> AvailabilityMask:
        return mar_mask(self.obs, bus, self.critical)


def mcar_mask(obs: ObservationMatrix, gamma_range: tuple[float, float], exclusions: Iterable[int] = (),
              seed: int = 0) -> AvailabilityMask:
    return MaskSampler(obs).mcar(gamma_range, exclusions, seed)


def mar_mask(obs: ObservationMatrix, bus: int, critical: frozenset[int] | None = None) -> AvailabilityMask:
    """Blind the whole attack neighbourhood of ``bus``."""
    hood = attack_neighborhood(obs, bus)
    critical = critical_measurements(obs) if critical is None else critical
    if hood & critical:
        raise InfeasibleMaskError(f"neighbourhood of bus {bus} contains critical measurements {sorted(hood & critical)}")
    if not observable_after_mask(obs, sorted(hood)):
        raise InfeasibleMaskError(f"blinding the neighbourhood of bus {bus} makes the grid unobservable")
    return AvailabilityMask.from_indices(obs.m, hood, "mar")


# ---------------------------------------------------------------- scenarios

@dataclass
class AttackScenario:
    """One attack applied at the end of one test window.

    ``a`` holds the realised raw-unit injection per attacked step, shape
    (steps, m); it is filled in by :meth:`CampaignContext.apply`.
    """

    id: int
    kind: str  # fdia | combined | replay
    window: int
    bus: int | None = None
    mu: float = 0.0
    steps: int = 1
    gamma: float = 0.0
    scheme: str = "none"
    seed: int = 0
    a: np.ndarray | None = field(default=None, repr=False)
    mask: AvailabilityMask | None = field(default=None, repr=False)

    @property
    def contaminated(self) -> frozenset[int]:
        if self.a is None:
            return frozenset()
        return frozenset(np.flatnonzero(np.any(self.a != 0, axis=0)).tolist())

    def meta(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("a", "mask")}
        if self.mask is not None:
            d["mask"] = sorted(self.mask.indices)
            d["gamma_observed"] = self.mask.gamma
        return d


@dataclass
class CampaignConfig:
    buses: Sequence[int] | None = None  # None: every non-reference bus
    mus: Sequence[float] = DEFAULT_MUS
    gammas: Sequence[float] = (0.0,)
    scheme: str = "mcar"  # mcar | mar
    steps: Sequence[int] = (1,)
    windows_per_case: int = 1
    replay: bool = False
    replay_gammas: Sequence[float] = (0.0,)
    replay_windows: int = 0
    t0: int = 288
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def build_campaign(config: CampaignConfig, obs: ObservationMatrix, n_windows: int,
                   min_window: int = 0) -> list[AttackScenario]:
    """Deterministic scenario list; attacked windows are drawn from [min_window, n_windows)."""
    rng = np.random.default_rng(config.seed)
    buses = list(obs.state_buses) if config.buses is None else list(config.buses)
    out: list[AttackScenario] = []
    for bus in buses:
        obs.column_of(bus)  # rejects the reference bus
        for mu in config.mus:
            for gamma in config.gammas:
                for steps in config.steps:
                    for w in rng.integers(0, n_windows, size=config.windows_per_case):
                        scheme = config.scheme if (gamma > 0 or config.scheme == "mar") else "none"
                        kind = "combined" if scheme != "none" else "fdia"
                        out.append(AttackScenario(len(out), kind, int(w), int(bus), float(mu), int(steps),
                                                  float(gamma), scheme, int(rng.integers(2 ** 31))))
    if config.replay:
        for gamma in config.replay_gammas:
            for w in rng.integers(min_window, n_windows, size=config.replay_windows):
                out.append(AttackScenario(len(out), "replay", int(w), None, 0.0, 1, float(gamma),
                                          "mcar" if gamma > 0 else "none", int(rng.integers(2 ** 31))))
    return out


def campaign_hash(scenarios: Sequence[AttackScenario]) -> str:
    return config_hash([s.meta() for s in scenarios])


class CampaignContext:
    """Realises scenarios against a raw measurement history.

    ``Z_history`` is the full raw series (m, N); test windows start at
    column ``test_offset`` so replay can reach back ``t0`` steps.
    """

    def __init__(self, obs: ObservationMatrix, estimator: WlsEstimator, Z_history: np.ndarray,
                 test_offset: int, T: int, sampler: MaskSampler | None = None, relative: bool = True):
        self.obs = obs
        self.estimator = estimator
        self.Z = Z_history
        self.offset = test_offset
        self.T = T
        self.sampler = sampler or MaskSampler(obs)
        self.relative = relative

    def window_raw(self, w: int) -> np.ndarray:
        s = self.offset + w
        return self.Z[:, s:s + self.T].copy()

    def apply(self, sc: AttackScenario, t0: int = 288) -> np.ndarray:
        """Attacked raw window (m, T); fills ``sc.a`` and ``sc.mask``."""
        win = self.window_raw(sc.window)
        rng = np.random.default_rng(sc.seed)
        if sc.kind == "replay":
            sc.a, win = replay_columns(self.Z, self.offset + sc.window + self.T - 1, t0, win)
            excl: frozenset[int] = frozenset()
        else:
            if not 1 <= sc.steps <= self.T:
                raise ValueError("attack steps must be between 1 and the window length")
            x_hat = self.estimator.estimate(win[:, self.T - sc.steps:].T)
            a = np.vstack([synth_fdia(self.obs, sc.bus, sc.mu, x, self.relative) for x in x_hat])
            win[:, self.T - sc.steps:] += a.T
            sc.a = a
            excl = contaminated_set(self.obs, sc.bus)
        if sc.scheme == "mar":
            sc.mask = self.sampler.mar(sc.bus)
        elif sc.gamma > 0:
            sc.mask = self.sampler.mcar((sc.gamma, sc.gamma), excl, rng)
        else:
            sc.mask = AvailabilityMask.empty(self.obs.m)
        return win


def replay_columns(Z: np.ndarray, t: int, t0: int, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if t < t0:
        raise ValueError(f"replay at t={t} needs t >= t0={t0}")
    out = window.copy()
    out[:, -1] = Z[:, t - t0]
    a = (Z[:, t - t0] - Z[:, t])[None, :]
    return a, out


def replay_scenario(Z_raw: np.ndarray, t: int, t0: int = 288) -> AttackScenario:
    """Previous-day replay of column ``t``; ``a`` is the equivalent injection."""
    if t < t0:
        raise ValueError(f"replay at t={t} needs t >= t0={t0}")
    a = (Z_raw[:, t - t0] - Z_raw[:, t])[None, :]
    return AttackScenario(0, "replay", t, a=a, mask=AvailabilityMask.empty(Z_raw.shape[0]))


def write_manifest(path: str | Path, scenarios: Sequence[AttackScenario]) -> None:
    with open(path, "w") as fh:
        for sc in scenarios:
            fh.write(json.dumps(sc.meta(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
