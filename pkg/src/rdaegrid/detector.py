"""Anomaly scores, per-missing-ratio thresholds, decisions and detection metrics."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackScenario, CampaignContext, MaskSampler
from .data import MinMaxScaler
from .nn.model import AeModel, random_column_masks

# missing-fraction ranges and the ratio each one is calibrated at
BUCKET_EDGES = (0.0, 0.025, 0.075, 0.125, 0.175, float("inf"))
BUCKET_GAMMAS = (0.0, 0.05, 0.10, 0.15, 0.20)


def bucket_index(fraction: float | np.ndarray) -> np.ndarray | int:
    """Bucket of an observed missing fraction; ranges are closed on the left."""
    f = np.asarray(fraction, dtype=float)
    if np.any(f < 0) or np.any(np.isnan(f)):
        raise ValueError("missing fraction must be non-negative")
    idx = np.searchsorted(BUCKET_EDGES, f, side="right") - 1
    return int(idx) if idx.ndim == 0 else idx


def bucket_gamma(fraction: float) -> float:
    return BUCKET_GAMMAS[bucket_index(fraction)]


# ------------------------------------------------------------------- scores

@dataclass
class ScoreSeries:
    scores: np.ndarray
    gamma: np.ndarray  # observed missing fraction per window
    masks: np.ndarray | None = field(default=None, repr=False)  # (B, m) bool


# Scores feed quantile thresholds around 1e-3; single precision keeps
# recalibration well under a second and moves scores by about 1e-7 relative.
SCORE_DTYPE = np.float32


def _fit_length(model: AeModel, windows: np.ndarray) -> np.ndarray:
    # models with shorter windows (the dense baseline sees one column) score the tail
    if windows.shape[-1] < model.T:
        raise ValueError(f"windows of length {windows.shape[-1]} are shorter than the model's {model.T}")
    return windows[..., windows.shape[-1] - model.T:]


def score(model: AeModel, windows: np.ndarray, mask: np.ndarray | None = None,
          dtype=SCORE_DTYPE) -> np.ndarray | float:
    """Mean squared reconstruction error per window.

    ``windows`` are scaled (B, m, T) or (m, T). ``mask`` flags unavailable
    attributes of the final column, shape (B, m) or (m,); those entries are
    zeroed on input and the final column's error is averaged over the
    available attributes only. The reconstruction runs in ``dtype``; errors
    are accumulated in float64.
    """
    windows = np.asarray(windows, dtype=float)
    single = windows.ndim == 2
    W = _fit_length(model, windows[None] if single else windows)
    B, m, T = W.shape
    d = np.zeros((B, m), dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), (B, m))
    W = W.astype(dtype).astype(float)  # compare against the input the model actually saw
    X = W.copy()
    X[:, :, -1] = np.where(d, 0.0, X[:, :, -1])
    err = (model.reconstruct(X, dtype=dtype) - W) ** 2
    cols = err[:, :, :-1].mean(axis=1) if T > 1 else np.zeros((B, 0))
    avail = (~d).sum(axis=1)
    if np.any(avail == 0):
        raise ValueError("every attribute of the final column is masked")
    last = np.where(d, 0.0, err[:, :, -1]).sum(axis=1) / avail
    s = (cols.sum(axis=1) + last) / T
    return float(s[0]) if single else s


def draw_masks(m: int, count: int, gamma: float, rng: np.random.Generator,
               sampler: MaskSampler | None = None) -> np.ndarray:
    """Availability masks at a fixed ratio, legal ones when a sampler is given."""
    if sampler is not None:
        return sampler.mcar_many(gamma, count, (), rng)
    k = int(np.floor(gamma * m + 1e-9))
    return random_column_masks((count, m), np.full(count, k), rng)


def masked_scores(model: AeModel, windows: np.ndarray, gamma: float, seed: int | np.random.Generator = 0,
                  sampler: MaskSampler | None = None) -> ScoreSeries:
    rng = np.random.default_rng(seed)
    d = draw_masks(windows.shape[1], len(windows), gamma, rng, sampler)
    return ScoreSeries(score(model, windows, d), d.mean(axis=1), d)


# --------------------------------------------------------------- thresholds

@dataclass
class ThresholdTable:
    gammas: list[float]
    taus: list[float]
    alpha: float
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.gammas) != len(self.taus):
            raise ValueError("one threshold per bucket")

    def tau_for(self, fraction: float) -> float:
        g = bucket_gamma(fraction)
        for gamma, tau in zip(self.gammas, self.taus):
            if abs(gamma - g) < 1e-12:
                return tau
        raise KeyError(f"no threshold calibrated for the bucket at gamma={g}")

    def ranges(self) -> list[tuple[float, float, float]]:
        return [(BUCKET_EDGES[i], BUCKET_EDGES[i + 1], BUCKET_GAMMAS[i]) for i in range(len(BUCKET_GAMMAS))]

    def with_bucket(self, gamma: float, tau: float) -> ThresholdTable:
        pairs = dict(zip(self.gammas, self.taus))
        pairs[float(gamma)] = float(tau)
        g = sorted(pairs)
        return ThresholdTable(g, [pairs[k] for k in g], self.alpha, dict(self.lineage))

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "buckets": [{"gamma": g, "lo": BUCKET_EDGES[bucket_index(g)], "hi": BUCKET_EDGES[bucket_index(g) + 1],
                         "tau2": t} for g, t in zip(self.gammas, self.taus)],
            "lineage": self.lineage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ThresholdTable:
        b = d["buckets"]
        return cls([float(x["gamma"]) for x in b], [float(x["tau2"]) for x in b], float(d["alpha"]),
                   d.get("lineage", {}))

    def save(self, path: str | Path) -> None:
        # "Infinity" is not valid JSON, so the open last range is written as null
        d = self.to_dict()
        for b in d["buckets"]:
            if not np.isfinite(b["hi"]):
                b["hi"] = None
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> ThresholdTable:
        return cls.from_dict(json.loads(Path(path).read_text()))


def quantile_threshold(scores: np.ndarray, alpha: float) -> float:
    if len(scores) == 0:
        raise ValueError("cannot calibrate on an empty validation set")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    return float(np.quantile(scores, alpha))


def validation_scores(model: AeModel, windows: np.ndarray, gammas: Sequence[float] = BUCKET_GAMMAS,
                      seed: int = 0, sampler: MaskSampler | None = None) -> dict[float, np.ndarray]:
    """Clean-window scores with the final column masked at each ratio."""
    if len(windows) == 0:
        raise ValueError("cannot calibrate on an empty validation set")
    ss = np.random.SeedSequence(seed).spawn(len(gammas))
    return {float(g): masked_scores(model, windows, g, np.random.default_rng(s), sampler).scores
            for g, s in zip(gammas, ss)}


def table_from_scores(scores: dict[float, np.ndarray], alpha: float = 0.95, lineage: dict | None = None) -> ThresholdTable:
    g = sorted(scores)
    return ThresholdTable(g, [quantile_threshold(scores[k], alpha) for k in g], alpha, dict(lineage or {}))


def calibrate_thresholds(model: AeModel, windows: np.ndarray, gammas: Sequence[float] = BUCKET_GAMMAS,
                         alpha: float = 0.95, seed: int = 0, sampler: MaskSampler | None = None,
                         lineage: dict | None = None) -> ThresholdTable:
    return table_from_scores(validation_scores(model, windows, gammas, seed, sampler), alpha, lineage)


def add_threshold(table: ThresholdTable, model: AeModel, windows: np.ndarray, gamma: float, seed: int = 0,
                  sampler: MaskSampler | None = None) -> tuple[ThresholdTable, float]:
    """Calibrate one more ratio on an existing table; returns the table and the seconds it took."""
    t0 = time.perf_counter()
    s = masked_scores(model, windows, gamma, seed, sampler).scores
    out = table.with_bucket(gamma, quantile_threshold(s, table.alpha))
    return out, time.perf_counter() - t0


def detect(model: AeModel, table: ThresholdTable, window: np.ndarray, fraction: float,
           mask: np.ndarray | None = None) -> bool:
    """Alarm iff the window's score reaches the threshold of its missing-fraction bucket."""
    return bool(score(model, window, mask) >= table.tau_for(fraction))


def decide(scores: np.ndarray, fractions: np.ndarray, table: ThresholdTable) -> np.ndarray:
    taus = np.array([table.tau_for(f) for f in np.atleast_1d(fractions)])
    return np.asarray(scores) >= taus


# ------------------------------------------------------------------ metrics

@dataclass
class DetectionReport:
    key: dict
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @staticmethod
    def _ratio(a: float, b: float) -> float:
        return a / b if b else 0.0

    @property
    def tpr(self) -> float:
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> float:
        return self._ratio(self.fp, self.fp + self.tn)

    @property
    def precision(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return self.tpr

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return self._ratio(2 * p * r, p + r)

    def row(self) -> dict:
        out = dict(self.key)
        out.update(tp=self.tp, fp=self.fp, tn=self.tn, fn=self.fn, tpr=self.tpr, fpr=self.fpr,
                   precision=self.precision, recall=self.recall, f1=self.f1)
        return out


GROUP_KEYS = ("kind", "bus", "mu", "gamma", "scheme", "steps")


@dataclass
class CampaignResult:
    reports: list[DetectionReport]
    clean: DetectionReport
    scenario_scores: np.ndarray
    scenario_alarms: np.ndarray
    alpha_curve: list[dict]
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [self.clean.row()] + [r.row() for r in self.reports]

    def rate(self, **where) -> float:
        """Pooled detection rate over reports whose key matches ``where``."""
        hit = [r for r in self.reports if all(_same(r.key.get(k), v) for k, v in where.items())]
        if not hit:
            raise KeyError(f"no reports match {where}")
        tp = sum(r.tp for r in hit)
        return tp / max(1, sum(r.tp + r.fn for r in hit))


def _same(a, b) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        return a is not None and b is not None and abs(float(a) - float(b)) < 1e-12
    return a == b


def group_reports(scenarios: Sequence[AttackScenario], alarms: np.ndarray, keys: Iterable[str],
                  clean_alarms: dict[float, np.ndarray]) -> list[DetectionReport]:
    """Counts per grouping key; negatives are clean windows in the group's bucket."""
    keys = tuple(keys)
    groups: dict[tuple, DetectionReport] = {}
    buckets: dict[tuple, float] = {}
    for sc, hit in zip(scenarios, alarms):
        k = tuple(getattr(sc, name) for name in keys)
        rep = groups.setdefault(k, DetectionReport(dict(zip(keys, k))))
        if hit:
            rep.tp += 1
        else:
            rep.fn += 1
        frac = sc.mask.gamma if sc.mask is not None else 0.0
        buckets.setdefault(k, bucket_gamma(frac))
    for k, rep in groups.items():
        neg = clean_alarms.get(buckets[k])
        if neg is not None:
            rep.fp = int(neg.sum())
            rep.tn = int(len(neg) - neg.sum())
    return list(groups.values())


def alpha_curve(val: dict[float, np.ndarray], test: dict[float, np.ndarray],
                alphas: Sequence[float] = (0.80, 0.85, 0.90, 0.95, 0.99)) -> list[dict]:
    """Held-out false-positive rate against the calibration quantile, per ratio."""
    rows = []
    for g in sorted(test):
        for a in alphas:
            tau = quantile_threshold(val[g], a)
            rows.append({"gamma": g, "alpha": a, "tau2": tau, "fpr": float(np.mean(test[g] >= tau))})
    return rows


def evaluate_campaign(model: AeModel, table: ThresholdTable, scenarios: Sequence[AttackScenario],
                      ctx: CampaignContext, scaler: MinMaxScaler, clean_windows: np.ndarray,
                      val_scores: dict[float, np.ndarray] | None = None, seed: int = 0,
                      group_by: Iterable[str] = GROUP_KEYS) -> CampaignResult:
    """Score every scenario and clean test window and tabulate detections.

    ``clean_windows`` are scaled test windows; they supply false positives per
    bucket. With ``val_scores`` the false-positive-rate-versus-alpha curve is
    included.
    """
    gammas = sorted(set(table.gammas))
    test = validation_scores(model, clean_windows, gammas, seed, ctx.sampler) if len(clean_windows) else {}
    clean_alarms = {g: test[g] >= table.tau_for(g) for g in test}

    scores = np.zeros(len(scenarios))
    if scenarios:
        raw = np.stack([ctx.apply(sc) for sc in scenarios])
        masks = np.vstack([sc.mask.d for sc in scenarios])
        scores = score(model, scaler.apply(raw.transpose(1, 0, 2)).transpose(1, 0, 2), masks)
    fractions = np.array([sc.mask.gamma for sc in scenarios])
    alarms = decide(scores, fractions, table) if scenarios else np.zeros(0, dtype=bool)

    clean = DetectionReport({"kind": "clean", "gamma": 0.0})
    if 0.0 in clean_alarms:
        clean.fp = int(clean_alarms[0.0].sum())
        clean.tn = len(clean_alarms[0.0]) - clean.fp
    reports = group_reports(scenarios, alarms, group_by, clean_alarms)
    curve = alpha_curve(val_scores, test) if val_scores is not None and test else []
    return CampaignResult(reports, clean, scores, alarms, curve,
                          {"clean_fpr": {str(g): float(a.mean()) for g, a in clean_alarms.items()}})
