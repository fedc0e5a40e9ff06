"""Run configuration and the pipeline stages the command line drives."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .attacks import CampaignConfig, CampaignContext, MaskSampler, build_campaign
from .data import (MinMaxScaler, assign_loads, dispatch_and_measure, fit_scaler, fit_to_capacity, load_series,
                   make_windows, rescale_profiles, save_series, split_windows, synth_regional_profiles, MeasurementSeries)
from .estimation import NoiseModel, WlsEstimator
from .grid import GridCase, ObservationMatrix, build_observation_matrix, load_case
from .io import ManifestError, config_hash, load_arrays, save_arrays
from .nn.model import AeModel, desk_sizes
from .nn.train import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataConfig:
    case: str = "case14"
    regions: int = 4
    train_days: int = 60
    test_days: int = 20
    steps_per_day: int = 288
    noise_level: float = 0.01
    l_max_range: tuple[float, float] = (0.25, 2.75)
    dirichlet_alpha: float = 0.2
    jitter: float = 0.02
    headroom: float = 0.8
    cost_spread: float = 0.1
    T: int = 6
    train_fraction: float = 0.8


@dataclass
class ModelConfig:
    kind: str = "lstm"
    sizes: list[int] | None = None  # None: desk widths for the case
    hidden_dropout: float = 0.005
    input_dropout: tuple[float, float] = (0.0, 0.2)
    decoder_input: str = "sequence"
    window: int | None = None  # None: the data window length (dense models default to 1)


@dataclass
class DetectConfig:
    alpha: float = 0.95
    gammas: tuple[float, ...] = (0.0, 0.05, 0.10, 0.15, 0.20)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self, *sections: str) -> str:
        d = self.to_dict()
        return config_hash({k: d[k] for k in sections} if sections else d)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            sub = _SECTIONS.get(f.name)
            kw[f.name] = _build(sub, d[f.name], f.name) if sub else d[f.name]
        return cls(**kw)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "detect": DetectConfig,
             "campaign": CampaignConfig}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ValueError(f"config section [{section}] must be a table")
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    out = {}
    for k, v in values.items():
        out[k] = tuple(v) if isinstance(v, list) and k not in ("sizes", "buses") else v
    return cls(**out)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        d = tomllib.loads(text)
    else:
        d = json.loads(text)
    return RunConfig.from_dict(d)


def stage_seed(master: int, stage: str) -> int:
    """Independent seed per pipeline stage, so editing one stage leaves the others' draws alone."""
    digest = hashlib.sha256(f"{master}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ------------------------------------------------------------------ data

@dataclass
class Dataset:
    case: GridCase
    obs: ObservationMatrix
    series: MeasurementSeries
    scaler: MinMaxScaler
    train_steps: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    T: int
    config_hash: str = ""

    @property
    def Z_scaled(self) -> np.ndarray:
        return self.scaler.apply(self.series.Z_raw)

    def windows(self, part: str, length: int | None = None) -> np.ndarray:
        """Scaled windows of the ``train``, ``val`` or ``test`` part."""
        T = self.T
        Z = self.Z_scaled
        if part == "test":
            w = make_windows(Z[:, self.train_steps:], T).windows
        else:
            w = make_windows(Z[:, :self.train_steps], T).windows
            w = w[self.train_idx if part == "train" else self.val_idx]
        return w if length is None else w[..., T - length:]

    def noise(self) -> NoiseModel:
        return NoiseModel(self.series.noise_std ** 2)

    def context(self, sampler: MaskSampler | None = None) -> CampaignContext:
        return CampaignContext(self.obs, WlsEstimator(self.obs, self.noise()), self.series.Z_raw,
                               self.train_steps, self.T, sampler)


def generate_data(cfg: DataConfig, seed: int = 0) -> Dataset:
    case = load_case(cfg.case)
    obs = build_observation_matrix(case)
    days = cfg.train_days + cfg.test_days
    raw = synth_regional_profiles(cfg.regions, days, cfg.steps_per_day, stage_seed(seed, "profiles"))
    prof = rescale_profiles(raw, tuple(cfg.l_max_range), stage_seed(seed, "rescale"))
    loads = assign_loads(prof, len(case.load_buses), cfg.dirichlet_alpha, stage_seed(seed, "mixing"),
                         cfg.jitter, tuple(case.load_buses))
    loads, factor = fit_to_capacity(loads, case, cfg.headroom)
    series = dispatch_and_measure(case, obs, loads, cfg.noise_level, stage_seed(seed, "dispatch"),
                                  cfg.cost_spread, cfg.steps_per_day)
    series.meta["load_factor"] = factor
    n_train = cfg.train_days * cfg.steps_per_day
    scaler = fit_scaler(series.Z_raw[:, :n_train])
    tr, va = split_windows(n_train - cfg.T + 1, cfg.train_fraction, stage_seed(seed, "split"))
    return Dataset(case, obs, series, scaler, n_train, tr, va, cfg.T,
                   config_hash({"data": json.loads(json.dumps(asdict(cfg))), "seed": seed}))


SERIES_FILE = "series.bin"
WINDOWS_FILE = "windows.bin"
SCALER_FILE = "scaler.json"


def save_dataset(out_dir: str | Path, ds: Dataset, seed: int) -> dict[str, Path]:
    """Write the measurement series, the window tensors and the scaler."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lineage = {"config_hash": ds.config_hash, "seed": seed}
    extra = {"case": ds.case.name, "train_steps": ds.train_steps, "T": ds.T,
             "load_factor": ds.series.meta.get("load_factor", 1.0)}
    paths = {"series": out / SERIES_FILE, "windows": out / WINDOWS_FILE, "scaler": out / SCALER_FILE}
    save_series(paths["series"], ds.series, ds.scaler, ds.config_hash, seed, extra)
    arrays = {"train_idx": ds.train_idx.astype(float), "val_idx": ds.val_idx.astype(float),
              "train": ds.windows("train"), "val": ds.windows("val"), "test": ds.windows("test")}
    save_arrays(paths["windows"], "window_tensor",
                dict(lineage, T=ds.T, stride=1, layout="count,m,T", test_start=ds.train_steps), arrays)
    paths["scaler"].write_text(json.dumps(dict(ds.scaler.to_dict(), **lineage), indent=1, sort_keys=True) + "\n")
    return paths


def load_dataset(data_dir: str | Path) -> Dataset:
    series, scaler, header = load_series(Path(data_dir) / SERIES_FILE)
    if scaler is None:
        raise ManifestError(f"{data_dir}: measurement series carries no scaler")
    try:
        case = load_case(header["case"])
        train_steps, T = int(header["train_steps"]), int(header["T"])
    except KeyError as exc:
        raise ManifestError(f"{data_dir}: series manifest lacks {exc}") from exc
    _, idx = load_arrays(Path(data_dir) / WINDOWS_FILE, "window_tensor")
    return Dataset(case, build_observation_matrix(case), series, scaler, train_steps,
                   idx["train_idx"].astype(int), idx["val_idx"].astype(int), T, header.get("config_hash", ""))


def load_windows(data_dir: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return load_arrays(Path(data_dir) / WINDOWS_FILE, "window_tensor")


# ----------------------------------------------------------------- model

def build_model(cfg: ModelConfig, m: int, T: int, seed: int, scaler: MinMaxScaler | None = None) -> AeModel:
    sizes = list(cfg.sizes) if cfg.sizes else desk_sizes(m)
    window = cfg.window or (1 if cfg.kind == "dense" else T)
    return AeModel(cfg.kind, sizes, window, cfg.hidden_dropout, tuple(cfg.input_dropout), cfg.decoder_input,
                   seed, scaler)


def campaign_for(cfg: CampaignConfig, ds: Dataset) -> list:
    n = ds.series.Z_raw.shape[1] - ds.train_steps - ds.T + 1
    # replay reaches back t0 steps from the window's last column
    return build_campaign(cfg, ds.obs, n, min_window=0)
