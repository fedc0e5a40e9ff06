"""LSTM and dense autoencoders over measurement windows, plus model files."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import MinMaxScaler
from ..io import ManifestError, ShapeMismatchError, load_arrays, read_header, save_arrays
from .layers import DenseLayer, Dropout, Layer, LSTMLayer, RepeatLast


def desk_sizes(m: int, widths: tuple[int, ...] = (512, 256), reference_m: int = 304) -> list[int]:
    """Scale reference hidden widths by m / reference_m, rounded to multiples of 8."""
    hidden = [max(8, int(round(w * m / reference_m / 8.0)) * 8) for w in widths]
    return [m] + hidden + hidden[::-1] + [m]


@dataclass
class AeModel:
    """Symmetric autoencoder.

    ``sizes`` like ``[m, h1, h2, h2, h1, m]``. For ``kind="lstm"`` every
    transition except the last is an LSTM layer and the last is a linear
    time-distributed dense layer; for ``kind="dense"`` all transitions are
    dense (tanh hidden, linear output), applied to each column separately.
    Windows are passed as (batch, m, T) arrays.
    """

    kind: str
    sizes: list[int]
    T: int = 6
    hidden_dropout: float = 0.005
    input_dropout: tuple[float, float] = (0.0, 0.2)
    decoder_input: str = "sequence"  # sequence | repeat
    seed: int = 0
    scaler: MinMaxScaler | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)
    epochs_trained: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("lstm", "dense"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.decoder_input not in ("sequence", "repeat"):
            raise ValueError(f"unknown decoder input {self.decoder_input!r}")
        s = list(self.sizes)
        if len(s) < 3 or s != s[::-1]:
            raise ValueError(f"layer sizes must be symmetric, got {s}")
        if min(s[1:-1]) >= s[0]:
            raise ValueError("bottleneck must be narrower than the input")
        self.sizes = s
        self.input_dropout = tuple(self.input_dropout)
        self.layers = self._build()
        if not self.params:
            rng = np.random.default_rng(self.seed)
            for layer in self.layers:
                self.params.update(layer.init_params(rng))

    @property
    def m(self) -> int:
        return self.sizes[0]

    def _build(self) -> list[Layer]:
        s = self.sizes
        n = len(s) - 1
        n_enc = n // 2
        layers: list[Layer] = []
        for k in range(n):
            last = k == n - 1
            if self.kind == "lstm" and not last:
                layers.append(LSTMLayer(f"l{k}", s[k], s[k + 1]))
            else:
                layers.append(DenseLayer(f"l{k}", s[k], s[k + 1], "linear" if last else "tanh"))
            if k < n_enc and self.hidden_dropout > 0:
                layers.append(Dropout(f"drop{k}", self.hidden_dropout))
            if k == n_enc - 1 and self.kind == "lstm" and self.decoder_input == "repeat":
                layers.append(RepeatLast("repeat"))
        return layers

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            out.update(layer.param_shapes())
        return out

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- passes on (B, T, m) arrays

    def _forward(self, X: np.ndarray, train: bool, rng: np.random.Generator | None, params=None):
        params = self.params if params is None else params
        caches = []
        for layer in self.layers:
            X, cache = layer.forward(params, X, train, rng)
            caches.append(cache)
        return X, caches

    def _backward(self, dY: np.ndarray, caches) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dY, g = layer.backward(self.params, dY, cache)
            grads.update(g)
        return grads

    def reconstruct(self, windows: np.ndarray, batch_size: int = 512, dtype=np.float64) -> np.ndarray:
        """Inference-mode reconstruction of (B, m, T) windows.

        ``dtype`` is the arithmetic precision of the pass; float32 runs about
        three times faster and the result is returned as float64 either way.
        """
        windows = np.asarray(windows, dtype=float)
        single = windows.ndim == 2
        if single:
            windows = windows[None]
        if windows.shape[1] != self.m:
            raise ValueError(f"model expects {self.m} attributes, got {windows.shape[1]}")
        if windows.size and (windows.min() < -1.0 or windows.max() > 2.0):
            warnings.warn("input lies far outside the [0, 1] training range", RuntimeWarning, stacklevel=2)
        out = np.empty_like(windows)
        params = {k: v.astype(dtype, copy=False) for k, v in self.params.items()}
        for s in range(0, len(windows), batch_size):
            X = windows[s:s + batch_size].transpose(0, 2, 1).astype(dtype, copy=False)
            Y, _ = self._forward(X, False, None, params)
            out[s:s + batch_size] = Y.transpose(0, 2, 1)
        return out[0] if single else out

    def loss_and_grads(self, corrupted: np.ndarray, clean: np.ndarray, train: bool = True,
                       rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error against the clean windows, and its gradient."""
        X = corrupted.transpose(0, 2, 1)
        target = clean.transpose(0, 2, 1)
        Y, caches = self._forward(X, train, rng)
        diff = Y - target
        loss = float(np.mean(diff * diff))
        grads = self._backward(2.0 * diff / diff.size, caches)
        return loss, grads

    def loss(self, corrupted: np.ndarray, clean: np.ndarray, train: bool = False,
             rng: np.random.Generator | None = None) -> float:
        Y, _ = self._forward(corrupted.transpose(0, 2, 1), train, rng)
        diff = Y - clean.transpose(0, 2, 1)
        return float(np.mean(diff * diff))

    def copy(self) -> AeModel:
        return AeModel(self.kind, list(self.sizes), self.T, self.hidden_dropout, self.input_dropout,
                       self.decoder_input, self.seed, self.scaler,
                       {k: v.copy() for k, v in self.params.items()}, self.epochs_trained, dict(self.meta))

    def manifest(self) -> dict:
        return {
            "kind": self.kind, "sizes": self.sizes, "T": self.T,
            "hidden_dropout": self.hidden_dropout, "input_dropout": list(self.input_dropout),
            "decoder_input": self.decoder_input, "seed": self.seed,
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "epochs_trained": self.epochs_trained, "meta": self.meta,
        }


# ---------------------------------------------------------------- corruption

@dataclass(frozen=True)
class DropoutMask:
    D: np.ndarray  # bool, same shape as the windows; True = dropped
    drawn_ratio: np.ndarray  # target ratio per masked column

    @property
    def realized_ratio(self) -> np.ndarray:
        """Dropped fraction per (window, column)."""
        return self.D.mean(axis=-2)


def _column_counts(ratio: np.ndarray, m: int, d_range: tuple[float, float]) -> np.ndarray:
    lo = int(np.ceil(d_range[0] * m - 1e-9))
    hi = int(np.floor(d_range[1] * m + 1e-9))
    return np.clip(np.floor(ratio * m + 1e-9).astype(int), lo, hi)


def random_column_masks(shape: tuple[int, ...], counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Boolean masks over axis -1 with ``counts`` uniformly chosen True entries per row."""
    keys = rng.random(shape)
    ranks = np.argsort(np.argsort(keys, axis=-1), axis=-1)
    return ranks < counts[..., None]


def corrupt(windows: np.ndarray, d_range: tuple[float, float], rng: np.random.Generator | int,
            mode: str = "train") -> tuple[np.ndarray, DropoutMask]:
    """Zero a random fraction of attributes.

    ``train`` masks every column of every window independently with a ratio
    drawn uniformly from ``d_range``; ``infer`` masks the final column only.
    ``windows`` is (B, m, T) or a single (m, T) window.
    """
    rng = np.random.default_rng(rng)
    windows = np.asarray(windows, dtype=float)
    single = windows.ndim == 2
    W = windows[None] if single else windows
    B, m, T = W.shape
    if mode == "train":
        ratio = rng.uniform(d_range[0], d_range[1], size=(B, T))
        cols = random_column_masks((B, T, m), _column_counts(ratio, m, d_range), rng)
        D = cols.transpose(0, 2, 1)
    elif mode == "infer":
        ratio = rng.uniform(d_range[0], d_range[1], size=(B, 1))
        last = random_column_masks((B, 1, m), _column_counts(ratio, m, d_range), rng)
        D = np.zeros((B, m, T), dtype=bool)
        D[:, :, -1] = last[:, 0]
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    out = W - W * D
    if single:
        return out[0], DropoutMask(D[0], ratio[0])
    return out, DropoutMask(D, ratio)


def apply_last_column_mask(windows: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Zero the entries flagged in ``d`` (shape (m,) or (B, m)) on the final column."""
    out = np.array(windows, dtype=float, copy=True)
    out[..., -1] = np.where(d, 0.0, out[..., -1])
    return out


# ------------------------------------------------------------------ model io

def save_model(path: str | Path, model: AeModel, extra: dict[str, np.ndarray] | None = None,
               manifest: dict | None = None) -> None:
    arrays = dict(model.params)
    if extra:
        arrays.update(extra)
    save_arrays(path, "ae_model", dict(model.manifest(), **(manifest or {})), arrays)


def load_model(path: str | Path, with_extra: bool = False):
    header = read_header(path, "ae_model")
    try:
        scaler = None if header.get("scaler") is None else MinMaxScaler.from_dict(header["scaler"])
        model = AeModel(header["kind"], list(header["sizes"]), int(header["T"]), float(header["hidden_dropout"]),
                        tuple(header["input_dropout"]), header.get("decoder_input", "sequence"),
                        int(header.get("seed", 0)), scaler,
                        epochs_trained=int(header.get("epochs_trained", 0)), meta=header.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: invalid model manifest: {exc}") from exc
    expected = model.param_shapes()
    listed = {t["name"]: tuple(t["shape"]) for t in header.get("tensors", [])}
    for name, shape in expected.items():
        if name not in listed:
            raise ShapeMismatchError(f"{path}: tensor {name!r} missing from the model file")
        if listed[name] != shape:
            raise ShapeMismatchError(f"{path}: tensor {name!r} has shape {listed[name]}, architecture needs {shape}")
    header, arrays = load_arrays(path, "ae_model")
    model.params = {k: arrays[k] for k in expected}
    extra = {k: v for k, v in arrays.items() if k not in expected}
    return (model, extra, header) if with_extra else model
