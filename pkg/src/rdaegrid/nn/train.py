"""Adam, the denoising training loop and a finite-difference gradient check."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import mpmath
import numpy as np

from .model import AeModel, corrupt

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 400
    epochs: int = 1500
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    report_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            if f"adam.m.{k}" in arrays:
                self.m[k] = arrays[f"adam.m.{k}"].copy()
                self.v[k] = arrays[f"adam.v.{k}"].copy()
        self.t = t


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def rows(self):
        return zip(self.epoch, self.train_loss, self.val_loss)


def train(model: AeModel, windows: np.ndarray, config: TrainConfig, val_windows: np.ndarray | None = None,
          optimizer: Adam | None = None, callback=None) -> tuple[AeModel, TrainHistory, Adam]:
    """Fit the autoencoder to clean windows (B, m, T) in place.

    Each epoch draws a fresh input-dropout mask for every window from
    ``model.input_dropout`` and minimises the squared error against the clean
    window. Randomness for epoch ``e`` comes from ``(config.seed, e)``, so a
    resumed run continues exactly where an uninterrupted one would be.
    """
    windows = np.asarray(windows, dtype=float)
    opt = optimizer or Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    opt.lr = config.learning_rate
    hist = TrainHistory()
    n = len(windows)
    start = model.epochs_trained
    for epoch in range(start, start + config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, config.batch_size)):
            clean = windows[order[s:s + config.batch_size]]
            noisy, _ = corrupt(clean, model.input_dropout, rng, "train")
            loss, grads = model.loss_and_grads(noisy, clean, True, rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b} (learning rate {config.learning_rate})")
            opt.step(model.params, grads)
            total += loss * len(clean)
        model.epochs_trained = epoch + 1
        hist.epoch.append(epoch + 1)
        hist.train_loss.append(total / n)
        val = float("nan")
        if val_windows is not None and len(val_windows):
            val = model.loss(val_windows, val_windows)
        hist.val_loss.append(val)
        if config.report_every and (epoch + 1) % config.report_every == 0:
            log.info("epoch %d train %.6g val %.6g", epoch + 1, hist.train_loss[-1], val)
        if callback is not None:
            callback(epoch + 1, hist)
    return model, hist, opt


class _Mp:
    """Scalar for object-dtype forward passes at mpmath precision.

    numpy's object loops call ``x.tanh()`` for ``np.tanh``, which plain mpf
    values lack, hence the wrapper.
    """

    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v if isinstance(v, mpmath.mpf) else mpmath.mpf(float(v))

    @staticmethod
    def _of(x):
        return x.v if isinstance(x, _Mp) else mpmath.mpf(float(x))

    def __add__(self, o):
        return _Mp(self.v + _Mp._of(o))

    __radd__ = __add__

    def __sub__(self, o):
        return _Mp(self.v - _Mp._of(o))

    def __rsub__(self, o):
        return _Mp(_Mp._of(o) - self.v)

    def __mul__(self, o):
        return _Mp(self.v * _Mp._of(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        return _Mp(self.v / _Mp._of(o))

    def __rtruediv__(self, o):
        return _Mp(_Mp._of(o) / self.v)

    def __neg__(self):
        return _Mp(-self.v)

    def tanh(self):
        return _Mp(mpmath.tanh(self.v))

    def exp(self):
        return _Mp(mpmath.exp(self.v))


def _as_mp(a: np.ndarray) -> np.ndarray:
    out = np.empty(a.shape, dtype=object)
    flat = out.reshape(-1)
    for i, v in enumerate(np.asarray(a, dtype=float).reshape(-1)):
        flat[i] = _Mp(v)
    return out


def gradient_check(model: AeModel, window: np.ndarray, epsilon: float = 1e-6, target: np.ndarray | None = None,
                   train: bool = False, seed: int = 0, params: list[str] | None = None,
                   refine_above: float | None = 1e-7, dps: int = 40) -> float:
    """Max relative error between backprop gradients and central differences.

    The error per parameter entry is |g - g_fd| / (|g| + |g_fd| + 1e-12).
    Backprop runs in float64 as usual. The difference quotients evaluate the
    loss in extended precision, and entries whose error still exceeds
    ``refine_above`` are recomputed with the loss evaluated at ``dps`` digits:
    at epsilon = 1e-6 the extended-precision roundoff (about 1e-19 / epsilon)
    is of the order of the smallest gradients. With ``train=True`` hidden
    dropout is active and its masks are fixed by ``seed``.
    """
    window = np.asarray(window, dtype=float)
    X = window[None] if window.ndim == 2 else window
    Y = X if target is None else np.asarray(target, dtype=float)
    Y = Y[None] if Y.ndim == 2 else Y

    _, grads = model.loss_and_grads(X, Y, train, np.random.default_rng(seed))

    wide = np.longdouble
    saved = model.params

    def J(Xw, Yw):
        out, _ = model._forward(Xw.transpose(0, 2, 1), train, np.random.default_rng(seed))
        diff = out - Yw.transpose(0, 2, 1)
        return (diff * diff).sum() / diff.size

    def central(name, i, Xw, Yw, eps):
        flat = model.params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        jp = J(Xw, Yw)
        flat[i] = old - eps
        jm = J(Xw, Yw)
        flat[i] = old
        return (jp - jm) / (2 * eps)

    def rel(a, b):
        return abs(a - b) / (abs(a) + abs(b) + 1e-12)

    suspects = []
    worst = 0.0
    try:
        model.params = {k: v.astype(wide) for k, v in saved.items()}
        Xw, Yw = X.astype(wide), Y.astype(wide)
        for name in params or list(saved):
            g = grads[name].reshape(-1)
            for i in range(g.size):
                e = rel(g[i], float(central(name, i, Xw, Yw, wide(epsilon))))
                if refine_above is not None and e > refine_above:
                    suspects.append((name, i))
                else:
                    worst = max(worst, e)
        if suspects:
            with mpmath.workdps(dps):
                model.params = {k: _as_mp(v) for k, v in saved.items()}
                Xm, Ym = _as_mp(X), _as_mp(Y)
                eps = _Mp(epsilon)
                for name, i in suspects:
                    fd = float(central(name, i, Xm, Ym, eps).v)
                    worst = max(worst, rel(grads[name].reshape(-1)[i], fd))
    finally:
        model.params = saved
    return worst
