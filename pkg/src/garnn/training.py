"""Mini-batch training of the squared-error objective with an L2 penalty."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .data import MtsWindow, Normalizer, stack_windows
from .model import GarnnModel, ModelConfig, model_forward

log = logging.getLogger(__name__)

LEARNING_RATES = (1e-3, 1e-4, 1e-5)
L2_GRID = (1e-4, 1e-5, 1e-6)
GRID_SEEDS = (0, 1, 2, 3)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def coerce_fields(cls, values: Mapping[str, str]):
    """Build dataclass ``cls`` from string values, typed by the field defaults."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
        f = known[key]
        kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str,
                                                        "bool": bool}.get(str(f.type), str)
        kwargs[key] = kind(float(value)) if kind is int else kind(value)
    return cls(**kwargs)


def read_train_config(path) -> TrainConfig:
    return coerce_fields(TrainConfig, parse_config_text(Path(path).read_text()))


def write_train_config(config: TrainConfig, path) -> None:
    Path(path).write_text("".join(f"{k} = {v!r}\n" for k, v in asdict(config).items()))


def grid(base: TrainConfig = TrainConfig()) -> list[TrainConfig]:
    """Learning-rate x L2 x seed enumeration."""
    return [replace(base, learning_rate=lr, l2=lam, seed=s)
            for lr, lam, s in itertools.product(LEARNING_RATES, L2_GRID, GRID_SEEDS)]


# --- objective and optimizer ---------------------------------------------------

def objective(predictions, targets, params: Mapping, l2: float) -> Tensor:
    """Mean squared error plus ``l2 / 2`` times the squared norm of every parameter."""
    predictions = ad.as_tensor(predictions)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.size == 0 or predictions.shape != targets.shape:
        raise ValueError(f"predictions {predictions.shape} and targets {targets.shape} must be equal-length and nonempty")
    loss = ad.mean(ad.square(ad.sub(predictions, targets)))
    if l2:
        norm = None
        for p in params.values():
            term = ad.sum_(ad.square(p))
            norm = term if norm is None else ad.add(norm, term)
        if norm is not None:
            loss = ad.add(loss, ad.mul(norm, 0.5 * l2))
    return loss


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- fitting -------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float


@dataclass
class FitResult:
    model: GarnnModel
    curve: list[EpochRecord]
    best_epoch: int
    seed: int
    stopped_early: bool = False

    @property
    def best_val_rmse(self) -> float:
        return next(r.val_rmse for r in self.curve if r.epoch == self.best_epoch)


def write_curve(result: FitResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_rmse"])
        for r in result.curve:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_rmse)])


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def train_step(model: GarnnModel, X: np.ndarray, y: np.ndarray, l2: float,
               optimizer: Adam) -> float:
    tape = Tape()
    params = tape.parameters(model.params)
    pred = model_forward(params, model.config, X).prediction
    loss = objective(pred, y, params, l2)
    grads = tape.backward(loss)
    optimizer.step(model.params, grads)
    return float(np.mean((pred.data - y) ** 2))


def fit(train: Sequence[MtsWindow], validation: Sequence[MtsWindow],
        model: ModelConfig | GarnnModel, config: TrainConfig = TrainConfig(),
        normalizer: Normalizer | None = None,
        callback: Callable[[EpochRecord], None] | None = None) -> FitResult:
    """Adam on mini-batches; keep the epoch with the lowest validation RMSE.

    Validation RMSE is measured in original units when ``normalizer`` is given.
    Initialization and shuffling use separate streams derived from
    ``config.seed``, so a run is reproducible bit for bit.
    """
    if not train or not validation:
        raise ValueError("training and validation sets must be nonempty")
    Xtr, ytr = stack_windows(train)
    Xva, yva = stack_windows(validation)
    if Xtr.shape[1:] != Xva.shape[1:]:
        raise ValueError(f"train windows {Xtr.shape[1:]} and validation windows {Xva.shape[1:]} differ")
    if isinstance(model, ModelConfig):
        if model.n_vars != Xtr.shape[1]:
            raise ValueError(f"model expects {model.n_vars} variables, windows have {Xtr.shape[1]}")
        model = GarnnModel.initialize(model, seed=int(np.random.SeedSequence([config.seed, 0]).generate_state(1)[0]))
    else:
        model = model.copy()
    shuffle = np.random.default_rng([config.seed, 1])
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    norm = normalizer or Normalizer.identity(Xtr.shape[1])
    y_true = norm.inverse_target(yva)

    curve: list[EpochRecord] = []
    best, best_epoch, since = None, 0, 0
    stopped = False
    n = len(ytr)
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle.permutation(n)
        losses, sizes = [], []
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            try:
                loss = train_step(model, Xtr[idx], ytr[idx], config.l2, opt)
            except NonFiniteError:
                raise TrainingDiverged(epoch, float("nan")) from None
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            losses.append(loss)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        try:
            val_pred = norm.inverse_target(model.predict(Xva))
        except NonFiniteError:
            raise TrainingDiverged(epoch, float("nan")) from None
        rec = EpochRecord(epoch, train_loss, _rmse(val_pred, y_true))
        curve.append(rec)
        log.info("epoch %d train_loss=%.5f val_rmse=%.4f", epoch, rec.train_loss, rec.val_rmse)
        if callback:
            callback(rec)
        if best is None or rec.val_rmse < curve[best_epoch - 1].val_rmse:
            best = {k: v.copy() for k, v in model.params.items()}
            best_epoch, since = epoch, 0
        else:
            since += 1
            if since >= config.patience:
                stopped = True
                break
    return FitResult(GarnnModel(model.config, best, model.meta), curve, best_epoch, config.seed, stopped)


def predict_batch(model: GarnnModel, windows: Sequence[MtsWindow],
                  normalizer: Normalizer | None = None) -> np.ndarray:
    """Predictions in original target units, one per window."""
    if not windows:
        return np.zeros(0)
    X, _ = stack_windows(windows)
    if X.shape[1] != model.config.n_vars:
        raise ValueError(f"model expects {model.config.n_vars} variables, windows have {X.shape[1]}")
    raw = model.predict(X)
    if normalizer is None:
        return raw
    return normalizer.inverse_target(raw)
