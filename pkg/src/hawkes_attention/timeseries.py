"""Encoder-only forecaster for continuous multivariate series.

Each time step's observation vector is projected to one token.  Attention
between steps ``j`` and ``k < j`` is modulated by three kernels of the gap
``t_j - t_k``, one each for queries, keys and values, per head, shared by
every layer.  The flattened encoder output feeds a linear head that emits
the next ``P`` steps.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .kernels import KernelBank, KernelConfig
from .model import NO_DROPOUT, Dropout, encoder_layer, init_encoder_params
from .tensor import Tensor
from .train import Adam, read_tensors, write_tensors

ROLE_Q, ROLE_K, ROLE_V = 0, 1, 2


class Windows(NamedTuple):
    inputs: np.ndarray        # [W, I, C]
    input_times: np.ndarray   # [W, I]
    targets: np.ndarray       # [W, P, C]

    def __len__(self) -> int:
        return self.inputs.shape[0]


def ts_window(values, timestamps, input_len: int, horizon: int, stride: int = 1) -> Windows:
    """Sliding (input, target) blocks; ``N - I - P + 1`` of them at stride 1."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    timestamps = np.asarray(timestamps, dtype=np.float64)
    N = values.shape[0]
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if N < input_len + horizon:
        raise DataError(f"series of length {N} is shorter than input {input_len} + horizon {horizon}")
    starts = np.arange(0, N - input_len - horizon + 1, stride)
    idx_in = starts[:, None] + np.arange(input_len)
    idx_out = starts[:, None] + input_len + np.arange(horizon)
    return Windows(values[idx_in], timestamps[idx_in], values[idx_out])


@dataclass
class SeriesDataset:
    values: np.ndarray
    timestamps: np.ndarray
    input_len: int = 96
    horizon: int = 24
    ratios: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        self.values = v[:, None] if v.ndim == 1 else v
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.timestamps.shape != (self.values.shape[0],):
            raise DataError("timestamps must have one entry per row of values")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {self.ratios}")
        n_train = self.borders()[0][1]
        if n_train < self.input_len + self.horizon:
            raise DataError("training range is shorter than one window")
        train = self.values[:n_train]
        self.mean = train.mean(axis=0)
        std = train.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def borders(self):
        """Chronological (start, end) row ranges; later splits start I rows early for context."""
        N = self.values.shape[0]
        n_tr = int(N * self.ratios[0])
        n_te = int(N * self.ratios[2])
        n_va = N - n_tr - n_te
        return [(0, n_tr), (n_tr - self.input_len, n_tr + n_va), (N - n_te - self.input_len, N)]

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x) * self.std + self.mean

    def windows(self, split: str, stride: int = 1, normalized: bool = True) -> Windows:
        lo, hi = self.borders()[{"train": 0, "valid": 1, "test": 2}[split]]
        vals = self.values[lo:hi]
        if normalized:
            vals = self.normalize(vals)
        return ts_window(vals, self.timestamps[lo:hi], self.input_len, self.horizon, stride)

    def mean_gap(self) -> float:
        return float(np.mean(np.diff(self.timestamps)))


def load_series(path, **kwargs) -> SeriesDataset:
    """CSV with a header row; first column timestamps, remaining columns channels."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(rows) < 2 or len(rows[0]) < 2:
        raise DataError(f"{path}: need a header and at least one timestamp + channel column")
    try:
        arr = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as e:
        raise DataError(f"{path}: non-numeric entry ({e})") from e
    return SeriesDataset(arr[:, 1:], arr[:, 0], **kwargs)


def write_series(path, values, timestamps) -> None:
    values = np.asarray(values)
    values = values[:, None] if values.ndim == 1 else values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"ch{c}" for c in range(values.shape[1])])
        for t, row in zip(timestamps, values):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def synthetic_series(n: int = 2000, period: float = 48.0, trend: float = 0.5, noise: float = 0.05,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two channels: phase-shifted sinusoids plus a shared linear trend and Gaussian noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    ramp = trend * t / n
    ch0 = np.sin(2 * np.pi * t / period) + ramp
    ch1 = 0.5 * np.cos(2 * np.pi * t / period + 0.3) + ramp
    values = np.stack([ch0, ch1], axis=1) + noise * rng.standard_normal((n, 2))
    return values, t


# -- model ----------------------------------------------------------------------------


@dataclass
class TSConfig:
    channels: int
    input_len: int = 96
    horizon: int = 24
    d_model: int = 32
    d_k: int = 32
    d_v: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    phi_width: int = 8
    phi_depth: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if f.name != "dropout" and getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class TSModel:
    def __init__(self, config: TSConfig, mean=None, std=None, time_scale: float = 1.0, seed: int = 0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        bound = 1.0 / math.sqrt(c.channels)
        p["proj.w"] = T.parameter(rng.uniform(-bound, bound, (c.channels, c.d_model)))
        p["proj.b"] = T.parameter(np.zeros(c.d_model))
        for layer in range(c.n_layers):
            init_encoder_params(p, f"layers.{layer}", rng, c.d_model, c.d_k, c.d_v, c.n_heads, c.d_ff)
        fan_in = c.input_len * c.d_model
        bound = 1.0 / math.sqrt(fan_in)
        p["head.w"] = T.parameter(rng.uniform(-bound, bound, (fan_in, c.horizon * c.channels)))
        p["head.b"] = T.parameter(np.zeros(c.horizon * c.channels))
        for name, t in p.items():
            t.name = name
        self.params = p
        # roles take the place of event types: kernel "type" 0/1/2 is phi_Q/phi_K/phi_V
        self.bank = KernelBank(KernelConfig("per_type", c.phi_width, c.phi_depth), c.n_heads, 3, rng,
                               time_scale=time_scale, prefix="ts_kernels")
        self.mean = np.zeros(c.channels) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(c.channels) if std is None else np.asarray(std, dtype=np.float64)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.bank.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state) -> None:
        named = self.named_parameters()
        if set(named) != set(state):
            raise KeyError("state does not match the model's parameters")
        for k, t in named.items():
            t.data = np.asarray(state[k], dtype=np.float64).reshape(t.shape).copy()


def ts_kernels(model: TSModel, times):
    """Per-head (phi_Q, phi_K, phi_V) on the strictly causal pairs, plus the mask."""
    times = np.asarray(times, dtype=np.float64)
    B, I = times.shape
    mask = np.broadcast_to(np.tril(np.ones((I, I), dtype=bool), k=-1), (B, I, I))
    lags = times[:, :, None] - times[:, None, :]
    valid = np.flatnonzero(mask)
    dt = lags.reshape(-1)[valid]
    n = valid.size
    roles = np.repeat([ROLE_Q, ROLE_K, ROLE_V], n)
    phis = []
    for h in range(model.config.n_heads):
        if n == 0:
            z = Tensor(np.zeros(mask.shape))
            phis.append((z, z, z))
            continue
        y = model.bank.eval(h, roles, np.tile(dt, 3))
        phis.append(tuple(T.scatter(T.take(y, np.arange(r * n, (r + 1) * n)), valid, mask.shape)
                          for r in range(3)))
    return phis, mask


def ts_encode(model: TSModel, inputs, times, rng=None, dropout=None) -> Tensor:
    """Hidden states [B, I, d_model] for normalized inputs [B, I, C] at ``times`` [B, I]."""
    c = model.config
    x = T.as_tensor(np.asarray(inputs, dtype=np.float64)) @ model.params["proj.w"] + model.params["proj.b"]
    phis, mask = ts_kernels(model, times)
    rate = c.dropout if dropout is None else dropout
    drop = Dropout(rate, rng) if rng is not None else NO_DROPOUT
    for layer in range(c.n_layers):
        x = encoder_layer(model.params, f"layers.{layer}", c.n_heads, x, x, phis, mask, drop)
    return x


def forecast_normalized(model: TSModel, hidden: Tensor) -> Tensor:
    c = model.config
    B = hidden.shape[0]
    flat = T.reshape(hidden, (B, c.input_len * c.d_model))
    y = flat @ model.params["head.w"] + model.params["head.b"]
    return T.reshape(y, (B, c.horizon, c.channels))


def ts_forecast(model: TSModel, hidden: Tensor) -> np.ndarray:
    """Predictions [B, P, C] in the original units."""
    return forecast_normalized(model, hidden).data * model.std + model.mean


def _mse(pred: Tensor, target) -> Tensor:
    diff = pred - np.asarray(target, dtype=np.float64)
    return T.mean(diff * diff)


def predict_windows(model: TSModel, w: Windows, batch_size: int = 64) -> np.ndarray:
    """Normalized predictions for every window."""
    out = []
    with T.no_grad():
        for s in range(0, len(w), batch_size):
            h = ts_encode(model, w.inputs[s:s + batch_size], w.input_times[s:s + batch_size], dropout=0.0)
            out.append(forecast_normalized(model, h).data)
    return np.concatenate(out, axis=0)


def ts_metrics(pred, target) -> tuple[float, float]:
    err = np.asarray(pred) - np.asarray(target)
    return float(np.mean(err ** 2)), float(np.mean(np.abs(err)))


def ts_evaluate(model: TSModel, ds: SeriesDataset, split: str = "test") -> tuple[float, float]:
    """(MSE, MAE) on normalized values, averaged over windows, horizons and channels."""
    w = ds.windows(split)
    return ts_metrics(predict_windows(model, w), w.targets)


def naive_last_value(w: Windows) -> np.ndarray:
    return np.repeat(w.inputs[:, -1:, :], w.targets.shape[1], axis=1)


@dataclass
class TSTrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        for name in ("batch_size", "max_epochs", "patience", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


def build_ts_model(config: TSConfig, ds: SeriesDataset, seed: int = 0) -> TSModel:
    return TSModel(config, ds.mean, ds.std, time_scale=ds.mean_gap(), seed=seed)


def ts_fit(model: TSModel, ds: SeriesDataset, cfg: TSTrainConfig, log=None) -> dict:
    rng = np.random.default_rng(cfg.seed)
    train = ds.windows("train", stride=cfg.stride)
    valid = ds.windows("valid")
    opt = Adam(model.parameters(), lr=cfg.lr)
    history = {"train_mse": [], "valid_mse": [], "best_epoch": 0, "best_valid_mse": math.inf}
    best = model.state_dict()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            h = ts_encode(model, train.inputs[idx], train.input_times[idx], rng=rng)
            loss = _mse(forecast_normalized(model, h), train.targets[idx])
            T.backward(loss)
            opt.step()
            total += loss.item() * idx.size
        v_mse, _ = ts_metrics(predict_windows(model, valid), valid.targets)
        history["train_mse"].append(total / len(train))
        history["valid_mse"].append(v_mse)
        if log:
            log(f"epoch {epoch}: train {total / len(train):.5f} valid {v_mse:.5f} "
                f"({time.perf_counter() - t0:.1f}s)")
        if v_mse < history["best_valid_mse"]:
            history["best_valid_mse"] = v_mse
            history["best_epoch"] = epoch
            best = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    history["stopped_epoch"] = epoch
    model.load_state_dict(best)
    return history


def save_ts_checkpoint(model: TSModel, path) -> None:
    meta = {"config": model.config.to_dict(), "time_scale": model.bank.time_scale,
            "mean": model.mean.tolist(), "std": model.std.tolist()}
    write_tensors(path, "timeseries", meta, model.state_dict())


def load_ts_checkpoint(path) -> TSModel:
    header, state = read_tensors(path)
    if header["kind"] != "timeseries":
        raise DataError(f"{path}: checkpoint holds a {header['kind']!r} model")
    meta = header["meta"]
    model = TSModel(TSConfig(**meta["config"]), meta["mean"], meta["std"], meta["time_scale"])
    model.load_state_dict(state)
    return model
