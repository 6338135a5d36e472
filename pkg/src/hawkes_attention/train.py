"""Likelihood objective, Adam training loop, checkpoints and gradient checking."""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .classical_hawkes import HawkesParams, intensities_at
from .data import BatchedEvents, EventDataset, EventSequence, batch, mean_inter_event_time
from .errors import ConfigError, DataError, NumericalDivergence
from .model import HawkesAttention, ModelConfig
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    dropout: float | None = None      # None: use the model's rate
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    S: int = 20
    seed: int = 0
    quadrature: str = "uniform"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        for name in ("batch_size", "max_epochs", "patience", "S"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.quadrature not in ("uniform", "midpoint"):
            raise ConfigError(f"quadrature must be 'uniform' or 'midpoint', got {self.quadrature!r}")


# -- objective ----------------------------------------------------------------------


def combine_nll(log_event_intensity, total_intensity_mc, b: BatchedEvents) -> Tensor:
    """Per-sequence NLL [B]: -sum log lambda_{c_i}(t_i) + sum_i sum_s w_s * Lambda_total(s).

    Works for any intensity source; both inputs may be Tensors or arrays.
    """
    ll = T.as_tensor(log_event_intensity)
    lam = T.as_tensor(total_intensity_mc)
    B, m = b.pad_mask.shape
    pad = b.pad_mask.astype(np.float64)
    event_term = T.sum_(ll * pad, axis=1)
    integral = T.sum_(T.reshape(lam * b.mc_weights, (B, -1)), axis=1)
    return integral - event_term


def sequence_nll(model: HawkesAttention, b: BatchedEvents, rng=None, dropout=None) -> Tensor:
    """Per-sequence NLL of the neural model as a [B] tensor."""
    enc = model.encode(b, rng, dropout)
    ll = model.event_log_intensity(enc, rng, dropout)
    B, m, S = b.mc_times.shape
    n_hist = np.broadcast_to(np.arange(m)[None, :, None], (B, m, S)).reshape(B, m * S)
    valid = np.broadcast_to(b.pad_mask[..., None], (B, m, S)).reshape(B, m * S)
    lam = model.intensity_at(enc, b.mc_times.reshape(B, m * S), n_hist, rng, dropout, token_valid=valid)
    total = T.reshape(T.sum_(lam, axis=-1), (B, m, S))
    return combine_nll(ll, total, b)


def _check_finite(per_seq: Tensor, b: BatchedEvents) -> None:
    bad = np.flatnonzero(~np.isfinite(per_seq.data))
    if bad.size:
        idx = b.indices[bad[0]] if b.indices else int(bad[0])
        raise NumericalDivergence(f"non-finite loss for sequence {idx}", sequence_index=idx)


def nll(model: HawkesAttention, b: BatchedEvents, rng=None, dropout=None) -> Tensor:
    """Batch loss: summed NLL divided by the number of events in the batch."""
    per_seq = sequence_nll(model, b, rng, dropout)
    _check_finite(per_seq, b)
    return T.sum_(per_seq) * (1.0 / b.n_events)


def classical_mc_nll(p: HawkesParams, ds: EventDataset, indices=None, S: int = 20,
                     mode: str = "uniform", seed: int = 0) -> np.ndarray:
    """Per-sequence MC NLL of a classical Hawkes model, through the same combiner as the network."""
    indices = range(len(ds)) if indices is None else indices
    b = batch(ds, indices, S=S, seed=seed, mode=mode)
    B, m, _ = b.mc_times.shape
    ll = np.zeros((B, m))
    tot = np.zeros(b.mc_times.shape)
    for r, i in enumerate(b.indices):
        seq = ds.sequences[i]
        n = len(seq)
        lam_ev = intensities_at(p, seq, seq.times, np.arange(n))
        ll[r, :n] = np.log(lam_ev[np.arange(n), seq.types])
        lam_mc = intensities_at(p, seq, b.mc_times[r, :n], np.arange(n)[:, None])
        tot[r, :n] = lam_mc.sum(axis=-1)
    return combine_nll(ll, tot, b).data


def evaluate_nll(model: HawkesAttention, ds: EventDataset, S: int = 20, batch_size: int = 64) -> float:
    """Per-event NLL with deterministic midpoint quadrature and dropout off."""
    total, n = 0.0, 0
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            b = batch(ds, range(start, min(start + batch_size, len(ds))), S=S, mode="midpoint")
            per_seq = sequence_nll(model, b, dropout=0.0)
            _check_finite(per_seq, b)
            total += float(per_seq.data.sum())
            n += b.n_events
    return total / n


def poisson_nll(train: EventDataset, test: EventDataset) -> float:
    """Per-event NLL of a homogeneous Poisson process fit by maximum likelihood on ``train``."""
    counts = np.zeros(train.num_types)
    span = 0.0
    for s in train.sequences:
        counts += np.bincount(s.types, minlength=train.num_types)
        span += float(s.times[-1])
    rates = np.maximum(counts / span, 1e-12)
    total = 0.0
    for s in test.sequences:
        total += -np.sum(np.log(rates[s.types])) + rates.sum() * float(s.times[-1])
    return total / test.n_events


# -- optimizer ---------------------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


# -- checkpoints ---------------------------------------------------------------------------

MAGIC = b"HATTNCK1"
CHECKPOINT_VERSION = 1


def write_tensors(path, kind: str, meta: dict, state: dict[str, np.ndarray]) -> None:
    """JSON header (with tensor directory) followed by raw little-endian float64 payload."""
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": CHECKPOINT_VERSION, "kind": kind, "meta": meta,
                         "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + n
    state = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return header, state


def save_checkpoint(model: HawkesAttention, path) -> None:
    meta = {"config": model.config.to_dict(), "time_scale": model.bank.time_scale}
    write_tensors(path, "hawkes_attention", meta, model.state_dict())


def load_checkpoint(path) -> HawkesAttention:
    header, state = read_tensors(path)
    if header["kind"] != "hawkes_attention":
        raise DataError(f"{path}: checkpoint holds a {header['kind']!r} model")
    meta = header["meta"]
    model = HawkesAttention(ModelConfig.from_dict(meta["config"]), time_scale=meta["time_scale"])
    model.load_state_dict(state)
    return model


# -- training loop -------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    valid_nll: float
    wall_time: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_nll: float = math.inf
    stopped_epoch: int = 0
    best_checkpoint: str | None = None
    effective_batch_size: int = 0

    def metrics(self) -> dict:
        """Timing-free summary, stable across identical runs."""
        return {
            "train_nll": [e.train_nll for e in self.epochs],
            "valid_nll": [e.valid_nll for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_valid_nll": self.best_valid_nll,
            "stopped_epoch": self.stopped_epoch,
            "effective_batch_size": self.effective_batch_size,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def effective_batch_size(batch_size: int, n_train: int) -> int:
    """Cap the batch so that even small datasets give several updates per epoch."""
    return min(batch_size, max(1, n_train // 8))


def build_model(config: ModelConfig, train_ds: EventDataset, seed: int = 0) -> HawkesAttention:
    """Model whose kernel inputs are standardized by the training set's mean gap."""
    return HawkesAttention(config, seed=seed, time_scale=mean_inter_event_time(train_ds))


def fit(model: HawkesAttention, train_ds: EventDataset, valid_ds: EventDataset, cfg: TrainConfig,
        checkpoint_path=None, log=None) -> TrainReport:
    if len(valid_ds) == 0:
        raise DataError("validation split is empty")
    if len(train_ds) == 0:
        raise DataError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    bs = effective_batch_size(cfg.batch_size, len(train_ds))
    report = TrainReport(best_checkpoint=str(checkpoint_path) if checkpoint_path else None,
                         effective_batch_size=bs)
    best_state = model.state_dict()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_ds))
        total, n = 0.0, 0
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            b = batch(train_ds, idx, S=cfg.S, seed=int(rng.integers(2**63)), mode=cfg.quadrature)
            opt.zero_grad()
            try:
                loss = nll(model, b, rng=rng, dropout=cfg.dropout)
            except NumericalDivergence:
                model.load_state_dict(best_state)
                raise
            T.backward(loss)
            grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in opt.params)
            if not grads_ok:
                model.load_state_dict(best_state)
                raise NumericalDivergence(f"non-finite gradient in epoch {epoch}")
            opt.step()
            total += loss.item() * b.n_events
            n += b.n_events
        valid = evaluate_nll(model, valid_ds, S=cfg.S)
        report.epochs.append(EpochRecord(epoch, total / n, valid, time.perf_counter() - t0))
        if log:
            log(f"epoch {epoch}: train {total / n:.5f} valid {valid:.5f}")
        if valid < report.best_valid_nll:
            report.best_valid_nll = valid
            report.best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path)
        else:
            stale += 1
        report.stopped_epoch = epoch
        if stale >= cfg.patience:
            break
    model.load_state_dict(best_state)
    return report


# -- gradient check --------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    size: int
    checked: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return float(max((e.max_rel_error for e in self.entries), default=0.0))

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def to_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "tensors": {e.name: {"size": e.size, "checked": e.checked, "max_rel_error": e.max_rel_error}
                        for e in self.entries},
        }


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(loss_fn, params: dict[str, Tensor], tolerance: float = 1e-4, h: float = 1e-5,
               max_elements: int = 64, seed: int = 0) -> GradCheckReport:
    """Central differences against analytic gradients of ``loss_fn()`` (a scalar Tensor).

    Tensors with more than ``max_elements`` entries are checked on a fixed
    random subset; empty tensors are left out of the report.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    T.backward(loss_fn())
    entries = []
    for name, p in params.items():
        if p.size == 0:
            continue
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(p.size) if p.size <= max_elements else np.sort(
            rng.choice(p.size, max_elements, replace=False))
        worst = 0.0
        with T.no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                worst = max(worst, relative_error(analytic.reshape(-1)[i], numeric))
        entries.append(GradCheckEntry(name, p.size, len(idx), float(worst)))
    return GradCheckReport(entries, tolerance)


def toy_instance():
    """Fixed 2-type, 5-event problem used by the gradient check."""
    seq = EventSequence(np.array([0.4, 0.9, 1.3, 2.2, 2.6]), np.array([0, 1, 1, 0, 1]))
    ds = EventDataset(2, [seq], "toy")
    config = ModelConfig(num_types=2, d_model=4, d_k=4, d_v=4, n_heads=2, n_layers=1, d_ff=8,
                         dropout=0.0)
    return config, ds


def model_grad_check(model: HawkesAttention, ds: EventDataset, S: int = 4, tolerance: float = 1e-4,
                     max_elements: int = 64) -> GradCheckReport:
    b = batch(ds, range(len(ds)), S=S, mode="midpoint")
    return grad_check(lambda: nll(model, b, dropout=0.0), model.named_parameters(), tolerance,
                      max_elements=max_elements)
