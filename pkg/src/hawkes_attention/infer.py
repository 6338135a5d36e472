"""Next-event prediction by thinning, and the evaluation metrics built on it."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import EventDataset, EventSequence, batch
from .errors import ConfigError, DataError, HawkesAttentionError
from .model import HawkesAttention
from .train import evaluate_nll


class ThinningError(HawkesAttentionError):
    """Thinning could not produce a sample within its budget."""


class BoundViolation(ThinningError):
    """The intensity exceeded the thinning bound (checked in debug mode only)."""


@dataclass
class PredictionConfig:
    n_samples: int = 50
    bound_factor: float = 5.0
    max_rejections: int = 10_000
    horizon_multiple: float = 20.0
    type_at: str = "true_time"        # or "predicted_time"
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.n_samples < 1 or self.max_rejections < 1:
            raise ConfigError("n_samples and max_rejections must be >= 1")
        if self.bound_factor <= 0 or self.horizon_multiple <= 0:
            raise ConfigError("bound_factor and horizon_multiple must be positive")
        if self.type_at not in ("true_time", "predicted_time"):
            raise ConfigError(f"type_at must be 'true_time' or 'predicted_time', got {self.type_at!r}")


@dataclass
class SampleResult:
    times: np.ndarray
    truncated: np.ndarray
    rejections: np.ndarray

    @property
    def truncation_fraction(self) -> float:
        return float(self.truncated.mean()) if self.truncated.size else 0.0


def thinning_sample(total_fn, start, cap, cfg: PredictionConfig, rng: np.random.Generator) -> SampleResult:
    """Draw one next-event time per entry of ``start`` by adaptive thinning.

    ``total_fn(t, which)`` returns the total intensity at times ``t`` for the
    draws ``which``.  The bound is ``bound_factor`` times the intensity at the
    current frontier and is re-tightened at every rejected proposal, which
    also becomes the new frontier.  Draws that pass ``cap`` stop there and
    are flagged as truncated.
    """
    start = np.asarray(start, dtype=np.float64)
    cap = np.broadcast_to(np.asarray(cap, dtype=np.float64), start.shape)
    n = start.size
    frontier = start.copy()
    bound = cfg.bound_factor * np.asarray(total_fn(frontier, np.arange(n)), dtype=np.float64)
    out = np.empty(n)
    truncated = np.zeros(n, dtype=bool)
    rejections = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        with np.errstate(divide="ignore"):
            gap = rng.exponential(size=idx.size) / bound[idx]
        t = frontier[idx] + gap
        over = ~(t <= cap[idx])
        out[idx[over]] = cap[idx[over]]
        truncated[idx[over]] = True
        active[idx[over]] = False
        rest, t = idx[~over], t[~over]
        if rest.size == 0:
            break
        lam = np.asarray(total_fn(t, rest), dtype=np.float64)
        if cfg.debug and np.any(lam > bound[rest] * (1.0 + 1e-12)):
            raise BoundViolation(
                f"intensity {lam.max():.4g} exceeds thinning bound; raise bound_factor "
                f"(currently {cfg.bound_factor})")
        accept = rng.random(rest.size) * bound[rest] <= lam
        out[rest[accept]] = t[accept]
        active[rest[accept]] = False
        rej = rest[~accept]
        frontier[rej] = t[~accept]
        bound[rej] = cfg.bound_factor * lam[~accept]
        rejections[rej] += 1
        if np.any(rejections[rej] > cfg.max_rejections):
            raise ThinningError(
                f"more than {cfg.max_rejections} rejections for one draw; the bound is too loose "
                f"or too tight, try a different bound_factor (currently {cfg.bound_factor})")
    return SampleResult(out, truncated, rejections)


# -- neural-model helpers ---------------------------------------------------------------------


def _context(model: HawkesAttention, history: EventSequence | None):
    """Encoding of ``history`` plus its length; an empty history uses a placeholder event."""
    if history is None or len(history) == 0:
        seq, n = EventSequence(np.zeros(1), np.zeros(1, dtype=np.int64)), 0
    else:
        seq, n = history, len(history)
    ds = EventDataset(model.config.num_types, [seq], "predict")
    with T.no_grad():
        enc = model.encode(batch(ds, [0], S=1), dropout=0.0)
    return enc, n, (float(seq.times[n - 1]) if n else 0.0)


def _intensity_fn(model: HawkesAttention, enc, n_hist_per_draw):
    n_hist_per_draw = np.asarray(n_hist_per_draw, dtype=np.int64)

    def all_types(t, which):
        with T.no_grad():
            lam = model.intensity_at(enc, np.asarray(t)[None, :], n_hist_per_draw[which][None, :], dropout=0.0)
        return lam.data[0]

    return all_types


def horizon_cap(model: HawkesAttention, frontier, cfg: PredictionConfig):
    return np.asarray(frontier, dtype=np.float64) + cfg.horizon_multiple * model.bank.time_scale


def sample_next(model: HawkesAttention, history: EventSequence | None, cfg: PredictionConfig,
                seed: int = 0, n: int | None = None) -> SampleResult:
    """``n`` (default ``cfg.n_samples``) independent next-event times after ``history``."""
    n = cfg.n_samples if n is None else n
    enc, n_hist, t_last = _context(model, history)
    lam_fn = _intensity_fn(model, enc, np.full(n, n_hist))
    rng = np.random.Generator(np.random.Philox(seed))
    start = np.full(n, t_last)
    return thinning_sample(lambda t, w: lam_fn(t, w).sum(axis=-1), start,
                           horizon_cap(model, start, cfg), cfg, rng)


@dataclass
class Prediction:
    time: float
    type: int
    truncation_fraction: float


def predict_next(model: HawkesAttention, history: EventSequence | None, cfg: PredictionConfig,
                 seed: int = 0, true_time: float | None = None) -> Prediction:
    """MBR time (sample mean) and the argmax-intensity type.

    The type is read at ``true_time`` when given and ``cfg.type_at`` is
    ``true_time``; otherwise at the predicted time.
    """
    res = sample_next(model, history, cfg, seed)
    t_hat = float(res.times.mean())
    enc, n_hist, _ = _context(model, history)
    t_type = true_time if (true_time is not None and cfg.type_at == "true_time") else t_hat
    lam = _intensity_fn(model, enc, [n_hist])(np.array([t_type]), np.array([0]))
    return Prediction(t_hat, int(np.argmax(lam[0])), res.truncation_fraction)


# -- evaluation ---------------------------------------------------------------------------------


@dataclass
class EvalReport:
    rmse: float
    error_rate: float
    n_predictions: int
    per_sequence_counts: list[int]
    truncation_fraction: float
    config: dict
    nll_per_event: float | None = None
    rows: list = field(default_factory=list, repr=False)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d

    def write_predictions(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seq_id", "position", "true_time", "pred_time", "true_type", "pred_type"])
            for r in self.rows:
                w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), r[4], r[5]])


def sequence_seed(root: int, index: int) -> int:
    return int(np.random.SeedSequence([root, index]).generate_state(1, dtype=np.uint64)[0])


def predict_sequence(model: HawkesAttention, seq: EventSequence, cfg: PredictionConfig, seed: int):
    """Predictions for events 1..n-1 of ``seq``, each from the prefix before it.

    Returns (pred_times, pred_types, truncated_counts) for positions 1..n-1.
    """
    n = len(seq)
    ds = EventDataset(model.config.num_types, [seq], "eval")
    with T.no_grad():
        enc = model.encode(batch(ds, [0], S=1), dropout=0.0)
    positions = np.arange(1, n)
    n_hist = np.repeat(positions, cfg.n_samples)
    lam_fn = _intensity_fn(model, enc, n_hist)
    start = seq.times[n_hist - 1]
    rng = np.random.Generator(np.random.Philox(seed))
    res = thinning_sample(lambda t, w: lam_fn(t, w).sum(axis=-1), start,
                          horizon_cap(model, start, cfg), cfg, rng)
    t_hat = res.times.reshape(-1, cfg.n_samples).mean(axis=1)
    t_type = seq.times[positions] if cfg.type_at == "true_time" else t_hat
    lam = _intensity_fn(model, enc, positions)(t_type, np.arange(positions.size))
    truncated = res.truncated.reshape(-1, cfg.n_samples).sum(axis=1)
    return t_hat, np.argmax(lam, axis=-1), truncated


def metrics_from_predictions(true_times, pred_times, true_types, pred_types) -> tuple[float, float]:
    err = np.asarray(pred_times, dtype=np.float64) - np.asarray(true_times, dtype=np.float64)
    rmse = float(np.sqrt(np.mean(err ** 2))) if err.size else 0.0
    mism = np.asarray(true_types) != np.asarray(pred_types)
    rate = float(100.0 * mism.mean()) if mism.size else 0.0
    return rmse, rate


def evaluate(model: HawkesAttention, ds: EventDataset, cfg: PredictionConfig,
             with_nll: bool = False, S: int = 20) -> EvalReport:
    if any(len(s) < 2 for s in ds.sequences):
        raise DataError("evaluation needs sequences with at least two events")
    rows, counts = [], []
    n_trunc = 0
    for i, seq in enumerate(ds.sequences):
        t_hat, c_hat, trunc = predict_sequence(model, seq, cfg, sequence_seed(cfg.seed, i))
        n_trunc += int(trunc.sum())
        counts.append(len(seq) - 1)
        for pos in range(1, len(seq)):
            rows.append((i, pos, float(seq.times[pos]), float(t_hat[pos - 1]),
                         int(seq.types[pos]), int(c_hat[pos - 1])))
    tt = [r[2] for r in rows]
    pt = [r[3] for r in rows]
    rmse, rate = metrics_from_predictions(tt, pt, [r[4] for r in rows], [r[5] for r in rows])
    nll = None
    if with_nll:
        nll = evaluate_nll(model, ds, S=S)
    return EvalReport(rmse, rate, len(rows), counts, n_trunc / max(1, len(rows) * cfg.n_samples),
                      asdict(cfg), nll, rows)
