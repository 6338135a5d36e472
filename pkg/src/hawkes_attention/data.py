"""Event sequences, JSON/CSV I/O, dataset splits and padded batches."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class EventSequence:
    times: np.ndarray
    types: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        types = np.asarray(self.types, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "types", types)
        if len(times) != len(types):
            raise DataError(f"times/types length mismatch: {len(times)} vs {len(types)}")
        if len(times) == 0:
            raise DataError("an event sequence needs at least one event")
        if np.any(np.diff(times) < 0):
            raise DataError("event times must be non-decreasing")
        if times[0] < 0:
            raise DataError("event times must be non-negative")

    def __len__(self) -> int:
        return len(self.times)

    def prefix(self, n: int) -> EventSequence:
        return EventSequence(self.times[:n], self.types[:n])


@dataclass
class EventDataset:
    num_types: int
    sequences: list[EventSequence]
    split: str = "all"

    def __post_init__(self):
        for i, seq in enumerate(self.sequences):
            if seq.types.min() < 0 or seq.types.max() >= self.num_types:
                raise DataError(
                    f"sequence {i}: type id outside [0, {self.num_types})")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def lengths(self) -> list[int]:
        return [len(s) for s in self.sequences]

    @property
    def n_events(self) -> int:
        return sum(self.lengths)

    def subset(self, indices, split: str) -> EventDataset:
        return EventDataset(self.num_types, [self.sequences[i] for i in indices], split)


def load_dataset(path, format: str = "json", split: str = "all") -> EventDataset:
    """Read ``{"dim_process": K, "sequences": [[{"time", "type"}, ...], ...]}``."""
    if format != "json":
        raise DataError(f"unsupported dataset format {format!r}")
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: JSON parse error at line {exc.lineno}: {exc.msg}") from exc
    return dataset_from_dict(doc, split=split)


def dataset_from_dict(doc: dict, split: str = "all") -> EventDataset:
    if not isinstance(doc, dict) or "dim_process" not in doc or "sequences" not in doc:
        raise DataError("dataset document needs 'dim_process' and 'sequences'")
    K = doc["dim_process"]
    if not isinstance(K, int) or K < 1:
        raise DataError(f"dim_process must be a positive integer, got {K!r}")
    seqs = []
    for i, raw in enumerate(doc["sequences"]):
        try:
            times = [float(ev["time"]) for ev in raw]
            types = [int(ev["type"]) for ev in raw]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"sequence {i}: malformed event record ({exc})") from exc
        if any(b < a for a, b in zip(times, times[1:])):
            raise DataError(f"sequence {i}: event times are not monotone")
        if any(c < 0 or c >= K for c in types):
            raise DataError(f"sequence {i}: type id >= dim_process={K}")
        try:
            seqs.append(EventSequence(times, types))
        except DataError as exc:
            raise DataError(f"sequence {i}: {exc}") from exc
    return EventDataset(K, seqs, split)


def dataset_to_dict(ds: EventDataset) -> dict:
    return {
        "dim_process": ds.num_types,
        "sequences": [
            [{"time": float(t), "type": int(c)} for t, c in zip(s.times, s.types)]
            for s in ds.sequences
        ],
    }


def write_dataset(ds: EventDataset, path) -> None:
    # repr-exact floats so load(write(ds)) is lossless
    Path(path).write_text(json.dumps(dataset_to_dict(ds)))


def write_csv(ds: EventDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "time", "type"])
        for i, s in enumerate(ds.sequences):
            for t, c in zip(s.times, s.types):
                w.writerow([i, repr(float(t)), int(c)])


def split_indices(ds, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle sequence indices and cut them into train/valid/test lists."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_valid = min(n_valid, n - n_train)
    return (
        sorted(perm[:n_train].tolist()),
        sorted(perm[n_train:n_train + n_valid].tolist()),
        sorted(perm[n_train + n_valid:].tolist()),
    )


def mean_inter_event_time(ds: EventDataset) -> float:
    gaps = np.concatenate([np.diff(s.times) for s in ds.sequences] or [np.zeros(0)])
    gaps = gaps[gaps > 0]
    if gaps.size == 0:
        return 1.0
    return float(gaps.mean())


@dataclass
class BatchedEvents:
    """Padded batch.  Interval ``i`` of a sequence is ``(t_{i-1}, t_i]`` with ``t_{-1} = 0``."""

    times: np.ndarray          # [B, m]
    types: np.ndarray          # [B, m]
    pad_mask: np.ndarray       # [B, m] True where a real event sits
    causal_mask: np.ndarray    # [B, m, m] True iff k < j and both real
    mc_times: np.ndarray       # [B, m, S]
    mc_weights: np.ndarray     # [B, m, S]
    lengths: np.ndarray = field(default=None)
    indices: list[int] = field(default_factory=list)

    @property
    def n_events(self) -> int:
        return int(self.pad_mask.sum())

    @property
    def interval_starts(self) -> np.ndarray:
        prev = np.zeros_like(self.times)
        prev[:, 1:] = self.times[:, :-1]
        return np.where(self.pad_mask, prev, 0.0)


def pad_sequences(seqs: list[EventSequence], pad_to: int | None = None):
    B = len(seqs)
    m = max(len(s) for s in seqs)
    if pad_to is not None:
        if pad_to < m:
            raise DataError(f"pad_to={pad_to} is shorter than the longest sequence ({m})")
        m = pad_to
    times = np.zeros((B, m))
    types = np.zeros((B, m), dtype=np.int64)
    pad = np.zeros((B, m), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s)
        times[b, :n] = s.times
        types[b, :n] = s.types
        pad[b, :n] = True
    return times, types, pad


def causal_mask_from(pad: np.ndarray) -> np.ndarray:
    m = pad.shape[1]
    lower = np.tril(np.ones((m, m), dtype=bool), k=-1)
    return lower[None] & pad[:, :, None] & pad[:, None, :]


def quadrature_points(starts, ends, S: int, mode: str, rng=None):
    """Sample times/weights so that sum(w * f(t)) estimates the integral of f over each interval."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    width = (ends - starts)[..., None]
    if mode == "midpoint":
        u = (np.arange(S) + 0.5) / S
        u = np.broadcast_to(u, width.shape[:-1] + (S,))
    elif mode == "uniform":
        if rng is None:
            raise ValueError("uniform quadrature needs an rng")
        # (0, 1] keeps samples inside the half-open interval
        u = 1.0 - rng.random(width.shape[:-1] + (S,))
    else:
        raise ValueError(f"unknown quadrature mode {mode!r}")
    t = starts[..., None] + u * width
    w = np.broadcast_to(width / S, t.shape).copy()
    return t, w


def batch(ds: EventDataset, indices, S: int = 20, seed: int = 0, mode: str = "midpoint",
          pad_to: int | None = None) -> BatchedEvents:
    """Padded batch with S quadrature points per interval; ``pad_to`` fixes the padded length."""
    indices = list(indices)
    if not indices:
        raise DataError("cannot build a batch from an empty index list")
    if S < 1:
        raise DataError(f"need at least one Monte Carlo sample per interval, got S={S}")
    seqs = [ds.sequences[i] for i in indices]
    times, types, pad = pad_sequences(seqs, pad_to)
    prev = np.zeros_like(times)
    prev[:, 1:] = times[:, :-1]
    rng = np.random.default_rng(seed) if mode == "uniform" else None
    mc_t, mc_w = quadrature_points(prev, times, S, mode, rng)
    mc_t = np.where(pad[..., None], mc_t, 0.0)
    mc_w = np.where(pad[..., None], mc_w, 0.0)
    return BatchedEvents(
        times=times, types=types, pad_mask=pad, causal_mask=causal_mask_from(pad),
        mc_times=mc_t, mc_weights=mc_w, lengths=pad.sum(axis=1), indices=indices,
    )
