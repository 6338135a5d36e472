"""Multivariate exponential Hawkes process: intensity, exact likelihood, Ogata thinning.

``alpha[c, c2]`` is the jump in the type-``c`` intensity caused by a
type-``c2`` event and ``beta[c, c2]`` its decay rate, so

    lambda_c(t) = mu_c + sum_{t_k < t} alpha[c, c_k] * exp(-beta[c, c_k] * (t - t_k)).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import EventDataset, EventSequence
from .errors import DataError


@dataclass(frozen=True)
class HawkesParams:
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        K = mu.shape[0]
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(K, K)
        beta = np.asarray(self.beta, dtype=np.float64)
        beta = np.broadcast_to(beta, (K, K)).copy() if beta.size == 1 else beta.reshape(K, K)
        if np.any(mu < 0):
            raise ValueError("base intensities mu must be non-negative")
        if np.any(alpha < 0):
            raise ValueError("excitation magnitudes alpha must be non-negative")
        if np.any(beta <= 0):
            raise ValueError("decay rates beta must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def branching_matrix(self) -> np.ndarray:
        return self.alpha / self.beta

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.branching_matrix))))

    def is_stable(self) -> bool:
        return self.spectral_radius() < 1.0

    def stationary_rates(self) -> np.ndarray:
        """Per-type long-run event rates ``(I - alpha/beta)^-1 mu``."""
        return np.linalg.solve(np.eye(self.K) - self.branching_matrix, self.mu)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "alpha": self.alpha.tolist(), "beta": self.beta.tolist()}


def intensity(p: HawkesParams, history: EventSequence | None, t: float, c: int) -> float:
    """lambda_c(t) given every event in ``history`` (all must satisfy t_k <= t)."""
    if history is None or len(history) == 0:
        return float(p.mu[c])
    if t < history.times[-1]:
        raise ValueError(
            f"query time {t} precedes the last history event at {history.times[-1]}")
    before = history.times < t
    dt = t - history.times[before]
    src = history.types[before]
    return float(p.mu[c] + np.sum(p.alpha[c, src] * np.exp(-p.beta[c, src] * dt)))


def intensities_at(p: HawkesParams, seq: EventSequence, times, n_hist) -> np.ndarray:
    """All-type intensities at ``times`` using the first ``n_hist`` events of ``seq`` as history.

    Vectorized over query points; returns shape ``times.shape + (K,)``.
    """
    times = np.asarray(times, dtype=np.float64)
    n_hist = np.broadcast_to(np.asarray(n_hist), times.shape)
    tq = times.reshape(-1)
    nq = n_hist.reshape(-1)
    m = len(seq)
    dt = tq[:, None] - seq.times[None, :]                       # [Q, m]
    use = (np.arange(m)[None, :] < nq[:, None]) & (dt > 0)
    a = p.alpha[:, seq.types]                                   # [K, m]
    b = p.beta[:, seq.types]
    decay = np.exp(-b[None] * np.where(use, dt, 0.0)[:, None, :])  # [Q, K, m]
    lam = p.mu[None] + np.sum(np.where(use[:, None, :], a[None] * decay, 0.0), axis=-1)
    return lam.reshape(times.shape + (p.K,))


def _event_intensities_and_compensator(p: HawkesParams, seq: EventSequence):
    """Recursive pass: lambda at each event (strictly earlier history) and Lambda(t_i) per type."""
    K = p.K
    E = np.zeros((K, K))          # E[c, c2] = sum over past type-c2 events of exp(-beta[c,c2] * age)
    C = np.zeros((K, K))          # C[c, c2] = sum over past type-c2 events of (1 - exp(-beta * age)) / beta
    lam = np.empty((len(seq), K))
    comp = np.empty((len(seq), K))
    pending = np.zeros(K)         # events at t_prev; tied events do not excite each other
    t_prev = 0.0
    for i, (t, c) in enumerate(zip(seq.times, seq.types)):
        if t > t_prev:
            E = E + pending[None, :]
            pending[:] = 0.0
            decay = np.exp(-p.beta * (t - t_prev))
            C = C + E * (1.0 - decay) / p.beta
            E = E * decay
            t_prev = t
        lam[i] = p.mu + (p.alpha * E).sum(axis=1)
        comp[i] = p.mu * t + (p.alpha * C).sum(axis=1)
        pending[c] += 1.0
    return lam, comp


def compensator(p: HawkesParams, seq: EventSequence, t: float) -> np.ndarray:
    """Per-type integrated intensity over [0, t]; events after ``t`` are ignored."""
    keep = seq.times < t
    dt = t - seq.times[keep]
    src = seq.types[keep]
    ratio = p.alpha[:, src] / p.beta[:, src]
    return p.mu * t + np.sum(ratio * (1.0 - np.exp(-p.beta[:, src] * dt[None, :])), axis=1)


def exact_nll(p: HawkesParams, seq: EventSequence) -> float:
    """Negative log-likelihood on [0, t_m] with the closed-form compensator."""
    lam, _ = _event_intensities_and_compensator(p, seq)
    own = lam[np.arange(len(seq)), seq.types]
    if np.any(own <= 0):
        raise ArithmeticError("non-positive intensity at an observed event")
    total_comp = compensator(p, seq, float(seq.times[-1])).sum()
    return float(-np.sum(np.log(own)) + total_comp)


def dataset_nll(p: HawkesParams, ds: EventDataset) -> float:
    """Summed exact NLL over a dataset."""
    if ds.num_types != p.K:
        raise DataError(f"dataset has K={ds.num_types}, params have K={p.K}")
    return float(sum(exact_nll(p, s) for s in ds.sequences))


def compensator_increments(p: HawkesParams, seq: EventSequence) -> np.ndarray:
    """Lambda(t_i) - Lambda(t_{i-1}) of the total intensity; unit-exponential under the model."""
    _, comp = _event_intensities_and_compensator(p, seq)
    total = comp.sum(axis=1)
    return np.diff(np.concatenate([[0.0], total]))


def simulate(p: HawkesParams, horizon: float, seed: int = 0, t0: float = 0.0) -> EventSequence | None:
    """Ogata thinning on (t0, horizon].  Returns ``None`` when no event fires."""
    if horizon <= t0:
        raise ValueError("horizon must exceed the start time")
    if not p.is_stable():
        warnings.warn(
            f"Hawkes parameters are not stationary (spectral radius {p.spectral_radius():.3f} >= 1)",
            RuntimeWarning, stacklevel=2)
    rng = np.random.Generator(np.random.Philox(seed))
    K = p.K
    E = np.zeros((K, K))
    t = t0
    times: list[float] = []
    types: list[int] = []
    while True:
        # intensity is non-increasing until the next event, so lambda(t+) bounds it
        lam_bar = float(np.sum(p.mu + (p.alpha * E).sum(axis=1)))
        if lam_bar <= 0.0:
            break
        dt = rng.exponential(1.0 / lam_bar)
        if t + dt > horizon:
            break
        t += dt
        E *= np.exp(-p.beta * dt)
        lam = p.mu + (p.alpha * E).sum(axis=1)
        total = float(lam.sum())
        if rng.random() * lam_bar <= total:
            c = int(np.searchsorted(np.cumsum(lam), rng.random() * total, side="right"))
            c = min(c, K - 1)
            E[:, c] += 1.0
            times.append(t)
            types.append(c)
    if not times:
        return None
    return EventSequence(np.array(times), np.array(types))


def simulate_dataset(p: HawkesParams, horizon: float, n_sequences: int, seed: int = 0,
                     min_events: int = 1) -> EventDataset:
    """Independent sequences from seeds ``seed, seed+1, ...``; empty draws are skipped."""
    seqs = []
    s = seed
    attempts = 0
    while len(seqs) < n_sequences:
        seq = simulate(p, horizon, seed=s)
        s += 1
        attempts += 1
        if seq is not None and len(seq) >= min_events:
            seqs.append(seq)
        if attempts > 100 * n_sequences + 100:
            raise DataError("simulation keeps producing sequences that are too short")
    return EventDataset(p.K, seqs, "simulated")
