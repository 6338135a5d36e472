"""Hawkes Attention network for marked event sequences.

Queries, keys and values are per-type embeddings scaled by learned kernels
of the elapsed time:

    Q[j,k] = W_Q v_{c_j} phi_{c_j}(t_j - t_k)
    K[k,j] = W_K v_{c_k} phi_{c_k}(t_j - t_k)
    V[k,j] = W_V v_{c_k} phi_{c_k}(t_j - t_k)

Because each kernel is a scalar, the score ``Q[j,k] . K[k,j]`` equals
``phi_q * phi_k * (q_j . k_k)`` and the weighted value sum is
``sum_k w[j,k] phi_k v_k``, so the fast path never materializes the
[B, m, m, d] tensors.  :func:`qkv` and :func:`attend` build them explicitly
for inspection and tests.

Intensities at arbitrary times come from *probe* tokens: a probe at time
``t`` with ``n_hist`` history events is a query token that attends to
events ``k < n_hist``.  Under the ``last_event`` policy its query type is
the most recent event's type (a learned boot vector when there is no
history); under ``per_type`` one probe per candidate type ``c`` is run
and ``lambda_c`` is read from the probe whose query type is ``c``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .kernels import KernelBank, KernelConfig
from .tensor import Tensor

BOOT = -1


@dataclass
class ModelConfig:
    num_types: int
    d_model: int = 64
    d_k: int = 64
    d_v: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    phi_width: int = 8
    phi_depth: int = 2
    kernel_mode: str = "per_type"
    use_pe: bool = False
    use_rnn: bool = False
    d_rnn: int = 64
    dropout: float = 0.1
    probe_policy: str = "last_event"

    def __post_init__(self):
        for name in ("num_types", "d_model", "d_k", "d_v", "n_heads", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2 for layer normalization")
        if self.probe_policy not in ("last_event", "per_type"):
            raise ValueError(f"unknown probe_policy {self.probe_policy!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.use_rnn and self.d_rnn < 1:
            raise ValueError("d_rnn must be >= 1 when use_rnn is set")
        self.kernel_config()

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(mode=self.kernel_mode, width=self.phi_width, depth=self.phi_depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def sinusoidal_encoding(positions, d: int) -> np.ndarray:
    """Transformer positional encodings for integer ``positions`` -> positions.shape + (d,)."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    j = np.arange(d)
    angle = pos / np.power(10000.0, (2 * (j // 2)) / d)
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


def init_encoder_params(params: dict, prefix: str, rng, d_model, d_k, d_v, n_heads, d_ff):
    """One attention + FFN block: per-head projections, output projection, FFN, two layer norms."""
    for h in range(n_heads):
        params[f"{prefix}.heads.{h}.w_q"] = T.parameter(_glorot(rng, d_model, d_k))
        params[f"{prefix}.heads.{h}.w_k"] = T.parameter(_glorot(rng, d_model, d_k))
        params[f"{prefix}.heads.{h}.w_v"] = T.parameter(_glorot(rng, d_model, d_v))
    params[f"{prefix}.w_o"] = T.parameter(_glorot(rng, n_heads * d_v, d_model))
    params[f"{prefix}.b_o"] = T.parameter(np.zeros(d_model))
    params[f"{prefix}.ln1.gain"] = T.parameter(np.ones(d_model))
    params[f"{prefix}.ln1.bias"] = T.parameter(np.zeros(d_model))
    params[f"{prefix}.ffn.w1"] = T.parameter(_glorot(rng, d_model, d_ff))
    params[f"{prefix}.ffn.b1"] = T.parameter(np.zeros(d_ff))
    params[f"{prefix}.ffn.w2"] = T.parameter(_glorot(rng, d_ff, d_model))
    params[f"{prefix}.ffn.b2"] = T.parameter(np.zeros(d_model))
    params[f"{prefix}.ln2.gain"] = T.parameter(np.ones(d_model))
    params[f"{prefix}.ln2.bias"] = T.parameter(np.zeros(d_model))


class Dropout:
    """Draws dropout masks from ``rng``; inactive when ``rng`` is None or the rate is 0."""

    def __init__(self, rate: float = 0.0, rng: np.random.Generator | None = None):
        self.rate = rate
        self.rng = rng

    @property
    def active(self) -> bool:
        return self.rng is not None and self.rate > 0.0

    def __call__(self, x: Tensor) -> Tensor:
        if not self.active:
            return x
        return T.apply_mask(x, T.dropout_mask(x.shape, self.rate, self.rng))


NO_DROPOUT = Dropout()


def attention(params, prefix, n_heads, x_q, x_kv, phis, mask, drop: Dropout = NO_DROPOUT):
    """Multi-head time-modulated attention.

    ``phis[h] = (phi_q, phi_k, phi_v)``, each [B, Q, M] (or None for phi == 1).
    Returns the output-projected context [B, Q, d_model].
    """
    outs = []
    for h in range(n_heads):
        wq = params[f"{prefix}.heads.{h}.w_q"]
        q = x_q @ wq
        k = x_kv @ params[f"{prefix}.heads.{h}.w_k"]
        v = x_kv @ params[f"{prefix}.heads.{h}.w_v"]
        scores = q @ T.transpose(k)
        pq, pk, pv = phis[h]
        if pq is not None:
            scores = scores * pq
        if pk is not None:
            scores = scores * pk
        scores = scores * (1.0 / math.sqrt(wq.shape[1]))
        w = drop(T.softmax_masked(scores, mask))
        if pv is not None:
            w = w * pv
        outs.append(w @ v)
    ctx = outs[0] if n_heads == 1 else T.concat(outs)
    return ctx @ params[f"{prefix}.w_o"] + params[f"{prefix}.b_o"]


def encoder_layer(params, prefix, n_heads, x_q, x_kv, phis, mask, drop: Dropout = NO_DROPOUT):
    """Attention -> residual + norm -> FFN -> residual + norm (post-norm)."""
    a = attention(params, prefix, n_heads, x_q, x_kv, phis, mask, drop)
    x = T.layer_norm(x_q + a, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    f = T.relu(x @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"])
    f = drop(f) @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]
    return T.layer_norm(x + f, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])


def pair_kernels(bank: KernelBank, head: int, q_types, src_types, lags, mask):
    """Dense (phi_query, phi_source) at the ``mask``-ed pairs; zeros elsewhere.

    q_types [B, Q], src_types [B, M], lags/mask [B, Q, M].
    """
    shape = lags.shape
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        z = Tensor(np.zeros(shape))
        return z, z
    dt = lags.reshape(-1)[valid]
    st = np.broadcast_to(src_types[:, None, :], shape).reshape(-1)[valid]
    if bank.shared:
        y = bank.eval(head, st, dt)
        phi = T.scatter(y, valid, shape)
        return phi, phi
    qt = np.broadcast_to(q_types[:, :, None], shape).reshape(-1)[valid]
    n = valid.size
    y = bank.eval(head, np.concatenate([qt, st]), np.concatenate([dt, dt]))
    pq = T.scatter(T.take(y, np.arange(n)), valid, shape)
    ps = T.scatter(T.take(y, np.arange(n, 2 * n)), valid, shape)
    return pq, ps


@dataclass
class Encoding:
    """Event-side state reused by every probe evaluation."""

    times: np.ndarray            # [B, m]
    types: np.ndarray            # [B, m]
    pad_mask: np.ndarray         # [B, m]
    layer_inputs: list           # L tensors [B, m, d]: event reps entering each layer
    encoder_out: Tensor          # [B, m, d]
    hidden: Tensor               # [B, m, d] (encoder_out refined by the RNN when enabled)
    rnn_states: Tensor | None    # [B, m, d_rnn]


class HawkesAttention:
    """Parameters of the model plus the forward computations."""

    def __init__(self, config: ModelConfig, seed: int = 0, time_scale: float = 1.0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, Tensor] = {}
        p["embedding"] = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(c.d_model), (c.num_types, c.d_model)))
        p["boot"] = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(c.d_model), c.d_model))
        for layer in range(c.n_layers):
            init_encoder_params(p, f"layers.{layer}", rng, c.d_model, c.d_k, c.d_v, c.n_heads, c.d_ff)
        if c.use_rnn:
            d_in = c.d_model + c.d_rnn
            for gate in ("z", "r", "n"):
                p[f"rnn.w_{gate}"] = T.parameter(_glorot(rng, d_in, c.d_rnn))
                p[f"rnn.b_{gate}"] = T.parameter(np.zeros(c.d_rnn))
            p["rnn.w_out"] = T.parameter(_glorot(rng, c.d_rnn, c.d_model))
            p["rnn.b_out"] = T.parameter(np.zeros(c.d_model))
        p["mu"] = T.parameter(np.zeros(c.num_types))
        p["head.a"] = T.parameter(rng.normal(0.0, 0.1, (c.num_types, c.d_model)))
        for name, t in p.items():
            t.name = name
        self.params = p
        self.bank = KernelBank(c.kernel_config(), c.n_heads, c.num_types, rng, time_scale=time_scale)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.bank.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def n_kernel_parameters(self) -> int:
        return sum(t.size for t in self.bank.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in named.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())

    # -- forward ----------------------------------------------------------------

    def _drop(self, rng, dropout):
        rate = self.config.dropout if dropout is None else dropout
        return Dropout(rate, rng)

    def _embed(self, types, positions):
        x = T.embedding(self.params["embedding"], types)
        if self.config.use_pe:
            x = x + sinusoidal_encoding(positions, self.config.d_model)
        return x

    def encode(self, batch, rng=None, dropout=None) -> Encoding:
        """Event representations h(t_j), each built from strictly earlier events."""
        c = self.config
        drop = self._drop(rng, dropout)
        times = np.asarray(batch.times, dtype=np.float64)
        types = np.asarray(batch.types, dtype=np.int64)
        pad = np.asarray(batch.pad_mask, dtype=bool)
        B, m = times.shape
        mask = np.asarray(batch.causal_mask, dtype=bool)
        lags = times[:, :, None] - times[:, None, :]
        phis = []
        for h in range(c.n_heads):
            pq, ps = pair_kernels(self.bank, h, types, types, lags, mask)
            phis.append((pq, ps, ps))
        x = self._embed(types, np.broadcast_to(np.arange(m), (B, m)))
        inputs = []
        for layer in range(c.n_layers):
            inputs.append(x)
            x = encoder_layer(self.params, f"layers.{layer}", c.n_heads, x, x, phis, mask, drop)
        enc_out = x
        states = None
        if c.use_rnn:
            states = self._rnn_sequence(enc_out)
            x = enc_out + (states @ self.params["rnn.w_out"] + self.params["rnn.b_out"])
        return Encoding(times, types, pad, inputs, enc_out, x, states)

    def _gru_cell(self, x: Tensor, s: Tensor) -> Tensor:
        p = self.params
        xs = T.concat([x, s])
        z = T.sigmoid(xs @ p["rnn.w_z"] + p["rnn.b_z"])
        r = T.sigmoid(xs @ p["rnn.w_r"] + p["rnn.b_r"])
        n = T.tanh(T.concat([x, r * s]) @ p["rnn.w_n"] + p["rnn.b_n"])
        return (1.0 - z) * n + z * s

    def _rnn_sequence(self, x: Tensor) -> Tensor:
        B, m, d = x.shape
        dr = self.config.d_rnn
        s = Tensor(np.zeros((B, dr)))
        base = (np.arange(B)[:, None] * m * d) + np.arange(d)[None, :]
        states = []
        for j in range(m):
            s = self._gru_cell(T.take(x, base + j * d), s)
            states.append(s)
        return T.reshape(T.concat(states), (B, m, dr))

    def probe_hidden(self, enc: Encoding, times, n_hist, query_types, rng=None, dropout=None,
                     token_valid=None) -> Tensor:
        """Hidden representation of probe tokens [B, Q, d].

        times/n_hist/query_types: [B, Q].  A probe attends to events ``k < n_hist``;
        query type ``BOOT`` (-1) selects the learned no-history vector.
        """
        c = self.config
        drop = self._drop(rng, dropout)
        times = np.asarray(times, dtype=np.float64)
        n_hist = np.asarray(n_hist, dtype=np.int64)
        qtypes = np.asarray(query_types, dtype=np.int64)
        B, Q = times.shape
        m = enc.times.shape[1]
        valid = np.ones((B, Q), dtype=bool) if token_valid is None else np.asarray(token_valid, bool)
        if np.any(valid & ((n_hist < 0) | (n_hist > enc.pad_mask.sum(axis=1)[:, None]))):
            raise ValueError("n_hist exceeds the number of available events")
        n_hist = np.where(valid, n_hist, 0)
        last_idx = np.clip(n_hist - 1, 0, m - 1)
        frontier = np.where(n_hist > 0, np.take_along_axis(enc.times, last_idx, axis=1), -np.inf)
        if np.any(valid & (times < frontier)):
            raise ValueError("probe time precedes the last event of its history")
        mask = (np.arange(m)[None, None, :] < n_hist[:, :, None]) & enc.pad_mask[:, None, :]
        mask &= valid[:, :, None]
        lags = times[:, :, None] - enc.times[:, None, :]
        phis = []
        for h in range(c.n_heads):
            pq, ps = pair_kernels(self.bank, h, np.maximum(qtypes, 0), enc.types, lags, mask)
            phis.append((pq, ps, ps))
        table = T.concat([self.params["embedding"], T.reshape(self.params["boot"], (1, c.d_model))], axis=0)
        x = T.embedding(table, np.where(qtypes == BOOT, c.num_types, qtypes))
        if c.use_pe:
            x = x + sinusoidal_encoding(n_hist, c.d_model)
        for layer in range(c.n_layers):
            x = encoder_layer(self.params, f"layers.{layer}", c.n_heads, x, enc.layer_inputs[layer],
                              phis, mask, drop)
        if c.use_rnn:
            dr = c.d_rnn
            flat = T.reshape(enc.rnn_states, (B * m, dr))
            ext = T.concat([Tensor(np.zeros((1, dr))), flat], axis=0)
            idx = np.where(n_hist > 0, np.arange(B)[:, None] * m + n_hist, 0)
            prev = T.embedding(ext, idx)
            s = self._gru_cell(T.reshape(x, (B * Q, c.d_model)), T.reshape(prev, (B * Q, dr)))
            s = T.reshape(s, (B, Q, dr))
            x = x + (s @ self.params["rnn.w_out"] + self.params["rnn.b_out"])
        return x

    def last_event_types(self, enc: Encoding, n_hist) -> np.ndarray:
        n_hist = np.asarray(n_hist, dtype=np.int64)
        m = enc.types.shape[1]
        prev = np.take_along_axis(enc.types, np.clip(n_hist - 1, 0, m - 1), axis=1)
        return np.where(n_hist > 0, prev, BOOT)

    def intensities(self, h: Tensor) -> Tensor:
        """softplus(mu_c + a_c . h) for every type -> [..., K]."""
        return T.softplus(h @ T.transpose(self.params["head.a"]) + self.params["mu"])

    def intensity_at(self, enc: Encoding, times, n_hist, rng=None, dropout=None,
                     token_valid=None) -> Tensor:
        """All-type intensities [B, Q, K] at probe times with ``n_hist`` history events."""
        times = np.asarray(times, dtype=np.float64)
        n_hist = np.asarray(n_hist, dtype=np.int64)
        K = self.config.num_types
        if self.config.probe_policy == "last_event":
            qt = self.last_event_types(enc, n_hist)
            h = self.probe_hidden(enc, times, n_hist, qt, rng, dropout, token_valid)
            return self.intensities(h)
        B, Q = times.shape
        tv = None if token_valid is None else np.tile(token_valid, (1, K))
        qt = np.repeat(np.arange(K), Q)[None, :].repeat(B, axis=0)
        h = self.probe_hidden(enc, np.tile(times, (1, K)), np.tile(n_hist, (1, K)), qt, rng, dropout, tv)
        lam = self.intensities(h)                                    # [B, K*Q, K]
        # lambda_c from the probe whose query type is c
        idx = ((np.arange(B)[:, None, None] * (K * Q) + np.arange(K)[None, None, :] * Q
                + np.arange(Q)[None, :, None]) * K + np.arange(K)[None, None, :])
        return T.take(lam, idx)

    def event_log_intensity(self, enc: Encoding, rng=None, dropout=None) -> Tensor:
        """log lambda_{c_i}(t_i) for every event [B, m] (padded entries finite, to be masked)."""
        B, m = enc.times.shape
        n_hist = np.broadcast_to(np.arange(m), (B, m))
        K = self.config.num_types
        if self.config.probe_policy == "last_event":
            lam = self.intensity_at(enc, enc.times, n_hist, rng, dropout, token_valid=enc.pad_mask)
        else:
            h = self.probe_hidden(enc, enc.times, n_hist, enc.types, rng, dropout, enc.pad_mask)
            lam = self.intensities(h)
        idx = (np.arange(B * m).reshape(B, m)) * K + enc.types
        return T.log(T.take(lam, idx))

    # -- convenience wrappers ------------------------------------------------------

    def encode_probes(self, batch, probe_times=None, enc: Encoding | None = None) -> Tensor:
        """Probe representations at ``probe_times`` [B, m, S] (default: batch.mc_times).

        Probe ``(i, s)`` lies in interval ``(t_{i-1}, t_i]``.  Returns [B, m, S, d] for
        ``last_event`` and [B, m, S, K, d] for ``per_type``.
        """
        if enc is None:
            enc = self.encode(batch)
        pt = np.asarray(batch.mc_times if probe_times is None else probe_times, dtype=np.float64)
        B, m, S = pt.shape
        pad = enc.pad_mask
        lo = np.where(pad, np.concatenate([np.zeros((B, 1)), enc.times[:, :-1]], axis=1), 0.0)
        hi = enc.times
        inside = (pt <= hi[..., None]) & ((pt > lo[..., None]) | (lo == hi)[..., None])
        if np.any(pad[..., None] & ~inside):
            raise ValueError("probe time outside its interval")
        n_hist = np.broadcast_to(np.arange(m)[None, :, None], (B, m, S)).reshape(B, m * S)
        valid = np.broadcast_to(pad[..., None], (B, m, S)).reshape(B, m * S)
        flat_t = pt.reshape(B, m * S)
        d = self.config.d_model
        if self.config.probe_policy == "last_event":
            qt = self.last_event_types(enc, n_hist)
            h = self.probe_hidden(enc, flat_t, n_hist, qt, token_valid=valid)
            return T.reshape(h, (B, m, S, d))
        K = self.config.num_types
        hs = []
        for c in range(K):
            h = self.probe_hidden(enc, flat_t, n_hist, np.full_like(n_hist, c), token_valid=valid)
            hs.append(T.reshape(h, (B, m, S, 1, d)))
        return T.concat(hs, axis=3)


# -- explicit Q/K/V construction ---------------------------------------------------


def qkv(model: HawkesAttention, layer: int, head: int, batch, enc: Encoding | None = None):
    """Explicit Q[j,k], K[k,j], V[k,j] as [B, m, m, d] tensors (index order [b, j, k])."""
    if enc is None:
        enc = model.encode(batch)
    x = enc.layer_inputs[layer]
    B, m, _ = x.shape
    pre = f"layers.{layer}.heads.{head}"
    q = x @ model.params[f"{pre}.w_q"]
    k = x @ model.params[f"{pre}.w_k"]
    v = x @ model.params[f"{pre}.w_v"]
    lags = enc.times[:, :, None] - enc.times[:, None, :]
    phi_q = model.bank.eval(head, np.broadcast_to(enc.types[:, :, None], lags.shape), lags)
    phi_s = model.bank.eval(head, np.broadcast_to(enc.types[:, None, :], lags.shape), lags)

    def spread(vec, rows: bool):
        dk = vec.shape[-1]
        shape = (B, m, 1, dk) if rows else (B, 1, m, dk)
        return T.expand(T.reshape(vec, shape), (B, m, m, dk))

    def scale(phi, dk):
        return T.expand(T.reshape(phi, (B, m, m, 1)), (B, m, m, dk))

    Q = spread(q, True) * scale(phi_q, q.shape[-1])
    K = spread(k, False) * scale(phi_s, k.shape[-1])
    V = spread(v, False) * scale(phi_s, v.shape[-1])
    return Q, K, V


def attend(Q: Tensor, K: Tensor, V: Tensor, mask) -> Tensor:
    """o_j = sum_k softmax_k(Q[j,k].K[k,j] / sqrt(d_k)) V[k,j]; empty history gives 0."""
    B, m, _, dk = Q.shape
    scores = T.sum_(Q * K, axis=-1) * (1.0 / math.sqrt(dk))
    w = T.softmax_masked(scores, mask)
    dv = V.shape[-1]
    return T.sum_(T.expand(T.reshape(w, (B, m, m, 1)), (B, m, m, dv)) * V, axis=2)


# -- effective kernels -----------------------------------------------------------------


def effective_kernel_coefficients(model: HawkesAttention, batch, seq_index: int, position: int,
                                  source_type: int, target_type: int) -> np.ndarray:
    """Per-head mixing weights of phi_a at a reference context.

    Measured on the first layer's linear path: for the event at ``position``
    of sequence ``seq_index``, coefficient ``h`` sums, over earlier events of
    type ``source_type``, attention weight x (value projection -> output
    projection -> a_target).  Context dependent by construction.
    """
    length = int(np.asarray(batch.pad_mask)[seq_index].sum())
    if not 1 <= position < length:
        raise ValueError(f"reference position must lie in [1, {length}), got {position}")
    c = model.config
    with T.no_grad():
        enc = model.encode(batch)
        x0 = enc.layer_inputs[0].data[seq_index]                  # [m, d]
        times = enc.times[seq_index]
        types = enc.types[seq_index]
        hist = np.arange(position)
        lags = times[position] - times[hist]
        a_c = model.params["head.a"].data[target_type]
        w_o = model.params["layers.0.w_o"].data
        coeffs = np.zeros(c.n_heads)
        for h in range(c.n_heads):
            pre = f"layers.0.heads.{h}"
            q = x0[position] @ model.params[f"{pre}.w_q"].data
            k = x0[hist] @ model.params[f"{pre}.w_k"].data
            v = x0[hist] @ model.params[f"{pre}.w_v"].data
            pq = model.bank.eval(h, np.full(hist.size, types[position]), lags).data
            ps = model.bank.eval(h, types[hist], lags).data
            s = (k @ q) * pq * ps / math.sqrt(c.d_k)
            w = np.exp(s - s.max())
            w /= w.sum()
            proj = v @ w_o[h * c.d_v:(h + 1) * c.d_v] @ a_c           # [n_hist]
            sel = types[hist] == source_type
            coeffs[h] = float(np.sum(w[sel] * proj[sel]))
    return coeffs


def mix_kernels(bank: KernelBank, source_type: int, coeffs, grid) -> np.ndarray:
    """kappa(dt) = sum_h coeffs[h] * phi_source^{(h)}(dt)."""
    grid = np.asarray(grid, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (bank.n_heads,):
        raise ValueError(f"need {bank.n_heads} coefficients, got shape {coeffs.shape}")
    out = np.zeros_like(grid)
    for h in range(bank.n_heads):
        out += coeffs[h] * bank.eval_numpy(h, source_type, grid)
    return out


def effective_kernel(model: HawkesAttention, batch, seq_index: int, position: int,
                     source_type: int, target_type: int, grid):
    """(kappa curve on ``grid``, per-head coefficients) at the given reference context."""
    coeffs = effective_kernel_coefficients(model, batch, seq_index, position, source_type, target_type)
    return mix_kernels(model.bank, source_type, coeffs, grid), coeffs
