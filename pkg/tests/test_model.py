import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hawkes_attention import tensor as T
from hawkes_attention.data import EventDataset, EventSequence, batch
from hawkes_attention.model import (BOOT, HawkesAttention, ModelConfig, attend, attention,
                                    effective_kernel, effective_kernel_coefficients, mix_kernels,
                                    pair_kernels, qkv, sinusoidal_encoding)


def small(**kw):
    base = dict(num_types=3, d_model=8, d_k=6, d_v=5, n_heads=2, n_layers=2, d_ff=12, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def dataset(K=3, lengths=(5, 3, 7), seed=0):
    rng = np.random.default_rng(seed)
    seqs = [EventSequence(np.cumsum(rng.exponential(1.0, n)), rng.integers(0, K, n)) for n in lengths]
    return EventDataset(K, seqs)


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ValueError):
            small(n_heads=0)
        with pytest.raises(ValueError):
            small(kernel_mode="weird")
        with pytest.raises(ValueError):
            small(probe_policy="weird")
        with pytest.raises(ValueError):
            small(dropout=1.0)

    def test_round_trip(self):
        c = small(use_pe=True)
        assert ModelConfig.from_dict(c.to_dict()) == c


def test_sinusoidal_encoding_values():
    pe = sinusoidal_encoding(np.array([0, 3]), 6)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1])
    assert pe[1, 0] == pytest.approx(np.sin(3.0))
    assert pe[1, 3] == pytest.approx(np.cos(3.0 / 10000 ** (2 / 6)))


def test_parameter_count_shared_difference():
    per = HawkesAttention(small(kernel_mode="per_type"))
    shared = HawkesAttention(small(kernel_mode="shared"))
    p_phi = per.bank.params_per_kernel
    assert per.n_parameters() - shared.n_parameters() == (3 - 1) * 2 * p_phi


def test_state_dict_round_trip_and_mismatch():
    a = HawkesAttention(small(), seed=1)
    b = HawkesAttention(small(), seed=2)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])
    bad = a.state_dict()
    bad.pop("mu")
    with pytest.raises(KeyError):
        b.load_state_dict(bad)
    bad = a.state_dict()
    bad["mu"] = np.zeros(7)
    with pytest.raises(ValueError):
        b.load_state_dict(bad)


@pytest.mark.parametrize("mode", ["per_type", "shared"])
def test_fast_path_matches_explicit_qkv(mode):
    model = HawkesAttention(small(kernel_mode=mode), seed=4)
    ds = dataset()
    b = batch(ds, [0, 1, 2], S=2)
    enc = model.encode(b)
    mask = b.causal_mask
    lags = enc.times[:, :, None] - enc.times[:, None, :]
    for layer in range(2):
        x = enc.layer_inputs[layer]
        heads = [attend(*qkv(model, layer, h, b, enc), mask) for h in range(2)]
        explicit = T.concat(heads) @ model.params[f"layers.{layer}.w_o"] + model.params[f"layers.{layer}.b_o"]
        phis = []
        for h in range(2):
            pq, ps = pair_kernels(model.bank, h, enc.types, enc.types, lags, mask)
            phis.append((pq, ps, ps))
        fast = attention(model.params, f"layers.{layer}", 2, x, x, phis, mask)
        np.testing.assert_allclose(fast.data, explicit.data, rtol=1e-12, atol=1e-12)


def test_phi_one_reduces_to_plain_attention():
    model = HawkesAttention(small(n_layers=1), seed=0)
    for net in [n for row in model.bank.nets for n in row]:
        for w, bias in net.layers:
            w.data[:] = 0.0
            bias.data[:] = 0.0
        net.layers[-1][1].data[:] = 1.0
    ds = dataset()
    b = batch(ds, [0, 1, 2], S=1)
    enc = model.encode(b)
    x = enc.layer_inputs[0]
    ones = [(None, None, None)] * 2
    plain = attention(model.params, "layers.0", 2, x, x, ones, b.causal_mask)
    lags = enc.times[:, :, None] - enc.times[:, None, :]
    phis = []
    for h in range(2):
        pq, ps = pair_kernels(model.bank, h, enc.types, enc.types, lags, b.causal_mask)
        phis.append((pq, ps, ps))
    timed = attention(model.params, "layers.0", 2, x, x, phis, b.causal_mask)
    np.testing.assert_allclose(timed.data, plain.data, rtol=1e-13, atol=1e-13)


def test_first_event_sees_no_history():
    # the first event's attention context is zero, so its representation ignores every kernel
    model = HawkesAttention(small(n_layers=1), seed=0)
    ds = dataset(lengths=(4,))
    b = batch(ds, [0], S=1)
    h0 = model.encode(b).hidden.data[0, 0].copy()
    for p in model.bank.parameters():
        p.data = p.data + 0.3
    np.testing.assert_array_equal(model.encode(b).hidden.data[0, 0], h0)


@pytest.mark.parametrize("policy", ["last_event", "per_type"])
@pytest.mark.parametrize("extras", [{}, {"use_pe": True}, {"use_rnn": True, "d_rnn": 4}])
def test_intensities_positive_and_shaped(policy, extras):
    model = HawkesAttention(small(probe_policy=policy, **extras), seed=2)
    ds = dataset()
    b = batch(ds, [0, 1, 2], S=3)
    enc = model.encode(b)
    B, m, S = b.mc_times.shape
    n_hist = np.broadcast_to(np.arange(m)[None, :, None], (B, m, S)).reshape(B, m * S)
    valid = np.broadcast_to(b.pad_mask[..., None], (B, m, S)).reshape(B, m * S)
    lam = model.intensity_at(enc, b.mc_times.reshape(B, -1), n_hist, token_valid=valid)
    assert lam.shape == (B, m * S, 3)
    assert np.all(lam.data > 0)
    ll = model.event_log_intensity(enc)
    assert ll.shape == (B, m)
    assert np.all(np.isfinite(ll.data))


def test_last_event_query_type():
    model = HawkesAttention(small(), seed=0)
    ds = EventDataset(3, [EventSequence([1.0, 2.0], [2, 1])])
    enc = model.encode(batch(ds, [0], S=1))
    np.testing.assert_array_equal(model.last_event_types(enc, np.array([[0, 1, 2]])), [[BOOT, 2, 1]])


def test_per_type_reads_matching_probe():
    model = HawkesAttention(small(probe_policy="per_type"), seed=5)
    ds = dataset(lengths=(4,))
    enc = model.encode(batch(ds, [0], S=1))
    t = np.array([[enc.times[0, 2] + 0.1]])
    lam = model.intensity_at(enc, t, np.array([[3]])).data[0, 0]
    for c in range(3):
        h = model.probe_hidden(enc, t, np.array([[3]]), np.array([[c]]))
        assert lam[c] == pytest.approx(model.intensities(h).data[0, 0, c], rel=1e-14)


def test_probe_validation():
    model = HawkesAttention(small(), seed=0)
    ds = dataset(lengths=(3,))
    enc = model.encode(batch(ds, [0], S=1))
    with pytest.raises(ValueError):
        model.intensity_at(enc, np.array([[10.0]]), np.array([[4]]))
    with pytest.raises(ValueError):
        model.intensity_at(enc, np.array([[enc.times[0, 1] - 0.01]]), np.array([[2]]))


def test_encode_probes_shapes_and_interval_check():
    ds = dataset()
    b = batch(ds, [0, 1, 2], S=2)
    m1 = HawkesAttention(small(), seed=0)
    assert m1.encode_probes(b).shape == (3, 7, 2, 8)
    m2 = HawkesAttention(small(probe_policy="per_type"), seed=0)
    assert m2.encode_probes(b).shape == (3, 7, 2, 3, 8)
    bad = b.mc_times.copy()
    bad[0, 1, 0] = b.times[0, 1] + 1.0
    with pytest.raises(ValueError):
        m1.encode_probes(b, probe_times=bad)


def test_dropout_changes_output_only_with_rng():
    model = HawkesAttention(small(dropout=0.5), seed=0)
    b = batch(dataset(), [0, 1, 2], S=1)
    a = model.encode(b).hidden.data
    np.testing.assert_array_equal(a, model.encode(b).hidden.data)
    c = model.encode(b, rng=np.random.default_rng(0)).hidden.data
    assert not np.allclose(a, c)


@given(st.integers(2, 6), st.integers(0, 10_000))
def test_prefix_invariance_under_suffix_mutation(n, seed):
    model = HawkesAttention(small(n_layers=1, use_rnn=True, d_rnn=3), seed=1)
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.exponential(1.0, n))
    c = rng.integers(0, 3, n)
    j = int(rng.integers(1, n))
    t2, c2 = t.copy(), c.copy()
    t2[j:] = t[j - 1] + np.cumsum(rng.exponential(1.0, n - j))
    c2[j:] = rng.integers(0, 3, n - j)
    e1 = model.encode(batch(EventDataset(3, [EventSequence(t, c)]), [0], S=1))
    e2 = model.encode(batch(EventDataset(3, [EventSequence(t2, c2)]), [0], S=1))
    assert np.array_equal(e1.hidden.data[0, :j], e2.hidden.data[0, :j])


def test_effective_kernel():
    model = HawkesAttention(small(), seed=3)
    ds = dataset(lengths=(6,))
    b = batch(ds, [0], S=1)
    grid = np.linspace(0, 3, 7)
    curve, coeffs = effective_kernel(model, b, 0, 5, source_type=int(ds.sequences[0].types[0]),
                                     target_type=1, grid=grid)
    assert coeffs.shape == (2,)
    np.testing.assert_allclose(curve, mix_kernels(model.bank, int(ds.sequences[0].types[0]), coeffs, grid))
    absent = [a for a in range(3) if a not in ds.sequences[0].types[:5]]
    for a in absent:
        assert np.all(effective_kernel_coefficients(model, b, 0, 5, a, 0) == 0)
    with pytest.raises(ValueError):
        effective_kernel_coefficients(model, b, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        mix_kernels(model.bank, 0, [1.0], grid)


def test_shared_mode_changes_only_the_kernel_bank():
    per = HawkesAttention(small(kernel_mode="per_type"), seed=0)
    shared = HawkesAttention(small(kernel_mode="shared"), seed=0)
    assert {k: v.shape for k, v in per.params.items()} == {k: v.shape for k, v in shared.params.items()}


@given(st.floats(0.1, 5.0), st.integers(0, 1000), st.sampled_from(["last_event", "per_type"]))
def test_intensities_positive_for_scaled_parameters(scale, seed, policy):
    model = HawkesAttention(small(probe_policy=policy, n_layers=1), seed=seed)
    for p in model.parameters():
        p.data = p.data * scale
    b = batch(dataset(seed=seed), [0, 1, 2], S=2)
    enc = model.encode(b)
    B, m, S = b.mc_times.shape
    n_hist = np.broadcast_to(np.arange(m)[None, :, None], (B, m, S)).reshape(B, m * S)
    valid = np.broadcast_to(b.pad_mask[..., None], (B, m, S)).reshape(B, m * S)
    lam = model.intensity_at(enc, b.mc_times.reshape(B, -1), n_hist, token_valid=valid).data
    assert np.all(lam > 0) and np.all(np.isfinite(lam))


@pytest.mark.parametrize("policy", ["last_event", "per_type"])
def test_type_relabeling_leaves_nll_invariant(policy):
    from hawkes_attention.train import nll

    perm = np.array([2, 0, 1])               # old type c becomes perm[c]
    model = HawkesAttention(small(probe_policy=policy), seed=6)
    ds = dataset(seed=2)
    b = batch(ds, [0, 1, 2], S=4)
    base = nll(model, b, dropout=0.0).item()

    state = model.state_dict()
    new = dict(state)
    for name in ("embedding", "mu", "head.a"):
        new[name] = np.empty_like(state[name])
        new[name][perm] = state[name]
    for name, arr in state.items():
        if name.startswith("kernels.") and ".c" in name:
            head, tag, rest = name[len("kernels."):].split(".", 2)
            c = int(tag[1:])
            new[f"kernels.{head}.c{perm[c]}.{rest}"] = arr
    relabeled = HawkesAttention(small(probe_policy=policy), seed=6)
    relabeled.load_state_dict(new)
    ds2 = EventDataset(3, [EventSequence(s.times, perm[s.types]) for s in ds.sequences])
    b2 = batch(ds2, [0, 1, 2], S=4)
    assert nll(relabeled, b2, dropout=0.0).item() == pytest.approx(base, rel=1e-12)


def test_first_interval_intensity_depends_only_on_boot_path():
    model = HawkesAttention(small(use_pe=True), seed=1)
    a = dataset(lengths=(4,), seed=1)
    b = dataset(lengths=(6,), seed=2)
    lams = []
    for ds in (a, b):
        enc = model.encode(batch(ds, [0], S=1))
        t0 = float(ds.sequences[0].times[0])
        lams.append(model.intensity_at(enc, np.array([[t0 * 0.2, t0 * 0.9]]), np.array([[0, 0]])).data)
    np.testing.assert_array_equal(lams[0][0, 0], lams[0][0, 1])
    np.testing.assert_array_equal(lams[0], lams[1])
