import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hawkes_attention import tensor as T
from hawkes_attention.kernels import SHARED_TYPE, KernelBank, KernelConfig, ScalarMLP, export_curves

from .conftest import check_grads


def bank(mode="per_type", H=2, K=3, width=8, depth=2, seed=0, time_scale=1.0):
    return KernelBank(KernelConfig(mode, width, depth), H, K, np.random.default_rng(seed), time_scale)


def test_parameter_counts():
    per = bank("per_type")
    shared = bank("shared")
    p_phi = per.params_per_kernel
    # width 8, depth 2: (1*8+8) + (8*8+8) + (8*1+1)
    assert p_phi == 16 + 72 + 9
    assert sum(p.size for p in per.parameters()) == 2 * 3 * p_phi
    assert sum(p.size for p in shared.parameters()) == 2 * p_phi


def test_initial_kernel_near_one():
    b = bank()
    y = b.eval_numpy(0, 1, np.linspace(0, 5, 20))
    assert np.all(np.abs(y - 1.0) < 0.5)


def test_eval_matches_individual_nets():
    b = bank()
    types = np.array([[0, 2, 1], [1, 1, 0]])
    dt = np.array([[0.1, 0.5, 2.0], [0.3, 0.3, 4.0]])
    y = b.eval(1, types, dt).data
    for idx in np.ndindex(types.shape):
        assert y[idx] == pytest.approx(b.eval_numpy(1, types[idx], dt[idx])[0], rel=1e-14)


def test_shared_ignores_type():
    b = bank("shared")
    dt = np.array([0.2, 0.2, 0.2])
    y = b.eval(0, np.array([0, 1, 2]), dt).data
    assert y[0] == y[1] == y[2]


def test_time_scale_standardizes():
    a = bank(time_scale=1.0, seed=3)
    b = bank(time_scale=2.0, seed=3)
    np.testing.assert_array_equal(a.eval_numpy(0, 0, [0.5, 1.0]), b.eval_numpy(0, 0, [1.0, 2.0]))


def test_errors():
    b = bank()
    with pytest.raises(IndexError):
        b.eval(2, [0], [0.1])
    with pytest.raises(IndexError):
        b.eval(0, [3], [0.1])
    with pytest.raises(ValueError):
        KernelConfig("banana")
    with pytest.raises(ValueError):
        KernelConfig(width=0)
    with pytest.raises(ValueError):
        bank(time_scale=0.0)


def test_gradients_wrt_params_and_lags():
    rng = np.random.default_rng(1)
    net = ScalarMLP(5, 2, rng)
    arrays = [p.data.copy() for p in net.parameters()] + [rng.uniform(0, 3, 7)]

    def build(*ts):
        params, x = ts[:-1], ts[-1]
        for i in range(len(net.layers)):
            net.layers[i] = (params[2 * i], params[2 * i + 1])
        return T.sum_(net(x) * net(x))

    check_grads(build, arrays)


def test_dedup_of_repeated_lags_keeps_gradient():
    b = bank(K=2)
    dt = np.array([0.5, 0.5, 1.0, 0.5])
    y = b.eval(0, np.array([0, 0, 0, 1]), dt)
    T.backward(T.sum_(y))
    grads = {p.name: p.grad.copy() for p in b.parameters() if p.grad is not None}
    T.zero_grads(b.parameters())
    # same function without the duplicate-lag shortcut
    total = T.sum_(b.net(0, 0)(T.Tensor(np.array([0.5, 0.5, 1.0])))) + T.sum_(b.net(0, 1)(T.Tensor(np.array([0.5]))))
    T.backward(total)
    for p in b.parameters():
        if p.name in grads:
            np.testing.assert_allclose(p.grad, grads[p.name], rtol=1e-12, atol=1e-15)


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12))
def test_eval_shape_and_finiteness(lags):
    b = bank(K=2)
    types = np.arange(len(lags)) % 2
    y = b.eval(0, types, np.array(lags)).data
    assert y.shape == (len(lags),)
    assert np.all(np.isfinite(y))


def test_export_curves(tmp_path):
    b = bank(H=2, K=3)
    grid = np.linspace(0, 3, 11)
    rows = export_curves(b, grid, tmp_path / "k.csv")
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "head,type,dt,phi"
    assert rows == len(lines) - 1 == 2 * 3 * 11
    s = bank("shared", H=2, K=3)
    export_curves(s, grid, tmp_path / "s.csv")
    types = {int(line.split(",")[1]) for line in (tmp_path / "s.csv").read_text().splitlines()[1:]}
    assert types == {SHARED_TYPE}


@pytest.mark.parametrize("grid", [[], [1.0, 0.5], [-1.0, 0.0]])
def test_export_rejects_bad_grid(tmp_path, grid):
    with pytest.raises(ValueError):
        export_curves(bank(), np.array(grid), tmp_path / "k.csv")


def test_zeroed_output_weights_give_constant_kernel():
    b = bank()
    for row in b.nets:
        for net in row:
            net.layers[-1][0].data[:] = 0.0
    y = b.eval(1, np.array([0, 1, 2, 0]), np.array([0.0, 0.3, 2.0, 9.0])).data
    np.testing.assert_array_equal(y, np.ones(4))


def test_small_export_row_count(tmp_path):
    assert export_curves(bank(H=2, K=2), np.array([0.0, 0.5, 1.0]), tmp_path / "k.csv") == 12


@given(st.lists(st.floats(0.0, 20.0), min_size=1, max_size=10))
def test_identically_initialized_per_type_equals_shared(lags):
    per, shared = bank("per_type", K=3, seed=5), bank("shared", K=3, seed=6)
    for h in range(2):
        src = shared.nets[h][0].parameters()
        for c in range(3):
            for dst, s in zip(per.nets[h][c].parameters(), src):
                dst.data = s.data.copy()
    dt = np.array(lags)
    types = np.arange(dt.size) % 3
    for h in range(2):
        np.testing.assert_array_equal(per.eval(h, types, dt).data, shared.eval(h, types, dt).data)
