"""Per-type, per-head neural influence kernels phi(dt).

Each kernel is a scalar-to-scalar MLP (tanh hidden layers, linear output)
applied to the standardized lag ``dt / time_scale``.  In ``per_type`` mode
there is one MLP per (head, type); in ``shared`` mode one per head.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SHARED_TYPE = -1


@dataclass
class KernelConfig:
    mode: str = "per_type"
    width: int = 8
    depth: int = 2

    def __post_init__(self):
        if self.mode not in ("per_type", "shared"):
            raise ValueError(f"kernel mode must be 'per_type' or 'shared', got {self.mode!r}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("kernel width and depth must be >= 1")


class ScalarMLP:
    """R -> R multilayer perceptron; parameters are autodiff leaves."""

    def __init__(self, width: int, depth: int, rng: np.random.Generator, prefix: str = ""):
        self.layers: list[tuple[Tensor, Tensor]] = []
        fan_in = 1
        for i in range(depth):
            bound = 1.0 / np.sqrt(fan_in)
            w = T.parameter(rng.uniform(-bound, bound, (fan_in, width)), name=f"{prefix}l{i}.w")
            b = T.parameter(rng.uniform(-bound, bound, width), name=f"{prefix}l{i}.b")
            self.layers.append((w, b))
            fan_in = width
        # output starts near 1 with a gentle slope so the kernel begins close to phi == 1
        w = T.parameter(rng.uniform(-0.1, 0.1, (width, 1)) / np.sqrt(width), name=f"{prefix}out.w")
        b = T.parameter(np.ones(1), name=f"{prefix}out.b")
        self.layers.append((w, b))

    def parameters(self) -> list[Tensor]:
        return [p for pair in self.layers for p in pair]

    def __call__(self, x: Tensor) -> Tensor:
        """x: [n] standardized lags -> [n]."""
        h = T.reshape(x, (-1, 1))
        for w, b in self.layers[:-1]:
            h = T.tanh(T.dense_small(h, w, b))
        w, b = self.layers[-1]
        return T.reshape(T.dense_small(h, w, b), (-1,))

    def apply_numpy(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(np.asarray(x, dtype=np.float64).reshape(-1))).data


class KernelBank:
    """``n_heads`` x ``num_types`` influence kernels (or ``n_heads`` in shared mode)."""

    def __init__(self, config: KernelConfig, n_heads: int, num_types: int,
                 rng: np.random.Generator, time_scale: float = 1.0, prefix: str = "kernels"):
        if time_scale <= 0:
            raise ValueError("time_scale must be positive")
        self.config = config
        self.n_heads = n_heads
        self.num_types = num_types
        self.time_scale = float(time_scale)
        self.prefix = prefix
        n_kernels = num_types if config.mode == "per_type" else 1
        self.nets = [
            [ScalarMLP(config.width, config.depth, rng, prefix=f"{prefix}.h{h}.{self._tag(c)}.")
             for c in range(n_kernels)]
            for h in range(n_heads)
        ]

    @property
    def shared(self) -> bool:
        return self.config.mode == "shared"

    def _tag(self, c: int) -> str:
        return "shared" if self.config.mode == "shared" else f"c{c}"

    def parameters(self) -> list[Tensor]:
        return [p for row in self.nets for net in row for p in net.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    @property
    def params_per_kernel(self) -> int:
        return sum(p.size for p in self.nets[0][0].parameters())

    def net(self, head: int, type_id: int) -> ScalarMLP:
        if not 0 <= head < self.n_heads:
            raise IndexError(f"unknown head {head}")
        if self.shared:
            return self.nets[head][0]
        if not 0 <= type_id < self.num_types:
            raise IndexError(f"unknown type id {type_id}")
        return self.nets[head][type_id]

    def eval(self, head: int, types, dt) -> Tensor:
        """Elementwise phi_{types}^{(head)}(dt); output has the shape of ``dt``.

        ``dt`` may be a plain array (lags as data) or a Tensor.  For plain
        arrays, repeated (type, lag) pairs are evaluated once.
        """
        if not 0 <= head < self.n_heads:
            raise IndexError(f"unknown head {head}")
        dt_is_tensor = isinstance(dt, Tensor)
        dt_arr = dt.data if dt_is_tensor else np.asarray(dt, dtype=np.float64)
        shape = dt_arr.shape
        types = np.broadcast_to(np.asarray(types, dtype=np.int64), shape).reshape(-1)
        if types.size and not self.shared and (types.min() < 0 or types.max() >= self.num_types):
            raise IndexError(f"type id outside [0, {self.num_types})")
        n = dt_arr.size
        if n == 0:
            return Tensor(np.zeros(shape))
        scaled = (T.reshape(dt, (-1,)) * (1.0 / self.time_scale)) if dt_is_tensor else None
        flat = dt_arr.reshape(-1) / self.time_scale
        groups = [(0, np.arange(n))] if self.shared else [
            (c, np.flatnonzero(types == c)) for c in np.unique(types)]
        pieces, where = [], []
        for c, sel in groups:
            net = self.net(head, int(c))
            if dt_is_tensor:
                pieces.append(net(T.take(scaled, sel)))
            else:
                uniq, inv = np.unique(flat[sel], return_inverse=True)
                y = net(Tensor(uniq))
                pieces.append(y if uniq.size == sel.size and np.all(inv == np.arange(sel.size))
                              else T.take(y, inv))
            where.append(sel)
        values = pieces[0] if len(pieces) == 1 else T.concat(pieces)
        order = np.concatenate(where)
        if len(pieces) == 1 and np.array_equal(order, np.arange(n)):
            return T.reshape(values, shape)
        return T.scatter(values, order, shape)

    def eval_numpy(self, head: int, type_id: int, dt) -> np.ndarray:
        return self.net(head, type_id).apply_numpy(np.asarray(dt, dtype=np.float64) / self.time_scale)


def export_curves(bank: KernelBank, grid, path) -> int:
    """Write ``head,type,dt,phi`` rows; shared kernels carry type -1.  Returns the row count."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("kernel grid must be a non-empty, strictly increasing, non-negative 1-D array")
    type_ids = [SHARED_TYPE] if bank.shared else list(range(bank.num_types))
    rows = 0
    with T.no_grad(), open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "type", "dt", "phi"])
        for h in range(bank.n_heads):
            for c in type_ids:
                phi = bank.eval(h, np.full(grid.shape, max(c, 0)), grid).data
                for x, y in zip(grid, phi):
                    w.writerow([h, c, repr(float(x)), repr(float(y))])
                    rows += 1
    return rows
