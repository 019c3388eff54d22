"""Dense float64 matrix ops recorded on a tape, with reverse-mode gradients.

Every op takes and returns 2-D arrays. Ops that act per sample accept a
``groups`` argument: the row axis is split into ``groups`` equal blocks and
the op is applied to each block independently, which is how a batch of
(query, proposal) pairs travels through the network as one matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    pass


def as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class ParamStore:
    """Named trainable matrices and their gradient accumulators."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = as_matrix(value)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def names(self) -> list[str]:
        return list(self.values)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def set(self, name: str, value: np.ndarray) -> None:
        value = as_matrix(value)
        if value.shape != self.values[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self.values[name].shape}")
        self.values[name] = value

    def zero_grad(self) -> None:
        for name, value in self.values.items():
            self.grads[name] = np.zeros_like(value)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.values.items():
            out.values[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def num_scalars(self) -> int:
        return sum(v.size for v in self.values.values())


@dataclass(eq=False)
class Var:
    value: np.ndarray
    id: int
    param: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


@dataclass
class Entry:
    tag: str
    inputs: tuple[int, ...]
    output: int
    args: dict = field(default_factory=dict)
    cache: object = None


# Each op is a pair (forward, backward).
#   forward(inputs, **args) -> (value, cache)
#   backward(grad, inputs, value, cache, **args) -> tuple of input grads (None = no grad)


def _reduce_to(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(tag: str, a: np.ndarray, b: np.ndarray) -> None:
    for da, db in zip(a.shape, b.shape):
        if db not in (1, da):
            raise ShapeError(f"{tag}: cannot broadcast {b.shape} onto {a.shape}")


def _matmul_fwd(inputs):
    a, b = inputs
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b, None


def _matmul_bwd(g, inputs, value, cache):
    a, b = inputs
    return g @ b.T, a.T @ g


def _add_fwd(inputs):
    a, b = inputs
    _check_broadcast("add", a, b)
    return a + b, None


def _add_bwd(g, inputs, value, cache):
    return g, _reduce_to(g, inputs[1].shape)


def _sub_fwd(inputs):
    a, b = inputs
    _check_broadcast("sub", a, b)
    return a - b, None


def _sub_bwd(g, inputs, value, cache):
    return g, -_reduce_to(g, inputs[1].shape)


def _mul_fwd(inputs):
    a, b = inputs
    _check_broadcast("mul", a, b)
    return a * b, None


def _mul_bwd(g, inputs, value, cache):
    a, b = inputs
    return g * b, _reduce_to(g * a, b.shape)


def _scale_fwd(inputs, c):
    return inputs[0] * c, None


def _scale_bwd(g, inputs, value, cache, c):
    return (g * c,)


def _tanh_fwd(inputs):
    return np.tanh(inputs[0]), None


def _tanh_bwd(g, inputs, value, cache):
    return (g * (1.0 - value * value),)


def _sigmoid_fwd(inputs):
    return 0.5 * (np.tanh(0.5 * inputs[0]) + 1.0), None


def _sigmoid_bwd(g, inputs, value, cache):
    return (g * value * (1.0 - value),)


def _relu_fwd(inputs):
    return np.maximum(inputs[0], 0.0), None


def _relu_bwd(g, inputs, value, cache):
    # subgradient 0 at the kink
    return (g * (inputs[0] > 0.0),)


def _abs_fwd(inputs):
    return np.abs(inputs[0]), None


def _abs_bwd(g, inputs, value, cache):
    return (g * np.sign(inputs[0]),)


def _blocks(a: np.ndarray, groups: int, tag: str) -> np.ndarray:
    if groups < 1 or a.shape[0] % groups:
        raise ShapeError(f"{tag}: {a.shape[0]} rows do not split into {groups} groups")
    return a.reshape(groups, a.shape[0] // groups, a.shape[1])


def _concat_fwd(inputs, axis, groups):
    a, b = inputs
    if axis == "rows":
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"concat rows: column counts differ, {a.shape} vs {b.shape}")
        a3, b3 = _blocks(a, groups, "concat"), _blocks(b, groups, "concat")
        out = np.concatenate([a3, b3], axis=1)
        return out.reshape(-1, a.shape[1]), None
    if axis == "cols":
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat cols: row counts differ, {a.shape} vs {b.shape}")
        return np.concatenate([a, b], axis=1), None
    raise ValueError(f"unknown concat axis {axis!r}")


def _concat_bwd(g, inputs, value, cache, axis, groups):
    a, b = inputs
    if axis == "cols":
        return g[:, : a.shape[1]], g[:, a.shape[1]:]
    g3 = g.reshape(groups, -1, g.shape[1])
    ra = a.shape[0] // groups
    return g3[:, :ra].reshape(a.shape), g3[:, ra:].reshape(b.shape)


def _slice_fwd(inputs, axis, start, stop):
    a = inputs[0]
    return (a[start:stop] if axis == "rows" else a[:, start:stop]).copy(), None


def _slice_bwd(g, inputs, value, cache, axis, start, stop):
    out = np.zeros_like(inputs[0])
    if axis == "rows":
        out[start:stop] = g
    else:
        out[:, start:stop] = g
    return (out,)


def _mean_rows_fwd(inputs, groups):
    a = inputs[0]
    if a.shape[0] == 0:
        raise ShapeError("mean_over_rows: empty matrix")
    return _blocks(a, groups, "mean_over_rows").mean(axis=1), None


def _mean_rows_bwd(g, inputs, value, cache, groups):
    a = inputs[0]
    n = a.shape[0] // groups
    out = np.repeat(g[:, None, :] / n, n, axis=1)
    return (out.reshape(a.shape),)


def _propagate_fwd(inputs, groups):
    adj, h = inputs
    n = adj.shape[0]
    if adj.shape[1] != n or h.shape[0] != n * groups:
        raise ShapeError(f"propagate: adjacency {adj.shape} vs features {h.shape} in {groups} groups")
    out = np.matmul(adj, h.reshape(groups, n, h.shape[1]))
    return out.reshape(h.shape), None


def _propagate_bwd(g, inputs, value, cache, groups):
    adj, h = inputs
    n = adj.shape[0]
    gh = np.matmul(adj.T, g.reshape(groups, n, g.shape[1])).reshape(h.shape)
    return None, gh


def _stack_steps_fwd(inputs):
    # rows of step t, sample b land at b * T + t
    steps = np.stack(inputs, axis=1)
    return steps.reshape(-1, steps.shape[2]), None


def _stack_steps_bwd(g, inputs, value, cache):
    n_steps = len(inputs)
    g3 = g.reshape(-1, n_steps, g.shape[1])
    return tuple(g3[:, t].copy() for t in range(n_steps))


def _sum_fwd(inputs):
    return np.array([[inputs[0].sum()]]), None


def _sum_bwd(g, inputs, value, cache):
    return (np.full_like(inputs[0], g[0, 0]),)


def _sumsq_fwd(inputs):
    a = inputs[0]
    return np.array([[np.sum(a * a)]]), None


def _sumsq_bwd(g, inputs, value, cache):
    return (2.0 * g[0, 0] * inputs[0],)


def _batch_norm_fwd(inputs, eps, mean=None, var=None):
    x, gamma, beta = inputs
    if mean is None:
        mean = x.mean(axis=0, keepdims=True)
        var = x.var(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def _batch_norm_bwd(g, inputs, value, cache, eps, mean=None, var=None):
    x, gamma, beta = inputs
    xhat, inv_std = cache
    dgamma = np.sum(g * xhat, axis=0, keepdims=True)
    dbeta = np.sum(g, axis=0, keepdims=True)
    gx = g * gamma
    if mean is not None:
        return gx * inv_std, dgamma, dbeta
    n = x.shape[0]
    dx = inv_std / n * (n * gx - gx.sum(axis=0, keepdims=True)
                        - xhat * np.sum(gx * xhat, axis=0, keepdims=True))
    return dx, dgamma, dbeta


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "abs": (_abs_fwd, _abs_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "mean_rows": (_mean_rows_fwd, _mean_rows_bwd),
    "propagate": (_propagate_fwd, _propagate_bwd),
    "stack_steps": (_stack_steps_fwd, _stack_steps_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "sumsq": (_sumsq_fwd, _sumsq_bwd),
    "batch_norm": (_batch_norm_fwd, _batch_norm_bwd),
}


class Tape:
    """Records one forward pass; ``backward`` walks it in reverse.

    Leaves are either constants or parameters bound to a :class:`ParamStore`.
    The tape keeps references to leaf values, so optimizers must rebind
    parameter arrays rather than modify them in place while a tape is alive.
    """

    def __init__(self, store: ParamStore | None = None):
        self.store = store
        self.entries: list[Entry] = []
        self.values: list[np.ndarray] = []
        self.leaves: dict[int, str | None] = {}

    def _new(self, value: np.ndarray, param: str | None = None) -> Var:
        var = Var(value, len(self.values), param)
        self.values.append(value)
        return var

    def const(self, value) -> Var:
        var = self._new(as_matrix(value))
        self.leaves[var.id] = None
        return var

    def param(self, name: str) -> Var:
        var = self._new(self.store.values[name], name)
        self.leaves[var.id] = name
        return var

    def detach(self, var: Var) -> Var:
        return self.const(var.value)

    def apply(self, tag: str, *inputs: Var, **args) -> Var:
        fwd, _ = OPS[tag]
        value, cache = fwd([v.value for v in inputs], **args)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{tag}: non-finite output")
        out = self._new(value)
        self.entries.append(Entry(tag, tuple(v.id for v in inputs), out.id, args, cache))
        return out

    # named wrappers for readability at call sites

    def matmul(self, a: Var, b: Var) -> Var:
        return self.apply("matmul", a, b)

    def add(self, a: Var, b: Var) -> Var:
        return self.apply("add", a, b)

    def sub(self, a: Var, b: Var) -> Var:
        return self.apply("sub", a, b)

    def mul(self, a: Var, b: Var) -> Var:
        return self.apply("mul", a, b)

    def scale(self, a: Var, c: float) -> Var:
        return self.apply("scale", a, c=float(c))

    def tanh(self, a: Var) -> Var:
        return self.apply("tanh", a)

    def sigmoid(self, a: Var) -> Var:
        return self.apply("sigmoid", a)

    def relu(self, a: Var) -> Var:
        return self.apply("relu", a)

    def abs(self, a: Var) -> Var:
        return self.apply("abs", a)

    def concat(self, a: Var, b: Var, axis: str = "rows", groups: int = 1) -> Var:
        return self.apply("concat", a, b, axis=axis, groups=groups)

    def slice(self, a: Var, start: int, stop: int, axis: str = "rows") -> Var:
        return self.apply("slice", a, axis=axis, start=start, stop=stop)

    def mean_over_rows(self, a: Var, groups: int = 1) -> Var:
        return self.apply("mean_rows", a, groups=groups)

    def propagate(self, adj: Var, h: Var, groups: int = 1) -> Var:
        return self.apply("propagate", adj, h, groups=groups)

    def stack_steps(self, steps: list[Var]) -> Var:
        return self.apply("stack_steps", *steps)

    def sum(self, a: Var) -> Var:
        return self.apply("sum", a)

    def sumsq(self, a: Var) -> Var:
        return self.apply("sumsq", a)

    def batch_norm(self, x: Var, gamma: Var, beta: Var, eps: float = 1e-5,
                   mean: np.ndarray | None = None, var: np.ndarray | None = None) -> Var:
        return self.apply("batch_norm", x, gamma, beta, eps=eps, mean=mean, var=var)

    def replay(self) -> np.ndarray:
        """Recompute every recorded op from the leaf values; returns the last output."""
        values = list(self.values)
        for entry in self.entries:
            fwd, _ = OPS[entry.tag]
            values[entry.output], _ = fwd([values[i] for i in entry.inputs], **entry.args)
        return values[self.entries[-1].output] if self.entries else None

    def backward(self, out: Var, seed=None, wrt: Iterable[Var] = ()) -> dict[int, np.ndarray]:
        """Accumulate d(seed . out)/d(param) into the store's gradient slots.

        Returns gradients for the vars listed in ``wrt`` keyed by var id.
        """
        seed = np.ones_like(out.value) if seed is None else as_matrix(seed)
        if seed.shape != out.value.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {out.value.shape}")
        grads: dict[int, np.ndarray] = {out.id: seed}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            try:
                _, bwd = OPS[entry.tag]
            except KeyError:
                raise RuntimeError(f"no backward rule for op {entry.tag!r}") from None
            in_values = [self.values[i] for i in entry.inputs]
            in_grads = bwd(g, in_values, self.values[entry.output], entry.cache, **entry.args)
            for idx, gi in zip(entry.inputs, in_grads):
                if gi is None:
                    continue
                grads[idx] = grads[idx] + gi if idx in grads else gi
        requested = {v.id for v in wrt}
        out_grads = {}
        for idx, g in grads.items():
            name = self.leaves.get(idx)
            if name is not None and self.store is not None:
                self.store.grads[name] = self.store.grads[name] + g
            if idx in requested:
                out_grads[idx] = g
        for idx in requested:
            out_grads.setdefault(idx, np.zeros_like(self.values[idx]))
        return out_grads


def finite_diff_check(loss_fn: Callable[[], tuple[Tape, Var]], params: ParamStore,
                      eps: float = 1e-5, samples: int = 50,
                      rng: np.random.Generator | None = None,
                      names: list[str] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the forward pass from the current values in
    ``params`` and return ``(tape, scalar_loss)``. Scalars are sampled
    uniformly over all entries of the parameters listed in ``names``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = params.names() if names is None else names
    params.zero_grad()
    tape, loss = loss_fn()
    tape.backward(loss)
    analytic = {n: params.grads[n].copy() for n in names}

    sizes = np.array([params.values[n].size for n in names])
    picks = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, pos = names[k], int(flat - offsets[k])
        base = params.values[name]
        idx = np.unravel_index(pos, base.shape)
        vals = []
        for delta in (eps, -eps):
            bumped = base.copy()
            bumped[idx] += delta
            params.values[name] = bumped
            vals.append(float(loss_fn()[1].value[0, 0]))
        params.values[name] = base
        numeric = (vals[0] - vals[1]) / (2 * eps)
        exact = float(analytic[name][idx])
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
