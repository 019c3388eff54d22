"""Pair scorer: two LSTM encoders, stacked graph-fusion layers, score and offset heads.

A batch of B (query, proposal) pairs moves through the network as one
matrix with B blocks of 2T rows (query rows first inside each block).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import AdjacencySet
from .numeric import ParamStore, ShapeError, Tape, Var

VARIANTS = ("graph", "cnn")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 32
    hidden: int = 0  # 0 -> input_dim
    fusion_layers: int = 2
    num_graphs: int = 3
    head_widths: tuple[int, ...] = ()  # () -> (hidden // 2, hidden // 4)
    dropout: float = 0.2
    share_lstm: bool = True
    variant: str = "graph"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def hidden_size(self) -> int:
        return self.hidden if self.hidden > 0 else self.input_dim

    @property
    def head_sizes(self) -> tuple[int, ...]:
        if self.head_widths:
            return self.head_widths
        h = self.hidden_size
        return (max(1, h // 2), max(1, h // 4))


class Model:
    """Parameters (in a ParamStore) plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = ParamStore()
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(config.init_seed)
        d, h = config.input_dim, config.hidden_size

        def uniform(name, rows, cols, fan_in=None):
            bound = 1.0 / np.sqrt(fan_in or rows)
            self.params.add(name, rng.uniform(-bound, bound, size=(rows, cols)))

        for stream in ("lstm",) if config.share_lstm else ("lstm_q", "lstm_p"):
            uniform(f"{stream}.W_x", d, 4 * h, fan_in=h)
            uniform(f"{stream}.W_h", h, 4 * h)
            uniform(f"{stream}.b", 1, 4 * h, fan_in=h)

        K = config.num_graphs
        for l in range(config.fusion_layers):
            uniform(f"fusion.{l}.W_pre", h, h)
            for k in range(K):
                uniform(f"fusion.{l}.Wk.{k}", h, h)
            uniform(f"fusion.{l}.W_post", K * h, h)

        for head, out_dim in (("score", 1), ("regression", 2)):
            widths = (h,) + config.head_sizes + (out_dim,)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                uniform(f"{head}.{i}.W", a, b)
                uniform(f"{head}.{i}.b", 1, b, fan_in=a)
                if i < len(widths) - 2:
                    self.params.add(f"{head}.{i}.bn_scale", np.ones((1, b)))
                    self.params.add(f"{head}.{i}.bn_shift", np.zeros((1, b)))
                    self.buffers[f"{head}.{i}.bn_mean"] = np.zeros((1, b))
                    self.buffers[f"{head}.{i}.bn_var"] = np.ones((1, b))

    @property
    def num_stages(self) -> int:
        return len(self.config.head_sizes) + 1

    def lstm_prefix(self, stream: str) -> str:
        return "lstm" if self.config.share_lstm else f"lstm_{stream}"

    def zero_(self) -> "Model":
        """All parameters to zero (batch-norm scale included); running stats untouched."""
        for name in self.params.names():
            self.params.set(name, np.zeros_like(self.params[name]))
        return self

    def copy(self) -> "Model":
        out = Model.__new__(Model)
        out.config = self.config
        out.params = self.params.copy()
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = dict(self.params.values)
        out.update(self.buffers)
        return out


def is_regression_param(name: str) -> bool:
    return name.startswith("regression.")


# ------------------------------------------------------------------- forward


def _as_batch(seq: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    return seq[None] if seq.ndim == 2 else seq


def lstm_encode(tape: Tape, model: Model, seq, stream: str = "q", training: bool = False,
                rng: np.random.Generator | None = None) -> Var:
    """Encode a (B, T, d) batch (or a single T x d sequence) into B*T x h rows.

    Gate layout along the 4h columns: input, forget, output, candidate.
    Dropout, when training, is applied to the stacked hidden states.
    """
    seq = _as_batch(seq)
    B, T, d = seq.shape
    prefix = model.lstm_prefix(stream)
    W_x, W_h, b = (tape.param(f"{prefix}.{n}") for n in ("W_x", "W_h", "b"))
    h = model.config.hidden_size
    if d != W_x.shape[0]:
        raise ShapeError(f"lstm_encode: input width {d} != {W_x.shape[0]}")

    # time-major rows so that each step is a contiguous slice
    x = tape.const(seq.transpose(1, 0, 2).reshape(T * B, d))
    xw = tape.add(tape.matmul(x, W_x), b)
    hidden, cell, outputs = None, None, []
    for t in range(T):
        gates = tape.slice(xw, t * B, (t + 1) * B)
        if hidden is not None:
            gates = tape.add(gates, tape.matmul(hidden, W_h))
        ifo = tape.sigmoid(tape.slice(gates, 0, 3 * h, axis="cols"))
        cand = tape.tanh(tape.slice(gates, 3 * h, 4 * h, axis="cols"))
        i_g = tape.slice(ifo, 0, h, axis="cols")
        o_g = tape.slice(ifo, 2 * h, 3 * h, axis="cols")
        if cell is None:
            cell = tape.mul(i_g, cand)
        else:
            f_g = tape.slice(ifo, h, 2 * h, axis="cols")
            cell = tape.add(tape.mul(f_g, cell), tape.mul(i_g, cand))
        hidden = tape.mul(o_g, tape.tanh(cell))
        outputs.append(hidden)
    out = tape.stack_steps(outputs)
    rate = model.config.dropout
    if training and rate > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng in training mode")
        keep = (rng.random(out.shape) >= rate) / (1.0 - rate)
        out = tape.mul(out, tape.const(keep))
    return out


def build_h0(tape: Tape, Hq: Var, Hp: Var, groups: int = 1) -> Var:
    if Hq.shape != Hp.shape:
        raise ShapeError(f"build_h0: query {Hq.shape} and proposal {Hp.shape} differ")
    return tape.concat(Hq, Hp, axis="rows", groups=groups)


def fusion_layer(tape: Tape, model: Model, H: Var, adj: AdjacencySet | None, layer: int,
                 groups: int = 1) -> Var:
    """Project, run one graph convolution per adjacency with tanh, concatenate, fuse.

    ``adj=None`` drops the propagation step, leaving per-node projections
    (the convolution-only variant).
    """
    K = model.config.num_graphs
    if adj is not None:
        if len(adj) != K:
            raise ShapeError(f"fusion_layer: {len(adj)} graphs, model expects {K}")
        if 2 * adj.T * groups != H.shape[0]:
            raise ShapeError(f"fusion_layer: {H.shape[0]} rows do not match 2T={2 * adj.T} x {groups}")
    pre = f"fusion.{layer}"
    Ht = tape.matmul(H, tape.param(f"{pre}.W_pre"))
    branches = []
    for k in range(K):
        z = Ht if adj is None else tape.propagate(tape.const(adj.matrices[k]), Ht, groups)
        branches.append(tape.tanh(tape.matmul(z, tape.param(f"{pre}.Wk.{k}"))))
    cat = branches[0]
    for br in branches[1:]:
        cat = tape.concat(cat, br, axis="cols")
    return tape.matmul(cat, tape.param(f"{pre}.W_post"))


def fusion_forward(tape: Tape, model: Model, H0: Var, adj: AdjacencySet | None,
                   groups: int = 1, layers: int | None = None) -> Var:
    H = H0
    for l in range(model.config.fusion_layers if layers is None else layers):
        H = fusion_layer(tape, model, H, adj, l, groups)
    return H


def _head(tape: Tape, model: Model, name: str, x: Var, training: bool, squash: bool) -> Var:
    cfg = model.config
    n = model.num_stages
    if x.shape[1] != model.params[f"{name}.0.W"].shape[0]:
        raise ShapeError(f"{name} head: input width {x.shape[1]} != {model.params[f'{name}.0.W'].shape[0]}")
    for i in range(n):
        x = tape.add(tape.matmul(x, tape.param(f"{name}.{i}.W")), tape.param(f"{name}.{i}.b"))
        if i == n - 1:
            break
        gamma, beta = tape.param(f"{name}.{i}.bn_scale"), tape.param(f"{name}.{i}.bn_shift")
        mkey, vkey = f"{name}.{i}.bn_mean", f"{name}.{i}.bn_var"
        if training:
            x_val = x.value
            x = tape.batch_norm(x, gamma, beta, cfg.bn_eps)
            m = cfg.bn_momentum
            rows = x_val.shape[0]
            var = x_val.var(axis=0, keepdims=True, ddof=1 if rows > 1 else 0)
            model.buffers[mkey] = (1 - m) * model.buffers[mkey] + m * x_val.mean(axis=0, keepdims=True)
            model.buffers[vkey] = (1 - m) * model.buffers[vkey] + m * var
        else:
            x = tape.batch_norm(x, gamma, beta, cfg.bn_eps,
                                mean=model.buffers[mkey], var=model.buffers[vkey])
        x = tape.tanh(x)
    return tape.tanh(x) if squash else x


def score_head(tape: Tape, model: Model, h_global: Var, training: bool = False) -> Var:
    """Similarity in [-1, 1], one row per pair."""
    return _head(tape, model, "score", h_global, training, squash=True)


def regression_head(tape: Tape, model: Model, h_global: Var, training: bool = False) -> Var:
    """Unbounded (T_c, T_l) offsets, one row per pair."""
    return _head(tape, model, "regression", h_global, training, squash=False)


def forward_pair(tape: Tape, model: Model, q, p, adj: AdjacencySet | None,
                 training: bool = False, rng: np.random.Generator | None = None,
                 detach_regression: bool = False) -> tuple[Var, Var]:
    """Score and offsets for B pairs; returns (B x 1 scores, B x 2 offsets).

    With ``detach_regression`` the regression head reads a constant copy of
    the pooled feature, so its loss cannot reach the shared layers.
    """
    q, p = _as_batch(q), _as_batch(p)
    if q.shape != p.shape:
        raise ShapeError(f"forward_pair: query batch {q.shape} != proposal batch {p.shape}")
    B = q.shape[0]
    if adj is not None and adj.T != q.shape[1]:
        raise ShapeError(f"forward_pair: sequences have {q.shape[1]} steps, graphs expect T={adj.T}")
    Hq = lstm_encode(tape, model, q, "q", training, rng)
    Hp = lstm_encode(tape, model, p, "p", training, rng)
    H0 = build_h0(tape, Hq, Hp, groups=B)
    HL = fusion_forward(tape, model, H0, adj, groups=B)
    h_global = tape.mean_over_rows(HL, groups=B)
    s = score_head(tape, model, h_global, training)
    reg_in = tape.detach(h_global) if detach_regression else h_global
    offsets = regression_head(tape, model, reg_in, training)
    return s, offsets


def predict(model: Model, q, p, adj: AdjacencySet | None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode scores (B,) and offsets (B, 2) as plain arrays."""
    tape = Tape(model.params)
    s, off = forward_pair(tape, model, q, p, adj, training=False)
    return s.value[:, 0].copy(), off.value.copy()


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path) -> None:
    lines = []
    for name, value in model.state().items():
        r, c = value.shape
        lines.append(" ".join([name, str(r), str(c)] + [repr(float(v)) for v in value.ravel()]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(model: Model, path) -> Model:
    """Fill ``model`` from a checkpoint; names and shapes must match exactly."""
    expected = model.state()
    seen = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        name = parts[0]
        if name not in expected:
            raise CheckpointError(f"{path}: line {lineno}: unexpected parameter {name!r}")
        try:
            r, c = int(parts[1]), int(parts[2])
            vals = np.array([float(v) for v in parts[3:]])
        except (IndexError, ValueError):
            raise CheckpointError(f"{path}: line {lineno}: malformed entry for {name!r}") from None
        if (r, c) != expected[name].shape or vals.size != r * c:
            raise CheckpointError(f"{path}: parameter {name!r} has shape ({r}, {c}), "
                                  f"expected {expected[name].shape}")
        seen[name] = vals.reshape(r, c)
    for name in expected:
        if name not in seen:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
    for name, value in seen.items():
        if name in model.buffers:
            model.buffers[name] = value
        else:
            model.params.set(name, value)
    return model
