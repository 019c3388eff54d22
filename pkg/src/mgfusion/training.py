"""Losses, offset targets, Adam, and the triplet training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import Corpus, Segment, VideoFeatures, resample_or_pad, sample_triplet
from .graphs import build_adjacency_set
from .model import Model, ModelConfig, forward_pair, is_regression_param, save_checkpoint
from .numeric import ParamStore, Tape, Var
from .proposals import best_by_tiou, default_window_lengths, sliding_window_proposals

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 16
    ks: tuple[int, ...] = (1, 2, 3)
    L: int = 2
    gamma: float = 0.5
    lam: float = 5e-3
    mu: float = 1.0
    batch_size: int = 32
    epochs: int = 200
    lr_triplet: float = 1e-4
    lr_regression: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    joint_regression: bool = False
    checkpoint_every: int = 0
    window_fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    stride_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma: must be > 0")
        if self.lam < 0:
            raise ValueError("lam: must be >= 0")
        if self.mu < 0:
            raise ValueError("mu: must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.T < 1:
            raise ValueError("T: must be >= 1")
        if not self.ks or min(self.ks) < 1:
            raise ValueError("ks: must be a non-empty list of positive strides")


@dataclass
class OffsetTarget:
    T_c_star: float
    T_l_star: float


def encode_offsets(proposal: Segment, gt: Segment) -> OffsetTarget:
    """Centre shift relative to the true length and log length ratio."""
    len_p, len_g = proposal.end - proposal.start, gt.end - gt.start
    if len_g <= 0:
        raise ValueError(f"ground truth {gt} has zero length")
    if len_p <= 0:
        raise ValueError(f"proposal {proposal} has zero length")
    loc_p, loc_g = (proposal.start + proposal.end) / 2, (gt.start + gt.end) / 2
    return OffsetTarget((loc_p - loc_g) / len_g, math.log(len_p / len_g))


# -------------------------------------------------------------------- losses


def regularization(tape: Tape, params: ParamStore) -> Var:
    total = None
    for name in params.names():
        sq = tape.sumsq(tape.param(name))
        total = sq if total is None else tape.add(total, sq)
    return total


def triplet_loss_var(tape: Tape, s_pos: Var, s_neg: Var, params: ParamStore,
                     gamma: float, lam: float) -> Var:
    """sum_i max(0, gamma - s_pos_i + s_neg_i) + lam * ||theta||^2 on the tape."""
    margin = tape.add(tape.sub(s_neg, s_pos), tape.const(gamma))
    loss = tape.sum(tape.relu(margin))
    if lam > 0:
        loss = tape.add(loss, tape.scale(regularization(tape, params), lam))
    return loss


def triplet_loss(s_pos, s_neg, params: ParamStore | None, gamma: float, lam: float,
                 batch: int | None = None) -> float:
    s_pos = np.atleast_1d(np.asarray(s_pos, dtype=np.float64))
    s_neg = np.atleast_1d(np.asarray(s_neg, dtype=np.float64))
    if batch is not None and batch != s_pos.size:
        raise ValueError(f"batch={batch} but {s_pos.size} score pairs given")
    hinge = np.maximum(0.0, gamma - s_pos + s_neg).sum()
    reg = sum(float(np.sum(v * v)) for v in params.values.values()) if params and lam else 0.0
    return float(hinge + lam * reg)


def regression_loss_var(tape: Tape, preds: Var, targets: np.ndarray) -> Var:
    if preds.shape[0] == 0:
        raise ValueError("regression loss over an empty batch")
    diff = tape.abs(tape.sub(preds, tape.const(targets)))
    return tape.scale(tape.sum(diff), 1.0 / preds.shape[0])


def regression_loss(preds, targets) -> float:
    preds = [tuple(p) for p in preds]
    targets = [(t.T_c_star, t.T_l_star) if isinstance(t, OffsetTarget) else tuple(t) for t in targets]
    if not preds or len(preds) != len(targets):
        raise ValueError("regression_loss needs equal-length non-empty lists")
    return sum(abs(p[0] - t[0]) + abs(p[1] - t[1]) for p, t in zip(preds, targets)) / len(preds)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamStore,
              name_filter: Callable[[str], bool] = lambda name: True) -> None:
    """One bias-corrected Adam update on the filtered parameters.

    Parameter arrays are rebound, never written in place, so a live tape
    keeps seeing the values it recorded.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params.names():
        if not name_filter(name):
            continue
        g = params.grads[name]
        value = params.values[name]
        if g.shape != value.shape:
            raise RuntimeError(f"{name}: gradient shape {g.shape} != value shape {value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        if state.m[name].shape != value.shape:
            raise RuntimeError(f"{name}: optimizer state shape drifted")
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params.values[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------- train loop


@dataclass
class TrainResult:
    model: Model
    history: list[tuple[int, float, float]]


class ProposalCache:
    """Best-tIoU training proposal per video, resampled to T."""

    def __init__(self, T: int, window_fractions, stride_fraction: float):
        self.T = T
        self.window_fractions = window_fractions
        self.stride_fraction = stride_fraction
        self._cache: dict[str, tuple[np.ndarray, Segment]] = {}

    def get(self, video: VideoFeatures) -> tuple[np.ndarray, Segment]:
        if video.id not in self._cache:
            cands = sliding_window_proposals(
                video.length, default_window_lengths(video.length, self.window_fractions),
                self.stride_fraction, video.id)
            best = best_by_tiou(cands, video.annotations[0]).segment
            feats, _ = resample_or_pad(video.frames[best.start:best.end], self.T)
            self._cache[video.id] = (feats, best)
        return self._cache[video.id]


def build_model(config: TrainConfig, input_dim: int, model_config: ModelConfig | None = None) -> Model:
    mc = replace(model_config or ModelConfig(), input_dim=input_dim, fusion_layers=config.L,
                 num_graphs=len(config.ks), init_seed=config.seed)
    return Model(mc)


def train_step(model: Model, batch, adj, config: TrainConfig, tri_opt: AdamState,
               reg_opt: AdamState, rng: np.random.Generator) -> tuple[float, float]:
    """One batch: triplet update on all parameters, regression update on the head."""
    q, pos, neg, targets = batch
    B = q.shape[0]
    params = model.params
    tape = Tape(params)
    s, off = forward_pair(tape, model, np.concatenate([q, q]), np.concatenate([pos, neg]),
                          adj, training=True, rng=rng,
                          detach_regression=not config.joint_regression)
    s_pos, s_neg = tape.slice(s, 0, B), tape.slice(s, B, 2 * B)
    l_tri = triplet_loss_var(tape, s_pos, s_neg, params, config.gamma, config.lam)
    l_reg = regression_loss_var(tape, tape.slice(off, 0, B), targets)
    tri_val, reg_val = float(l_tri.value[0, 0]), float(l_reg.value[0, 0])
    if not (math.isfinite(tri_val) and math.isfinite(reg_val)):
        raise FloatingPointError("non-finite loss")

    params.zero_grad()
    tape.backward(l_tri)
    if config.joint_regression:
        tape.backward(l_reg, seed=[[config.mu]])
        adam_step(tri_opt, params)
        return tri_val, reg_val
    adam_step(tri_opt, params)
    params.zero_grad()
    tape.backward(l_reg, seed=[[config.mu]])
    adam_step(reg_opt, params, is_regression_param)
    return tri_val, reg_val


def make_batch(corpus: Corpus, rng: np.random.Generator, config: TrainConfig,
               cache: ProposalCache):
    qs, ps, ns, targets = [], [], [], []
    for _ in range(config.batch_size):
        trip = sample_triplet(corpus, rng, config.T)
        p_feats, p_seg = cache.get(trip.p_video)
        n_feats, _ = cache.get(trip.n_video)
        t = encode_offsets(p_seg, trip.p_video.annotations[0])
        qs.append(trip.q)
        ps.append(p_feats)
        ns.append(n_feats)
        targets.append((t.T_c_star, t.T_l_star))
    return np.stack(qs), np.stack(ps), np.stack(ns), np.array(targets)


def train(config: TrainConfig, corpus: Corpus, model_config: ModelConfig | None = None,
          out_dir=None, model: Model | None = None) -> TrainResult:
    """Epoch loop. History rows are (epoch, mean triplet loss, mean regression loss)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = build_model(config, corpus.dim, model_config)
    adj = build_adjacency_set(config.T, config.ks) if model.config.variant == "graph" else None
    tri_opt = AdamState(config.lr_triplet, config.beta1, config.beta2, config.adam_eps)
    reg_opt = AdamState(config.lr_regression, config.beta1, config.beta2, config.adam_eps)
    cache = ProposalCache(config.T, config.window_fractions, config.stride_fraction)
    n_batches = max(1, len(corpus.videos_in("train")) // config.batch_size)

    history = []
    for epoch in range(1, config.epochs + 1):
        tri_sum = reg_sum = 0.0
        for _ in range(n_batches):
            batch = make_batch(corpus, rng, config, cache)
            try:
                tri, reg = train_step(model, batch, adj, config, tri_opt, reg_opt, rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            tri_sum += tri
            reg_sum += reg
        history.append((epoch, tri_sum / n_batches, reg_sum / n_batches))
        log.debug("epoch %d triplet %.5f regression %.5f", *history[-1])
        if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, Path(out_dir) / f"checkpoint_epoch{epoch:05d}.txt")
    return TrainResult(model, history)


def write_history(history, path) -> None:
    lines = ["epoch,mean_triplet_loss,mean_regression_loss"]
    lines += [f"{e},{t!r},{r!r}" for e, t, r in history]
    Path(path).write_text("\n".join(lines) + "\n")
