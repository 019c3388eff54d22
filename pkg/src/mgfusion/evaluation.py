"""Test-time retrieval, mAP at tIoU thresholds, and the training-free baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataset import Corpus, Segment, VideoFeatures, resample_or_pad
from .graphs import AdjacencySet
from .model import Model, predict
from .proposals import Proposal, default_window_lengths, sliding_window_proposals, tiou
from .training import encode_offsets

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

# (query frames, reference video, proposals) -> (scores (M,), offsets (M, 2))
Predictor = Callable[[np.ndarray, VideoFeatures, Sequence[Proposal]], tuple[np.ndarray, np.ndarray]]


class EvaluationError(ValueError):
    pass


@dataclass
class QueryResult:
    query_id: str
    reference_id: str
    selected_index: int
    s_pred: float
    e_pred: float
    tiou: float
    score: float
    hits: tuple[bool, ...] = ()


@dataclass
class EvalReport:
    thresholds: list[float]
    map_values: list[float]
    results: list[QueryResult]
    metadata: dict = field(default_factory=dict)

    def map_at(self, threshold: float) -> float:
        return self.map_values[self.thresholds.index(threshold)]


# ------------------------------------------------------------ selection / decode


def select_proposal(scores: Sequence[float]) -> int:
    """Index of the highest score; the lowest index wins ties."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no proposals to select from")
    return int(np.argmax(scores))


def decode_offsets(proposal: Segment, T_c: float, T_l: float,
                   video_length: float | None = None) -> tuple[float, float]:
    """Invert the offset encoding; clamp to [0, video_length] when a length is given."""
    if not (math.isfinite(T_c) and math.isfinite(T_l)):
        raise EvaluationError(f"non-finite offsets ({T_c}, {T_l})")
    length = proposal.end - proposal.start
    if length <= 0:
        raise ValueError(f"proposal {proposal} has zero length")
    len_pred = math.exp(-T_l) * length
    loc_pred = (proposal.start + proposal.end) / 2 - T_c * len_pred
    if not math.isfinite(len_pred):
        raise EvaluationError(f"decoded length overflows for T_l={T_l}")
    s, e = loc_pred - len_pred / 2, loc_pred + len_pred / 2
    if video_length is None:
        return s, e
    s, e = max(0.0, s), min(float(video_length), e)
    if e - s < 1.0:
        centre = min(max((s + e) / 2, 0.5), video_length - 0.5)
        s, e = centre - 0.5, centre + 0.5
    return s, e


def map_at_thresholds(tious: Sequence[float], thresholds: Sequence[float]) -> list[float]:
    """Fraction of queries whose tIoU strictly exceeds each threshold."""
    tious = np.asarray(tious, dtype=np.float64)
    if tious.size == 0:
        return [0.0 for _ in thresholds]
    return [float(np.mean(tious > th)) for th in thresholds]


# ----------------------------------------------------------------- predictors


class NetworkPredictor:
    """Scores every proposal with the trained pair network in eval mode."""

    def __init__(self, model: Model, adj: AdjacencySet | None, T: int):
        self.model, self.adj, self.T = model, adj, T

    def __call__(self, query, reference, proposals):
        q, _ = resample_or_pad(query, self.T)
        feats = np.stack([resample_or_pad(reference.frames[p.segment.start:p.segment.end], self.T)[0]
                          for p in proposals])
        qs = np.broadcast_to(q, feats.shape)
        return predict(self.model, qs, feats, self.adj)


def oracle_predictor(query, reference, proposals):
    """Perfect scorer: true tIoU as score, exact offsets to the ground truth."""
    gt = reference.annotations[0]
    scores = np.array([tiou(p.segment, gt) for p in proposals])
    offs = [encode_offsets(p.segment, gt) for p in proposals]
    return scores, np.array([[o.T_c_star, o.T_l_star] for o in offs])


# ------------------------------------------------------------------ protocol


def query_reference_pairs(corpus: Corpus, split: str = "test") -> list[tuple[VideoFeatures, Segment, VideoFeatures]]:
    """(query source, query segment, reference) triples; the reference is the next same-class video."""
    pairs = []
    for label, videos in sorted(corpus.by_class(split).items()):
        videos = sorted(videos, key=lambda v: v.id)
        if len(videos) < 2:
            log.warning("class %s has a single %s video; no query/reference pair", label, split)
            continue
        for i, src in enumerate(videos):
            ref = videos[(i + 1) % len(videos)]
            if not ref.annotations:
                continue
            for seg in src.annotations:
                pairs.append((src, seg, ref))
    return pairs


def reference_proposals(video: VideoFeatures, window_fractions, stride_fraction: float,
                        external: dict[str, list[Proposal]] | None = None) -> list[Proposal]:
    if external is not None and video.id in external:
        return external[video.id]
    return sliding_window_proposals(video.length, default_window_lengths(video.length, window_fractions),
                                    stride_fraction, video.id)


def _finish(results, thresholds, metadata) -> EvalReport:
    thresholds = [float(t) for t in thresholds]
    for r in results:
        r.hits = tuple(r.tiou > th for th in thresholds)
    values = map_at_thresholds([r.tiou for r in results], thresholds)
    return EvalReport(thresholds, values, results, dict(metadata or {}))


def evaluate(corpus: Corpus, predictor: Predictor, thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
             window_fractions=(0.25, 0.5, 0.75, 1.0), stride_fraction: float = 0.25,
             external_proposals=None, split: str = "test", metadata=None) -> EvalReport:
    pairs = query_reference_pairs(corpus, split)
    if not pairs:
        raise EvaluationError(f"no query/reference pairs in the {split} split")
    results = []
    for src, seg, ref in pairs:
        query = src.frames[seg.start:seg.end]
        props = reference_proposals(ref, window_fractions, stride_fraction, external_proposals)
        if not props:
            raise EvaluationError(f"no proposals for reference {ref.id}")
        scores, offsets = predictor(query, ref, props)
        m = select_proposal(scores)
        s, e = decode_offsets(props[m].segment, float(offsets[m, 0]), float(offsets[m, 1]), ref.length)
        results.append(QueryResult(f"{src.id}:{seg.start}-{seg.end}", ref.id, m, s, e,
                                   tiou((s, e), ref.annotations[0]), float(scores[m])))
    return _finish(results, thresholds, metadata)


# ----------------------------------------------------------------- baselines


def chance_baseline(proposals: Sequence[Proposal], rng: np.random.Generator) -> Segment:
    if not proposals:
        raise ValueError("no proposals to choose from")
    return proposals[int(rng.integers(len(proposals)))].segment


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms > 0, norms, 1.0)


def distance_table(Hq: np.ndarray, Hr: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance between every query row and reference row."""
    return ((Hq[:, None, :] - Hr[None, :, :]) ** 2).sum(axis=-1)


def warp_offsets(m: int, length: int) -> np.ndarray:
    """Column offsets round(i (length-1)/(m-1)) of a diagonal path, half rounded up."""
    if m == 1:
        return np.zeros(1, dtype=int)
    i = np.arange(m)
    return (2 * i * (length - 1) + (m - 1)) // (2 * (m - 1))


def frame_level_baseline(Hq: np.ndarray, Hr: np.ndarray, length_range: Iterable[int]) -> Segment:
    """Segment whose linearly warped diagonal through the distance table has the lowest mean.

    Rows of both inputs are scaled to unit length first. Ties go to the
    earliest start, then the shortest segment.
    """
    lengths = sorted({int(l) for l in length_range})
    if not lengths:
        raise ValueError("empty length_range")
    D = distance_table(_unit_rows(np.asarray(Hq, float)), _unit_rows(np.asarray(Hr, float)))
    m, L = D.shape
    costs, starts, lens = [], [], []
    for length in lengths:
        if length < 1 or length > L:
            continue
        cols = np.arange(L - length + 1)[:, None] + warp_offsets(m, length)[None, :]
        picked = D[np.arange(m)[None, :], cols]
        total = picked[:, 0].copy()
        for i in range(1, m):
            total = total + picked[:, i]
        costs.append(total / m)
        starts.append(np.arange(L - length + 1))
        lens.append(np.full(L - length + 1, length))
    if not costs:
        raise ValueError(f"no length in {lengths} fits a reference of {L} frames")
    costs, starts, lens = map(np.concatenate, (costs, starts, lens))
    best = np.lexsort((lens, starts, costs))[0]
    return Segment(int(starts[best]), int(starts[best] + lens[best]))


def default_length_range(m: int, L: int) -> range:
    return range(max(1, (m + 1) // 2), min(L, 2 * m) + 1)


def evaluate_baseline(corpus: Corpus, method: str, thresholds=DEFAULT_THRESHOLDS,
                      rng: np.random.Generator | None = None,
                      window_fractions=(0.25, 0.5, 0.75, 1.0), stride_fraction: float = 0.25,
                      external_proposals=None, split: str = "test", metadata=None) -> EvalReport:
    """Chance or frame-level retrieval over the same query/reference pairs as :func:`evaluate`."""
    if method not in ("chance", "frame"):
        raise ValueError(f"unknown baseline {method!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    pairs = query_reference_pairs(corpus, split)
    if not pairs:
        raise EvaluationError(f"no query/reference pairs in the {split} split")
    results = []
    for src, seg, ref in pairs:
        query = src.frames[seg.start:seg.end]
        if method == "chance":
            props = reference_proposals(ref, window_fractions, stride_fraction, external_proposals)
            idx = int(rng.integers(len(props)))
            pick = props[idx].segment
        else:
            idx = -1
            pick = frame_level_baseline(query, ref.frames, default_length_range(len(query), ref.length))
        results.append(QueryResult(f"{src.id}:{seg.start}-{seg.end}", ref.id, idx,
                                   float(pick.start), float(pick.end),
                                   tiou(pick, ref.annotations[0]), float("nan")))
    meta = dict(metadata or {}, method=method)
    return _finish(results, thresholds, meta)


# ----------------------------------------------------------------------- CSV


def write_report_csv(report: EvalReport, path) -> None:
    lines = ["threshold,map"] + [f"{t!r},{v!r}" for t, v in zip(report.thresholds, report.map_values)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_details_csv(report: EvalReport, path) -> None:
    lines = ["query_id,reference_id,selected_index,s_pred,e_pred,tiou,score"]
    for r in report.results:
        lines.append(f"{r.query_id},{r.reference_id},{r.selected_index},{r.s_pred!r},"
                     f"{r.e_pred!r},{r.tiou!r},{r.score!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report_csv(path) -> list[tuple[float, float]]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != "threshold,map":
        raise ValueError(f"{path}: not a report CSV")
    return [tuple(float(x) for x in row.split(",")) for row in rows[1:] if row]
