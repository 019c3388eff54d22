"""Candidate segments and temporal IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .dataset import FormatError, Segment

DEFAULT_WINDOW_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class Proposal:
    segment: Segment
    source_video: str = ""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def default_window_lengths(video_length: int, fractions=DEFAULT_WINDOW_FRACTIONS) -> list[int]:
    return sorted({max(1, _round_half_up(f * video_length)) for f in fractions})


def sliding_window_proposals(video_length: int, window_lengths, stride_fraction: float = 0.25,
                             source_video: str = "") -> list[Proposal]:
    window_lengths = list(window_lengths)
    if not window_lengths:
        raise ValueError("window_lengths must be non-empty")
    if any(w <= 0 for w in window_lengths):
        raise ValueError(f"window lengths must be positive: {window_lengths}")
    if not 0.0 < stride_fraction <= 1.0:
        raise ValueError(f"stride_fraction must lie in (0, 1], got {stride_fraction}")
    segs = set()
    for w in window_lengths:
        if w > video_length:
            continue
        step = max(1, _round_half_up(w * stride_fraction))
        for start in range(0, video_length - w + 1, step):
            segs.add((start, start + w))
    ordered = sorted(segs, key=lambda se: (se[0], se[1] - se[0]))
    return [Proposal(Segment(s, e), source_video) for s, e in ordered]


def tiou(a, b) -> float:
    """Temporal IoU of two half-open intervals; accepts Segments or (start, end) pairs."""
    a0, a1 = (a.start, a.end) if isinstance(a, Segment) else a
    b0, b1 = (b.start, b.end) if isinstance(b, Segment) else b
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    union = max(a1, b1) - min(a0, b0)
    return inter / union


def best_by_tiou(candidates: list[Proposal], gt: Segment) -> Proposal:
    if not candidates:
        raise ValueError("no candidate proposals")
    return min(candidates, key=lambda p: (-tiou(p.segment, gt), p.segment.start, p.segment.length))


def write_proposal_file(proposals, path) -> None:
    lines = [f"{p.source_video} {p.segment.start} {p.segment.end}" for p in proposals]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_proposal_file(path) -> dict[str, list[Proposal]]:
    out: dict[str, list[Proposal]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise FormatError(f"{path}: line {lineno}: expected 'video_id start end'")
        try:
            seg = Segment(int(parts[1]), int(parts[2]))
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        out.setdefault(parts[0], []).append(Proposal(seg, parts[0]))
    return out
