"""Binary adjacency graphs over the 2T stacked query/proposal timesteps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check(T: int, k: int) -> None:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if k < 1:
        raise ValueError(f"stride k must be >= 1, got {k}")


def build_intra_block(T: int, k: int) -> np.ndarray:
    """Band of half-width ``k``: node i links to i-k..i+k inside one video."""
    _check(T, k)
    idx = np.arange(T)
    return (np.abs(idx[:, None] - idx[None, :]) <= k).astype(np.float64)


def build_inter_block(T: int, k: int) -> np.ndarray:
    """Query node i links to proposal nodes i, i +- k, i +- 2k, ... (j = i mod k)."""
    _check(T, k)
    idx = np.arange(T)
    return ((idx[:, None] - idx[None, :]) % k == 0).astype(np.float64)


def assemble_adjacency(T: int, k: int) -> np.ndarray:
    intra = build_intra_block(T, k)
    inter = build_inter_block(T, k)
    return np.block([[intra, inter], [inter.T, intra]])


@dataclass(frozen=True)
class AdjacencySet:
    T: int
    ks: tuple[int, ...]
    matrices: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.matrices)


def build_adjacency_set(T: int, ks) -> AdjacencySet:
    ks = tuple(int(k) for k in ks)
    if not ks:
        raise ValueError("ks must be non-empty")
    mats = []
    for k in ks:
        m = assemble_adjacency(T, k)
        m.setflags(write=False)
        mats.append(m)
    return AdjacencySet(T, ks, tuple(mats))


def format_adjacency(matrix: np.ndarray) -> str:
    """Plain-text 0/1 grid, one row per line."""
    return "\n".join(" ".join("1" if v else "0" for v in row) for row in matrix) + "\n"
