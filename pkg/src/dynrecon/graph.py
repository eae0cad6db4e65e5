"""Sliding-window video graph.

A window starting at frame ``t`` covers frames ``[t, t + w]``. Inside a
window, strided sampling keeps the pairs whose temporal gap ``k`` lies in
``{1, 1 + stride, 1 + 2*stride, ...}`` (so adjacent frames are always
paired and ``stride=1`` keeps every pair). Windows slide one frame at a
time, which makes the union over all windows the set of frame pairs
``(a, b)`` with ``|a - b|`` among those gaps.

Edge count. With ``F`` frames and the gap set ``K``::

    symmetric:  2 * sum(F - k for k in K)
    one-way:        sum(F - k for k in K)

For ``F=60, w=9, stride=2`` the gaps are ``{1, 3, 5, 7, 9}`` and the
symmetric graph has ``2 * 275 = 550`` directed edges.

Edges are ordered by gap first and then by the earlier frame, with the
forward edge ``(a, b)`` immediately followed by its reverse ``(b, a)``.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class VideoGraph:
    num_frames: int
    window: int
    stride: int
    edges: tuple[tuple[int, int], ...]
    symmetric: bool = True

    def __len__(self) -> int:
        return len(self.edges)

    @property
    def gaps(self) -> tuple[int, ...]:
        return pair_gaps(self.window, self.stride)

    def outgoing(self, frame: int) -> list[tuple[int, int]]:
        return [e for e in self.edges if e[0] == frame]

    def has_edge(self, a: int, b: int) -> bool:
        return (a, b) in self._edge_set

    @property
    def _edge_set(self) -> frozenset:
        cached = self.__dict__.get("_edges_cached")
        if cached is None:
            cached = frozenset(self.edges)
            object.__setattr__(self, "_edges_cached", cached)
        return cached

    def is_connected(self) -> bool:
        parent = list(range(self.num_frames))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in self.edges:
            parent[find(a)] = find(b)
        return len({find(i) for i in range(self.num_frames)}) == 1


def pair_gaps(window: int, stride: int) -> tuple[int, ...]:
    return tuple(range(1, window + 1, stride))


def expected_edge_count(num_frames: int, window: int, stride: int, symmetric: bool = True) -> int:
    n = sum(num_frames - k for k in pair_gaps(window, stride))
    return 2 * n if symmetric else n


def build_window_graph(num_frames: int, w: int, stride: int = 1, symmetric: bool = True) -> VideoGraph:
    """Build the strided sliding-window graph over ``num_frames`` frames.

    Raises:
        ValueError: if ``num_frames < 2``, ``w`` is outside ``[1, num_frames)``
            or ``stride < 1``.
    """
    if num_frames < 2:
        raise ValueError(f"need at least 2 frames, got {num_frames}")
    if not 1 <= w < num_frames:
        raise ValueError(f"window must satisfy 1 <= w < num_frames, got w={w}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    edges = []
    for k in pair_gaps(w, stride):
        for a in range(num_frames - k):
            edges.append((a, a + k))
            if symmetric:
                edges.append((a + k, a))
    return VideoGraph(num_frames, w, stride, tuple(edges), symmetric)
