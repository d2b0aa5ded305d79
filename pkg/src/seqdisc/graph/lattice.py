"""Raw state-level lattices: acyclic, frame-indexed, never determinized."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import CycleError, DataError, FormatError, GraphError
from .fst import INF, _frozen, fmt_float


@dataclass(frozen=True, eq=False)
class Lattice:
    """Arcs carry a transition-id (0 = epsilon), a word-id and two costs.

    ``graph_wt`` is the -log graph score; ``ac_wt`` is the unscaled
    -log acoustic likelihood, so a path costs ``graph + scale * acoustic``.
    """

    state_frames: np.ndarray
    start: int
    num_frames: int
    finals: Mapping[int, float]
    src: np.ndarray
    dst: np.ndarray
    tid: np.ndarray
    word: np.ndarray
    graph_wt: np.ndarray
    ac_wt: np.ndarray

    def __post_init__(self):
        for name, dtype in (("state_frames", np.int64), ("src", np.int64), ("dst", np.int64),
                            ("tid", np.int64), ("word", np.int64), ("graph_wt", np.float64),
                            ("ac_wt", np.float64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        object.__setattr__(self, "finals", dict(sorted(self.finals.items())))
        n = len(self.state_frames)
        if not 0 <= self.start < n:
            raise GraphError("lattice start state out of range")
        if len(self.src) and (self.src.min() < 0 or self.src.max() >= n
                              or self.dst.min() < 0 or self.dst.max() >= n):
            raise GraphError("lattice arc endpoint out of range")
        if len({len(self.src), len(self.dst), len(self.tid), len(self.word),
                len(self.graph_wt), len(self.ac_wt)}) != 1:
            raise GraphError("lattice arc arrays differ in length")

    @property
    def num_states(self) -> int:
        return len(self.state_frames)

    @property
    def num_arcs(self) -> int:
        return len(self.src)

    def final_array(self) -> np.ndarray:
        out = np.full(self.num_states, INF)
        for s, w in self.finals.items():
            out[s] = w
        return out

    def validate(self) -> None:
        """Check frame bookkeeping: emitting arcs advance one frame, epsilons none."""
        f = self.state_frames
        if f[self.start] != 0:
            raise GraphError("lattice start must be at frame 0")
        step = f[self.dst] - f[self.src]
        want = (self.tid != 0).astype(np.int64)
        bad = np.flatnonzero(step != want)
        if len(bad):
            a = int(bad[0])
            raise GraphError(f"arc {a} ({int(self.src[a])}->{int(self.dst[a])}) "
                             f"breaks frame bookkeeping")
        for s in self.finals:
            if f[s] != self.num_frames:
                raise GraphError(f"final state {s} not at frame {self.num_frames}")

    @cached_property
    def schedule(self) -> list[np.ndarray]:
        """State levels for vectorized passes, in topological order.

        Level k holds states whose every predecessor lies in a lower level.
        Built from frames plus epsilon depth, so it requires ``validate``.
        """
        self.validate()
        n = self.num_states
        eps = np.flatnonzero(self.tid == 0)
        depth = np.zeros(n, dtype=np.int64)
        for _ in range(n + 1):
            new = depth.copy()
            if len(eps):
                np.maximum.at(new, self.dst[eps], depth[self.src[eps]] + 1)
            if np.array_equal(new, depth):
                break
            depth = new
        else:
            raise CycleError("epsilon cycle in lattice")
        key = self.state_frames * (int(depth.max()) + 1) + depth
        order = np.lexsort((np.arange(n), key))
        bounds = np.flatnonzero(np.diff(key[order])) + 1
        return np.split(order, bounds)

    @cached_property
    def state_level(self) -> np.ndarray:
        lvl = np.empty(self.num_states, dtype=np.int64)
        for k, states in enumerate(self.schedule):
            lvl[states] = k
        return lvl

    @cached_property
    def arcs_by_dst_level(self) -> list[np.ndarray]:
        """Per level, the arcs entering it, sorted by destination state."""
        return _group(self.state_level[self.dst], self.dst, len(self.schedule))

    @cached_property
    def arcs_by_src_level(self) -> list[np.ndarray]:
        """Per level, the arcs leaving it, sorted by source state."""
        return _group(self.state_level[self.src], self.src, len(self.schedule))

    @cached_property
    def dst_segments(self) -> list["Segments"]:
        return [Segments.of(self.dst[a]) for a in self.arcs_by_dst_level]

    @cached_property
    def src_segments(self) -> list["Segments"]:
        return [Segments.of(self.src[a]) for a in self.arcs_by_src_level]

    def costs(self, acoustic_scale: float) -> np.ndarray:
        return self.graph_wt + acoustic_scale * self.ac_wt

    def to_text(self) -> str:
        lines = [f"LAT {self.num_states} {self.start} {self.num_frames}"]
        for a in range(self.num_arcs):
            s = int(self.src[a])
            lines.append(f"{s} {int(self.dst[a])} {int(self.tid[a])} {int(self.word[a])} "
                         f"{fmt_float(self.graph_wt[a])} {fmt_float(self.ac_wt[a])} "
                         f"{int(self.state_frames[s])}")
        for s, w in self.finals.items():
            lines.append(f"F {s} {fmt_float(w)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Lattice":
        lines = text.splitlines()
        if not lines:
            raise FormatError("empty lattice", 1)
        head = lines[0].split()
        if len(head) != 4 or head[0] != "LAT":
            raise FormatError("expected header 'LAT <num_states> <start> <T>'", 1)
        try:
            n, start, T = int(head[1]), int(head[2]), int(head[3])
        except ValueError:
            raise FormatError("non-integer header field", 1) from None
        frames = np.full(n, -1, dtype=np.int64)
        if not 0 <= start < n:
            raise FormatError("start state out of range", 1)
        frames[start] = 0
        arcs, finals = [], {}
        for lineno, line in enumerate(lines[1:], 2):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "F" and len(parts) == 3:
                    finals[int(parts[1])] = float(parts[2])
                    continue
                if len(parts) != 7:
                    raise ValueError(f"expected 7 fields, got {len(parts)}")
                s, d, tid, word = (int(x) for x in parts[:4])
                g, ac = float(parts[4]), float(parts[5])
                t = int(parts[6])
                if not (0 <= s < n and 0 <= d < n):
                    raise ValueError("state out of range")
            except ValueError as exc:
                raise FormatError(str(exc), lineno) from None
            for state, frame in ((s, t), (d, t + (tid != 0))):
                if frames[state] not in (-1, frame):
                    raise FormatError(f"inconsistent frame for state {state}", lineno)
                frames[state] = frame
            arcs.append((s, d, tid, word, g, ac))
        for s in finals:
            if not 0 <= s < n:
                raise FormatError(f"final state {s} out of range")
            if frames[s] == -1:
                frames[s] = T
        if (frames < 0).any():
            raise FormatError(f"state {int(np.flatnonzero(frames < 0)[0])} has no frame")
        cols = list(zip(*arcs)) if arcs else [[]] * 6
        return cls(frames, start, T, finals, *cols)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "Lattice":
        return cls.from_text(Path(path).read_text())


def _group(keys: np.ndarray, within: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.lexsort((np.arange(len(keys)), within, keys))
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    return [order[bounds[k]:bounds[k + 1]] for k in range(n)]


@dataclass(frozen=True, eq=False)
class Segments:
    """Runs of equal state ids in a sorted id array, for ``reduceat``-style sums."""

    states: np.ndarray   # unique ids, one per run
    starts: np.ndarray   # run start offsets
    run: np.ndarray      # run index of every element

    @classmethod
    def of(cls, ids: np.ndarray) -> "Segments":
        if not len(ids):
            e = np.zeros(0, dtype=np.int64)
            return cls(e, e, e)
        new = np.concatenate([[True], ids[1:] != ids[:-1]])
        starts = np.flatnonzero(new)
        return cls(ids[starts], starts, np.cumsum(new) - 1)


def lattice_from_alignment(tids: Sequence[int], words: Sequence[int] = (),
                           graph_wt: Sequence[float] | None = None) -> Lattice:
    """Single-path lattice following ``tids``; word labels on the first arcs."""
    T = len(tids)
    words = list(words) + [0] * (T - len(words))
    g = np.zeros(T) if graph_wt is None else np.asarray(graph_wt, dtype=float)
    return Lattice(np.arange(T + 1), 0, T, {T: 0.0}, np.arange(T), np.arange(1, T + 1),
                   tids, words[:T], g, np.zeros(T))


def topo_order(lat: Lattice) -> list[int]:
    """Kahn ordering of all states; ties go to the smallest (frame, state-id)."""
    n = lat.num_states
    indeg = np.bincount(lat.dst, minlength=n)
    out: list[list[int]] = [[] for _ in range(n)]
    for a in range(lat.num_arcs):
        out[int(lat.src[a])].append(int(lat.dst[a]))
    heap = [(int(lat.state_frames[s]), s) for s in range(n) if indeg[s] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, s = heapq.heappop(heap)
        order.append(s)
        for d in out[s]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, (int(lat.state_frames[d]), d))
    if len(order) != n:
        raise CycleError("lattice contains a cycle")
    return order


@dataclass(frozen=True)
class BestPath:
    alignment: np.ndarray
    words: list[int]
    score: float
    states: list[int] = field(repr=False)


def lattice_best_path(lat: Lattice, acoustic_scale: float) -> BestPath:
    """Cheapest complete path; ties go to the lexicographically smallest state sequence."""
    if lat.num_arcs == 0 and lat.start not in lat.finals:
        raise DataError("empty lattice")
    cost = lat.costs(acoustic_scale)
    beta = lat.final_array()
    for level in reversed(range(len(lat.schedule))):
        arcs = lat.arcs_by_src_level[level]
        if len(arcs):
            np.minimum.at(beta, lat.src[arcs], cost[arcs] + beta[lat.dst[arcs]])
    if not beta[lat.start] < INF:
        raise DataError("lattice has no complete path")
    order = np.lexsort((lat.tid, lat.dst, lat.src))
    offs = np.concatenate([[0], np.cumsum(np.bincount(lat.src, minlength=lat.num_states))])
    final = lat.final_array()
    s = lat.start
    states, tids, words = [s], [], []
    while True:
        if final[s] == beta[s]:
            break
        arcs = order[offs[s]:offs[s + 1]]
        arcs = arcs[cost[arcs] + beta[lat.dst[arcs]] == beta[s]]
        if not len(arcs):
            # float reassociation: fall back to the closest continuation
            arcs = order[offs[s]:offs[s + 1]]
            arcs = arcs[[np.argmin(np.abs(cost[arcs] + beta[lat.dst[arcs]] - beta[s]))]]
        a = int(arcs[0])
        if lat.tid[a]:
            tids.append(int(lat.tid[a]))
        if lat.word[a]:
            words.append(int(lat.word[a]))
        s = int(lat.dst[a])
        states.append(s)
    return BestPath(np.array(tids, dtype=np.int64), words, float(beta[lat.start]), states)

