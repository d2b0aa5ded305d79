"""Weighted transducers in the tropical/log semiring with -log weights.

Arcs are stored column-wise in numpy arrays so that decoders can work on
whole frames at once.  An ``Fst`` is immutable after construction.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import CycleError, FormatError, GraphError

INF = math.inf


def fmt_float(x: float) -> str:
    return "%.17g" % x


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Fst:
    num_states: int
    start: int
    finals: Mapping[int, float]
    src: np.ndarray
    dst: np.ndarray
    ilabel: np.ndarray
    olabel: np.ndarray
    weight: np.ndarray
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name, dtype in (("src", np.int64), ("dst", np.int64), ("ilabel", np.int64),
                            ("olabel", np.int64), ("weight", np.float64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        object.__setattr__(self, "finals", dict(sorted(self.finals.items())))
        n = self.num_states
        if not 0 <= self.start < n:
            raise GraphError(f"start state {self.start} out of range for {n} states")
        sizes = {len(self.src), len(self.dst), len(self.ilabel), len(self.olabel), len(self.weight)}
        if len(sizes) != 1:
            raise GraphError("arc arrays differ in length")
        if len(self.src) and (self.src.min() < 0 or self.src.max() >= n
                              or self.dst.min() < 0 or self.dst.max() >= n):
            raise GraphError("arc endpoint out of range")
        if np.isnan(self.weight).any() or (self.weight == -INF).any():
            raise GraphError("arc weights must be finite or +inf")
        for s, w in self.finals.items():
            if not 0 <= s < n or math.isnan(w) or w == -INF:
                raise GraphError(f"bad final state {s} weight {w}")
        # arcs sorted by (src, ilabel, olabel, dst) give a canonical CSR layout
        order = np.lexsort((self.dst, self.olabel, self.ilabel, self.src))
        object.__setattr__(self, "_order", order)

    @property
    def num_arcs(self) -> int:
        return len(self.src)

    @cached_property
    def _offsets(self) -> np.ndarray:
        counts = np.bincount(self.src, minlength=self.num_states)
        return np.concatenate([[0], np.cumsum(counts)])

    def arc_ids(self, state: int) -> np.ndarray:
        """Indices of arcs leaving ``state`` in canonical order."""
        return self._order[self._offsets[state]:self._offsets[state + 1]]

    def arcs(self, state: int) -> Iterator[tuple[int, int, float, int]]:
        for a in self.arc_ids(state):
            yield int(self.ilabel[a]), int(self.olabel[a]), float(self.weight[a]), int(self.dst[a])

    def final_weight(self, state: int) -> float:
        return self.finals.get(state, INF)

    def is_final(self, state: int) -> bool:
        return self.finals.get(state, INF) < INF

    def final_array(self) -> np.ndarray:
        out = np.full(self.num_states, INF)
        for s, w in self.finals.items():
            out[s] = w
        return out

    @property
    def has_epsilons(self) -> bool:
        return bool((self.ilabel == 0).any())

    def trim(self) -> "Fst":
        """Drop states not on any start-to-final path, renumbering in BFS order."""
        acc = _reachable(self.num_states, [self.start], self.src, self.dst)
        fin = [s for s, w in self.finals.items() if w < INF]
        coacc = _reachable(self.num_states, fin, self.dst, self.src)
        keep = acc & coacc
        if not keep[self.start]:
            raise GraphError("FST has no successful path")
        # BFS numbering from start keeps trimmed graphs deterministic and readable
        new_id = np.full(self.num_states, -1, dtype=np.int64)
        queue = deque([self.start])
        new_id[self.start] = 0
        count = 1
        while queue:
            s = queue.popleft()
            for a in self.arc_ids(s):
                d = int(self.dst[a])
                if keep[d] and new_id[d] < 0:
                    new_id[d] = count
                    count += 1
                    queue.append(d)
        arcs = np.array([a for a in self._order if keep[self.src[a]] and keep[self.dst[a]]],
                        dtype=np.int64)
        return Fst(
            num_states=count,
            start=0,
            finals={int(new_id[s]): w for s, w in self.finals.items() if keep[s] and w < INF},
            src=new_id[self.src[arcs]] if len(arcs) else [],
            dst=new_id[self.dst[arcs]] if len(arcs) else [],
            ilabel=self.ilabel[arcs] if len(arcs) else [],
            olabel=self.olabel[arcs] if len(arcs) else [],
            weight=self.weight[arcs] if len(arcs) else [],
        )

    def remove_epsilons(self) -> "Fst":
        """Remove input-epsilon arcs from an epsilon-acyclic FST.

        Every epsilon path ``u -> ... -> x`` followed by a labelled arc out of
        ``x`` becomes a direct arc out of ``u``; distinct epsilon paths stay
        distinct arcs, so both min-plus and sum-product path scores are
        preserved.  A final weight reached through several epsilon paths keeps
        the cheapest.  At most one non-epsilon output label may occur along
        each collapsed path.
        """
        if not self.has_epsilons:
            return self
        eps = self.ilabel == 0
        # closure[u] = list of (x, weight, olabel) over epsilon paths from u
        closure: dict[int, list[tuple[int, float, int]]] = {}
        visiting: set[int] = set()

        def close(u: int) -> list[tuple[int, float, int]]:
            if u in closure:
                return closure[u]
            if u in visiting:
                raise CycleError(f"epsilon cycle through state {u}")
            visiting.add(u)
            out = [(u, 0.0, 0)]
            for a in self.arc_ids(u):
                if not eps[a]:
                    continue
                for x, w, o in close(int(self.dst[a])):
                    lab = int(self.olabel[a])
                    if lab and o:
                        raise GraphError(f"two output labels on one epsilon path from state {u}")
                    out.append((x, float(self.weight[a]) + w, lab or o))
            visiting.discard(u)
            closure[u] = out
            return out

        b = FstBuilder(self.num_states, start=self.start)
        for u in range(self.num_states):
            final = INF
            for x, w, o in close(u):
                fw = self.final_weight(x)
                if fw < INF:
                    if o:
                        raise GraphError(f"output label {o} on epsilon path to a final state")
                    final = min(final, w + fw)
                for a in self.arc_ids(x):
                    if eps[a]:
                        continue
                    lab = int(self.olabel[a])
                    if lab and o:
                        raise GraphError(f"two output labels on one path from state {u}")
                    b.add_arc(u, int(self.dst[a]), int(self.ilabel[a]), lab or o,
                              w + float(self.weight[a]))
            if final < INF:
                b.set_final(u, final)
        return b.build().trim()

    # text format ---------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"FST {self.num_states} {self.start}"]
        for a in self._order:
            lines.append(f"{self.src[a]} {self.dst[a]} {self.ilabel[a]} {self.olabel[a]} "
                         f"{fmt_float(self.weight[a])}")
        for s, w in self.finals.items():
            lines.append(f"F {s} {fmt_float(w)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Fst":
        lines = text.splitlines()
        if not lines:
            raise FormatError("empty FST file", 1)
        head = lines[0].split()
        if len(head) != 3 or head[0] != "FST":
            raise FormatError("expected header 'FST <num_states> <start>'", 1)
        try:
            n, start = int(head[1]), int(head[2])
        except ValueError:
            raise FormatError("non-integer header field", 1) from None
        b = FstBuilder(n, start=start)
        for lineno, line in enumerate(lines[1:], 2):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "F" and len(parts) == 3:
                    b.set_final(int(parts[1]), float(parts[2]))
                elif len(parts) == 5:
                    b.add_arc(int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]),
                              float(parts[4]))
                else:
                    raise ValueError(f"expected 5 fields, got {len(parts)}")
            except ValueError as exc:
                raise FormatError(str(exc), lineno) from None
        try:
            return b.build()
        except GraphError as exc:
            raise FormatError(str(exc)) from None

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "Fst":
        return cls.from_text(Path(path).read_text())

    def same_as(self, other: "Fst") -> bool:
        return self.to_text() == other.to_text()


def _reachable(n: int, seeds, frm: np.ndarray, to: np.ndarray) -> np.ndarray:
    seen = np.zeros(n, dtype=bool)
    if not len(seeds):
        return seen
    order = np.argsort(frm, kind="stable")
    offs = np.concatenate([[0], np.cumsum(np.bincount(frm, minlength=n))])
    stack = list(seeds)
    seen[list(seeds)] = True
    while stack:
        s = stack.pop()
        for a in order[offs[s]:offs[s + 1]]:
            d = to[a]
            if not seen[d]:
                seen[d] = True
                stack.append(int(d))
    return seen


class FstBuilder:
    """Mutable accumulator producing an immutable ``Fst``."""

    def __init__(self, num_states: int = 0, start: int = 0):
        self.num_states = num_states
        self.start = start
        self.finals: dict[int, float] = {}
        self._arcs: list[tuple[int, int, int, int, float]] = []

    def add_state(self) -> int:
        self.num_states += 1
        return self.num_states - 1

    def add_arc(self, src: int, dst: int, ilabel: int, olabel: int, weight: float = 0.0) -> None:
        self._arcs.append((src, dst, ilabel, olabel, weight))

    def set_final(self, state: int, weight: float = 0.0) -> None:
        self.finals[state] = weight

    def build(self) -> Fst:
        cols = list(zip(*self._arcs)) if self._arcs else [[], [], [], [], []]
        return Fst(self.num_states, self.start, self.finals, *cols)
