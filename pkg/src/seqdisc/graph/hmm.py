"""HMM topology, monophone state tying and the transition model.

A transition-id names one (phone, hmm-state, self-loop|forward) transition.
Emitting a frame while taking a transition uses the pdf of the source HMM
state, so an alignment is a per-frame sequence of transition-ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from ..errors import GraphError


@dataclass(frozen=True)
class HmmTopology:
    """Left-to-right topology: every state has a self-loop and a forward arc.

    The forward arc of the last state leaves the phone.
    """

    num_states: int = 3
    self_loop_prob: float = 0.5

    def __post_init__(self):
        if self.num_states < 1:
            raise ValueError("num_states must be >= 1")
        if not 0.0 < self.self_loop_prob < 1.0:
            raise ValueError("self_loop_prob must lie in (0, 1)")

    @property
    def forward_prob(self) -> float:
        return 1.0 - self.self_loop_prob


TopologySpec = HmmTopology | Mapping[int, HmmTopology]


def topology_for(topo: TopologySpec, phone: int) -> HmmTopology:
    if isinstance(topo, HmmTopology):
        return topo
    try:
        return topo[phone]
    except KeyError:
        raise GraphError(f"no HMM topology for phone {phone}") from None


class StateTyingMap:
    """Total map (phone, hmm-state) -> pdf-id, surjective onto 0..num_pdfs-1."""

    def __init__(self, mapping: Mapping[tuple[int, int], int]):
        self.mapping = dict(mapping)
        pdfs = set(self.mapping.values())
        self.num_pdfs = len(pdfs)
        if pdfs != set(range(self.num_pdfs)):
            raise GraphError("pdf-ids must be dense 0..num_pdfs-1")

    def __call__(self, phone: int, state: int) -> int:
        try:
            return self.mapping[(phone, state)]
        except KeyError:
            raise GraphError(f"no pdf for phone {phone} state {state}") from None


def monophone_tying(phones: Iterable[int], topo: TopologySpec) -> StateTyingMap:
    mapping = {}
    for phone in phones:
        for s in range(topology_for(topo, phone).num_states):
            mapping[(phone, s)] = len(mapping)
    return StateTyingMap(mapping)


class Transition(NamedTuple):
    tid: int
    phone: int
    hmm_state: int
    pdf: int
    self_loop: bool


class TransitionModel:
    """Maps transition-ids (dense from 1) to phone, HMM state and pdf."""

    def __init__(self, phones: Sequence[int], topology: TopologySpec = HmmTopology(),
                 tying: StateTyingMap | None = None):
        phones = list(phones)
        if not phones or 0 in phones or len(set(phones)) != len(phones):
            raise GraphError("phones must be unique, non-zero ids")
        self.phones = phones
        self.topology = topology
        self.tying = tying or monophone_tying(phones, topology)
        rows = [(0, -1, -1, -1, False, 0.0)]
        self._index: dict[tuple[int, int, bool], int] = {}
        for phone in phones:
            topo = topology_for(topology, phone)
            for s in range(topo.num_states):
                pdf = self.tying(phone, s)
                for loop, prob in ((True, topo.self_loop_prob), (False, topo.forward_prob)):
                    self._index[(phone, s, loop)] = len(rows)
                    rows.append((len(rows), phone, s, pdf, loop, -math.log(prob)))
        for phone, s in self.tying.mapping:
            if (phone, s, True) not in self._index:
                raise GraphError(f"tying covers phone {phone} state {s} absent from topology")
        cols = list(zip(*rows))
        self.tid_phone = np.array(cols[1], dtype=np.int64)
        self.tid_state = np.array(cols[2], dtype=np.int64)
        self.tid_pdf = np.array(cols[3], dtype=np.int64)
        self.tid_self_loop = np.array(cols[4], dtype=bool)
        self.tid_cost = np.array(cols[5], dtype=np.float64)
        for arr in (self.tid_phone, self.tid_state, self.tid_pdf, self.tid_self_loop, self.tid_cost):
            arr.setflags(write=False)

    @property
    def num_pdfs(self) -> int:
        return self.tying.num_pdfs

    @property
    def num_transitions(self) -> int:
        return len(self.tid_pdf) - 1

    @property
    def transitions(self) -> list[Transition]:
        return [Transition(t, int(self.tid_phone[t]), int(self.tid_state[t]), int(self.tid_pdf[t]),
                           bool(self.tid_self_loop[t]))
                for t in range(1, len(self.tid_pdf))]

    def num_states(self, phone: int) -> int:
        return topology_for(self.topology, phone).num_states

    def self_loop_tid(self, phone: int, state: int) -> int:
        return self._lookup(phone, state, True)

    def forward_tid(self, phone: int, state: int) -> int:
        return self._lookup(phone, state, False)

    def _lookup(self, phone, state, loop) -> int:
        try:
            return self._index[(phone, state, loop)]
        except KeyError:
            raise GraphError(f"no transition for phone {phone} state {state}") from None

    def check_tids(self, tids) -> np.ndarray:
        tids = np.asarray(tids, dtype=np.int64)
        if tids.size and (tids.min() < 1 or tids.max() > self.num_transitions):
            raise GraphError("invalid transition-id in sequence")
        return tids

    def pdfs(self, tids) -> np.ndarray:
        return self.tid_pdf[self.check_tids(tids)]

    def phones_of(self, tids) -> np.ndarray:
        return self.tid_phone[self.check_tids(tids)]

    def phone_segments(self, tids) -> list[tuple[int, int, int]]:
        """Split an alignment into (phone, start_frame, end_frame) segments.

        A segment ends at the forward transition out of the phone's last state.
        """
        tids = self.check_tids(tids)
        segs = []
        begin = 0
        for t, tid in enumerate(tids):
            phone = int(self.tid_phone[tid])
            last = self.num_states(phone) - 1
            if not self.tid_self_loop[tid] and self.tid_state[tid] == last:
                segs.append((phone, begin, t + 1))
                begin = t + 1
        if begin != len(tids):
            raise GraphError("alignment ends inside a phone")
        return segs

    def durations_to_tids(self, phone: int, durations: Sequence[int]) -> list[int]:
        """Transition-ids for one phone given frames spent in each HMM state."""
        if len(durations) != self.num_states(phone) or min(durations) < 1:
            raise GraphError("need one positive duration per HMM state")
        out = []
        for s, d in enumerate(durations):
            out += [self.self_loop_tid(phone, s)] * (d - 1) + [self.forward_tid(phone, s)]
        return out

    def to_dict(self) -> dict:
        topo = self.topology
        if isinstance(topo, HmmTopology):
            topo_d = {"default": [topo.num_states, topo.self_loop_prob]}
        else:
            topo_d = {str(p): [t.num_states, t.self_loop_prob] for p, t in topo.items()}
        return {"phones": self.phones, "topology": topo_d}

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionModel":
        topo_d = d["topology"]
        if "default" in topo_d:
            topo: TopologySpec = HmmTopology(*topo_d["default"])
        else:
            topo = {int(p): HmmTopology(*v) for p, v in topo_d.items()}
        return cls(d["phones"], topo)
