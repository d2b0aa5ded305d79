"""Lattice-generating token-passing beam search and forced alignment.

Tokens live on (graph state, frame).  Each frame is one vectorized pass:
prune the active set, push every outgoing emitting arc, and scatter-min
into the next frame.  Every expanded arc is remembered; after the last
frame a backward pass keeps the arcs lying on a path within
``lattice_beam`` of the best, which becomes a raw state-level lattice.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import AlignmentError, DataError, DecodeError
from .graph.compose import DecodingGraph
from .graph.fst import INF
from .graph.hmm import TransitionModel
from .graph.lattice import Lattice, lattice_best_path


@dataclass(frozen=True)
class DecoderOptions:
    beam: float = 16.0
    lattice_beam: float = 8.0
    max_active: float = 7000
    acoustic_scale: float = 0.1

    def __post_init__(self):
        if not self.beam > 0:
            raise ValueError("beam must be positive")
        if not 0 <= self.lattice_beam <= self.beam:
            raise ValueError("need 0 <= lattice_beam <= beam")
        if not self.max_active >= 1:
            raise ValueError("max_active must be >= 1")
        if not self.acoustic_scale > 0:
            raise ValueError("acoustic_scale must be positive")


@dataclass(frozen=True, eq=False)
class DecoderOutput:
    lattice: Lattice
    words: list[int]
    alignment: np.ndarray
    score: float


class CompiledGraph:
    """Flat arc arrays of a decoding graph with pdf-ids resolved."""

    def __init__(self, graph: DecodingGraph, tm: TransitionModel):
        graph.validate(tm)
        fst = graph.fst
        self.num_states = fst.num_states
        self.start = fst.start
        self.final = fst.final_array()
        emit = fst.ilabel != 0
        self.e_src, self.e_dst = fst.src[emit], fst.dst[emit]
        self.e_tid, self.e_word, self.e_w = fst.ilabel[emit], fst.olabel[emit], fst.weight[emit]
        self.e_pdf = tm.tid_pdf[self.e_tid]
        eps = ~emit
        self.x_src, self.x_dst = fst.src[eps], fst.dst[eps]
        self.x_word, self.x_w = fst.olabel[eps], fst.weight[eps]
        self.num_pdfs = tm.num_pdfs

    def eps_closure(self, cost: np.ndarray) -> np.ndarray:
        """Relax epsilon arcs in place until nothing improves; returns the live eps arc ids."""
        if not len(self.x_src):
            return self.x_src
        for _ in range(self.num_states + 1):
            cand = cost[self.x_src] + self.x_w
            better = cand < cost[self.x_dst]
            if not better.any():
                break
            np.minimum.at(cost, self.x_dst[better], cand[better])
        else:
            raise DecodeError("negative-cost epsilon cycle in graph", "no-path")
        return np.flatnonzero(np.isfinite(cost[self.x_src]))

    def has_path(self, T: int) -> bool:
        """Whether any complete path with exactly T emitting arcs exists, ignoring scores."""
        alive = np.full(self.num_states, INF)
        alive[self.start] = 0.0
        for _ in range(T):
            self._bool_closure(alive)
            nxt = np.full(self.num_states, INF)
            ok = np.isfinite(alive[self.e_src])
            nxt[self.e_dst[ok]] = 0.0
            alive = nxt
            if not np.isfinite(alive).any():
                return False
        self._bool_closure(alive)
        return bool(np.isfinite(alive + self.final).any())

    def _bool_closure(self, alive):
        while len(self.x_src):
            ok = np.isfinite(alive[self.x_src]) & ~np.isfinite(alive[self.x_dst])
            if not ok.any():
                break
            alive[self.x_dst[ok]] = 0.0


def _prune(cost: np.ndarray, beam: float, max_active: float) -> np.ndarray:
    """Surviving token states after beam and max-active pruning; ties by state id."""
    live = np.flatnonzero(np.isfinite(cost))
    if not len(live):
        return live
    best = cost[live].min()
    live = live[cost[live] <= best + beam]
    if len(live) > max_active:
        order = np.lexsort((live, cost[live]))
        live = np.sort(live[order[:int(max_active)]])
    return live


def decode(graph: DecodingGraph | CompiledGraph, ll: np.ndarray, tm: TransitionModel,
           opts: DecoderOptions = DecoderOptions()) -> DecoderOutput:
    """Viterbi beam search producing a lattice, 1-best words and alignment."""
    g = graph if isinstance(graph, CompiledGraph) else CompiledGraph(graph, tm)
    ll = np.asarray(ll, dtype=np.float64)
    if ll.ndim != 2 or ll.shape[1] != g.num_pdfs:
        raise DataError(f"log-likelihoods must have {g.num_pdfs} columns, got shape {ll.shape}")
    if not np.isfinite(ll).all():
        raise DataError("non-finite log-likelihoods")
    T = len(ll)
    kappa = opts.acoustic_scale
    N = g.num_states

    # alpha[t] holds the surviving token costs at frame t
    alpha = np.full((T + 1, N), INF)
    emit_rec, emit_cost, eps_rec = [], [], []
    cost = np.full(N, INF)
    cost[g.start] = 0.0
    for t in range(T + 1):
        eps_rec.append(g.eps_closure(cost))
        if t == T:
            alpha[T] = cost
            break
        live = _prune(cost, opts.beam, opts.max_active)
        alpha[t, live] = cost[live]
        arcs = np.flatnonzero(np.isfinite(alpha[t, g.e_src]))
        if not len(arcs):
            _fail(g, T, f"all tokens died at frame {t + 1}")
        c = g.e_w[arcs] - kappa * ll[t, g.e_pdf[arcs]]
        emit_rec.append(arcs)
        emit_cost.append(c)
        cost = np.full(N, INF)
        np.minimum.at(cost, g.e_dst[arcs], alpha[t, g.e_src[arcs]] + c)

    final_cost = alpha[T] + g.final
    if not np.isfinite(final_cost).any():
        _fail(g, T, "no surviving token reached a final state")
    best = float(final_cost.min())
    lat = _build_lattice(g, ll, alpha, emit_rec, emit_cost, eps_rec, best, opts.lattice_beam)
    bp = lattice_best_path(lat, kappa)
    return DecoderOutput(lat, bp.words, bp.alignment, best)


def _fail(g: CompiledGraph, T: int, detail: str):
    if g.has_path(T):
        raise DecodeError(f"decode failed: {detail}; search beam too tight", "pruned")
    raise DecodeError(f"decode failed: graph has no path of {T} frames", "no-path")


def _build_lattice(g, ll, alpha, emit_rec, emit_cost, eps_rec, best, lattice_beam) -> Lattice:
    T = len(emit_rec)
    N = g.num_states
    thresh = best + lattice_beam + 1e-9 * (1.0 + abs(best))

    # backward Viterbi over the recorded arcs only
    beta = np.full((T + 1, N), INF)
    beta[T] = g.final
    for t in range(T, -1, -1):
        if t < T:
            a = emit_rec[t]
            np.minimum.at(beta[t], g.e_src[a], emit_cost[t] + beta[t + 1, g.e_dst[a]])
        x = eps_rec[t]
        while len(x):
            cand = beta[t, g.x_dst[x]] + g.x_w[x]
            better = cand < beta[t, g.x_src[x]]
            if not better.any():
                break
            np.minimum.at(beta[t], g.x_src[x][better], cand[better])

    a = np.concatenate(emit_rec)
    f = np.repeat(np.arange(T), [len(r) for r in emit_rec])
    c = np.concatenate(emit_cost)
    keep = alpha[f, g.e_src[a]] + c + beta[f + 1, g.e_dst[a]] <= thresh
    a, f = a[keep], f[keep]
    parts = [(f, g.e_src[a], f + 1, g.e_dst[a], g.e_tid[a], g.e_word[a], g.e_w[a],
              -ll[f, g.e_pdf[a]])]
    if any(len(x) for x in eps_rec):
        x = np.concatenate(eps_rec)
        fx = np.repeat(np.arange(T + 1), [len(r) for r in eps_rec])
        keep = alpha[fx, g.x_src[x]] + g.x_w[x] + beta[fx, g.x_dst[x]] <= thresh
        x, fx = x[keep], fx[keep]
        parts.append((fx, g.x_src[x], fx, g.x_dst[x], np.zeros(len(x), np.int64), g.x_word[x],
                      g.x_w[x], np.zeros(len(x))))
    frame, src, nframe, dst, tid, word, gw, ac = (np.concatenate(p) for p in zip(*parts))

    # lattice states numbered by (frame, graph state)
    keys = np.concatenate([[g.start], frame * N + src, nframe * N + dst])
    uniq, inv = np.unique(keys, return_inverse=True)
    n_arcs = len(src)
    lsrc, ldst = inv[1:1 + n_arcs], inv[1 + n_arcs:]
    state_frames, graph_state = uniq // N, uniq % N
    finals = {}
    for s in np.flatnonzero(state_frames == T):
        q = graph_state[s]
        if np.isfinite(g.final[q]) and alpha[T, q] + g.final[q] <= thresh:
            finals[int(s)] = float(g.final[q])
    order = np.lexsort((tid, ldst, lsrc))
    return Lattice(state_frames, int(inv[0]), T, finals, lsrc[order], ldst[order], tid[order],
                   word[order], gw[order], ac[order])


def align(linear_graph: DecodingGraph | CompiledGraph, ll: np.ndarray, tm: TransitionModel,
          opts: DecoderOptions = DecoderOptions()) -> np.ndarray:
    """Best transition-id sequence through a transcript-constrained graph."""
    try:
        out = decode(linear_graph, ll, tm, replace(opts, lattice_beam=0.0))
    except DecodeError as exc:
        raise AlignmentError(f"alignment failed: {exc}", exc.reason) from None
    return out.alignment


def decode_minibatch(graph: DecodingGraph | CompiledGraph, lls: Sequence[np.ndarray],
                     tm: TransitionModel, opts: DecoderOptions = DecoderOptions(),
                     workers: int = 1) -> list[DecoderOutput | DecodeError]:
    """Decode each utterance independently; failures come back as the exception object."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    g = graph if isinstance(graph, CompiledGraph) else CompiledGraph(graph, tm)

    def one(ll):
        try:
            return decode(g, ll, tm, opts)
        except DecodeError as exc:
            return exc

    if workers == 1 or len(lls) <= 1:
        return [one(ll) for ll in lls]
    with ThreadPoolExecutor(max_workers=min(workers, len(lls))) as pool:
        return list(pool.map(one, lls))


def viterbi_score(alignment: Sequence[int], ll: np.ndarray, tm: TransitionModel,
                  kappa: float) -> float:
    """Acoustic part of a path score: ``-kappa * sum ll[t, pdf(tid_t)]``."""
    pdfs = tm.pdfs(alignment)
    return -kappa * float(ll[np.arange(len(pdfs)), pdfs].sum())


__all__ = ["CompiledGraph", "DecoderOptions", "DecoderOutput", "align", "decode",
           "decode_minibatch", "viterbi_score"]
