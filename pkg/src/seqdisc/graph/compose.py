"""Decoding-graph construction by direct triple composition H o (L o G).

Only what the monophone pipeline needs: an epsilon-free acceptor grammar, a
lexicon whose output epsilons sit on the lexicon side, and left-to-right
HMMs.  No determinization or minimization; the result is epsilon-removed
and trimmed so decoders and lattices only ever see emitting arcs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from ..errors import GraphError, UnknownSymbolError
from .fst import Fst, FstBuilder
from .hmm import TransitionModel
from .lexicon import check_acceptor, linear_acceptor
from .symbols import SymbolTable


@dataclass(frozen=True, eq=False)
class DecodingGraph:
    """An FST with transition-id input labels and word-id output labels."""

    fst: Fst

    def __post_init__(self):
        if self.fst.num_arcs and self.fst.ilabel.min() < 0:
            raise GraphError("negative input label")

    def validate(self, tm: TransitionModel) -> None:
        il = self.fst.ilabel
        if len(il) and il.max() > tm.num_transitions:
            raise GraphError(f"input label {int(il.max())} is not a transition-id")

    @property
    def num_states(self) -> int:
        return self.fst.num_states

    def write(self, path) -> None:
        self.fst.write(path)

    @classmethod
    def read(cls, path) -> "DecodingGraph":
        return cls(Fst.read(path))


def compose_lexicon_grammar(lexicon: Fst, grammar: Fst) -> Fst:
    """L o G for an epsilon-free acceptor G.

    Lexicon arcs with an epsilon output advance only the lexicon side, so no
    epsilon filter is needed.
    """
    check_acceptor(grammar)
    b = FstBuilder()
    ids: dict[tuple[int, int], int] = {}
    queue: deque[tuple[int, int]] = deque()

    def state(pair):
        if pair not in ids:
            ids[pair] = b.add_state()
            queue.append(pair)
        return ids[pair]

    b.start = state((lexicon.start, grammar.start))
    g_arcs = {g: {} for g in range(grammar.num_states)}
    for a in range(grammar.num_arcs):
        g_arcs[int(grammar.src[a])].setdefault(int(grammar.ilabel[a]), []).append(a)
    while queue:
        l_state, g_state = pair = queue.popleft()
        src = ids[pair]
        lf, gf = lexicon.final_weight(l_state), grammar.final_weight(g_state)
        if lf < math.inf and gf < math.inf:
            b.set_final(src, lf + gf)
        for ilab, olab, w, l_next in lexicon.arcs(l_state):
            if olab == 0:
                b.add_arc(src, state((l_next, g_state)), ilab, 0, w)
                continue
            for a in g_arcs[g_state].get(olab, ()):
                dst = state((l_next, int(grammar.dst[a])))
                b.add_arc(src, dst, ilab, olab, w + float(grammar.weight[a]))
    return b.build()


def expand_hmms(lg: Fst, tm: TransitionModel) -> Fst:
    """Replace every phone arc with that phone's left-to-right HMM chain.

    Each chain is entered through an epsilon arc carrying the word label and
    the LG weight; each HMM state has a self-loop and a forward arc labelled
    with transition-ids and weighted by -log transition probability.
    """
    b = FstBuilder(lg.num_states, start=lg.start)
    for s, w in lg.finals.items():
        b.set_final(s, w)
    for a in range(lg.num_arcs):
        u, v = int(lg.src[a]), int(lg.dst[a])
        phone, word, cost = int(lg.ilabel[a]), int(lg.olabel[a]), float(lg.weight[a])
        if phone == 0:
            b.add_arc(u, v, 0, word, cost)
            continue
        n = tm.num_states(phone)
        chain = [b.add_state() for _ in range(n)]
        b.add_arc(u, chain[0], 0, word, cost)
        for k, h in enumerate(chain):
            loop = tm.self_loop_tid(phone, k)
            fwd = tm.forward_tid(phone, k)
            b.add_arc(h, h, loop, 0, float(tm.tid_cost[loop]))
            b.add_arc(h, chain[k + 1] if k + 1 < n else v, fwd, 0, float(tm.tid_cost[fwd]))
    return b.build()


def build_decoding_graph(lexicon_fst: Fst, grammar_fst: Fst, tm: TransitionModel,
                         words: SymbolTable | None = None) -> DecodingGraph:
    """Compose HMM, lexicon and grammar levels into an epsilon-free graph.

    The HMM topology comes from ``tm``.  Raises ``GraphError`` when lexicon and
    grammar share no complete sentence.
    """
    check_acceptor(grammar_fst, words)
    lex_words = set(int(o) for o in lexicon_fst.olabel if o)
    for w in sorted(set(int(i) for i in grammar_fst.ilabel)):
        if w not in lex_words:
            name = words.symbol(w) if words is not None and w < len(words) else w
            raise UnknownSymbolError(name, "lexicon")
    for p in sorted(set(int(i) for i in lexicon_fst.ilabel if i)):
        if p not in tm.phones:
            raise GraphError(f"lexicon phone {p} has no HMM in the transition model")
    lg = compose_lexicon_grammar(lexicon_fst, grammar_fst)
    try:
        lg = lg.trim()
    except GraphError:
        raise GraphError("empty composition: lexicon and grammar share no sentence") from None
    hclg = expand_hmms(lg, tm).remove_epsilons().trim()
    return DecodingGraph(hclg)


def build_linear_graph(text: Sequence[str], lexicon_fst: Fst, tm: TransitionModel,
                       words: SymbolTable) -> DecodingGraph:
    """Graph accepting exactly ``text`` (plus any optional silences)."""
    if not text:
        raise GraphError("empty transcript")
    ids = []
    lex_words = set(int(o) for o in lexicon_fst.olabel if o)
    for w in text:
        if w not in words or words.id(w) not in lex_words:
            raise UnknownSymbolError(w, "lexicon")
        ids.append(words.id(w))
    return build_decoding_graph(lexicon_fst, linear_acceptor(ids), tm)
