"""Lexicon (L) and grammar (G) transducers."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from ..errors import GraphError, UnknownSymbolError
from .fst import Fst, FstBuilder
from .symbols import SymbolTable

Lexicon = Sequence[tuple[str, Sequence[str]]]


def build_lexicon_fst(lexicon: Lexicon, phones: SymbolTable, words: SymbolTable,
                      sil_phone: str | None = None, sil_prob: float = 0.5) -> Fst:
    """Phone-to-word transducer with one linear path per word.

    The word label sits on the first phone arc.  With ``sil_phone`` set, an
    optional silence may precede the utterance and follow every word, taken
    with probability ``sil_prob``.
    """
    seen = set()
    entries = []
    for word, pron in lexicon:
        if word in seen:
            raise GraphError(f"duplicate lexicon entry for word {word!r}")
        seen.add(word)
        if not pron:
            raise GraphError(f"word {word!r} has an empty pronunciation")
        entries.append((words.id(word), [phones.id(p) for p in pron]))

    if sil_phone is None:
        b = FstBuilder(1, start=0)
        b.set_final(0)
        loop = 0
        after_word = [(loop, 0.0)]
    else:
        sil = phones.id(sil_phone)
        if not 0.0 < sil_prob < 1.0:
            raise ValueError("sil_prob must lie in (0, 1)")
        no_sil_cost, sil_cost = -math.log(1.0 - sil_prob), -math.log(sil_prob)
        b = FstBuilder(3, start=0)
        loop, sil_state = 1, 2
        b.add_arc(0, loop, 0, 0, no_sil_cost)
        b.add_arc(0, loop, sil, 0, sil_cost)
        b.add_arc(sil_state, loop, sil, 0, 0.0)
        b.set_final(loop)
        after_word = [(loop, no_sil_cost), (sil_state, sil_cost)]

    for word_id, pron in entries:
        cur = loop
        for k, phone in enumerate(pron[:-1]):
            nxt = b.add_state()
            b.add_arc(cur, nxt, phone, word_id if k == 0 else 0)
            cur = nxt
        for target, cost in after_word:
            b.add_arc(cur, target, pron[-1], word_id if len(pron) == 1 else 0, cost)
    return b.build()


def sentence_grammar(sentences: Sequence[Sequence[str]], words: SymbolTable) -> Fst:
    """Prefix-tree acceptor over the given sentences, uniform over sentences."""
    if not sentences:
        raise GraphError("grammar needs at least one sentence")
    b = FstBuilder(1, start=0)
    children: dict[tuple[int, int], int] = {}
    counts: dict[int, int] = {}
    final_counts: dict[int, int] = {}
    paths = []
    for sent in sentences:
        ids = words.ids(sent)
        node = 0
        path = [node]
        for w in ids:
            key = (node, w)
            if key not in children:
                children[key] = b.add_state()
            node = children[key]
            path.append(node)
        final_counts[node] = final_counts.get(node, 0) + 1
        paths.append(path)
    for path in paths:
        for node in path:
            counts[node] = counts.get(node, 0) + 1
    for (node, w), child in children.items():
        b.add_arc(node, child, w, w, -math.log(counts[child] / counts[node]))
    for node, c in final_counts.items():
        b.set_final(node, -math.log(c / counts[node]))
    return b.build()


def bigram_grammar(words: SymbolTable, unigram: Mapping[str, float],
                   bigram: Mapping[str, Mapping[str, float]],
                   end_prob: Mapping[str, float] | float = 0.0) -> Fst:
    """Word bigram acceptor: state 0 is sentence start, state k follows word k.

    ``unigram`` gives the first-word distribution, ``bigram[w]`` the successor
    distribution after ``w`` (scaled by ``1 - end_prob``), and ``end_prob`` the
    probability of ending after each word.  Probabilities are normalised.
    """
    vocab = words.non_epsilon()
    b = FstBuilder(len(vocab) + 1, start=0)

    def emit(state: int, dist: Mapping[str, float], mass: float):
        total = sum(dist.values())
        if total <= 0 or mass <= 0:
            return
        for w, p in sorted(dist.items(), key=lambda kv: words.id(kv[0])):
            if p > 0:
                wid = words.id(w)
                b.add_arc(state, wid, wid, wid, -math.log(mass * p / total))

    for w in bigram:
        words.id(w)
    emit(0, unigram, 1.0)
    for w in vocab:
        end = end_prob if isinstance(end_prob, (int, float)) else end_prob.get(w, 0.0)
        succ = bigram.get(w, {})
        if sum(succ.values()) <= 0:
            end = 1.0
        if end > 0:
            b.set_final(words.id(w), -math.log(end))
        emit(words.id(w), succ, 1.0 - end)
    return b.build()


def linear_acceptor(word_ids: Sequence[int]) -> Fst:
    b = FstBuilder(len(word_ids) + 1, start=0)
    for k, w in enumerate(word_ids):
        b.add_arc(k, k + 1, int(w), int(w))
    b.set_final(len(word_ids))
    return b.build()


def check_acceptor(g: Fst, words: SymbolTable | None = None) -> None:
    if g.num_arcs and not np.array_equal(g.ilabel, g.olabel):
        raise GraphError("grammar must be an acceptor (ilabel == olabel)")
    if (g.ilabel == 0).any():
        raise GraphError("grammar must not contain epsilon arcs")
    if words is not None and g.num_arcs and g.ilabel.max() >= len(words):
        raise UnknownSymbolError(int(g.ilabel.max()), words.name)
