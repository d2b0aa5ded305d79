from .compose import (DecodingGraph, build_decoding_graph, build_linear_graph,
                      compose_lexicon_grammar, expand_hmms)
from .fst import INF, Fst, FstBuilder
from .hmm import HmmTopology, StateTyingMap, Transition, TransitionModel, monophone_tying
from .lattice import BestPath, Lattice, lattice_best_path, lattice_from_alignment, topo_order
from .lexicon import bigram_grammar, build_lexicon_fst, linear_acceptor, sentence_grammar
from .symbols import EPSILON, SymbolTable

__all__ = [
    "INF", "EPSILON", "BestPath", "DecodingGraph", "Fst", "FstBuilder", "HmmTopology", "Lattice",
    "StateTyingMap", "SymbolTable", "Transition", "TransitionModel", "bigram_grammar",
    "build_decoding_graph", "build_lexicon_fst", "build_linear_graph", "compose_lexicon_grammar",
    "expand_hmms", "lattice_best_path", "lattice_from_alignment", "linear_acceptor",
    "monophone_tying", "sentence_grammar", "topo_order",
]
