import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdisc.corpus import CorpusConfig, make_desk_corpus
from seqdisc.decode import CompiledGraph
from seqdisc.errors import NumericError
from seqdisc.frontend import extract_features
from seqdisc.graph import build_decoding_graph, build_linear_graph
from seqdisc.nnet import AcousticModel, estimate_prior
from seqdisc.training import (CEConfig, PhaseTimes, SEConfig, SEWorkerState, check_finite,
                              edit_distance, evaluate, frame_accuracy, make_sgd, se_batch_grad,
                              se_utterance, train_ce)


def levenshtein(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
def test_edit_distance_matches_recursive_definition(ref, hyp):
    assert edit_distance(ref, hyp) == levenshtein(tuple(ref), tuple(hyp))


def test_edit_distance_small_cases():
    assert edit_distance([], [1, 2]) == 2
    assert edit_distance([1, 2, 3], []) == 3
    assert edit_distance([1, 2, 3], [1, 3]) == 1
    assert edit_distance([1, 2], [2, 1]) == 2


@pytest.fixture(scope="module")
def tiny():
    corpus = make_desk_corpus(CorpusConfig(num_train=6, num_test=2))
    tm, inv = corpus.tm, corpus.inventory
    feats = {u.id: extract_features(u.wave) for u in corpus.all()}
    train = {u.id: feats[u.id] for u in corpus.train}
    alis = {u.id: u.alignment for u in corpus.all()}
    targets = {u: tm.pdfs(alis[u]) for u in train}
    model = AcousticModel(80, tm.num_pdfs, (32,), 2, seed=0)
    train_ce(model, train, targets, CEConfig(epochs=2, lr=2e-3))
    graph = CompiledGraph(build_decoding_graph(inv.lexicon_fst(), inv.grammar_fst(), tm), tm)
    linear = {u.id: CompiledGraph(build_linear_graph(u.words, inv.lexicon_fst(), tm, inv.words),
                                  tm) for u in corpus.train}
    prior = estimate_prior([alis[u] for u in train], tm)
    state = SEWorkerState(tm, prior, graph, train, alis, linear)
    return {"corpus": corpus, "model": model, "state": state, "train": train,
            "targets": targets, "feats": feats}


def test_train_ce_improves_frame_accuracy(tiny):
    corpus, train, targets = tiny["corpus"], tiny["train"], tiny["targets"]
    fresh = AcousticModel(80, corpus.tm.num_pdfs, (32,), 2, seed=0)
    assert frame_accuracy(tiny["model"], train, targets) > frame_accuracy(fresh, train, targets)


def test_train_ce_resume_matches_uninterrupted_run(tiny):
    corpus, train, targets = tiny["corpus"], tiny["train"], tiny["targets"]
    cfg = CEConfig(epochs=2, lr=1e-3)
    full = AcousticModel(80, corpus.tm.num_pdfs, (8,), 1, seed=1)
    train_ce(full, train, targets, cfg)
    part = AcousticModel(80, corpus.tm.num_pdfs, (8,), 1, seed=1)
    opt = train_ce(part, train, targets, CEConfig(epochs=1, lr=1e-3))
    train_ce(part, train, targets, cfg, optimizer=opt, start_epoch=2)
    assert np.array_equal(full.flat_params(), part.flat_params())


def test_se_batch_grad_is_the_mean_of_utterance_grads(tiny):
    model, state = tiny["model"], tiny["state"]
    cfg = SEConfig(criterion="smbr")
    utts = list(state.features)[:3]
    batch, results = se_batch_grad(model, state, utts, cfg)
    assert [r.utt for r in results] == utts and all(r.skipped is None for r in results)
    singles = [se_utterance(model, state, u, cfg, PhaseTimes())[1] for u in utts]
    for k, g in enumerate(batch):
        assert np.allclose(g, sum(s[k] for s in singles) / 3, atol=1e-12)


def test_skipped_utterance_counts_in_the_denominator(tiny):
    model, state, corpus = tiny["model"], tiny["state"], tiny["corpus"]
    inv = corpus.inventory
    u, v = list(state.features)[:2]
    # a transcript far too long for the frames makes alignment fail with no fallback
    words = corpus.train[0].words * 50
    long_graph = CompiledGraph(build_linear_graph(words, inv.lexicon_fst(), state.tm,
                                                  inv.words), state.tm)
    bad = SEWorkerState(state.tm, state.prior, state.graph, state.features, state.alignments,
                        {**state.linear_graphs, u: long_graph})
    cfg = SEConfig(alignment="dynamic")
    res, grads = se_utterance(model, bad, u, cfg, PhaseTimes())
    assert grads is None and res.skipped == "align"
    batch, results = se_batch_grad(model, bad, [u, v], cfg)
    assert [r.skipped for r in results] == ["align", None]
    _, only_v = se_utterance(model, bad, v, cfg, PhaseTimes())
    for g, s in zip(batch, only_v):
        assert np.allclose(g, s / 2, atol=1e-12)


def test_dynamic_alignment_is_remembered(tiny):
    model, state = tiny["model"], tiny["state"]
    mem = SEWorkerState(state.tm, state.prior, state.graph, state.features, state.alignments,
                        state.linear_graphs)
    u = list(state.features)[1]
    se_utterance(model, mem, u, SEConfig(alignment="dynamic"), PhaseTimes())
    ali = mem.last_alignment[u]
    assert len(ali) == len(state.features[u])


def test_phase_times_accumulate(tiny):
    times = PhaseTimes()
    se_batch_grad(tiny["model"], tiny["state"], list(tiny["state"].features)[:2], SEConfig(),
                  times)
    d = times.as_dict()
    assert d["forward"] > 0 and d["decode"] > 0 and d["backward"] > 0
    total = PhaseTimes()
    total.add(times)
    total.add(times)
    assert total.forward == pytest.approx(2 * times.forward)


def test_evaluate_counts_reference_tokens(tiny):
    corpus, state = tiny["corpus"], tiny["state"]
    test = {u.id: tiny["feats"][u.id] for u in corpus.test}
    refs = {u.id: corpus.inventory.words.ids(u.words) for u in corpus.test}
    rep = evaluate(tiny["model"], state.prior, state.graph, state.tm, test, refs)
    assert rep.tokens == sum(len(r) for r in refs.values())
    assert set(rep.hyps) == set(test)
    assert rep.errors == sum(edit_distance(refs[u], rep.hyps[u]) for u in test)
    assert 0 <= rep.token_error_rate


def test_se_config_defaults_follow_alignment_mode():
    assert SEConfig().regularizers.ce_weight == 0.1
    dyn = SEConfig(alignment="dynamic").regularizers
    assert (dyn.ce_weight, dyn.l2_weight) == (0.4, 0.001)
    assert SEConfig(alignment="dynamic", ce_weight=0.0).regularizers.ce_weight == 0.0
    assert make_sgd(SEConfig(alignment="dynamic")).weight_decay == 0.001
    with pytest.raises(ValueError):
        SEConfig(criterion="ctc")
    with pytest.raises(ValueError):
        SEConfig(alignment="sometimes")


def test_check_finite():
    check_finite([1.0, 2.0], "loss")
    with pytest.raises(NumericError):
        check_finite([1.0, float("nan")], "loss")
