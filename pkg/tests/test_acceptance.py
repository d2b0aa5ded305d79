"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[criterion N] PASS|FAIL|UNVERIFIED ...`` line to the
terminal (not captured), so ``pytest -v`` output doubles as the report.
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from oracles import brute_objective, central_diff, random_lattice, rel_err, small_tm
from seqdisc.audio import Waveform
from seqdisc.corpus import CorpusConfig, make_desk_corpus
from seqdisc.decode import CompiledGraph, DecoderOptions, align, decode
from seqdisc.frontend import extract_features
from seqdisc.graph import (FstBuilder, SymbolTable, TransitionModel, build_decoding_graph,
                           build_lexicon_fst, build_linear_graph, lattice_from_alignment)
from seqdisc.graph.compose import DecodingGraph
from seqdisc.nnet import SGD, AcousticModel, Affine, LogSoftmax, Relu, Splice, estimate_prior
from seqdisc.parallel import (allreduce_processes, allreduce_threads, plan_batches,
                              train_parallel)
from seqdisc.seqcrit import lattice_forward_backward
from seqdisc.simulate import (Rir, SimulationConfig, convolve, image_source_rir, mix_at_snr,
                              plan_simulation, power, schroeder_t60, utterance_rng)
from seqdisc.training import (FRAME_SECONDS, CEConfig, PhaseTimes, SEConfig, SEWorkerState,
                              evaluate, frame_accuracy, se_batch_grad, train_ce)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    assert ok, detail


# 1. sequence-criterion oracles ------------------------------------------------------

def test_criterion_1_sequence_criterion_oracles(capsys):
    tm = small_tm()
    assert tm.num_pdfs <= 3
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_obj = worst_grad = 0.0
    n = 60
    for _ in range(n):
        lat = random_lattice(rng, tm, max_states=8, max_frames=5)
        T = lat.num_frames
        ll = rng.normal(size=(T, tm.num_pdfs)) * 2
        num = rng.integers(1, tm.num_transitions + 1, T)
        kappa = float(rng.choice([1.0, 0.1, 0.5]))
        for crit in ("mmi", "smbr", "mpe"):
            res = lattice_forward_backward(tm, ll, lat, num, crit, kappa)
            worst_obj = max(worst_obj, abs(res.objective
                                           - brute_objective(lat, ll, tm, num, crit, kappa)))
            fd = central_diff(
                lambda x: -lattice_forward_backward(tm, x, lat, num, crit, kappa).objective,
                ll.copy(), 1e-6)
            worst_grad = max(worst_grad, rel_err(fd, res.grad))
    elapsed = time.perf_counter() - t0
    ok = worst_obj <= 1e-9 and worst_grad <= 1e-4 and elapsed < 30
    verdict(capsys, 1, ok, f"{n} lattices x 3 criteria: max |obj - brute| {worst_obj:.2e}, "
                           f"max grad rel err {worst_grad:.2e}, {elapsed:.1f} s")


# 2. MMI zero case -----------------------------------------------------------------------

def test_criterion_2_mmi_zero_case_and_row_sums(capsys):
    tm = small_tm()
    rng = np.random.default_rng(102)
    exact = True
    for _ in range(50):
        T = int(rng.integers(1, 12))
        num = rng.integers(1, tm.num_transitions + 1, T)
        ll = rng.normal(size=(T, tm.num_pdfs)) * 5
        res = lattice_forward_backward(tm, ll, lattice_from_alignment(num), num, "mmi",
                                       float(rng.uniform(0.05, 1.0)))
        exact &= res.objective == 0.0 and not res.grad.any()
    worst_row = 0.0
    for _ in range(100):
        lat = random_lattice(rng, tm)
        T = lat.num_frames
        num = rng.integers(1, tm.num_transitions + 1, T)
        ll = rng.normal(size=(T, tm.num_pdfs)) * 3
        for crit in ("mmi", "smbr", "mpe"):
            res = lattice_forward_backward(tm, ll, lat, num, crit, 0.3)
            worst_row = max(worst_row, float(np.abs(res.grad.sum(axis=1)).max()))
    verdict(capsys, 2, exact and worst_row <= 1e-9,
            f"numerator-only lattices give exactly zero objective and gradient: {exact}; "
            f"max |gradient row sum| {worst_row:.2e}")


# 3. decoder and alignment oracles ------------------------------------------------------

def _random_graph(rng, tm, n):
    b = FstBuilder(n, start=0)
    for s in range(n):
        for _ in range(rng.integers(1, 4)):
            b.add_arc(s, int(rng.integers(n)), int(rng.integers(1, tm.num_transitions + 1)),
                      int(rng.integers(0, 3)), float(rng.uniform(0, 2)))
    for s in rng.choice(n, 2, replace=False):
        b.set_final(int(s), float(rng.uniform(0, 1)))
    return DecodingGraph(b.build())


def _exhaustive_viterbi(fst, ll, tm, kappa):
    T = len(ll)
    best = [math.inf, None]

    def rec(s, t, c, path):
        if t == T:
            if fst.is_final(s) and c + fst.final_weight(s) < best[0]:
                best[:] = [c + fst.final_weight(s), path]
            return
        for i, _, w, d in fst.arcs(s):
            rec(d, t + 1, c + w - kappa * ll[t, tm.tid_pdf[i]], path + [i])

    rec(fst.start, 0, 0.0, [])
    return best


def _best_segmentation(tm, phones, ll, kappa):
    states = [(p, s) for p in phones for s in range(tm.num_states(p))]
    T = len(ll)
    best = (math.inf, None)
    for cuts in itertools.combinations(range(1, T), len(states) - 1):
        bounds = (0,) + cuts + (T,)
        tids = []
        for (p, s), a, b in zip(states, bounds, bounds[1:]):
            tids += [tm.self_loop_tid(p, s)] * (b - a - 1) + [tm.forward_tid(p, s)]
        pdfs = tm.tid_pdf[tids]
        cost = float(tm.tid_cost[tids].sum()) - kappa * float(ll[np.arange(T), pdfs].sum())
        if cost < best[0]:
            best = (cost, tids)
    return best


def test_criterion_3_decoder_and_alignment_oracles(capsys):
    tm = TransitionModel([1, 2])
    rng = np.random.default_rng(103)
    wide = DecoderOptions(math.inf, math.inf, math.inf, 1.0)
    t0 = time.perf_counter()
    graphs = agree = 0
    while graphs < 20:
        g = _random_graph(rng, tm, int(rng.integers(5, 21)))
        ll = rng.normal(size=(int(rng.integers(1, 11)), tm.num_pdfs))
        cost, path = _exhaustive_viterbi(g.fst, ll, tm, 1.0)
        if path is None:
            continue
        graphs += 1
        out = decode(g, ll, tm, wide)
        agree += abs(out.score - cost) <= 1e-9 and list(out.alignment) == path
    phones = SymbolTable(["a", "b"])
    words = SymbolTable(["ab"])
    tm3 = TransitionModel([1, 2])
    lin = build_linear_graph(["ab"], build_lexicon_fst([("ab", ("a", "b"))], phones, words),
                             tm3, words)
    ali_cases = ali_agree = 0
    for T in range(6, 11):
        for _ in range(4):
            ll = rng.normal(size=(T, tm3.num_pdfs)) * 2
            _, want = _best_segmentation(tm3, [1, 2], ll, 0.5)
            got = align(lin, ll, tm3, DecoderOptions(math.inf, 0.0, math.inf, 0.5))
            ali_cases += 1
            ali_agree += list(got) == want
    elapsed = time.perf_counter() - t0
    ok = agree == graphs and ali_agree == ali_cases and elapsed < 30
    verdict(capsys, 3, ok, f"beam=inf decode equals exhaustive Viterbi on {agree}/{graphs} "
                           f"graphs; alignment equals best segmentation on "
                           f"{ali_agree}/{ali_cases}; {elapsed:.1f} s")


# 4. network gradient checks -------------------------------------------------------------

def test_criterion_4_network_gradient_checks(capsys):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        layers = [Splice(1), Affine(4, 3, rng), Relu(), LogSoftmax()]
        for layer in layers:
            x = rng.normal(size=(6, 4))
            out, cache = layer.forward(x)
            r = rng.normal(size=out.shape)
            dx, _ = layer.backward(cache, r)
            fd = central_diff(lambda v: float(np.sum(layer.forward(v)[0] * r)), x.copy(), 1e-5)
            worst = max(worst, rel_err(dx, fd))
        model = AcousticModel(3, 4, hidden=(6, 5), context=1, seed=seed)
        for layer in model.layers:
            if isinstance(layer, Affine):
                # random biases keep pre-activations off the ReLU kink
                layer.bias[...] = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=(7, 3))
        r = rng.normal(size=(7, 4))
        _, caches = model.forward(x)
        for p, g in zip(model.params, model.backward(caches, r)):
            fd = central_diff(lambda _: float(np.sum(model.forward(x)[0] * r)), p, 1e-5)
            worst = max(worst, rel_err(g, fd))
    verdict(capsys, 4, worst <= 1e-4,
            f"20 seeds, every layer and the full model: max rel err {worst:.2e}")


# 5. simulation -----------------------------------------------------------------------------

def test_criterion_5_simulation(capsys, monkeypatch):
    rng = np.random.default_rng(105)
    x, h = rng.standard_normal(800), rng.standard_normal(120)
    fast = convolve(Waveform(x), Rir(h[None], 16000, 0.3)).samples[0]
    conv_err = float(np.abs(fast - np.convolve(x, h)[:800]).max())
    naive = np.array([sum(h[k] * x[i - k] for k in range(len(h)) if 0 <= i - k < len(x))
                      for i in range(len(x))])
    conv_err = max(conv_err, float(np.abs(fast - naive).max()))

    snr_err = 0.0
    for target in rng.uniform(-5, 25, 20):
        s = Waveform(rng.standard_normal(4000))
        n = Waveform(rng.standard_normal(3000) * rng.uniform(0.01, 3))
        noise_part = mix_at_snr(s, n, float(target), rng).samples - s.samples
        snr_err = max(snr_err, abs(10 * math.log10(power(s.samples) / power(noise_part))
                                   - target))

    # mid-size room, array at the centre, source 2 m away in eight directions
    dims, mic = (6.0, 5.5, 3.0), np.array([3.0, 2.75, 1.5])
    t60_dev = {}
    for nominal in (0.2, 0.35, 0.5):
        est = [schroeder_t60(image_source_rir(dims, mic + 2.0 * np.array(
            [math.cos(a), math.sin(a), 0.0]), [mic], nominal)[0], 16000)
            for a in np.arange(8) * math.pi / 4]
        t60_dev[nominal] = max(abs(e - nominal) / nominal for e in est)

    import seqdisc.simulate as sim
    monkeypatch.setattr(sim, "sample_room", lambda spec, rng: (5.0, 4.0, 3.0))
    monkeypatch.setattr(sim, "sample_rir", lambda *a, **k: None)
    p, trials = 0.4, 10_000
    cfg = SimulationConfig(probability=p)
    hits = sum(plan_simulation(1, cfg, utterance_rng(5, i)).rirs is not None
               for i in range(trials))
    z = abs(hits / trials - p) / math.sqrt(p * (1 - p) / trials)

    ok = conv_err <= 1e-6 and snr_err <= 1e-6 and max(t60_dev.values()) <= 0.2 and z <= 3
    dev = ", ".join(f"{k}s {v:.1%}" for k, v in t60_dev.items())
    verdict(capsys, 5, ok, f"conv err {conv_err:.1e}; SNR err {snr_err:.1e} dB; worst T60 "
                           f"deviation {dev}; simulation rate {hits / trials:.4f} "
                           f"({z:.2f} sigma)")


# shared desk-corpus setup -----------------------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    corpus = make_desk_corpus(CorpusConfig())
    tm, inv = corpus.tm, corpus.inventory
    feats = {u.id: extract_features(u.wave) for u in corpus.all()}
    train = {u.id: feats[u.id] for u in corpus.train}
    test = {u.id: feats[u.id] for u in corpus.test}
    alis = {u.id: u.alignment for u in corpus.all()}
    targets = {u: tm.pdfs(alis[u]) for u in train}
    model = AcousticModel(80, tm.num_pdfs, (512, 512), 5, seed=0)
    prior = estimate_prior([alis[u] for u in train], tm)
    accs = []
    train_ce(model, train, targets, CEConfig(),
             on_epoch=lambda epoch, opt: accs.append(frame_accuracy(model, train, targets)))
    graph = CompiledGraph(build_decoding_graph(inv.lexicon_fst(), inv.grammar_fst(), tm), tm)
    linear = {u.id: CompiledGraph(build_linear_graph(u.words, inv.lexicon_fst(), tm, inv.words),
                                  tm) for u in corpus.train}
    refs = {u.id: inv.words.ids(u.words) for u in corpus.test}
    return {"corpus": corpus, "tm": tm, "model": model, "prior": prior, "train": train,
            "test": test, "alis": alis, "graph": graph, "linear": linear, "refs": refs,
            "ce_accs": accs, "ids": [u.id for u in corpus.train],
            "setup_seconds": time.perf_counter() - t0}


def se_grad_fn(desk, cfg: SEConfig, losses=None):
    state = SEWorkerState(desk["tm"], desk["prior"], desk["graph"], desk["train"],
                          desk["alis"], desk["linear"])
    ids = desk["ids"]

    def grad_fn(model, indices):
        times = PhaseTimes()
        utts = [ids[int(i)] for i in indices]
        grads, results = se_batch_grad(model, state, utts, cfg, times)
        used = [r for r in results if r.skipped is None]
        if losses is not None:
            losses.extend(r.loss for r in used)
        return grads, {"loss_sum": sum(r.loss for r in used), "loss_count": len(used),
                       "utterances": len(utts),
                       "audio_seconds": sum(r.frames for r in results) * FRAME_SECONDS,
                       "skipped": len(results) - len(used), "phases": times.as_dict()}

    return grad_fn


# 6. allreduce ----------------------------------------------------------------------------

def test_criterion_6_allreduce_and_data_parallel_equivalence(capsys, desk):
    rng = np.random.default_rng(106)
    worst = 0.0
    for W in (1, 2, 3, 4):
        bufs = [rng.standard_normal(10_007) for _ in range(W)]
        ref = bufs[0].copy()
        for b in bufs[1:]:
            ref = ref + b
        ref /= W
        for fn in (allreduce_threads, allreduce_processes):
            worst = max(worst, max(float(np.abs(o - ref).max()) for o in fn(bufs)))

    cfg = SEConfig("mmi", lr=1e-4)
    grad_fn = se_grad_fn(desk, cfg)
    plan2 = plan_batches(desk["ids"], 2, 2, 10, seed=6)
    plan1 = plan2.reshape(10, 1, 4)
    init = desk["model"].flat_params()
    finals = []
    for plan, mode in ((plan1, "thread"), (plan2, "process")):
        model = desk["model"].copy()
        model, _ = train_parallel(model, lambda: SGD(cfg.lr), grad_fn, plan, mode)
        finals.append(model.flat_params())
    diff = float(np.abs(finals[0] - finals[1]).max())
    moved = float(np.abs(finals[0] - init).max())
    ok = worst <= 1e-12 and diff <= 1e-9 and moved > 1e-6
    verdict(capsys, 6, ok, f"allreduce max err {worst:.1e} for W=1..4; W=2 vs W=1 doubled "
                           f"batch after 10 SE steps: max param diff {diff:.1e} "
                           f"(params moved {moved:.1e})")


# 7. end to end ------------------------------------------------------------------------------

def test_criterion_7_end_to_end_ce_then_mmi(capsys, desk):
    t0 = time.perf_counter()
    ce_acc = desk["ce_accs"][-1]
    epochs_to_90 = next((k + 1 for k, a in enumerate(desk["ce_accs"]) if a >= 0.9), None)
    opts = DecoderOptions()
    ce_report = evaluate(desk["model"], desk["prior"], desk["graph"], desk["tm"], desk["test"],
                         desk["refs"], opts)
    cfg = SEConfig("mmi", "static", lr=1e-6, ce_weight=0.1)
    model = desk["model"].copy()
    plan = plan_batches(desk["ids"], 1, 4, 200, seed=0)
    model, stats = train_parallel(model, lambda: SGD(cfg.lr), se_grad_fn(desk, cfg), plan,
                                  "thread")
    mmi_report = evaluate(model, desk["prior"], desk["graph"], desk["tm"], desk["test"],
                          desk["refs"], opts)
    total = desk["setup_seconds"] + time.perf_counter() - t0
    ok = (epochs_to_90 is not None and mmi_report.errors < ce_report.errors
          and total <= 15 * 60)
    verdict(capsys, 7, ok,
            f"CE train frame acc {ce_acc:.3f} (>=0.90 after epoch {epochs_to_90}); "
            f"test TER CE {ce_report.token_error_rate:.4f} ({ce_report.errors}/"
            f"{ce_report.tokens}) -> MMI {mmi_report.token_error_rate:.4f} "
            f"({mmi_report.errors}/{mmi_report.tokens}) after {stats.steps} steps at lr 1e-6; "
            f"runtime {total:.0f} s on {len(os.sched_getaffinity(0))} core(s)")


# 8. throughput -----------------------------------------------------------------------------

def test_criterion_8_throughput(capsys, desk):
    cfg = SEConfig("mmi")
    grad_fn = se_grad_fn(desk, cfg)
    frames = {u: len(f) for u, f in desk["train"].items()}
    irtf, exact = {}, True
    for W in (1, 4):
        plan = plan_batches(desk["ids"], W, 4, 2, seed=8)
        _, stats = train_parallel(desk["model"].copy(), lambda: SGD(cfg.lr), grad_fn, plan,
                                  "process")
        audio = sum(frames[desk["ids"][int(i)]] for i in plan.ravel()) * FRAME_SECONDS
        exact &= math.isclose(stats.audio_seconds, audio, rel_tol=1e-12)
        exact &= stats.irtf == (stats.audio_seconds / 3600.0) / (stats.wall_seconds / 3600.0)
        irtf[W] = stats.irtf
    cores = len(os.sched_getaffinity(0))
    detail = (f"iRTF W=1 {irtf[1]:.2f}, W=4 {irtf[4]:.2f} (ratio {irtf[4] / irtf[1]:.2f}); "
              f"reported iRTF equals audio hours / wall hours: {exact}")
    if not exact:
        verdict(capsys, 8, False, detail)
    if cores < 4:
        with capsys.disabled():
            print(f"\n[criterion 8] UNVERIFIED {detail}; the speed-up direction needs a "
                  f">=4-core host and this one has {cores}", flush=True)
        pytest.skip(f"speed-up direction needs >=4 cores, host has {cores}")
    verdict(capsys, 8, irtf[4] > irtf[1], detail)


# 9. dynamic alignment ----------------------------------------------------------------------

def test_criterion_9_dynamic_alignment_stability(capsys, desk):
    cfg = SEConfig("mmi", "dynamic", lr=1e-6)
    reg = cfg.regularizers
    assert (reg.ce_weight, reg.l2_weight) == (0.4, 0.001)
    losses = []
    step_losses = []
    model = desk["model"].copy()
    plan = plan_batches(desk["ids"], 1, 4, 200, seed=9)
    model, stats = train_parallel(
        model, lambda: SGD(cfg.lr, reg.l2_weight), se_grad_fn(desk, cfg, losses), plan,
        "thread", on_step=lambda step, st, m: step_losses.append(st.step_loss))
    finite = (all(math.isfinite(v) for v in losses + step_losses)
              and np.isfinite(model.flat_params()).all())
    ok = stats.steps >= 200 and finite
    verdict(capsys, 9, ok, f"{stats.steps} steps, {len(losses)} utterance losses all finite: "
                           f"{finite}; {stats.skipped} skipped; mean step loss first 10 "
                           f"{np.mean(step_losses[:10]):.2f}, last 10 "
                           f"{np.mean(step_losses[-10:]):.2f}")
