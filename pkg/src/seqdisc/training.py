"""Cross-entropy and sequence-training steps shared by the CLI and the workers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import MinibatchCE, make_ce_batches
from .decode import CompiledGraph, DecoderOptions, align, decode
from .errors import DecodeError, NumericError
from .graph.hmm import TransitionModel
from .nnet import (Adam, AcousticModel, PriorVector, SGD, ce_loss_and_grad, compute_log_likes,
                   step_decay_lr)
from .seqcrit import Criterion, RegularizerConfig, combine_with_regularizers, lattice_forward_backward

log = logging.getLogger(__name__)

FRAME_SECONDS = 0.01


# cross-entropy ---------------------------------------------------------------------

@dataclass
class CEConfig:
    epochs: int = 8
    lr: float = 2e-4
    decay_from: int = 4
    batch_size: int = 16
    chunk: int = 80
    seed: int = 0


def ce_batch_grad(model: AcousticModel, batch: MinibatchCE):
    log_post, cache = model.forward(batch.inputs, spliced=True)
    loss, grad = ce_loss_and_grad(log_post, batch.targets)
    correct = int(np.sum(np.argmax(log_post, axis=1) == batch.targets))
    return loss, model.backward(cache, grad), correct


def train_ce(model: AcousticModel, features: Mapping[str, np.ndarray],
             targets: Mapping[str, np.ndarray], cfg: CEConfig = CEConfig(),
             optimizer: Adam | None = None, start_epoch: int = 1,
             on_step: Callable[[int, float, float], None] | None = None,
             on_epoch: Callable[[int, Adam], None] | None = None) -> Adam:
    """Adam over shuffled 80-frame chunks with a per-epoch step-decayed learning rate.

    Epochs are 1-based; ``start_epoch`` > 1 resumes a run whose optimizer
    state is passed in.
    """
    opt = optimizer or Adam(cfg.lr)
    for epoch in range(start_epoch, cfg.epochs + 1):
        opt.lr = step_decay_lr(epoch, cfg.lr, cfg.decay_from)
        rng = np.random.default_rng([cfg.seed, epoch])
        t0 = time.perf_counter()
        for batch in make_ce_batches(features, targets, cfg.batch_size, rng, cfg.chunk,
                                     model.context):
            loss, grads, correct = ce_batch_grad(model, batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite CE loss at step {opt.step_count + 1}")
            opt.step(model.params, grads)
            if on_step:
                on_step(opt.step_count, loss, correct / len(batch.targets))
        log.info("epoch %d lr %.3g done in %.1fs", epoch, opt.lr, time.perf_counter() - t0)
        if on_epoch:
            on_epoch(epoch, opt)
    return opt


def frame_accuracy(model: AcousticModel, features: Mapping[str, np.ndarray],
                   targets: Mapping[str, np.ndarray]) -> float:
    correct = total = 0
    for utt, feats in features.items():
        log_post, _ = model.forward(feats)
        correct += int(np.sum(np.argmax(log_post, axis=1) == targets[utt]))
        total += len(feats)
    return correct / total


# sequence training ---------------------------------------------------------------

@dataclass
class SEConfig:
    criterion: str = "mmi"
    alignment: str = "static"
    lr: float = 1e-6
    kappa: float = 0.1
    ce_weight: float | None = None
    l2_weight: float | None = None
    beam: float = 16.0
    lattice_beam: float = 8.0
    max_active: int = 7000
    align_beam: float = 64.0

    def __post_init__(self):
        Criterion(self.criterion)
        if self.alignment not in ("static", "dynamic"):
            raise ValueError(f"alignment must be static or dynamic, not {self.alignment!r}")

    @property
    def regularizers(self) -> RegularizerConfig:
        base = RegularizerConfig.for_alignment(self.alignment)
        return RegularizerConfig(base.ce_weight if self.ce_weight is None else self.ce_weight,
                                 base.l2_weight if self.l2_weight is None else self.l2_weight)

    @property
    def decoder_options(self) -> DecoderOptions:
        return DecoderOptions(self.beam, self.lattice_beam, self.max_active, self.kappa)

    @property
    def align_options(self) -> DecoderOptions:
        return DecoderOptions(self.align_beam, 0.0, np.inf, self.kappa)


@dataclass
class PhaseTimes:
    forward: float = 0.0
    decode: float = 0.0
    align: float = 0.0
    forward_backward: float = 0.0
    backward: float = 0.0
    allreduce: float = 0.0

    def add(self, other: "PhaseTimes") -> None:
        for k in vars(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


@dataclass
class UttResult:
    utt: str
    loss: float
    objective: float
    frames: int
    skipped: str | None = None


@dataclass
class SEWorkerState:
    """Per-worker data the SE step needs; shared read-only except ``last_alignment``."""

    tm: TransitionModel
    prior: PriorVector
    graph: CompiledGraph
    features: Mapping[str, np.ndarray]
    alignments: Mapping[str, np.ndarray]
    linear_graphs: Mapping[str, CompiledGraph] = field(default_factory=dict)
    last_alignment: dict[str, np.ndarray] = field(default_factory=dict)


def se_utterance(model: AcousticModel, state: SEWorkerState, utt: str, cfg: SEConfig,
                 times: PhaseTimes):
    """Loss and parameter gradients for one utterance, or ``None`` grads if skipped."""
    feats = state.features[utt]
    t0 = time.perf_counter()
    log_post, cache = model.forward(feats)
    if not np.isfinite(log_post).all():
        raise NumericError(f"utt {utt}: non-finite network output")
    ll = compute_log_likes(log_post, state.prior)
    t1 = time.perf_counter()
    times.forward += t1 - t0
    try:
        lat = decode(state.graph, ll, state.tm, cfg.decoder_options).lattice
    except DecodeError as exc:
        times.decode += time.perf_counter() - t1
        log.warning("utt %s: lattice generation failed (%s); skipped", utt, exc.reason)
        return UttResult(utt, 0.0, 0.0, len(feats), "decode"), None
    t2 = time.perf_counter()
    times.decode += t2 - t1
    if cfg.alignment == "dynamic":
        try:
            ali = align(state.linear_graphs[utt], ll, state.tm, cfg.align_options)
            state.last_alignment[utt] = ali
        except DecodeError as exc:
            ali = state.last_alignment.get(utt)
            if ali is None:
                log.warning("utt %s: alignment failed (%s), no earlier alignment; skipped",
                            utt, exc.reason)
                times.align += time.perf_counter() - t2
                return UttResult(utt, 0.0, 0.0, len(feats), "align"), None
            log.warning("utt %s: alignment failed (%s); reusing previous alignment",
                        utt, exc.reason)
    else:
        ali = state.alignments[utt]
    t3 = time.perf_counter()
    times.align += t3 - t2
    seq = lattice_forward_backward(state.tm, ll, lat, ali, cfg.criterion, cfg.kappa)
    ce_loss, ce_grad = ce_loss_and_grad(log_post, state.tm.pdfs(ali), reduction="sum")
    reg = cfg.regularizers
    frame_grad, _ = combine_with_regularizers(seq, ce_grad, reg)
    t4 = time.perf_counter()
    times.forward_backward += t4 - t3
    grads = model.backward(cache, frame_grad)
    times.backward += time.perf_counter() - t4
    loss = seq.loss + reg.ce_weight * ce_loss
    if not np.isfinite(loss):
        raise NumericError(f"utt {utt}: non-finite sequence loss")
    return UttResult(utt, loss, seq.objective, len(feats)), grads


def se_batch_grad(model: AcousticModel, state: SEWorkerState, utts: Sequence[str],
                  cfg: SEConfig, times: PhaseTimes | None = None):
    """Mean over the batch's non-skipped utterances of per-utterance gradients."""
    times = times if times is not None else PhaseTimes()
    total = [np.zeros_like(p) for p in model.params]
    results = []
    used = 0
    for utt in utts:
        res, grads = se_utterance(model, state, utt, cfg, times)
        results.append(res)
        if grads is None:
            continue
        used += 1
        for acc, g in zip(total, grads):
            acc += g
    if used:
        for acc in total:
            acc /= len(utts)
    return total, results


def make_sgd(cfg: SEConfig) -> SGD:
    return SGD(cfg.lr, weight_decay=cfg.regularizers.l2_weight)


# evaluation ---------------------------------------------------------------------

def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    d = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, 1):
        prev, d[0] = d[0], i
        for j, h in enumerate(hyp, 1):
            prev, d[j] = d[j], min(d[j] + 1, d[j - 1] + 1, prev + (r != h))
    return int(d[-1])


@dataclass
class DecodeReport:
    errors: int
    tokens: int
    failures: int
    hyps: dict[str, list[int]]

    @property
    def token_error_rate(self) -> float:
        return self.errors / max(1, self.tokens)


def evaluate(model: AcousticModel, prior: PriorVector, graph: CompiledGraph,
             tm: TransitionModel, features: Mapping[str, np.ndarray],
             references: Mapping[str, Sequence[int]],
             opts: DecoderOptions = DecoderOptions()) -> DecodeReport:
    """Word-level token errors of 1-best decoding; failed utterances count as all-deleted."""
    errors = tokens = failures = 0
    hyps = {}
    for utt, feats in features.items():
        ll = compute_log_likes(model.forward(feats)[0], prior)
        ref = list(references[utt])
        try:
            hyp = decode(graph, ll, tm, opts).words
        except DecodeError:
            failures += 1
            hyp = []
        hyps[utt] = hyp
        errors += edit_distance(ref, hyp)
        tokens += len(ref)
    return DecodeReport(errors, tokens, failures, hyps)


def check_finite(values: Iterable[float], what: str) -> None:
    for v in values:
        if not np.isfinite(v):
            raise NumericError(f"non-finite {what}")


__all__ = ["CEConfig", "DecodeReport", "PhaseTimes", "SEConfig", "SEWorkerState",
           "UttResult", "ce_batch_grad", "edit_distance", "evaluate", "frame_accuracy",
           "make_sgd", "se_batch_grad", "se_utterance", "train_ce", "FRAME_SECONDS"]
