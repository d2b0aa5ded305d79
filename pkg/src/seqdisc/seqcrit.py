"""Lattice forward-backward and the MMI / sMBR / MPE sequence criteria.

An emitting arc at frame t with pdf p has log-score
``kappa * ll[t, p] - graph_wt``; epsilon arcs contribute ``-graph_wt`` and
final states ``-final_weight``.  The scores are recomputed from the ``ll``
passed in, so stored lattice acoustic costs are ignored.  Returned gradients
are d(-objective)/d(ll): descending them improves the criterion.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DataError
from .graph.hmm import TransitionModel
from .graph.lattice import Lattice, Segments

NEG_INF = -np.inf


class Criterion(str, Enum):
    MMI = "mmi"
    SMBR = "smbr"
    MPE = "mpe"


@dataclass(frozen=True, eq=False)
class SeqLossResult:
    criterion: Criterion
    objective: float
    grad: np.ndarray
    num_occ: np.ndarray
    den_occ: np.ndarray

    @property
    def loss(self) -> float:
        return -self.objective


@dataclass(frozen=True)
class RegularizerConfig:
    ce_weight: float = 0.1
    l2_weight: float = 0.0

    def __post_init__(self):
        if self.ce_weight < 0 or self.l2_weight < 0:
            raise ValueError("regularizer weights must be >= 0")

    @classmethod
    def for_alignment(cls, mode: str) -> "RegularizerConfig":
        """Defaults per alignment mode: static 0.1 / 0, dynamic 0.4 / 0.001."""
        if mode == "static":
            return cls(0.1, 0.0)
        if mode == "dynamic":
            return cls(0.4, 0.001)
        raise ValueError(f"unknown alignment mode {mode!r}")


def _accumulate_logsumexp(values: np.ndarray, seg: Segments, out: np.ndarray) -> None:
    """``out[s] = logsumexp(out[s], values of run s)`` for every run in ``seg``."""
    old = out[seg.states]
    m = np.maximum(np.maximum.reduceat(values, seg.starts), old)
    shift = np.where(np.isfinite(m), m, 0.0)
    total = np.add.reduceat(np.exp(values - shift[seg.run]), seg.starts) + np.exp(old - shift)
    with np.errstate(divide="ignore"):
        out[seg.states] = shift + np.log(total)


def arc_log_scores(lat: Lattice, ll: np.ndarray, tm: TransitionModel, kappa: float) -> np.ndarray:
    emit = lat.tid != 0
    score = -lat.graph_wt.copy()
    frames = lat.state_frames[lat.src[emit]]
    score[emit] += kappa * ll[frames, tm.tid_pdf[lat.tid[emit]]]
    return score


@dataclass(frozen=True, eq=False)
class ForwardBackward:
    alpha: np.ndarray
    beta: np.ndarray
    log_z: float
    gamma: np.ndarray
    score: np.ndarray


def forward_backward(lat: Lattice, ll: np.ndarray, tm: TransitionModel,
                     kappa: float) -> ForwardBackward:
    """Log-domain state alphas/betas and per-arc posteriors over complete paths."""
    ll = np.asarray(ll, dtype=np.float64)
    if lat.num_frames != len(ll):
        raise DataError(f"lattice has {lat.num_frames} frames, log-likelihoods {len(ll)}")
    if ll.ndim != 2 or ll.shape[1] != tm.num_pdfs:
        raise DataError(f"log-likelihoods need {tm.num_pdfs} columns")
    score = arc_log_scores(lat, ll, tm, kappa)
    final = -lat.final_array()
    n = lat.num_states
    alpha = np.full(n, NEG_INF)
    alpha[lat.start] = 0.0
    for arcs, seg in zip(lat.arcs_by_dst_level, lat.dst_segments):
        if len(arcs):
            _accumulate_logsumexp(alpha[lat.src[arcs]] + score[arcs], seg, alpha)
    beta = final.copy()
    for arcs, seg in zip(reversed(lat.arcs_by_src_level), reversed(lat.src_segments)):
        if len(arcs):
            _accumulate_logsumexp(score[arcs] + beta[lat.dst[arcs]], seg, beta)
    log_z = float(beta[lat.start])
    if not np.isfinite(log_z):
        raise DataError("lattice has no complete path")
    gamma = np.exp(alpha[lat.src] + score + beta[lat.dst] - log_z)
    return ForwardBackward(alpha, beta, log_z, gamma, score)


def forward_backward_occupancies(lat: Lattice, ll: np.ndarray, tm: TransitionModel,
                                 kappa: float) -> np.ndarray:
    """Per-arc posterior gamma(arc) = exp(alpha(from) + w + beta(to) - logZ)."""
    return forward_backward(lat, ll, tm, kappa).gamma


def frame_occupancies(lat: Lattice, gamma: np.ndarray, tm: TransitionModel,
                      num_pdfs: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Accumulate arc quantities into a T x P matrix by (frame, pdf).

    Without ``weights`` each frame is renormalised to sum to exactly one,
    which only removes rounding since every complete path crosses one
    emitting arc per frame.
    """
    emit = np.flatnonzero(lat.tid != 0)
    frames = lat.state_frames[lat.src[emit]]
    pdfs = tm.tid_pdf[lat.tid[emit]]
    out = np.zeros((lat.num_frames, num_pdfs))
    vals = gamma[emit] if weights is None else gamma[emit] * weights[emit]
    np.add.at(out, (frames, pdfs), vals)
    if weights is None:
        tot = out.sum(axis=1, keepdims=True)
        out = np.divide(out, tot, out=np.zeros_like(out), where=tot > 0)
    return out


def _expected_accuracy(lat: Lattice, fb: ForwardBackward, acc: np.ndarray):
    """Expected accuracy of paths through each arc, and over all paths.

    The forward and backward arc weights below already sum to one per state
    (the backward ones together with the final weight), so no division.
    """
    n = lat.num_states
    a_acc = np.zeros(n)
    for arcs in lat.arcs_by_dst_level:
        if len(arcs):
            d = lat.dst[arcs]
            w = _exp_diff(fb.alpha[lat.src[arcs]] + fb.score[arcs], fb.alpha[d])
            np.add.at(a_acc, d, w * (a_acc[lat.src[arcs]] + acc[arcs]))
    b_acc = np.zeros(n)
    for arcs in reversed(lat.arcs_by_src_level):
        if len(arcs):
            s = lat.src[arcs]
            w = _exp_diff(fb.score[arcs] + fb.beta[lat.dst[arcs]], fb.beta[s])
            np.add.at(b_acc, s, w * (acc[arcs] + b_acc[lat.dst[arcs]]))
    arc_acc = a_acc[lat.src] + acc + b_acc[lat.dst]
    return arc_acc, float(b_acc[lat.start])


def _exp_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # -inf - -inf marks an unreachable state: no mass
    with np.errstate(invalid="ignore"):
        return np.nan_to_num(np.exp(a - b), nan=0.0)


def arc_accuracy(lat: Lattice, num: np.ndarray, tm: TransitionModel, criterion: Criterion):
    emit = lat.tid != 0
    frames = lat.state_frames[lat.src]
    acc = np.zeros(lat.num_arcs)
    t = frames[emit]
    if criterion is Criterion.SMBR:
        acc[emit] = tm.tid_pdf[lat.tid[emit]] == tm.tid_pdf[num[t]]
    else:
        acc[emit] = tm.tid_phone[lat.tid[emit]] == tm.tid_phone[num[t]]
    return acc


def lattice_forward_backward(tm: TransitionModel, ll: np.ndarray, den_lattice: Lattice,
                             num: Sequence[int], criterion: Criterion | str,
                             kappa: float = 0.1) -> SeqLossResult:
    """Objective and gradient of one utterance's sequence criterion.

    MMI: ``kappa * sum_t ll[t, pdf(num_t)] - log sum_paths exp(score)``,
    the numerator being the acoustic score of the alignment alone.
    sMBR / MPE: expected frame accuracy over lattice paths, comparing pdf-ids
    or phone-ids against the alignment.
    """
    criterion = Criterion(criterion)
    ll = np.asarray(ll, dtype=np.float64)
    num = tm.check_tids(num)
    T = len(num)
    if len(ll) != T:
        raise DataError(f"alignment has {T} frames, log-likelihoods {len(ll)}")
    if den_lattice.num_frames != T:
        raise DataError(f"lattice has {den_lattice.num_frames} frames, alignment {T}")
    if den_lattice.num_arcs == 0:
        raise DataError("empty lattice")
    P = tm.num_pdfs
    num_pdf = tm.tid_pdf[num]
    num_occ = np.zeros((T, P))
    num_occ[np.arange(T), num_pdf] = 1.0
    # summed last-to-first, the order a single-path backward pass uses
    num_score = float(np.cumsum(kappa * ll[np.arange(T), num_pdf][::-1])[-1]) if T else 0.0
    den_fb = forward_backward(den_lattice, ll, tm, kappa)
    den_occ = frame_occupancies(den_lattice, den_fb.gamma, tm, P)

    if criterion is Criterion.MMI:
        objective = num_score - den_fb.log_z
        grad = kappa * (den_occ - num_occ)
    else:
        acc = arc_accuracy(den_lattice, num, tm, criterion)
        arc_acc, mean_acc = _expected_accuracy(den_lattice, den_fb, acc)
        objective = mean_acc
        grad = -kappa * frame_occupancies(den_lattice, den_fb.gamma, tm, P,
                                          weights=arc_acc - mean_acc)
    return SeqLossResult(criterion, float(objective), grad, num_occ, den_occ)


def combine_with_regularizers(seq: SeqLossResult, ce_grad: np.ndarray, reg: RegularizerConfig,
                              params: Sequence[np.ndarray] = ()):
    """Frame gradient ``seq.grad + ce_weight * ce_grad`` and the L2 parameter terms."""
    ce_grad = np.asarray(ce_grad, dtype=np.float64)
    if ce_grad.shape != seq.grad.shape:
        raise DataError(f"CE gradient shape {ce_grad.shape} != sequence gradient {seq.grad.shape}")
    frame = seq.grad + reg.ce_weight * ce_grad if reg.ce_weight else seq.grad.copy()
    l2 = [reg.l2_weight * p for p in params]
    return frame, l2


def dump_occupancies(result: SeqLossResult) -> str:
    """Text matrices of numerator and denominator occupancies for debugging."""
    lines = []
    for name, mat in (("num", result.num_occ), ("den", result.den_occ)):
        lines.append(f"# {name} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(f"{v:.6g}" for v in row) for row in mat)
    return "\n".join(lines) + "\n"
