"""Spliced-input MLP acoustic model with hand-written reverse mode.

All training math runs in float64.  The network emits frame log-posteriors
over pdf-ids; ``compute_log_likes`` turns them into pseudo log-likelihoods
by subtracting the log prior.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import DataError, FormatError
from .graph.hmm import TransitionModel


class Splice:
    """Stack frames ``t-c .. t+c``; frames past either edge replicate the boundary frame."""

    kind = "splice"

    def __init__(self, context: int):
        self.context = context
        self.params: list[np.ndarray] = []

    def index(self, T: int, frames: np.ndarray | None = None) -> np.ndarray:
        frames = np.arange(T) if frames is None else np.asarray(frames)
        return np.clip(frames[:, None] + np.arange(-self.context, self.context + 1), 0, T - 1)

    def forward(self, x, frames=None):
        idx = self.index(len(x), frames)
        return x[idx].reshape(len(idx), -1), (idx, x.shape)

    def backward(self, cache, dy):
        idx, shape = cache
        dx = np.zeros(shape)
        np.add.at(dx, idx.ravel(), dy.reshape(idx.size, shape[1]))
        return dx, []

    def spec(self) -> dict:
        return {"kind": self.kind, "context": self.context}


class Affine:
    kind = "affine"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        rng = rng or np.random.default_rng(0)
        self.weight = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        self.bias = np.zeros(out_dim)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, x, dy):
        return dy @ self.weight, [dy.T @ x, dy.sum(axis=0)]

    def spec(self) -> dict:
        return {"kind": self.kind, "in": self.weight.shape[1], "out": self.weight.shape[0]}


class Relu:
    kind = "relu"
    params: list[np.ndarray] = []

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, mask, dy):
        return dy * mask, []

    def spec(self) -> dict:
        return {"kind": self.kind}


class LogSoftmax:
    kind = "logsoftmax"
    params: list[np.ndarray] = []

    def forward(self, x):
        y = log_softmax(x, axis=1)
        return y, y

    def backward(self, y, dy):
        return dy - np.exp(y) * dy.sum(axis=1, keepdims=True), []

    def spec(self) -> dict:
        return {"kind": self.kind}


@dataclass
class AcousticModel:
    """Splice -> (Affine -> ReLU) x hidden -> Affine -> LogSoftmax."""

    input_dim: int
    num_pdfs: int
    hidden: tuple[int, ...] = (512, 512)
    context: int = 5
    seed: int = 0
    layers: list = field(init=False, repr=False)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.layers = [Splice(self.context)]
        dims = [self.input_dim * (2 * self.context + 1), *self.hidden, self.num_pdfs]
        for k in range(len(dims) - 1):
            # one fixed stream per affine layer index
            self.layers.append(Affine(dims[k], dims[k + 1], np.random.default_rng([self.seed, k])))
            self.layers.append(Relu() if k < len(dims) - 2 else LogSoftmax())

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, feats: np.ndarray, spliced: bool = False):
        """Return ``(log_posteriors, cache)``.

        ``feats`` is one utterance (T, input_dim), or with ``spliced=True``
        rows already stacked by ``splice`` (N, input_dim * (2 * context + 1)).
        """
        x = np.asarray(feats, dtype=np.float64)
        width = self.input_dim * (2 * self.context + 1) if spliced else self.input_dim
        if x.ndim != 2 or x.shape[1] != width:
            raise DataError(f"expected features with {width} columns, got {x.shape}")
        caches = [None]
        if not spliced:
            x, c = self.layers[0].forward(x)
            caches[0] = c
        for layer in self.layers[1:]:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def splice(self, feats: np.ndarray, frames: np.ndarray | None = None) -> np.ndarray:
        return self.layers[0].forward(np.asarray(feats, dtype=np.float64), frames)[0]

    def forward_batch(self, utts: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Forward several utterances in one matrix pass; splicing stays per utterance."""
        spliced = [self.splice(u) for u in utts]
        out, _ = self.forward(np.concatenate(spliced), spliced=True)
        return np.split(out, np.cumsum([len(s) for s in spliced])[:-1])

    def backward(self, caches, grad_output: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(output * grad_output)`` w.r.t. every parameter."""
        dy = np.asarray(grad_output, dtype=np.float64)
        grads: list[list[np.ndarray]] = []
        for layer, cache in zip(reversed(self.layers[1:]), reversed(caches[1:])):
            dy, g = layer.backward(cache, dy)
            grads.append(g)
        return [g for layer_grads in reversed(grads) for g in layer_grads]

    def layer_spec(self) -> dict:
        return {"input_dim": self.input_dim, "num_pdfs": self.num_pdfs,
                "hidden": list(self.hidden), "context": self.context, "seed": self.seed,
                "layers": [layer.spec() for layer in self.layers]}

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_params(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.params:
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self) -> "AcousticModel":
        other = AcousticModel(self.input_dim, self.num_pdfs, self.hidden, self.context, self.seed)
        other.set_flat_params(self.flat_params())
        return other


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


# priors and losses -----------------------------------------------------------

PRIOR_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class PriorVector:
    log_prior: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_prior, dtype=np.float64)
        if not np.isfinite(lp).all():
            raise DataError("log prior must be finite")
        object.__setattr__(self, "log_prior", lp)

    @classmethod
    def uniform(cls, num_pdfs: int) -> "PriorVector":
        return cls(np.full(num_pdfs, -math.log(num_pdfs)))


def estimate_prior(alignments: Sequence[Sequence[int]], tm: TransitionModel,
                   alpha: float = 0.5, floor: float = PRIOR_FLOOR) -> PriorVector:
    """Smoothed pdf frequencies: ``(count + alpha) / (total + alpha * P)``, floored."""
    if not alignments:
        raise DataError("no alignments to estimate a prior from")
    counts = np.zeros(tm.num_pdfs)
    for ali in alignments:
        counts += np.bincount(tm.pdfs(ali), minlength=tm.num_pdfs)
    prior = (counts + alpha) / (counts.sum() + alpha * tm.num_pdfs)
    return PriorVector(np.log(np.maximum(prior, floor)))


def compute_log_likes(log_post: np.ndarray, prior: PriorVector) -> np.ndarray:
    if log_post.shape[-1] != len(prior.log_prior):
        raise DataError(f"log-posterior width {log_post.shape[-1]} != prior length "
                        f"{len(prior.log_prior)}")
    return log_post - prior.log_prior


def ce_loss_and_grad(log_post: np.ndarray, targets: np.ndarray, reduction: str = "mean"):
    """Frame cross-entropy against pdf ``targets`` and its gradient w.r.t. ``log_post``.

    Backpropagated through the log-softmax this becomes the familiar
    ``softmax - onehot`` at the logits.  ``reduction="sum"`` skips the
    division by the frame count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    T = len(targets)
    if log_post.shape[0] != T:
        raise DataError(f"{log_post.shape[0]} frames but {T} targets")
    norm = float(T) if reduction == "mean" else 1.0
    picked = log_post[np.arange(T), targets]
    grad = np.zeros_like(log_post)
    grad[np.arange(T), targets] = -1.0 / norm
    return -picked.sum() / norm, grad


def ce_loss_for_alignment(log_post, alignment, tm: TransitionModel, reduction="mean"):
    return ce_loss_and_grad(log_post, tm.pdfs(alignment), reduction)


def frame_accuracy(log_post: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(log_post, axis=1) == np.asarray(targets)))


# optimizers ------------------------------------------------------------------

class SGD:
    kind = "sgd"

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise DataError("parameter/gradient shape mismatch")
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g


class Adam:
    kind = "adam"

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise DataError("parameter/gradient shape mismatch")
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def save_state(self, path: str | Path) -> None:
        arrays = {"step_count": np.array(self.step_count)}
        for k, (m, v) in enumerate(zip(self.m or [], self.v or [])):
            arrays[f"m{k}"], arrays[f"v{k}"] = m, v
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    def load_state(self, path: str | Path, params: Sequence[np.ndarray]) -> None:
        with np.load(path) as d:
            self.step_count = int(d["step_count"])
            if "m0" in d:
                self.m = [d[f"m{k}"].copy() for k in range(len(params))]
                self.v = [d[f"v{k}"].copy() for k in range(len(params))]


def step_decay_lr(epoch: int, base: float = 2e-4, decay_from: int = 4, factor: float = 0.5) -> float:
    """Learning rate for 1-based ``epoch``: constant, then halved every epoch from ``decay_from``."""
    return base * factor ** max(0, epoch - decay_from + 1)


# checkpoints -------------------------------------------------------------------

MODEL_MAGIC = b"NNA1"


def save_checkpoint(path: str | Path, model: AcousticModel, prior: PriorVector,
                    meta: dict | None = None) -> None:
    """Binary checkpoint plus a ``<path>.json`` sidecar with the layer spec."""
    path = Path(path)
    spec = model.layer_spec()
    spec["param_shapes"] = [list(p.shape) for p in model.params]
    spec["meta"] = meta or {}
    blob = json.dumps(spec, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC + struct.pack("<I", len(blob)) + blob)
        for p in model.params:
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(prior.log_prior, dtype="<f8").tobytes())
    path.with_name(path.name + ".json").write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[AcousticModel, PriorVector, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    spec = json.loads(data[8:8 + n])
    model = AcousticModel(spec["input_dim"], spec["num_pdfs"], tuple(spec["hidden"]),
                          spec["context"], spec["seed"])
    offset = 8 + n
    for p, shape in zip(model.params, spec["param_shapes"]):
        size = int(np.prod(shape)) * 8
        p[...] = np.frombuffer(data[offset:offset + size], dtype="<f8").reshape(shape)
        offset += size
    prior = PriorVector(np.frombuffer(data[offset:offset + 8 * model.num_pdfs], dtype="<f8").copy())
    if offset + 8 * model.num_pdfs != len(data):
        raise FormatError(f"{path}: trailing or missing bytes")
    return model, prior, spec.get("meta", {})
