"""Synthetic desk-scale corpus with exact alignments, plus minibatch assembly.

Each pdf gets a fixed spectral prototype (a few partials plus a band of
noise).  An utterance is a word sequence drawn from a bigram grammar,
per-state durations drawn through the HMM self-loops, and a waveform that
plays the prototype of the pdf active at every frame.  Speakers warp the
frequency axis slightly, and white noise is added on top.
"""

from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import Waveform
from .errors import DataError, FormatError, UnknownSymbolError
from .frontend import FbankConfig
from .graph.fst import Fst
from .graph.hmm import HmmTopology, TransitionModel
from .graph.lexicon import bigram_grammar, build_lexicon_fst
from .graph.symbols import SymbolTable

PHONE_NAMES = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class CorpusConfig:
    num_phones: int = 10
    num_words: int = 20
    word_phones: tuple[int, int] = (2, 4)
    successors: int = 20
    end_prob: float = 0.2
    num_train: int = 100
    num_test: int = 20
    duration_s: tuple[float, float] = (1.0, 3.0)
    sample_rate: int = 16000
    num_speakers: int = 8
    warp_range: tuple[float, float] = (0.94, 1.06)
    snr_db: float = 4.0
    partials: int = 3
    self_loop_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_phones <= len(PHONE_NAMES):
            raise ValueError(f"num_phones must be in 1..{len(PHONE_NAMES)}")
        lo, hi = self.word_phones
        if not 1 <= lo <= hi:
            raise ValueError("bad word_phones range")
        if self.num_words > self.num_phones ** hi:
            raise ValueError("not enough distinct pronunciations for the vocabulary")


@dataclass(frozen=True)
class Inventory:
    """Phones, words, lexicon and grammar of a synthetic language."""

    phones: SymbolTable
    words: SymbolTable
    lexicon: list[tuple[str, tuple[str, ...]]]
    unigram: dict[str, float]
    bigram: dict[str, dict[str, float]]
    end_prob: float
    tm: TransitionModel

    def lexicon_fst(self) -> Fst:
        return build_lexicon_fst(self.lexicon, self.phones, self.words)

    def grammar_fst(self) -> Fst:
        return bigram_grammar(self.words, self.unigram, self.bigram, self.end_prob)

    def pronunciation(self, word: str) -> tuple[str, ...]:
        for w, pron in self.lexicon:
            if w == word:
                return pron
        raise UnknownSymbolError(word, "lexicon")

    def to_dict(self) -> dict:
        return {"phones": self.phones.non_epsilon(), "words": self.words.non_epsilon(),
                "lexicon": [[w, list(p)] for w, p in self.lexicon], "unigram": self.unigram,
                "bigram": self.bigram, "end_prob": self.end_prob, "tm": self.tm.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Inventory":
        return cls(SymbolTable(d["phones"], "phones"), SymbolTable(d["words"], "words"),
                   [(w, tuple(p)) for w, p in d["lexicon"]], d["unigram"], d["bigram"],
                   d["end_prob"], TransitionModel.from_dict(d["tm"]))


def make_inventory(cfg: CorpusConfig, rng: np.random.Generator) -> Inventory:
    phone_names = list(PHONE_NAMES[:cfg.num_phones])
    phones = SymbolTable(phone_names, "phones")
    prons: list[tuple[str, ...]] = []
    while len(prons) < cfg.num_words:
        n = int(rng.integers(cfg.word_phones[0], cfg.word_phones[1] + 1))
        pron = tuple(phone_names[k] for k in rng.integers(0, cfg.num_phones, n))
        if pron not in prons:
            prons.append(pron)
    lexicon = [("".join(p), p) for p in prons]
    words = SymbolTable([w for w, _ in lexicon], "words")
    names = [w for w, _ in lexicon]
    unigram = {w: 1.0 for w in names}
    bigram = {}
    k = min(cfg.successors, len(names))
    for w in names:
        succ = rng.choice(len(names), size=k, replace=False)
        bigram[w] = {names[int(j)]: 1.0 for j in sorted(succ)}
    tm = TransitionModel(list(range(1, cfg.num_phones + 1)), HmmTopology(3, cfg.self_loop_prob))
    return Inventory(phones, words, lexicon, unigram, bigram, cfg.end_prob, tm)


def sample_sentence(inv: Inventory, rng: np.random.Generator, min_words: int = 1,
                    max_words: int = 100) -> list[str]:
    """Walk the bigram until a stop is drawn (not before ``min_words``)."""
    names = list(inv.unigram)
    probs = np.array([inv.unigram[w] for w in names], dtype=float)
    sent = [names[int(rng.choice(len(names), p=probs / probs.sum()))]]
    while len(sent) < max_words:
        succ = inv.bigram.get(sent[-1], {})
        if not succ or (len(sent) >= min_words and rng.random() < inv.end_prob):
            break
        cand = list(succ)
        p = np.array([succ[w] for w in cand], dtype=float)
        sent.append(cand[int(rng.choice(len(cand), p=p / p.sum()))])
    return sent


def sample_alignment(inv: Inventory, sentence: Sequence[str],
                     rng: np.random.Generator) -> np.ndarray:
    """Geometric state durations: each extra frame is a self-loop taken with its probability."""
    tids: list[int] = []
    for word in sentence:
        for ph in inv.pronunciation(word):
            phone = inv.phones.id(ph)
            topo_p = inv.tm.tid_cost[inv.tm.self_loop_tid(phone, 0)]
            stay = float(np.exp(-topo_p))
            durs = rng.geometric(1.0 - stay, size=inv.tm.num_states(phone))
            tids += inv.tm.durations_to_tids(phone, [int(d) for d in durs])
    return np.array(tids, dtype=np.int64)


# waveform synthesis -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PdfPrototypes:
    """Per-pdf partial frequencies/amplitudes and a noise band."""

    freqs: np.ndarray      # (P, K) Hz
    amps: np.ndarray       # (P, K)
    bands: np.ndarray      # (P, 2) Hz
    band_gain: np.ndarray  # (P,)

    @classmethod
    def random(cls, num_pdfs: int, rng: np.random.Generator, partials: int = 3,
               rate: int = 16000) -> "PdfPrototypes":
        lo, hi = np.log(150.0), np.log(0.4 * rate)
        freqs = np.exp(rng.uniform(lo, hi, size=(num_pdfs, partials)))
        amps = rng.uniform(0.3, 1.0, size=(num_pdfs, partials))
        centre = np.exp(rng.uniform(lo, np.log(0.3 * rate), size=num_pdfs))
        width = rng.uniform(0.2, 0.6, size=num_pdfs)
        bands = np.stack([centre * (1 - width / 2), centre * (1 + width / 2)], axis=1)
        return cls(freqs, amps, bands, rng.uniform(0.1, 0.5, size=num_pdfs))


def sample_owners(num_frames: int, num_samples: int, hop: int, win: int) -> np.ndarray:
    """Frame index owning each sample: the frame whose window centre is nearest."""
    centres = np.arange(num_frames) * hop + win / 2.0
    n = np.arange(num_samples) + 0.5
    return np.clip(np.round((n - centres[0]) / hop).astype(np.int64), 0, num_frames - 1)


def synthesize(pdfs: np.ndarray, protos: PdfPrototypes, rng: np.random.Generator,
               warp: float = 1.0, snr_db: float = 20.0, rate: int = 16000,
               fbank: FbankConfig = FbankConfig()) -> Waveform:
    """Waveform whose log-mel frames follow the pdf sequence one-to-one."""
    pdfs = np.asarray(pdfs)
    hop, win = fbank.hop_samples(rate), fbank.window_samples(rate)
    N = fbank.num_samples(len(pdfs), rate)
    owner_pdf = pdfs[sample_owners(len(pdfs), N, hop, win)]
    t = np.arange(N) / rate
    x = np.zeros(N)
    for p in np.unique(pdfs):
        n = np.flatnonzero(owner_pdf == p)
        f = np.minimum(protos.freqs[p] * warp, 0.45 * rate)
        phase = rng.uniform(0, 2 * np.pi, size=len(f))
        x[n] = (protos.amps[p][:, None]
                * np.sin(2 * np.pi * f[:, None] * t[n] + phase[:, None])).sum(axis=0)
        lo, hi = np.clip(protos.bands[p] * warp, 50.0, 0.45 * rate)
        sos = _bandpass(round(lo, 3), round(hi, 3), rate)
        x[n] += sosfilt(sos, rng.standard_normal(len(n))) * protos.band_gain[p] * 4.0
    sig_pow = np.mean(x ** 2)
    x += rng.standard_normal(N) * np.sqrt(sig_pow / 10 ** (snr_db / 10.0))
    x *= 0.1 / (np.max(np.abs(x)) + 1e-12)
    return Waveform(x[None, :], rate)


@lru_cache(maxsize=4096)
def _bandpass(lo: float, hi: float, rate: int) -> np.ndarray:
    return butter(4, [lo, hi], btype="bandpass", fs=rate, output="sos")


# corpus generation -------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    words: list[str]
    alignment: np.ndarray
    speaker: str
    wave: Waveform | None = field(default=None, repr=False)

    @property
    def num_frames(self) -> int:
        return len(self.alignment)


@dataclass
class DeskCorpus:
    config: CorpusConfig
    inventory: Inventory
    prototypes: PdfPrototypes
    train: list[Utterance]
    test: list[Utterance]

    @property
    def tm(self) -> TransitionModel:
        return self.inventory.tm

    def all(self) -> list[Utterance]:
        return self.train + self.test


def generate_corpus(inv: Inventory, n_utts: int, rng: np.random.Generator,
                    protos: PdfPrototypes, cfg: CorpusConfig = CorpusConfig(),
                    prefix: str = "utt", speakers: Sequence[tuple[str, float]] | None = None,
                    synth: bool = True) -> list[Utterance]:
    """Sample ``n_utts`` utterances with exact alignments and (optionally) audio."""
    for _, pron in inv.lexicon:
        for ph in pron:
            inv.phones.id(ph)
    if speakers is None:
        speakers = [(f"spk{k}", float(rng.uniform(*cfg.warp_range)))
                    for k in range(cfg.num_speakers)]
    frame_rate = FbankConfig().frame_rate
    out = []
    for i in range(n_utts):
        target = rng.uniform(*cfg.duration_s) * frame_rate
        sent: list[str] = []
        ali = np.zeros(0, dtype=np.int64)
        # grow the sentence word by word until it reaches the drawn duration
        while len(ali) < target:
            nxt = sample_sentence(inv, rng, max_words=1) if not sent else \
                _next_word(inv, sent[-1], rng)
            sent += nxt
            ali = np.concatenate([ali, sample_alignment(inv, nxt, rng)])
        spk, warp = speakers[i % len(speakers)]
        utt = Utterance(f"{prefix}{i:04d}", sent, ali, spk)
        if synth:
            utt.wave = synthesize(inv.tm.pdfs(ali), protos, rng, warp, cfg.snr_db, cfg.sample_rate)
        out.append(utt)
    return out


def _next_word(inv: Inventory, prev: str, rng: np.random.Generator) -> list[str]:
    succ = inv.bigram[prev]
    cand = list(succ)
    p = np.array([succ[w] for w in cand], dtype=float)
    return [cand[int(rng.choice(len(cand), p=p / p.sum()))]]


def make_desk_corpus(cfg: CorpusConfig = CorpusConfig(), synth: bool = True) -> DeskCorpus:
    """The seeded default corpus: one inventory, disjoint train and test draws."""
    root = np.random.SeedSequence(cfg.seed)
    inv_ss, proto_ss, train_ss, test_ss, spk_ss = root.spawn(5)
    inv = make_inventory(cfg, np.random.default_rng(inv_ss))
    protos = PdfPrototypes.random(inv.tm.num_pdfs, np.random.default_rng(proto_ss),
                                  cfg.partials, cfg.sample_rate)
    spk_rng = np.random.default_rng(spk_ss)
    speakers = [(f"spk{k}", float(spk_rng.uniform(*cfg.warp_range)))
                for k in range(cfg.num_speakers)]
    train = generate_corpus(inv, cfg.num_train, np.random.default_rng(train_ss), protos, cfg,
                            "train", speakers, synth)
    test = generate_corpus(inv, cfg.num_test, np.random.default_rng(test_ss), protos, cfg,
                           "test", speakers, synth)
    return DeskCorpus(cfg, inv, protos, train, test)


# manifests and alignment archives ------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    wav: str
    text: str
    dur: float
    spk: str

    @property
    def words(self) -> list[str]:
        return self.text.split()


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    records = list(records)
    check_manifest(records)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(ManifestRecord(str(d["id"]), str(d["wav"]), str(d["text"]),
                                              float(d["dur"]), str(d["spk"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"bad manifest record: {exc}", lineno) from None
    check_manifest(records)
    return records


def check_manifest(records: Sequence[ManifestRecord]) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"duplicate utterance id {r.id!r}")
        seen.add(r.id)
        if not r.dur > 0:
            raise DataError(f"utterance {r.id!r} has non-positive duration")
        if not r.text.split():
            raise DataError(f"utterance {r.id!r} has an empty transcript")


def write_alignments(path: str | Path, alignments: Mapping[str, Sequence[int]]) -> None:
    with open(path, "w") as f:
        for utt, ali in alignments.items():
            f.write(utt + " " + " ".join(str(int(t)) for t in ali) + "\n")


def read_alignments(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                out[parts[0]] = np.array([int(x) for x in parts[1:]], dtype=np.int64)
            except ValueError:
                raise FormatError("non-integer transition-id", lineno) from None
    return out


# minibatches -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MinibatchCE:
    """Equal-length chunks, already spliced, flattened chunk-major."""

    inputs: np.ndarray    # (B * chunk, D * (2 * context + 1))
    targets: np.ndarray   # (B * chunk,) pdf-ids
    utts: tuple[str, ...]
    starts: tuple[int, ...]
    chunk: int

    @property
    def num_chunks(self) -> int:
        return len(self.utts)


@dataclass(frozen=True)
class Chunk:
    utt: str
    start: int
    length: int   # real frames; a short tail is filled by repeating them

    def frames(self, chunk: int) -> np.ndarray:
        return self.start + np.arange(chunk) % self.length


def plan_ce_chunks(lengths: Mapping[str, int], chunk: int = 80,
                   min_tail: int | None = None) -> list[Chunk]:
    """Cut utterances into back-to-back chunks; short tails go, long ones get padded."""
    min_tail = chunk // 2 if min_tail is None else min_tail
    out = []
    for utt, T in lengths.items():
        for start in range(0, T, chunk):
            n = min(chunk, T - start)
            if n == chunk or n >= min_tail:
                out.append(Chunk(utt, start, n))
    return out


def make_ce_batches(features: Mapping[str, np.ndarray], targets: Mapping[str, np.ndarray],
                    batch_size: int, rng: np.random.Generator, chunk: int = 80,
                    context: int = 5, chunks: Sequence[Chunk] | None = None,
                    ) -> Iterator[MinibatchCE]:
    """One epoch of shuffled CE minibatches of ``batch_size`` chunks.

    Splicing uses each frame's true neighbours in its utterance, so a chunk
    sees exactly what a whole-utterance forward pass would.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for utt, feats in features.items():
        if utt not in targets:
            raise DataError(f"no alignment for utterance {utt!r}")
        if len(targets[utt]) != len(feats):
            raise DataError(f"utterance {utt!r}: {len(feats)} frames but "
                            f"{len(targets[utt])} targets")
    if chunks is None:
        chunks = plan_ce_chunks({u: len(f) for u, f in features.items()}, chunk)
    offsets = np.arange(-context, context + 1)
    order = rng.permutation(len(chunks))
    for b in range(0, len(order), batch_size):
        sel = [chunks[int(k)] for k in order[b:b + batch_size]]
        inputs, tgts = [], []
        for c in sel:
            feats = features[c.utt]
            frames = c.frames(chunk)
            idx = np.clip(frames[:, None] + offsets, 0, len(feats) - 1)
            inputs.append(feats[idx].reshape(chunk, -1))
            tgts.append(np.asarray(targets[c.utt])[frames])
        yield MinibatchCE(np.concatenate(inputs).astype(np.float64), np.concatenate(tgts),
                          tuple(c.utt for c in sel), tuple(c.start for c in sel), chunk)


@dataclass(frozen=True, eq=False)
class MinibatchSE:
    utts: tuple[str, ...]
    feats: tuple[np.ndarray, ...]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(f) for f in self.feats])

    @property
    def max_length(self) -> int:
        return int(self.lengths.max())

    def padded(self) -> np.ndarray:
        """(B, max_length, D) with zero padding after each utterance."""
        out = np.zeros((len(self.feats), self.max_length, self.feats[0].shape[1]))
        for k, f in enumerate(self.feats):
            out[k, :len(f)] = f
        return out


def group_by_length(lengths: Mapping[str, int], batch_size: int) -> list[list[str]]:
    """Sort by (length, id) and cut into contiguous groups of ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sorted(lengths, key=lambda u: (lengths[u], u))
    return [order[k:k + batch_size] for k in range(0, len(order), batch_size)]


def make_se_batches(features: Mapping[str, np.ndarray], batch_size: int) -> list[MinibatchSE]:
    groups = group_by_length({u: len(f) for u, f in features.items()}, batch_size)
    return [MinibatchSE(tuple(g), tuple(features[u] for u in g)) for g in groups]


__all__ = [
    "Chunk", "CorpusConfig", "DeskCorpus", "Inventory", "ManifestRecord", "MinibatchCE",
    "MinibatchSE", "PdfPrototypes", "Utterance", "generate_corpus", "group_by_length",
    "make_ce_batches", "make_desk_corpus", "make_inventory", "make_se_batches",
    "plan_ce_chunks", "read_alignments", "read_manifest", "sample_alignment",
    "sample_sentence", "synthesize", "write_alignments", "write_manifest",
]
