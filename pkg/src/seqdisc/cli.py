"""Command-line tools: prep, train-ce, train-se, decode, simulate, bench.

Every command reads the flat config (defaults, then ``--config`` file, then
flags), prints it with ``--dump-config``, and exits 0 on success, 1 on
usage errors, 2 on data errors and 3 on numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from .audio import read_wav, write_wav
from .corpus import (CorpusConfig, Inventory, ManifestRecord, make_desk_corpus, read_alignments,
                     read_manifest, write_alignments, write_manifest)
from .decode import CompiledGraph, DecoderOptions, decode
from .errors import DataError, DecodeError, NumericError, SeqDiscError, UsageError, WorkerError
from .frontend import extract_features, read_feature_archive, write_feature_archive
from .graph.compose import DecodingGraph, build_decoding_graph, build_linear_graph
from .nnet import (Adam, AcousticModel, SGD, compute_log_likes, estimate_prior, load_checkpoint,
                   save_checkpoint)
from .parallel import TrainingStats, plan_batches, train_parallel
from .simulate import (RoomSpec, SimulationConfig, load_noises, simulate_utterance,
                       synthetic_noise, utterance_rng)
from .training import (FRAME_SECONDS, CEConfig, PhaseTimes, SEConfig, SEWorkerState,
                       edit_distance, frame_accuracy, se_batch_grad, train_ce)

log = logging.getLogger("seqdisc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

COMMON = ("seed", "data_dir", "exp_dir")
CORPUS = ("num_phones", "num_words", "successors", "num_train", "num_test", "num_speakers",
          "snr_db")
MODEL = ("hidden", "context")
CE = ("ce_epochs", "ce_lr", "ce_decay_from", "ce_batch_size", "ce_chunk")
SE = ("criterion", "alignment", "se_lr", "kappa", "ce_weight", "l2_weight", "se_steps",
      "batch_size", "world_size", "rank_spawn", "worker_mode", "checkpoint_every")
DECODER = ("beam", "lattice_beam", "max_active", "align_beam")
SIM = ("sim_probability", "sim_snr_low", "sim_snr_high", "sim_t60_low", "sim_t60_high",
       "noise_manifest", "noise_kind")
BENCH = ("bench_steps", "bench_load", "sleep_seconds", "sleep_audio_seconds")

COMMANDS = {
    "prep": ("generate the desk corpus, features, alignments and graphs", COMMON + CORPUS),
    "train-ce": ("cross-entropy training from ground-truth alignments", COMMON + MODEL + CE),
    "train-se": ("sequence-discriminative training", COMMON + SE + DECODER),
    "decode": ("lattice decoding of a feature archive", COMMON + ("kappa",) + DECODER),
    "simulate": ("reverberation and noise simulation of a manifest", COMMON + SIM),
    "bench": ("training throughput report", COMMON + SE + DECODER + BENCH),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqdisc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--dump-config", action="store_true",
                       help="print the effective config and exit")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        for key in keys:
            k = C.KEY_BY_NAME[key]
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest="key_" + key, metavar=k.kind.__name__.upper(),
                           help=f"{k.help} (default: {k.format(k.default)})")
        _COMMAND_ARGS[name](p)
    return parser


def _prep_args(p):
    pass


def _train_ce_args(p):
    p.add_argument("--out", help="checkpoint path (default: <exp_dir>/ce.nna)")
    p.add_argument("--resume", help="CE checkpoint to continue from")


def _train_se_args(p):
    p.add_argument("--init", help="starting checkpoint (default: <exp_dir>/ce.nna)")
    p.add_argument("--out", help="checkpoint path (default: <exp_dir>/se_<criterion>.nna)")
    p.add_argument("--resume", help="SE checkpoint to continue from")


def _decode_args(p):
    p.add_argument("--graph", help="decoding graph (default: <data_dir>/HCLG.fst)")
    p.add_argument("--feats", help="feature archive (default: <data_dir>/test.fea)")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--acoustic-scale", dest="key_kappa", help="alias of --kappa")
    p.add_argument("--inventory", help="inventory file (default: <data_dir>/inventory.json)")
    p.add_argument("--out-lattices", help="directory for per-utterance lattices")
    p.add_argument("--manifest", help="manifest with reference transcripts for scoring")


def _simulate_args(p):
    p.add_argument("--in", dest="inp", required=True, help="input manifest")
    p.add_argument("--out-dir", required=True, help="output directory")


def _bench_args(p):
    p.add_argument("--init", help="starting checkpoint (default: <exp_dir>/ce.nna)")
    p.add_argument("--report", help="also write the JSON report here")


_COMMAND_ARGS = {"prep": _prep_args, "train-ce": _train_ce_args, "train-se": _train_se_args,
                 "decode": _decode_args, "simulate": _simulate_args, "bench": _bench_args}


def effective_config(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip().replace("-", "_")] = value
    for name, value in vars(args).items():
        if name.startswith("key_") and value is not None:
            overrides[name[4:]] = value
    file_values = C.parse_text(Path(args.config).read_text(), args.config) if args.config else {}
    cfg = C.resolve(file_values, overrides)
    keys = COMMANDS[args.command][1]
    return {k: cfg[k] for k in C.KEY_BY_NAME if k in keys}


# data layout --------------------------------------------------------------------

@dataclass
class Split:
    records: list[ManifestRecord]
    features: dict[str, np.ndarray]
    alignments: dict[str, np.ndarray]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]


def load_inventory(path: str | Path) -> Inventory:
    try:
        return Inventory.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad inventory: {exc}") from None


def load_split(data_dir: Path, split: str) -> Split:
    records = read_manifest(data_dir / f"{split}.jsonl")
    feats = dict(read_feature_archive(data_dir / f"{split}.fea"))
    alis = read_alignments(data_dir / f"{split}.ali")
    for r in records:
        if r.id not in feats or r.id not in alis:
            raise DataError(f"utterance {r.id!r} lacks features or an alignment")
        if len(feats[r.id]) != len(alis[r.id]):
            raise DataError(f"utterance {r.id!r}: {len(feats[r.id])} feature frames, "
                            f"{len(alis[r.id])} alignment frames")
    return Split(records, feats, alis)


# commands ----------------------------------------------------------------------------

def cmd_prep(cfg: dict, args) -> None:
    data = Path(cfg["data_dir"])
    corpus_cfg = CorpusConfig(num_phones=cfg["num_phones"], num_words=cfg["num_words"],
                              successors=cfg["successors"], num_train=cfg["num_train"],
                              num_test=cfg["num_test"], num_speakers=cfg["num_speakers"],
                              snr_db=cfg["snr_db"], seed=cfg["seed"])
    corpus = make_desk_corpus(corpus_cfg)
    inv = corpus.inventory
    (data / "wav").mkdir(parents=True, exist_ok=True)
    (data / "linear").mkdir(exist_ok=True)
    (data / "inventory.json").write_text(json.dumps(inv.to_dict(), sort_keys=True, indent=1))
    inv.phones.write(data / "phones.txt")
    inv.words.write(data / "words.txt")
    lex = inv.lexicon_fst()
    for split, utts in (("train", corpus.train), ("test", corpus.test)):
        records = []
        for u in utts:
            rel = f"wav/{u.id}.wav"
            write_wav(data / rel, u.wave)
            records.append(ManifestRecord(u.id, rel, " ".join(u.words), u.wave.duration,
                                          u.speaker))
            build_linear_graph(u.words, lex, inv.tm, inv.words).write(data / "linear" / f"{u.id}.fst")
        write_manifest(data / f"{split}.jsonl", records)
        write_feature_archive(data / f"{split}.fea", ((u.id, extract_features(u.wave))
                                                      for u in utts))
        write_alignments(data / f"{split}.ali", {u.id: u.alignment for u in utts})
    hclg = build_decoding_graph(lex, inv.grammar_fst(), inv.tm)
    hclg.write(data / "HCLG.fst")
    print(f"prepared {len(corpus.train)} train and {len(corpus.test)} test utterances; "
          f"HCLG {hclg.num_states} states {hclg.fst.num_arcs} arcs")


def cmd_train_ce(cfg: dict, args) -> None:
    data, exp = Path(cfg["data_dir"]), Path(cfg["exp_dir"])
    exp.mkdir(parents=True, exist_ok=True)
    out = Path(args.out or exp / "ce.nna")
    inv = load_inventory(data / "inventory.json")
    tm = inv.tm
    train = load_split(data, "train")
    targets = {u: tm.pdfs(a) for u, a in train.alignments.items()}
    ce_cfg = CEConfig(cfg["ce_epochs"], cfg["ce_lr"], cfg["ce_decay_from"], cfg["ce_batch_size"],
                      cfg["ce_chunk"], cfg["seed"])
    opt = Adam(ce_cfg.lr)
    start_epoch = 1
    if args.resume:
        model, prior, meta = load_checkpoint(args.resume)
        if meta.get("stage") != "ce":
            raise DataError(f"{args.resume} is not a CE checkpoint")
        opt.load_state(_opt_path(args.resume), model.params)
        start_epoch = int(meta["epoch"]) + 1
        log.info("resuming CE after epoch %d, step %d", start_epoch - 1, opt.step_count)
    else:
        dim = next(iter(train.features.values())).shape[1]
        model = AcousticModel(dim, tm.num_pdfs, tuple(cfg["hidden"]), cfg["context"], cfg["seed"])
        prior = estimate_prior(list(train.alignments.values()), tm)

    def on_step(step, loss, acc):
        print(f"step {step} loss {loss:.4f} acc {acc:.4f}", flush=True)

    def on_epoch(epoch, opt):
        _save_ce(out, model, prior, epoch, opt)

    train_ce(model, train.features, targets, ce_cfg, opt, start_epoch, on_step, on_epoch)
    if start_epoch > ce_cfg.epochs:
        _save_ce(out, model, prior, max(ce_cfg.epochs, start_epoch - 1), opt)
    acc = frame_accuracy(model, train.features, targets)
    print(f"train frame accuracy {acc:.4f}", flush=True)


def _opt_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".opt")


def _save_ce(out: Path, model, prior, epoch: int, opt: Adam) -> None:
    save_checkpoint(out, model, prior, {"stage": "ce", "epoch": epoch, "step": opt.step_count})
    opt.save_state(_opt_path(out))


@dataclass
class SESetup:
    model: AcousticModel
    prior: object
    items: list[str]
    grad_fn: object
    se_cfg: SEConfig
    meta: dict


def se_setup(cfg: dict, init: str | Path, resume: str | None = None) -> SESetup:
    data = Path(cfg["data_dir"])
    inv = load_inventory(data / "inventory.json")
    tm = inv.tm
    train = load_split(data, "train")
    model, prior, meta = load_checkpoint(resume or init)
    se_cfg = SEConfig(cfg["criterion"], cfg["alignment"], cfg["se_lr"], cfg["kappa"],
                      cfg["ce_weight"], cfg["l2_weight"], cfg["beam"], cfg["lattice_beam"],
                      cfg["max_active"], cfg["align_beam"])
    graph = CompiledGraph(DecodingGraph.read(data / "HCLG.fst"), tm)
    linear = {}
    if se_cfg.alignment == "dynamic":
        linear = {u: CompiledGraph(DecodingGraph.read(data / "linear" / f"{u}.fst"), tm)
                  for u in train.ids}
    state = SEWorkerState(tm, prior, graph, train.features, train.alignments, linear)
    items = train.ids

    def grad_fn(model, indices):
        times = PhaseTimes()
        utts = [items[int(i)] for i in indices]
        grads, results = se_batch_grad(model, state, utts, se_cfg, times)
        used = [r for r in results if r.skipped is None]
        info = {"loss_sum": sum(r.loss for r in used), "loss_count": len(used),
                "utterances": len(utts),
                "audio_seconds": sum(r.frames for r in results) * FRAME_SECONDS,
                "skipped": len(results) - len(used), "phases": times.as_dict()}
        return grads, info

    return SESetup(model, prior, items, grad_fn, se_cfg, meta)


def _check_world(cfg: dict) -> None:
    if cfg["world_size"] < 1:
        raise UsageError("world_size must be >= 1")
    if cfg["batch_size"] < 1:
        raise UsageError("batch_size must be >= 1")


def _progress(offset: int):
    def on_step(step, stats: TrainingStats, model):
        if not np.isfinite(stats.step_loss):
            raise NumericError(f"non-finite loss at step {offset + step}")
        print(f"step {offset + step} loss {stats.step_loss:.4f} iRTF {stats.irtf:.3f}", flush=True)
    return on_step


def cmd_train_se(cfg: dict, args) -> None:
    _check_world(cfg)
    exp = Path(cfg["exp_dir"])
    exp.mkdir(parents=True, exist_ok=True)
    out = Path(args.out or exp / f"se_{cfg['criterion']}.nna")
    setup = se_setup(cfg, args.init or exp / "ce.nna", args.resume)
    start = 0
    if args.resume:
        if setup.meta.get("stage") != "se":
            raise DataError(f"{args.resume} is not an SE checkpoint")
        start = int(setup.meta["step"])
        log.info("resuming SE at step %d", start)
    W, total = cfg["world_size"], cfg["se_steps"]
    plan = plan_batches(setup.items, W, cfg["batch_size"], total, cfg["seed"])[start:]
    every = cfg["checkpoint_every"]
    report = _progress(start)
    meta = {"stage": "se", "criterion": cfg["criterion"], "alignment": cfg["alignment"]}

    def on_step(step, stats, model):
        report(step, stats, model)
        if every and (start + step) % every == 0 and start + step < total:
            save_checkpoint(out, model, setup.prior, meta | {"step": start + step})

    if len(plan):
        model, stats = train_parallel(setup.model, lambda: SGD(setup.se_cfg.lr,
                                      setup.se_cfg.regularizers.l2_weight),
                                      setup.grad_fn, plan, cfg["worker_mode"], on_step)
    else:
        model, stats = setup.model, TrainingStats()
    save_checkpoint(out, model, setup.prior, meta | {"step": start + len(plan),
                                                     "stats": stats.as_dict()})
    print(f"done {stats.steps} steps, {stats.skipped} skipped utterances; "
          f"checkpoint {out}", flush=True)


def cmd_decode(cfg: dict, args) -> None:
    data = Path(cfg["data_dir"])
    inv = load_inventory(args.inventory or data / "inventory.json")
    tm = inv.tm
    model, prior, _ = load_checkpoint(args.model)
    graph = CompiledGraph(DecodingGraph.read(args.graph or data / "HCLG.fst"), tm)
    opts = DecoderOptions(cfg["beam"], cfg["lattice_beam"], cfg["max_active"], cfg["kappa"])
    refs = {}
    if args.manifest:
        refs = {r.id: inv.words.ids(r.words) for r in read_manifest(args.manifest)}
    lat_dir = Path(args.out_lattices) if args.out_lattices else None
    if lat_dir:
        lat_dir.mkdir(parents=True, exist_ok=True)
    failed = []
    errors = tokens = 0
    for utt, feats in read_feature_archive(args.feats or data / "test.fea"):
        ll = compute_log_likes(model.forward(feats)[0], prior)
        try:
            out = decode(graph, ll, tm, opts)
        except DecodeError as exc:
            log.error("utt %s: %s", utt, exc)
            failed.append(utt)
            hyp = []
        else:
            hyp = out.words
            if lat_dir:
                out.lattice.write(lat_dir / f"{utt}.lat")
        print(utt, " ".join(inv.words.symbols(hyp)), flush=True)
        if utt in refs:
            errors += edit_distance(refs[utt], hyp)
            tokens += len(refs[utt])
    if refs:
        print(f"TER {errors / max(1, tokens):.6f} errors {errors} tokens {tokens}", flush=True)
    if failed:
        raise DataError(f"{len(failed)} utterance(s) failed to decode: {' '.join(failed)}")


def cmd_simulate(cfg: dict, args) -> None:
    records = read_manifest(args.inp)
    base = Path(args.inp).parent
    out_dir = Path(args.out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    sim = SimulationConfig(RoomSpec(t60_range=(cfg["sim_t60_low"], cfg["sim_t60_high"])),
                           (cfg["sim_snr_low"], cfg["sim_snr_high"]), cfg["sim_probability"], 1)
    sim.validate()
    if cfg["noise_manifest"]:
        noises = load_noises(cfg["noise_manifest"])
    else:
        noises = [synthetic_noise(cfg["noise_kind"], 10 * 16000,
                                  np.random.default_rng([cfg["seed"], 2 ** 31]))]
    out = []
    for i, rec in enumerate(records):
        wav_path = Path(rec.wav) if Path(rec.wav).is_absolute() else base / rec.wav
        wave = simulate_utterance([(read_wav(wav_path), 0)], sim, utterance_rng(cfg["seed"], i),
                                  noises)
        rel = f"wav/{rec.id}.wav"
        write_wav(out_dir / rel, wave)
        out.append(ManifestRecord(rec.id, rel, rec.text, wave.duration, rec.spk))
    write_manifest(out_dir / "manifest.jsonl", out)
    print(f"simulated {len(out)} utterances into {out_dir}", flush=True)


def cmd_bench(cfg: dict, args) -> None:
    _check_world(cfg)
    W, b, steps = cfg["world_size"], cfg["batch_size"], cfg["bench_steps"]
    if cfg["bench_load"] == "sleep":
        model = AcousticModel(4, 2, hidden=(4,), context=0, seed=cfg["seed"])
        grad_fn = _sleep_grad_fn(cfg["sleep_seconds"], cfg["sleep_audio_seconds"])
        items = list(range(max(1, W * b)))
        make_opt = lambda: SGD(0.0)  # noqa: E731
    else:
        setup = se_setup(cfg, args.init or Path(cfg["exp_dir"]) / "ce.nna")
        model, grad_fn, items = setup.model, setup.grad_fn, setup.items
        make_opt = lambda: SGD(setup.se_cfg.lr, setup.se_cfg.regularizers.l2_weight)  # noqa: E731
    plan = plan_batches(items, W, b, steps, cfg["seed"])
    _, stats = train_parallel(model, make_opt, grad_fn, plan, cfg["worker_mode"], _progress(0))
    report = {"world_size": W, "batch_size": b, "load": cfg["bench_load"],
              "mode": cfg["worker_mode"]} | stats.as_dict()
    text = json.dumps(report, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text, flush=True)


def _sleep_grad_fn(seconds: float, audio: float):
    def grad_fn(model, indices):
        time.sleep(seconds * len(indices))
        return [np.zeros_like(p) for p in model.params], {
            "loss_sum": 0.0, "loss_count": len(indices), "utterances": len(indices),
            "audio_seconds": audio * len(indices), "phases": {}}
    return grad_fn


HANDLERS = {"prep": cmd_prep, "train-ce": cmd_train_ce, "train-se": cmd_train_se,
            "decode": cmd_decode, "simulate": cmd_simulate, "bench": cmd_bench}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, WorkerError) and "NumericError" in exc.detail:
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing command; see --help")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = effective_config(args)
        if args.dump_config:
            print(C.dump(cfg), end="")
            return EXIT_OK
        HANDLERS[args.command](cfg, args)
        return EXIT_OK
    except (SeqDiscError, OSError, ValueError) as exc:
        code = EXIT_USAGE if isinstance(exc, ValueError) and not isinstance(exc, SeqDiscError) \
            else exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
